use imind_core::attribution::{attention_rollout, restore_activation, upsample_patchwise};
use imind_core::autograd::Graph;
use imind_core::baselines::{kmeans, KMeansConfig, KMeansMetric};
use imind_core::disentangle::{self, change_of_basis_coords, project_to_orthonormal};
use imind_core::dual::{DualConfig, DualModel};
use imind_core::linalg::{gaussian, random_orthonormal};
use imind_core::mae::{Encoder, EncoderConfig};
use imind_core::metrics::{average_precision, binary_auc, matthews_corrcoef};
use imind_core::params::ParamStore;
use imind_core::preprocess::{apply_standardization, fit_standardization, pad_wraparound};
use imind_core::synth::VoxelRecord;
use imind_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn stochastic(n: usize, r: &mut ChaCha8Rng) -> Tensor {
    let mut t = gaussian(&[n, n], 1.0, r);
    for row in t.data_mut().chunks_mut(n) {
        row.iter_mut().for_each(|v| *v = v.exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        patch_size: 4,
        seq_len: 32,
        dim: 8,
        layers: 2,
        heads: 2,
        decoder_dim: 8,
        decoder_layers: 1,
        decoder_heads: 2,
        mask_ratio: 0.5,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(seed in any::<u64>(), n in 1usize..9, m in 1usize..6, shift in -500.0f64..500.0) {
        let mut g = Graph::new();
        let mut x = gaussian(&[m, n], 3.0, &mut rng(seed));
        x.data_mut().iter_mut().for_each(|v| *v += shift);
        let xv = g.constant(x);
        let s = g.softmax(xv, 1).unwrap();
        for row in g.value(s).data().chunks(n) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn replaying_a_tape_is_bit_identical(seed in any::<u64>()) {
        let run = || {
            let mut r = rng(seed);
            let mut g = Graph::new();
            let x = g.input(gaussian(&[3, 4], 1.0, &mut r), true);
            let w = g.input(gaussian(&[4, 4], 1.0, &mut r), true);
            let h = g.matmul(x, w).unwrap();
            let h = g.gelu(h);
            let h = g.layer_norm(h, None, None).unwrap();
            let a = g.attention(h, h, h, 1, 2).unwrap();
            let s = g.softmax(a, 1).unwrap();
            let l = g.frobenius_norm_sq(s);
            g.backward(l).unwrap();
            (g.grad(x).unwrap(), g.grad(w).unwrap())
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0.data(), b.0.data());
        prop_assert_eq!(a.1.data(), b.1.data());
    }

    #[test]
    fn standardized_columns_are_centered(seed in any::<u64>(), n in 2usize..30, l in 1usize..12) {
        let mut r = rng(seed);
        let recs: Vec<VoxelRecord> = (0..n)
            .map(|i| {
                let mut v = gaussian(&[l], 4.0, &mut r).into_data();
                v.iter_mut().for_each(|x| *x += 100.0);
                VoxelRecord { subject: 3, stimulus: i as u64, voxels: v, labels: vec![false], repetition: 0 }
            })
            .collect();
        let stats = fit_standardization(&recs).unwrap();
        let z: Vec<VoxelRecord> = recs.iter().map(|x| apply_standardization(x, &stats).unwrap()).collect();
        for j in 0..l {
            let col: Vec<f64> = z.iter().map(|x| x.voxels[j]).collect();
            let mu = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64).sqrt();
            prop_assert!(mu.abs() <= 1e-10);
            prop_assert!((sd - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn restore_inverts_pad_and_only_raises(
        ls in 1usize..40, extra in 0usize..60, patch in 1usize..9, seed in any::<u64>()
    ) {
        let target = (ls + extra).div_ceil(patch) * patch;
        let real: Vec<f64> = gaussian(&[ls], 1.0, &mut rng(seed)).into_data();
        let (padded, plan) = pad_wraparound(&real, target, patch).unwrap();
        prop_assert_eq!(restore_activation(&padded, &plan).unwrap(), real.clone());
        let act = gaussian(&[target], 1.0, &mut rng(seed ^ 1)).into_data();
        let r = restore_activation(&act, &plan).unwrap();
        for i in 0..ls {
            prop_assert!(r[i] >= act[i]);
        }
        let (again, _) = pad_wraparound(&r, target, patch).unwrap();
        prop_assert_eq!(restore_activation(&again, &plan).unwrap(), r);
    }

    #[test]
    fn upsampling_preserves_mass(t in prop::collection::vec(-5.0f64..5.0, 1..20), patch in 1usize..8) {
        let u = upsample_patchwise(&t, patch);
        prop_assert_eq!(u.len(), t.len() * patch);
        let want = patch as f64 * t.iter().sum::<f64>();
        prop_assert!((u.iter().sum::<f64>() - want).abs() <= 1e-9 * (1.0 + want.abs()));
    }

    #[test]
    fn rollout_stays_row_stochastic(seed in any::<u64>(), n in 1usize..8, layers in 1usize..7, residual in any::<bool>()) {
        let mut r = rng(seed);
        let a: Vec<Tensor> = (0..layers).map(|_| stochastic(n, &mut r)).collect();
        let out = attention_rollout(&a, residual).unwrap();
        for row in out.data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn change_of_basis_reconstructs(seed in any::<u64>(), d in 1usize..10) {
        let mut r = rng(seed);
        let mut b = gaussian(&[d, d], 1.0, &mut r);
        for i in 0..d {
            let v = b.at(i, i);
            b.set(i, i, v + 2.0 * d as f64);
        }
        let v = gaussian(&[d], 1.0, &mut r).into_data();
        let w = change_of_basis_coords(&v, &b).unwrap();
        let back = b.matmul(&Tensor::matrix(d, 1, w).unwrap()).unwrap();
        for (x, y) in back.data().iter().zip(&v) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn orthonormal_basis_splits_cleanly(seed in any::<u64>(), d in 2usize..12, frac in 0.01f64..0.99) {
        let obj = ((d as f64 * frac) as usize).clamp(1, d - 1);
        let mut r = rng(seed);
        let b = random_orthonormal(d, d, &mut r).unwrap();
        let bs = b.columns(0, d - obj).unwrap();
        let bo = b.columns(d - obj, obj).unwrap();
        let cross = bs.transpose().unwrap().matmul(&bo).unwrap();
        prop_assert!(cross.data().iter().all(|v| v.abs() <= 1e-12));
        let f = gaussian(&[5, d], 1.0, &mut r);
        let (zs, zo) = disentangle::split(&f, &b, obj).unwrap();
        for i in 0..5 {
            let nf: f64 = f.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let nz: f64 = zs.row(i).iter().chain(zo.row(i)).map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((nf - nz).abs() <= 1e-10);
        }
    }

    #[test]
    fn ranking_metrics_ignore_monotone_transforms(
        scores in prop::collection::vec(-3.0f64..3.0, 2..30), seed in any::<u64>()
    ) {
        let pos: Vec<bool> = gaussian(&[scores.len()], 1.0, &mut rng(seed)).data().iter().map(|v| *v > 0.0).collect();
        let t: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + s * s * s).collect();
        prop_assert_eq!(average_precision(&scores, &pos), average_precision(&t, &pos));
        prop_assert_eq!(binary_auc(&scores, &pos), binary_auc(&t, &pos));
    }

    #[test]
    fn mcc_is_relabeling_symmetric(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()
    ) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let a = matthews_corrcoef(&pred, &truth, 4).unwrap();
        let pp: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
        let tt: Vec<usize> = truth.iter().map(|&c| perm[c]).collect();
        let b = matthews_corrcoef(&pp, &tt, 4).unwrap();
        prop_assert!((a.value - b.value).abs() <= 1e-12);
        prop_assert_eq!(a.degenerate, b.degenerate);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn kmeans_objective_never_increases(seed in any::<u64>(), k in 1usize..6, cosine in any::<bool>()) {
        let x = gaussian(&[40, 3], 1.0, &mut rng(seed));
        let metric = if cosine { KMeansMetric::Cosine } else { KMeansMetric::Euclidean };
        let mut cfg = KMeansConfig::new(k, metric, seed);
        cfg.restarts = 2;
        let r = kmeans(&x, &cfg).unwrap();
        for w in r.history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn encoder_is_deterministic_with_stochastic_attention(seed in any::<u64>()) {
        let cfg = tiny_encoder();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, &mut rng(seed)).unwrap();
        let x = gaussian(&[32], 2.0, &mut rng(seed ^ 7)).into_data();
        let (f1, attn) = enc.encode_with_attention(&store, &x).unwrap();
        let f2 = enc.encode(&store, &x).unwrap();
        prop_assert_eq!(f1.data(), f2.data());
        prop_assert_eq!(f1.shape(), &[8, 8]);
        for a in attn {
            for row in a.data().chunks(8) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn separation_after_retraction(seed in any::<u64>(), eps in -3.0f64..3.0) {
        let cfg = DualConfig {
            num_subjects: 3,
            num_classes: 4,
            obj_dim: 6,
            heads: 2,
            vision_tokens: 3,
            vision_dim: 5,
            ..DualConfig::default()
        };
        let mut store = ParamStore::new();
        let model = DualModel::new(&mut store, &tiny_encoder(), &cfg, &mut rng(seed)).unwrap();
        // Knock B off the orthonormal set, then retract it back.
        let noisy = {
            let mut b = store.value(model.basis.id).clone();
            let n = gaussian(&[8, 8], 0.1, &mut rng(seed ^ 3));
            b.data_mut().iter_mut().zip(n.data()).for_each(|(x, e)| *x += e);
            b
        };
        let b = project_to_orthonormal(&noisy).unwrap();
        *store.value_mut(model.basis.id) = b.clone();
        let f = gaussian(&[8, 8], 1.0, &mut rng(seed ^ 5));
        let dir_obj = b.columns(2, 6).unwrap().matmul(&gaussian(&[6, 1], 1.0, &mut rng(seed ^ 9))).unwrap();
        let dir_subj = b.columns(0, 2).unwrap().matmul(&gaussian(&[2, 1], 1.0, &mut rng(seed ^ 11))).unwrap();
        let shifted = |dir: &Tensor| {
            let mut t = f.clone();
            for row in t.data_mut().chunks_mut(8) {
                row.iter_mut().zip(dir.data()).for_each(|(x, d)| *x += eps * d);
            }
            t
        };
        let run = |feat: &Tensor| {
            let mut g = Graph::new();
            let fv = g.constant(feat.clone());
            let (zs, zo) = model.basis.split(&mut g, &store, fv).unwrap();
            let logits = model.biometric_head(&mut g, &store, zs, 1).unwrap();
            (g.value(logits).clone(), g.value(zo).clone())
        };
        let (l0, zo0) = run(&f);
        let (l1, _) = run(&shifted(&dir_obj));
        let (_, zo2) = run(&shifted(&dir_subj));
        prop_assert!(l0.max_abs_diff(&l1) <= 1e-10);
        prop_assert!(zo0.max_abs_diff(&zo2) <= 1e-10);
    }

    #[test]
    fn loss_parts_are_nonnegative_and_add_up(seed in any::<u64>(), lambda in 0.0f64..2.0) {
        let cfg = DualConfig {
            num_subjects: 3,
            num_classes: 4,
            obj_dim: 6,
            heads: 2,
            vision_tokens: 3,
            vision_dim: 5,
            lambda,
            ..DualConfig::default()
        };
        let mut store = ParamStore::new();
        let model = DualModel::new(&mut store, &tiny_encoder(), &cfg, &mut rng(seed)).unwrap();
        let mut b = store.value(model.basis.id).clone();
        b.data_mut().iter_mut().for_each(|v| *v *= 1.1);
        *store.value_mut(model.basis.id) = b;
        let mut r = rng(seed ^ 13);
        let x = gaussian(&[2, 32], 1.0, &mut r);
        let v = gaussian(&[6, 5], 1.0, &mut r);
        let y = Tensor::matrix(2, 4, vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let f = model.forward(&mut g, &store, &x, &v).unwrap();
        let p = model.total_loss(&mut g, &store, &f, &[2, 0], &y).unwrap();
        let (s, o, orth, t) = (
            g.value(p.subj).item(),
            g.value(p.obj).item(),
            g.value(p.orth).item(),
            g.value(p.total).item(),
        );
        prop_assert!(s >= 0.0 && o >= 0.0 && orth > 0.0);
        prop_assert!((t - (s + o + lambda * orth)).abs() <= 1e-12 * t.max(1.0));
    }
}
