//! The encoder forward pass against a plain-loop evaluation that shares no
//! code with the tape.

use imind_core::mae::{Encoder, EncoderConfig};
use imind_core::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn p(store: &ParamStore, name: &str) -> Vec<f64> {
    let id = store.find(name).unwrap_or_else(|| panic!("missing {name}"));
    store.value(id).data().to_vec()
}

fn linear(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let w = p(store, &format!("{name}.w"));
    let b = p(store, &format!("{name}.b"));
    let out = b.len();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| {
                    b[j] + row
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * w[i * out + j])
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn layer_norm(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let g = p(store, &format!("{name}.g"));
    let b = p(store, &format!("{name}.b"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let d = q[0].len();
    let hd = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = e.iter().zip(v).map(|(w, vj)| w / s * vj[c]).sum();
            }
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

fn gelu(x: &Mat) -> Mat {
    x.iter()
        .map(|r| {
            r.iter()
                .map(|v| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt())))
                .collect()
        })
        .collect()
}

#[test]
fn two_layer_forward_matches_reference() {
    let cfg = EncoderConfig {
        patch_size: 4,
        seq_len: 24,
        dim: 8,
        layers: 2,
        heads: 2,
        decoder_dim: 8,
        decoder_layers: 1,
        decoder_heads: 2,
        mask_ratio: 0.5,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
    // Perturb the zero-initialized biases and unit gains so they matter.
    for (i, prm) in store.params_mut().iter_mut().enumerate() {
        if prm.name.ends_with(".b") || prm.name.ends_with(".g") {
            for (j, v) in prm.value.data_mut().iter_mut().enumerate() {
                *v += 0.05 * (((i * 7 + j * 3) % 11) as f64 - 5.0);
            }
        }
    }
    let voxels: Vec<f64> = (0..24)
        .map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0)
        .collect();
    let got = enc.encode(&store, &voxels).unwrap();

    let n = 6;
    let patches: Mat = voxels.chunks(4).map(<[f64]>::to_vec).collect();
    let mut x = linear(&store, "encoder.patch", &patches);
    for (pos, row) in x.iter_mut().enumerate() {
        for i in (0..8).step_by(2) {
            let angle = pos as f64 / 10_000f64.powf(i as f64 / 8.0);
            row[i] += angle.sin();
            row[i + 1] += angle.cos();
        }
    }
    for l in 0..2 {
        let pre = format!("encoder.blocks.{l}");
        let h = layer_norm(&store, &format!("{pre}.ln1"), &x);
        let a = attention(
            &linear(&store, &format!("{pre}.attn.q"), &h),
            &linear(&store, &format!("{pre}.attn.k"), &h),
            &linear(&store, &format!("{pre}.attn.v"), &h),
            2,
        );
        x = add(&x, &linear(&store, &format!("{pre}.attn.o"), &a));
        let h = layer_norm(&store, &format!("{pre}.ln2"), &x);
        let h = gelu(&linear(&store, &format!("{pre}.fc1"), &h));
        x = add(&x, &linear(&store, &format!("{pre}.fc2"), &h));
    }
    let want = layer_norm(&store, "encoder.norm", &x);
    assert_eq!(got.shape(), &[n, 8]);
    let err = want
        .iter()
        .flatten()
        .zip(got.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-10, "max abs err {err}");
}
