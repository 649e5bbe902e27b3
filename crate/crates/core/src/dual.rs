//! Biometric and semantic decoding heads on top of the disentangled encoder,
//! and the second training stage.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::disentangle::Basis;
use crate::error::{Error, Result};
use crate::mae::{Encoder, EncoderConfig, ENCODER_PREFIX};
use crate::metrics::{self, AucAverage, EvalReport};
use crate::nn::{self, Linear, MultiHeadAttention};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{self, TrainConfig, TrainFailure};

#[derive(Clone, Debug, PartialEq)]
pub struct DualConfig {
    pub num_subjects: usize,
    pub num_classes: usize,
    /// Width of the object subspace; the subject subspace gets the rest of `d`.
    pub obj_dim: usize,
    pub heads: usize,
    pub vision_tokens: usize,
    pub vision_dim: usize,
    /// Semantic head reads the vision-queried cross-attention output; when
    /// off it pools `Z_obj` directly.
    pub fusion: bool,
    pub subject_loss: bool,
    pub orth_loss: bool,
    pub lambda: f64,
}

impl Default for DualConfig {
    fn default() -> Self {
        DualConfig {
            num_subjects: 4,
            num_classes: 8,
            obj_dim: 56,
            heads: 4,
            vision_tokens: 17,
            vision_dim: 32,
            fusion: true,
            subject_loss: true,
            orth_loss: true,
            lambda: 0.1,
        }
    }
}

impl DualConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.num_subjects == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "num_subjects and num_classes must be positive".into(),
            ));
        }
        if self.obj_dim == 0 || self.obj_dim >= dim {
            return Err(Error::Config(format!(
                "obj_dim {} must lie in [1, {dim})",
                self.obj_dim
            )));
        }
        if self.heads == 0 || self.obj_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "obj_dim {} is not divisible by {} cross-attention heads",
                self.obj_dim, self.heads
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda {} must be non-negative",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Inputs of stage 2: padded voxels, vision tokens, subject ids and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Data {
    /// `[M, L]`.
    pub x: Tensor,
    /// `[M·N_x, d_x]`, rows of sample `i` at `[i·N_x, (i+1)·N_x)`.
    pub vision: Tensor,
    pub subjects: Vec<usize>,
    /// `[M, C]` with 0/1 entries.
    pub labels: Tensor,
}

impl Stage2Data {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    fn vision_tokens(&self) -> usize {
        self.vision.shape()[0] / self.len().max(1)
    }

    /// Rows `idx` as a new batch.
    pub fn select(&self, idx: &[usize]) -> Result<Stage2Data> {
        let l = self.x.dims2()?.1;
        let (c, nx, dx) = (
            self.labels.dims2()?.1,
            self.vision_tokens(),
            self.vision.dims2()?.1,
        );
        let mut x = Vec::with_capacity(idx.len() * l);
        let mut v = Vec::with_capacity(idx.len() * nx * dx);
        let mut y = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            x.extend_from_slice(self.x.row(i));
            v.extend_from_slice(&self.vision.data()[i * nx * dx..(i + 1) * nx * dx]);
            y.extend_from_slice(self.labels.row(i));
        }
        Ok(Stage2Data {
            x: Tensor::new(vec![idx.len(), l], x)?,
            vision: Tensor::new(vec![idx.len() * nx, dx], v)?,
            subjects: idx.iter().map(|&i| self.subjects[i]).collect(),
            labels: Tensor::new(vec![idx.len(), c], y)?,
        })
    }

    pub fn validate(&self, cfg: &DualConfig, seq_len: usize) -> Result<()> {
        let m = self.len();
        let ok = m > 0
            && self.x.shape() == [m, seq_len]
            && self.vision.shape() == [m * cfg.vision_tokens, cfg.vision_dim]
            && self.labels.shape() == [m, cfg.num_classes];
        if !ok {
            return Err(Error::Data(format!(
                "stage-2 data shapes x {:?}, vision {:?}, labels {:?} do not match {m} samples of length {seq_len}",
                self.x.shape(),
                self.vision.shape(),
                self.labels.shape()
            )));
        }
        if let Some(&s) = self.subjects.iter().find(|&&s| s >= cfg.num_subjects) {
            return Err(Error::Data(format!(
                "subject {s} out of range [0, {})",
                cfg.num_subjects
            )));
        }
        Ok(())
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub tokens: Var,
    pub z_subj: Var,
    pub z_obj: Var,
    pub subj_logits: Var,
    pub obj_logits: Var,
    pub encoder_attention: Vec<Var>,
    pub cross_attention: Option<Var>,
    pub batch: usize,
}

#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    pub subj: Var,
    pub obj: Var,
    pub orth: Var,
}

/// Plain values of the loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub subj: f64,
    pub obj: f64,
    pub orth: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct DualModel {
    pub cfg: DualConfig,
    pub encoder: Encoder,
    pub basis: Basis,
    pub biometric: Linear,
    pub cross: MultiHeadAttention,
    pub semantic: Linear,
}

impl DualModel {
    /// Registers every parameter in `store`, encoder first.
    pub fn new(
        store: &mut ParamStore,
        enc_cfg: &EncoderConfig,
        cfg: &DualConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate(enc_cfg.dim)?;
        let encoder = Encoder::new(store, enc_cfg, rng)?;
        let basis = Basis::new(store, enc_cfg.dim, cfg.obj_dim, rng)?;
        let biometric = Linear::new(
            store,
            "biometric.fc",
            basis.subj_dim(),
            cfg.num_subjects,
            rng,
        );
        let cross = MultiHeadAttention::new(
            store,
            "cross",
            cfg.vision_dim,
            cfg.obj_dim,
            cfg.obj_dim,
            cfg.heads,
            rng,
        )?;
        let semantic = Linear::new(store, "semantic.fc", cfg.obj_dim, cfg.num_classes, rng);
        Ok(DualModel {
            cfg: cfg.clone(),
            encoder,
            basis,
            biometric,
            cross,
            semantic,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Tensor,
        vision: &Tensor,
    ) -> Result<Forward> {
        let enc = self.encoder.forward(g, store, x, None)?;
        let batch = enc.batch;
        let (z_subj, z_obj) = self.basis.split(g, store, enc.tokens)?;
        let subj_logits = self.biometric_head(g, store, z_subj, batch)?;
        let (obj_logits, cross_attention) = if self.cfg.fusion {
            let fx = g.constant(vision.clone());
            let (logits, attn) = self.semantic_head(g, store, fx, z_obj, batch)?;
            (logits, Some(attn))
        } else {
            (self.semantic_head_fmri_only(g, store, z_obj, batch)?, None)
        };
        Ok(Forward {
            tokens: enc.tokens,
            z_subj,
            z_obj,
            subj_logits,
            obj_logits,
            encoder_attention: enc.attention,
            cross_attention,
            batch,
        })
    }

    /// GAP over tokens, then the linear subject classifier.
    pub fn biometric_head(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_subj: Var,
        batch: usize,
    ) -> Result<Var> {
        let pooled = gap(g, z_subj, batch)?;
        self.biometric.forward(g, store, pooled)
    }

    /// Vision-queried cross-attention over `Z_obj`, GAP over the queries and the
    /// multi-label classifier. Returns logits and the attention node.
    pub fn semantic_head(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fx: Var,
        z_obj: Var,
        batch: usize,
    ) -> Result<(Var, Var)> {
        let (attended, attn) = self.cross_attend(g, store, fx, z_obj, batch)?;
        let pooled = gap(g, attended, batch)?;
        Ok((self.semantic.forward(g, store, pooled)?, attn))
    }

    pub fn cross_attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fx: Var,
        z_obj: Var,
        batch: usize,
    ) -> Result<(Var, Var)> {
        self.cross.forward(g, store, fx, z_obj, batch)
    }

    pub fn semantic_head_fmri_only(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_obj: Var,
        batch: usize,
    ) -> Result<Var> {
        let pooled = gap(g, z_obj, batch)?;
        self.semantic.forward(g, store, pooled)
    }

    /// `L_subj + L_obj + λ·L_orth` with the disabled terms left out of the
    /// total but still evaluated for logging.
    pub fn total_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fwd: &Forward,
        subjects: &[usize],
        labels: &Tensor,
    ) -> Result<LossParts> {
        let subj = g.cross_entropy(fwd.subj_logits, subjects)?;
        let obj = g.bce_with_logits(fwd.obj_logits, labels)?;
        let orth = self.basis.orthonormal_loss(g, store)?;
        let mut total = obj;
        if self.cfg.subject_loss {
            total = g.add(total, subj)?;
        }
        if self.cfg.orth_loss {
            let weighted = g.scale(orth, self.cfg.lambda);
            total = g.add(total, weighted)?;
        }
        Ok(LossParts {
            total,
            subj,
            obj,
            orth,
        })
    }

    /// Subject and object logits for every sample, in batches.
    pub fn predict(
        &self,
        store: &ParamStore,
        data: &Stage2Data,
        batch_size: usize,
    ) -> Result<(Tensor, Tensor)> {
        let m = data.len();
        let mut subj = Vec::with_capacity(m * self.cfg.num_subjects);
        let mut obj = Vec::with_capacity(m * self.cfg.num_classes);
        for start in (0..m).step_by(batch_size.max(1)) {
            let idx: Vec<usize> = (start..(start + batch_size).min(m)).collect();
            let b = data.select(&idx)?;
            let mut g = Graph::new();
            let f = self.forward(&mut g, store, &b.x, &b.vision)?;
            subj.extend_from_slice(g.value(f.subj_logits).data());
            obj.extend_from_slice(g.value(f.obj_logits).data());
        }
        Ok((
            Tensor::new(vec![m, self.cfg.num_subjects], subj)?,
            Tensor::new(vec![m, self.cfg.num_classes], obj)?,
        ))
    }

    pub fn evaluate(
        &self,
        store: &ParamStore,
        data: &Stage2Data,
        batch_size: usize,
        average: AucAverage,
    ) -> Result<EvalReport> {
        let (s, o) = self.predict(store, data, batch_size)?;
        metrics::evaluate(&s, &data.subjects, &o, &data.labels, average)
    }

    /// Token-level quantities of one sample for attribution: `Z_obj`, the
    /// gradient of object logit `class` with respect to it, the logit itself
    /// and the head-averaged encoder attention of every layer.
    pub fn object_gradient(
        &self,
        store: &ParamStore,
        voxels: &[f64],
        vision: &Tensor,
        class: usize,
    ) -> Result<ObjectGradient> {
        if class >= self.cfg.num_classes {
            return Err(Error::Index {
                what: "class",
                index: class,
                bound: self.cfg.num_classes,
            });
        }
        let x = Tensor::new(vec![1, voxels.len()], voxels.to_vec())?;
        let mut g = Graph::new();
        let f = self.forward(&mut g, store, &x, vision)?;
        let mut seed = vec![0.0; self.cfg.num_classes];
        seed[class] = 1.0;
        g.backward_with_seed(f.obj_logits, seed)?;
        let grad = g
            .grad(f.z_obj)
            .ok_or_else(|| Error::Numerical("no gradient reached the object features".into()))?;
        let attention = f
            .encoder_attention
            .iter()
            .map(|a| Ok(nn::head_average(&g, *a, 1, self.encoder.cfg.heads)?.remove(0)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ObjectGradient {
            z_obj: g.value(f.z_obj).clone(),
            grad,
            logit: g.value(f.obj_logits).data()[class],
            attention,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ObjectGradient {
    pub z_obj: Tensor,
    pub grad: Tensor,
    pub logit: f64,
    pub attention: Vec<Tensor>,
}

/// Mean over the tokens of each sample: `[batch·n, c]` → `[batch, c]`.
pub fn gap(g: &mut Graph, x: Var, batch: usize) -> Result<Var> {
    let (rows, c) = (g.shape(x)[0], g.shape(x)[1]);
    if batch == 0 || rows % batch != 0 {
        return Err(Error::dim("gap", g.shape(x), &[batch]));
    }
    let r = g.reshape(x, &[batch, rows / batch, c])?;
    g.mean(r, 1)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_subj: f64,
    pub l_obj: f64,
    pub l_orth: f64,
    pub total: f64,
    pub val_acc: Option<f64>,
    pub val_map: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub model: DualModel,
    pub store: ParamStore,
    pub history: Vec<EpochMetrics>,
}

/// End-to-end training of encoder, basis, heads and cross-attention, starting
/// from the stage-1 encoder weights in `encoder_store`.
pub fn train_stage2(
    train_data: &Stage2Data,
    val: Option<&Stage2Data>,
    encoder_store: &ParamStore,
    enc_cfg: &EncoderConfig,
    cfg: &DualConfig,
    train_cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> core::result::Result<Stage2Outcome, TrainFailure<Vec<EpochMetrics>>> {
    let mut store = ParamStore::new();
    let mut history: Vec<EpochMetrics> = Vec::new();
    macro_rules! bail {
        ($e:expr) => {
            return Err(TrainFailure {
                error: $e,
                last_good: store.clone(),
                history: history.clone(),
            })
        };
    }
    macro_rules! tryf {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e) => bail!(e),
            }
        };
    }
    tryf!(train_cfg.validate());
    tryf!(train_data.validate(cfg, enc_cfg.seq_len));
    if let Some(v) = val {
        tryf!(v.validate(cfg, enc_cfg.seq_len));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    init_rng.set_stream(2);
    let model = tryf!(DualModel::new(&mut store, enc_cfg, cfg, &mut init_rng));
    let copied = tryf!(store.load_prefixed(encoder_store, ENCODER_PREFIX));
    if copied == 0 {
        bail!(Error::Checkpoint(
            "stage-1 checkpoint holds no encoder parameters".into()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    rng.set_stream(3);
    let mut opt = AdamW::new(&store, train_cfg.adamw());
    let m = train_data.len();
    let mut step = 0;
    for epoch in 0..train_cfg.epochs {
        let batches = train::epoch_batches(m, train_cfg.batch_size, &mut rng);
        let mut sums = LossValues::default();
        let mut seen = 0.0;
        for idx in batches {
            let batch = tryf!(train_data.select(&idx));
            let run = (|| {
                let mut g = Graph::new();
                let f = model.forward(&mut g, &store, &batch.x, &batch.vision)?;
                let parts = model.total_loss(&mut g, &store, &f, &batch.subjects, &batch.labels)?;
                g.backward(parts.total)?;
                let v = LossValues {
                    subj: g.value(parts.subj).item(),
                    obj: g.value(parts.obj).item(),
                    orth: g.value(parts.orth).item(),
                    total: g.value(parts.total).item(),
                };
                Ok::<_, Error>((g, v))
            })();
            let (g, v) = tryf!(run);
            store.zero_grad();
            store.accumulate(&g);
            tryf!(train::check_finite(v.total, &store, epoch, step));
            let lr = train_cfg.lr_at(step, m);
            tryf!(opt.step(&mut store, lr));
            let w = idx.len() as f64;
            sums.subj += v.subj * w;
            sums.obj += v.obj * w;
            sums.orth += v.orth * w;
            sums.total += v.total * w;
            seen += w;
            step += 1;
        }
        let mut em = EpochMetrics {
            epoch,
            l_subj: sums.subj / seen,
            l_obj: sums.obj / seen,
            l_orth: sums.orth / seen,
            total: sums.total / seen,
            val_acc: None,
            val_map: None,
        };
        if let Some(v) = val {
            let (s, o) = tryf!(model.predict(&store, v, train_cfg.batch_size));
            let pred = metrics::argmax_rows(&s);
            em.val_acc = Some(tryf!(metrics::accuracy(&pred, &v.subjects)));
            em.val_map = metrics::mean_average_precision(&o, &v.labels)
                .ok()
                .map(|r| r.map);
        }
        on_epoch(&em);
        history.push(em);
    }
    Ok(Stage2Outcome {
        model,
        store,
        history,
    })
}

/// Rebuilds a model skeleton whose parameter names match a trained store.
pub fn model_for_store(
    store: &mut ParamStore,
    enc_cfg: &EncoderConfig,
    cfg: &DualConfig,
) -> Result<DualModel> {
    let mut fresh = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = DualModel::new(&mut fresh, enc_cfg, cfg, &mut rng)?;
    if fresh.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, the configured model has {}",
            store.len(),
            fresh.len()
        )));
    }
    for (a, b) in fresh.params().iter().zip(store.params()) {
        if a.name != b.name || a.value.shape() != b.value.shape() {
            return Err(Error::Checkpoint(format!(
                "checkpoint tensor `{}` {:?} does not match configured `{}` {:?}",
                b.name,
                b.value.shape(),
                a.name,
                a.value.shape()
            )));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_enc() -> EncoderConfig {
        EncoderConfig {
            patch_size: 4,
            seq_len: 16,
            dim: 8,
            layers: 1,
            heads: 2,
            decoder_dim: 8,
            decoder_layers: 1,
            decoder_heads: 2,
            mask_ratio: 0.5,
        }
    }

    fn tiny_cfg() -> DualConfig {
        DualConfig {
            num_subjects: 3,
            num_classes: 4,
            obj_dim: 6,
            heads: 2,
            vision_tokens: 3,
            vision_dim: 5,
            ..DualConfig::default()
        }
    }

    fn setup(cfg: &DualConfig) -> (DualModel, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = DualModel::new(&mut store, &tiny_enc(), cfg, &mut rng).unwrap();
        (m, store)
    }

    #[test]
    fn gap_of_identical_tokens() {
        let mut g = Graph::new();
        let row = [0.5, -1.0, 2.0];
        let x = g.constant(Tensor::from_rows(&[row.to_vec(), row.to_vec(), row.to_vec()]).unwrap());
        let p = gap(&mut g, x, 1).unwrap();
        assert_eq!(g.value(p).data(), &row);
    }

    #[test]
    fn zero_weights_give_bias() {
        let (m, mut store) = setup(&tiny_cfg());
        store
            .value_mut(m.biometric.w)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        *store.value_mut(m.biometric.b) = Tensor::vector(vec![0.1, 0.2, 0.3]);
        let mut g = Graph::new();
        let z = g.constant(Tensor::full(&[8, 2], 7.0));
        let l = m.biometric_head(&mut g, &store, z, 2).unwrap();
        assert_eq!(g.value(l).data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn fmri_only_ignores_vision() {
        let cfg = DualConfig {
            fusion: false,
            ..tiny_cfg()
        };
        let (m, store) = setup(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = crate::linalg::gaussian(&[2, 16], 1.0, &mut rng);
        let v1 = crate::linalg::gaussian(&[6, 5], 1.0, &mut rng);
        let v2 = crate::linalg::gaussian(&[6, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let a = m.forward(&mut g, &store, &x, &v1).unwrap();
        let b = m.forward(&mut g, &store, &x, &v2).unwrap();
        assert_eq!(g.value(a.obj_logits), g.value(b.obj_logits));
        assert_eq!(g.shape(a.obj_logits), &[2, 4]);
    }

    #[test]
    fn biometric_has_no_path_from_vision() {
        let (m, store) = setup(&tiny_cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = crate::linalg::gaussian(&[1, 16], 1.0, &mut rng);
        let v = crate::linalg::gaussian(&[3, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let enc = m.encoder.forward(&mut g, &store, &x, None).unwrap();
        let (zs, zo) = m.basis.split(&mut g, &store, enc.tokens).unwrap();
        let logits = m.biometric_head(&mut g, &store, zs, 1).unwrap();
        let fx = g.input(v, true);
        let _ = m.semantic_head(&mut g, &store, fx, zo, 1).unwrap();
        let s = g.sum(logits);
        g.backward(s).unwrap();
        assert!(g.grad(fx).is_none());
    }

    #[test]
    fn loss_toggles() {
        let cfg = DualConfig {
            lambda: 0.0,
            ..tiny_cfg()
        };
        let (m, store) = setup(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = crate::linalg::gaussian(&[2, 16], 1.0, &mut rng);
        let v = crate::linalg::gaussian(&[6, 5], 1.0, &mut rng);
        let labels = Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let f = m.forward(&mut g, &store, &x, &v).unwrap();
        let p = m.total_loss(&mut g, &store, &f, &[0, 2], &labels).unwrap();
        let sum = g.value(p.subj).item() + g.value(p.obj).item();
        assert_eq!(g.value(p.total).item(), sum);
        assert!(g.value(p.orth).item() <= 1e-20);
    }

    #[test]
    fn store_skeleton_checks_names() {
        let (_, mut store) = setup(&tiny_cfg());
        assert!(model_for_store(&mut store, &tiny_enc(), &tiny_cfg()).is_ok());
        let other = DualConfig {
            obj_dim: 4,
            ..tiny_cfg()
        };
        assert!(matches!(
            model_for_store(&mut store, &tiny_enc(), &other),
            Err(Error::Checkpoint(_))
        ));
    }
}
