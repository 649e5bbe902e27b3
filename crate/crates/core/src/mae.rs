//! Masked-autoencoder pretraining of the voxel-patch transformer encoder.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Block, LayerNorm, Linear};
use crate::optim::AdamW;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::train::{self, TrainConfig, TrainFailure};

/// Name prefix of every encoder parameter.
pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub patch_size: usize,
    /// Padded voxel length `L`.
    pub seq_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 16,
            seq_len: 512,
            dim: 64,
            layers: 4,
            heads: 4,
            decoder_dim: 48,
            decoder_layers: 2,
            decoder_heads: 4,
            mask_ratio: 0.75,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.patch_size == 0 || self.seq_len == 0 || self.seq_len % self.patch_size != 0 {
            return bad(format!(
                "sequence length {} must be a positive multiple of patch size {}",
                self.seq_len, self.patch_size
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 || self.dim % 2 != 0 {
            return bad(format!(
                "encoder width {} must be even and divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if self.decoder_heads == 0
            || self.decoder_dim % self.decoder_heads != 0
            || self.decoder_dim % 2 != 0
        {
            return bad(format!(
                "decoder width {} must be even and divisible by {} heads",
                self.decoder_dim, self.decoder_heads
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} not in (0, 1)", self.mask_ratio));
        }
        if self.layers == 0 {
            return bad("encoder needs at least one layer".into());
        }
        let n = self.num_tokens();
        if n - masked_count(n, self.mask_ratio) == 0 {
            return bad(format!(
                "mask_ratio {} hides every one of {n} tokens",
                self.mask_ratio
            ));
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.seq_len / self.patch_size
    }
}

fn masked_count(n: usize, ratio: f64) -> usize {
    crate::math::floor(n as f64 * ratio) as usize
}

/// Hides `floor(n·ratio)` of `n` token positions uniformly without
/// replacement; returns `(visible, masked)`, each ascending.
pub fn random_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let hidden = masked_count(n, ratio).min(n);
    let mut is_masked = vec![false; n];
    for i in rand::seq::index::sample(rng, n, hidden) {
        is_masked[i] = true;
    }
    (0..n).partition(|&i| !is_masked[i])
}

/// The transformer encoder `E`: patch embedding, fixed positions, pre-norm
/// blocks and a final layer norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    patch: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
    pos: Tensor,
}

/// Encoder activations for a batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[batch·tokens, dim]`.
    pub tokens: Var,
    /// One attention node per layer.
    pub attention: Vec<Var>,
    pub batch: usize,
    pub tokens_per_sample: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let patch = Linear::new(store, "encoder.patch", cfg.patch_size, d, rng);
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, &format!("encoder.blocks.{i}"), d, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "encoder.norm", d);
        Ok(Encoder {
            cfg: cfg.clone(),
            patch,
            blocks,
            norm,
            pos: nn::sinusoidal(cfg.num_tokens(), d),
        })
    }

    pub fn patch_linear(&self) -> &Linear {
        &self.patch
    }

    pub fn positions(&self) -> &Tensor {
        &self.pos
    }

    /// Patch projection plus positions, `[batch·N, d]` for `x` of shape `[batch, L]`.
    pub fn patch_embed(&self, g: &mut Graph, store: &ParamStore, x: &Tensor) -> Result<Var> {
        let (batch, l) = x.dims2()?;
        if l != self.cfg.seq_len {
            return Err(Error::dim(
                "patch_embed",
                x.shape(),
                &[batch, self.cfg.seq_len],
            ));
        }
        let n = self.cfg.num_tokens();
        let patches = g.constant(x.clone().reshape(&[batch * n, self.cfg.patch_size])?);
        let t = self.patch.forward(g, store, patches)?;
        let pos = g.constant(nn::tile_rows(&self.pos, batch));
        g.add(t, pos)
    }

    /// Runs the encoder on `x` (`[batch, L]`); when `keep` is given only those
    /// token positions of each sample enter the transformer.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Tensor,
        keep: Option<&[Vec<usize>]>,
    ) -> Result<EncoderOutput> {
        let batch = x.dims2()?.0;
        let n = self.cfg.num_tokens();
        let mut t = self.patch_embed(g, store, x)?;
        let mut per = n;
        if let Some(keep) = keep {
            if keep.len() != batch {
                return Err(Error::dim("encoder keep", &[keep.len()], &[batch]));
            }
            per = keep.first().map_or(0, Vec::len);
            let mut index = Vec::with_capacity(batch * per);
            for (b, k) in keep.iter().enumerate() {
                if k.len() != per {
                    return Err(Error::dim("encoder keep", &[k.len()], &[per]));
                }
                index.extend(k.iter().map(|&j| b * n + j));
            }
            t = g.gather_rows(t, &index)?;
        }
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, a) = block.forward(g, store, t, batch)?;
            t = next;
            attention.push(a);
        }
        let tokens = self.norm.forward(g, store, t)?;
        Ok(EncoderOutput {
            tokens,
            attention,
            batch,
            tokens_per_sample: per,
        })
    }

    /// Token features `F` (`N × d`) of one padded voxel vector.
    pub fn encode(&self, store: &ParamStore, voxels: &[f64]) -> Result<Tensor> {
        Ok(self.encode_with_attention(store, voxels)?.0)
    }

    /// Token features plus the head-averaged attention matrix of every layer.
    pub fn encode_with_attention(
        &self,
        store: &ParamStore,
        voxels: &[f64],
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let x = Tensor::new(vec![1, voxels.len()], voxels.to_vec())?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, &x, None)?;
        let attn = out
            .attention
            .iter()
            .map(|a| Ok(nn::head_average(&g, *a, 1, self.cfg.heads)?.remove(0)))
            .collect::<Result<Vec<_>>>()?;
        Ok((g.value(out.tokens).clone(), attn))
    }
}

/// Lightweight decoder that reconstructs every patch from visible latents.
#[derive(Clone, Debug)]
pub struct Decoder {
    embed: Linear,
    mask_token: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    out: Linear,
    pos: Tensor,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let dd = cfg.decoder_dim;
        let embed = Linear::new(store, "decoder.embed", cfg.dim, dd, rng);
        let mask_token = store.add(
            "decoder.mask_token",
            crate::linalg::gaussian(&[dd], 0.02, rng),
            false,
        );
        let blocks = (0..cfg.decoder_layers)
            .map(|i| {
                Block::new(
                    store,
                    &format!("decoder.blocks.{i}"),
                    dd,
                    cfg.decoder_heads,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "decoder.norm", dd);
        let out = Linear::new(store, "decoder.out", dd, cfg.patch_size, rng);
        Ok(Decoder {
            embed,
            mask_token,
            blocks,
            norm,
            out,
            pos: nn::sinusoidal(cfg.num_tokens(), dd),
        })
    }

    /// Predicted patches `[batch·N, patch]` from visible latents `[batch·k, d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latents: Var,
        keep: &[Vec<usize>],
        n: usize,
    ) -> Result<Var> {
        let batch = keep.len();
        let per = keep.first().map_or(0, Vec::len);
        let hidden = n - per;
        let emb = self.embed.forward(g, store, latents)?;
        let mut t = emb;
        if hidden > 0 {
            let token = g.param(store, self.mask_token);
            let dd = g.shape(token)[0];
            let token = g.reshape(token, &[1, dd])?;
            let masks = g.gather_rows(token, &vec![0; batch * hidden])?;
            let stacked = g.concat(&[emb, masks], 0)?;
            // Row of `stacked` holding each (sample, position).
            let mut index = Vec::with_capacity(batch * n);
            for (b, k) in keep.iter().enumerate() {
                let mut vis = 0;
                let mut hid = 0;
                for j in 0..n {
                    if vis < k.len() && k[vis] == j {
                        index.push(b * per + vis);
                        vis += 1;
                    } else {
                        index.push(batch * per + b * hidden + hid);
                        hid += 1;
                    }
                }
            }
            t = g.gather_rows(stacked, &index)?;
        }
        let pos = g.constant(nn::tile_rows(&self.pos, batch));
        t = g.add(t, pos)?;
        for block in &self.blocks {
            t = block.forward(g, store, t, batch)?.0;
        }
        let t = self.norm.forward(g, store, t)?;
        self.out.forward(g, store, t)
    }
}

/// Encoder plus reconstruction decoder.
#[derive(Clone, Debug)]
pub struct Mae {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Mae {
    /// Encoder parameters are registered first so that dropping the decoder
    /// leaves their ids unchanged.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Encoder::new(store, cfg, rng)?;
        let decoder = Decoder::new(store, cfg, rng)?;
        Ok(Mae { encoder, decoder })
    }

    /// Mean squared reconstruction error over the masked patches only.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Tensor,
        keep: &[Vec<usize>],
    ) -> Result<Var> {
        let cfg = &self.encoder.cfg;
        let n = cfg.num_tokens();
        let batch = x.dims2()?.0;
        let enc = self.encoder.forward(g, store, x, Some(keep))?;
        let pred = self.decoder.forward(g, store, enc.tokens, keep, n)?;
        let mut masked = Vec::new();
        for (b, k) in keep.iter().enumerate() {
            let mut vis = k.iter().peekable();
            for j in 0..n {
                if vis.peek() == Some(&&j) {
                    vis.next();
                } else {
                    masked.push(b * n + j);
                }
            }
        }
        let target = g.constant(x.clone().reshape(&[batch * n, cfg.patch_size])?);
        let p = g.gather_rows(pred, &masked)?;
        let t = g.gather_rows(target, &masked)?;
        let diff = g.sub(p, t)?;
        let sq = g.frobenius_norm_sq(diff);
        Ok(g.scale(sq, 1.0 / (masked.len() * cfg.patch_size) as f64))
    }
}

fn batch_rows(data: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let l = data.dims2()?.1;
    let mut out = Vec::with_capacity(rows.len() * l);
    for &r in rows {
        out.extend_from_slice(data.row(r));
    }
    Tensor::new(vec![rows.len(), l], out)
}

/// Masked reconstruction error over all rows of `data` under masks drawn
/// from a fixed seed, so two calls with the same weights agree exactly.
pub fn evaluate_masked_mse(
    mae: &Mae,
    store: &ParamStore,
    data: &Tensor,
    seed: u64,
    batch_size: usize,
) -> Result<f64> {
    let (m, _) = data.dims2()?;
    let cfg = &mae.encoder.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for start in (0..m).step_by(batch_size.max(1)) {
        let rows: Vec<usize> = (start..(start + batch_size).min(m)).collect();
        let keep: Vec<Vec<usize>> = rows
            .iter()
            .map(|_| random_mask(cfg.num_tokens(), cfg.mask_ratio, &mut rng).0)
            .collect();
        let x = batch_rows(data, &rows)?;
        let mut g = Graph::new();
        let l = mae.loss(&mut g, store, &x, &keep)?;
        total += g.value(l).item() * rows.len() as f64;
    }
    Ok(total / m as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainHistory {
    /// Mean training loss of every epoch.
    pub epoch_loss: Vec<f64>,
    /// Fixed-mask evaluation before the first update.
    pub initial_eval: f64,
    /// Fixed-mask evaluation after the last update.
    pub final_eval: f64,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    /// Encoder parameters only; the decoder is dropped.
    pub store: ParamStore,
    pub history: PretrainHistory,
}

const EVAL_SEED_SALT: u64 = 0x6d61_655f_6576_616c;

/// Stage-1 training on padded, standardized voxels `data` (`[M, L]`).
pub fn pretrain_stage1(
    data: &Tensor,
    cfg: &EncoderConfig,
    train_cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> core::result::Result<Pretrained, TrainFailure<PretrainHistory>> {
    let mut store = ParamStore::new();
    let mut history = PretrainHistory::default();
    let fail = |error, store: &ParamStore, history: &PretrainHistory| TrainFailure {
        error,
        last_good: store.clone(),
        history: history.clone(),
    };
    if let Err(e) = cfg.validate().and_then(|_| train_cfg.validate()) {
        return Err(fail(e, &store, &history));
    }
    let (m, l) = match data.dims2() {
        Ok(v) => v,
        Err(e) => return Err(fail(e, &store, &history)),
    };
    if l != cfg.seq_len || m == 0 {
        let e = Error::dim("pretrain_stage1", data.shape(), &[m.max(1), cfg.seq_len]);
        return Err(fail(e, &store, &history));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mae = match Mae::new(&mut store, cfg, &mut init_rng) {
        Ok(m) => m,
        Err(e) => return Err(fail(e, &store, &history)),
    };
    let eval_seed = train_cfg.seed ^ EVAL_SEED_SALT;
    match evaluate_masked_mse(&mae, &store, data, eval_seed, train_cfg.batch_size) {
        Ok(v) => history.initial_eval = v,
        Err(e) => return Err(fail(e, &store, &history)),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(&store, train_cfg.adamw());
    let n = cfg.num_tokens();
    let mut step = 0;
    for epoch in 0..train_cfg.epochs {
        let mut sum = 0.0;
        let batches = train::epoch_batches(m, train_cfg.batch_size, &mut rng);
        let count = batches.len();
        for rows in batches {
            let keep: Vec<Vec<usize>> = rows
                .iter()
                .map(|_| random_mask(n, cfg.mask_ratio, &mut rng).0)
                .collect();
            let result = (|| {
                let x = batch_rows(data, &rows)?;
                let mut g = Graph::new();
                let loss = mae.loss(&mut g, &store, &x, &keep)?;
                g.backward(loss)?;
                let value = g.value(loss).item();
                Ok::<_, Error>((g, value))
            })();
            let (g, loss) = match result {
                Ok(v) => v,
                Err(e) => return Err(fail(e, &store, &history)),
            };
            store.zero_grad();
            store.accumulate(&g);
            if let Err(e) = train::check_finite(loss, &store, epoch, step) {
                return Err(fail(e, &store, &history));
            }
            let lr = train_cfg.lr_at(step, m);
            if let Err(e) = opt.step(&mut store, lr) {
                return Err(fail(e, &store, &history));
            }
            sum += loss;
            step += 1;
        }
        let mean = sum / count as f64;
        history.epoch_loss.push(mean);
        on_epoch(epoch, mean);
    }
    match evaluate_masked_mse(&mae, &store, data, eval_seed, train_cfg.batch_size) {
        Ok(v) => history.final_eval = v,
        Err(e) => return Err(fail(e, &store, &history)),
    }
    Ok(Pretrained {
        store: store.subset(ENCODER_PREFIX),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            patch_size: 4,
            seq_len: 32,
            dim: 8,
            layers: 2,
            heads: 2,
            decoder_dim: 8,
            decoder_layers: 1,
            decoder_heads: 2,
            mask_ratio: 0.75,
        }
    }

    #[test]
    fn mask_counts_and_determinism() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let (vis, hid) = random_mask(32, 0.75, &mut a);
        assert_eq!((vis.len(), hid.len()), (8, 24));
        assert_eq!(random_mask(32, 0.75, &mut b), (vis, hid));
    }

    #[test]
    fn mask_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut freq = [0usize; 32];
        let draws = 10_000;
        for _ in 0..draws {
            for j in random_mask(32, 0.75, &mut rng).1 {
                freq[j] += 1;
            }
        }
        for f in freq {
            assert!((f as f64 / draws as f64 - 0.75).abs() <= 0.02);
        }
    }

    #[test]
    fn token_count_and_zero_projection() {
        let cfg = EncoderConfig {
            seq_len: 128,
            patch_size: 16,
            ..tiny()
        };
        assert_eq!(cfg.num_tokens(), 8);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
        let w = enc.patch_linear().w;
        store
            .value_mut(w)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let x = crate::linalg::gaussian(&[2, 128], 1.0, &mut rng);
        let t = enc.patch_embed(&mut g, &store, &x).unwrap();
        assert_eq!(g.value(t), &nn::tile_rows(enc.positions(), 2));
    }

    #[test]
    fn patch_embed_matches_per_patch_matmul() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
        let b = enc.patch_linear().b;
        *store.value_mut(b) = crate::linalg::gaussian(&[8], 1.0, &mut rng);
        let x = crate::linalg::gaussian(&[1, 32], 1.0, &mut rng);
        let mut g = Graph::new();
        let t = enc.patch_embed(&mut g, &store, &x).unwrap();
        let w = store.value(enc.patch_linear().w);
        for j in 0..8 {
            let patch = Tensor::matrix(1, 4, x.data()[j * 4..j * 4 + 4].to_vec()).unwrap();
            let proj = patch.matmul(w).unwrap();
            for c in 0..8 {
                let expected = proj.data()[c] + store.value(b).data()[c] + enc.positions().at(j, c);
                assert_eq!(g.value(t).at(j, c), expected);
            }
        }
    }

    #[test]
    fn wrong_length_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&mut store, &tiny(), &mut rng).unwrap();
        assert!(matches!(
            enc.encode(&store, &[0.0; 31]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { heads: 3, ..tiny() }.validate().is_err());
        assert!(EncoderConfig {
            mask_ratio: 1.0,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(EncoderConfig {
            seq_len: 30,
            ..tiny()
        }
        .validate()
        .is_err());
        tiny().validate().unwrap();
    }

    #[test]
    fn retained_attention_is_row_stochastic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoder::new(&mut store, &tiny(), &mut rng).unwrap();
        let x = crate::linalg::gaussian(&[1, 32], 1.0, &mut rng);
        let (f, attn) = enc.encode_with_attention(&store, x.data()).unwrap();
        assert_eq!(f.shape(), &[8, 8]);
        assert_eq!(attn.len(), 2);
        for a in attn {
            for r in 0..8 {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn pretraining_is_deterministic_and_drops_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = crate::linalg::gaussian(&[12, 32], 1.0, &mut rng);
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 5,
            ..TrainConfig::default()
        };
        let a = pretrain_stage1(&data, &tiny(), &tc, |_, _| {}).unwrap();
        let b = pretrain_stage1(&data, &tiny(), &tc, |_, _| {}).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(a.history, b.history);
        assert!(a
            .store
            .params()
            .iter()
            .all(|p| p.name.starts_with(ENCODER_PREFIX)));
        assert_eq!(a.history.epoch_loss.len(), 2);
    }

    #[test]
    fn non_finite_input_aborts_with_last_good() {
        let mut data = Tensor::zeros(&[4, 32]);
        data.data_mut()[3] = f64::NAN;
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let err = pretrain_stage1(&data, &tiny(), &tc, |_, _| {}).unwrap_err();
        assert!(matches!(err.error, Error::Numerical(_)));
        assert!(err.last_good.params().iter().all(|p| p.value.all_finite()));
    }
}
