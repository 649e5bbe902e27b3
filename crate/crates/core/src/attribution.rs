//! Object-voxel fingerprints: GradCAM token scores pushed through attention
//! rollout, upsampled to voxels and folded back onto the real voxels.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dual::{DualModel, Stage2Data};
use crate::error::{Error, Result};
use crate::math;
use crate::metrics::THRESHOLD;
use crate::params::ParamStore;
use crate::preprocess::PaddingPlan;
use crate::tensor::Tensor;

/// Row sums of rollout inputs must be within this of one.
pub const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Statistic {
    #[default]
    Median,
    Mean,
}

impl Statistic {
    pub fn name(self) -> &'static str {
        match self {
            Statistic::Median => "median",
            Statistic::Mean => "mean",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AttributionConfig {
    pub statistic: Statistic,
    /// Replace each layer by `0.5·(A + I)` renormalized before the product.
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    /// Length `L_s`, real voxels only.
    pub scores: Vec<f64>,
    pub class_id: usize,
    pub subject_id: usize,
    pub statistic: Statistic,
    pub samples: usize,
}

/// `α_k = mean_j ∂y/∂Z[j,k]`, `t_j = relu(Σ_k α_k·Z[j,k])`.
pub fn gradcam_from(z: &Tensor, grad: &Tensor) -> Result<Vec<f64>> {
    if z.shape() != grad.shape() {
        return Err(Error::dim("gradcam", z.shape(), grad.shape()));
    }
    let (n, k) = z.dims2()?;
    let mut alpha = vec![0.0; k];
    for j in 0..n {
        for (a, g) in alpha.iter_mut().zip(grad.row(j)) {
            *a += g;
        }
    }
    alpha.iter_mut().for_each(|a| *a /= n as f64);
    Ok((0..n)
        .map(|j| {
            let s: f64 = z.row(j).iter().zip(&alpha).map(|(z, a)| z * a).sum();
            s.max(0.0)
        })
        .collect())
}

/// GradCAM over the object features of one padded sample, with the gradient
/// taken at logit `class`.
pub fn gradcam_token_scores(
    model: &DualModel,
    store: &ParamStore,
    voxels: &[f64],
    vision: &Tensor,
    class: usize,
) -> Result<Vec<f64>> {
    let og = model.object_gradient(store, voxels, vision, class)?;
    gradcam_from(&og.z_obj, &og.grad)
}

fn check_stochastic(a: &Tensor, n: usize, layer: usize) -> Result<()> {
    if a.shape() != [n, n] {
        return Err(Error::Validation(format!(
            "attention layer {layer} has shape {:?}, expected [{n}, {n}]",
            a.shape()
        )));
    }
    for i in 0..n {
        let row = a.row(i);
        let s: f64 = row.iter().sum();
        if row.iter().any(|v| !(*v >= -STOCHASTIC_TOL)) || !((s - 1.0).abs() <= STOCHASTIC_TOL) {
            return Err(Error::Validation(format!(
                "attention layer {layer} row {i} is not stochastic (sum {s})"
            )));
        }
    }
    Ok(())
}

fn with_residual(a: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let mut out = a.clone();
    for i in 0..n {
        let v = out.at(i, i);
        out.set(i, i, v + 1.0);
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    out
}

/// `A^(l)·A^(l−1)···A^(1)` for layers given first to last.
pub fn attention_rollout(layers: &[Tensor], residual: bool) -> Result<Tensor> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Validation("attention rollout needs at least one layer".into()))?;
    let n = first.shape().first().copied().unwrap_or(0);
    for (i, a) in layers.iter().enumerate() {
        check_stochastic(a, n, i)?;
    }
    let prep = |a: &Tensor| {
        if residual {
            with_residual(a)
        } else {
            a.clone()
        }
    };
    let mut r = prep(&layers[layers.len() - 1]);
    for a in layers[..layers.len() - 1].iter().rev() {
        r = r.matmul(&prep(a))?;
    }
    Ok(r)
}

/// `T = t·R`.
pub fn voxel_scores(t: &[f64], rollout: &Tensor) -> Result<Vec<f64>> {
    let n = rollout.dims2()?.0;
    if t.len() != n {
        return Err(Error::dim("voxel_scores", &[t.len()], rollout.shape()));
    }
    let row = Tensor::new(vec![1, n], t.to_vec())?;
    Ok(row.matmul(rollout)?.into_data())
}

pub fn upsample_patchwise(t: &[f64], patch_size: usize) -> Vec<f64> {
    t.iter()
        .flat_map(|&v| core::iter::repeat_n(v, patch_size))
        .collect()
}

/// Each real voxel takes the max of its own score and those of its padded copies.
pub fn restore_activation(upsampled: &[f64], plan: &PaddingPlan) -> Result<Vec<f64>> {
    if upsampled.len() != plan.target_len {
        return Err(Error::dim(
            "restore_activation",
            &[upsampled.len()],
            &[plan.target_len],
        ));
    }
    let mut out = upsampled[..plan.source_len].to_vec();
    for (j, i) in plan.origins() {
        out[i] = out[i].max(upsampled[j]);
    }
    Ok(out)
}

/// Restored voxel map of one padded sample.
pub fn sample_map(
    model: &DualModel,
    store: &ParamStore,
    voxels: &[f64],
    vision: &Tensor,
    class: usize,
    plan: &PaddingPlan,
    residual: bool,
) -> Result<SampleAttribution> {
    let og = model.object_gradient(store, voxels, vision, class)?;
    let t = gradcam_from(&og.z_obj, &og.grad)?;
    let r = attention_rollout(&og.attention, residual)?;
    let tv = voxel_scores(&t, &r)?;
    let up = upsample_patchwise(&tv, model.encoder.cfg.patch_size);
    Ok(SampleAttribution {
        scores: restore_activation(&up, plan)?,
        tokens: t,
        probability: math::sigmoid(og.logit),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleAttribution {
    pub scores: Vec<f64>,
    pub tokens: Vec<f64>,
    pub probability: f64,
}

/// Per-voxel median (mean of the two middle values for even counts) or mean.
pub fn aggregate(maps: &[Vec<f64>], statistic: Statistic) -> Result<Vec<f64>> {
    let n = match maps.first() {
        Some(m) => m.len(),
        None => return Err(Error::Validation("nothing to aggregate".into())),
    };
    if let Some(m) = maps.iter().find(|m| m.len() != n) {
        return Err(Error::dim("aggregate", &[m.len()], &[n]));
    }
    let k = maps.len();
    let mut col = vec![0.0; k];
    Ok((0..n)
        .map(|i| {
            col.iter_mut().zip(maps).for_each(|(c, m)| *c = m[i]);
            match statistic {
                Statistic::Mean => col.iter().sum::<f64>() / k as f64,
                Statistic::Median => {
                    col.sort_by(f64::total_cmp);
                    if k % 2 == 1 {
                        col[k / 2]
                    } else {
                        0.5 * (col[k / 2 - 1] + col[k / 2])
                    }
                }
            }
        })
        .collect())
}

/// Fingerprint of `class` for `subject` over its true positives: label on and
/// sigmoid probability above the threshold. `None` when nothing qualifies.
pub fn aggregate_fingerprint(
    model: &DualModel,
    store: &ParamStore,
    data: &Stage2Data,
    class: usize,
    subject: usize,
    plan: &PaddingPlan,
    cfg: &AttributionConfig,
) -> Result<Option<AttributionMap>> {
    let nx = model.cfg.vision_tokens;
    let dx = model.cfg.vision_dim;
    if data.x.dims2()?.1 != plan.target_len {
        return Err(Error::dim(
            "aggregate_fingerprint",
            data.x.shape(),
            &[plan.target_len],
        ));
    }
    let mut maps = Vec::new();
    for i in (0..data.len()).filter(|&i| data.subjects[i] == subject) {
        if data.labels.at(i, class) != 1.0 {
            continue;
        }
        let vision = Tensor::new(
            vec![nx, dx],
            data.vision.data()[i * nx * dx..(i + 1) * nx * dx].to_vec(),
        )?;
        let s = sample_map(
            model,
            store,
            data.x.row(i),
            &vision,
            class,
            plan,
            cfg.residual,
        )?;
        if s.probability > THRESHOLD {
            maps.push(s.scores);
        }
    }
    if maps.is_empty() {
        return Ok(None);
    }
    Ok(Some(AttributionMap {
        scores: aggregate(&maps, cfg.statistic)?,
        class_id: class,
        subject_id: subject,
        statistic: cfg.statistic,
        samples: maps.len(),
    }))
}

pub fn roi_group(map: &AttributionMap, labels: &[i64]) -> Result<BTreeMap<i64, Vec<f64>>> {
    if labels.len() != map.scores.len() {
        return Err(Error::dim(
            "roi_group",
            &[labels.len()],
            &[map.scores.len()],
        ));
    }
    let mut out: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for (&l, &s) in labels.iter().zip(&map.scores) {
        out.entry(l).or_default().push(s);
    }
    Ok(out)
}

/// Indices of the `q` largest scores, ties broken by lower index.
pub fn top_q(scores: &[f64], q: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(q);
    idx
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let sa: alloc::collections::BTreeSet<_> = a.iter().collect();
    let sb: alloc::collections::BTreeSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}
