//! Voxel-wise standardization and wrap-around padding.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::synth::VoxelRecord;

pub const STD_FLOOR: f64 = 1e-8;

/// Per-subject, per-voxel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizationStats {
    pub subjects: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

impl StandardizationStats {
    pub fn get(&self, subject: usize) -> Result<(&[f64], &[f64])> {
        self.subjects
            .get(&subject)
            .map(|(m, s)| (m.as_slice(), s.as_slice()))
            .ok_or_else(|| Error::Data(format!("no standardization stats for subject {subject}")))
    }
}

/// Two-pass mean and variance per voxel index, computed per subject.
pub fn fit_standardization(train: &[VoxelRecord]) -> Result<StandardizationStats> {
    let mut groups: BTreeMap<usize, Vec<&VoxelRecord>> = BTreeMap::new();
    for r in train {
        groups.entry(r.subject).or_default().push(r);
    }
    let mut subjects = BTreeMap::new();
    for (s, recs) in groups {
        if recs.len() < 2 {
            return Err(Error::Data(format!(
                "subject {s} has {} training record(s); standardization needs at least 2",
                recs.len()
            )));
        }
        let l = recs[0].voxels.len();
        if let Some(bad) = recs.iter().find(|r| r.voxels.len() != l) {
            return Err(Error::Data(format!(
                "subject {s} has records of length {l} and {}",
                bad.voxels.len()
            )));
        }
        let n = recs.len() as f64;
        let mut mean = vec![0.0; l];
        for r in &recs {
            mean.iter_mut().zip(&r.voxels).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; l];
        for r in &recs {
            for ((acc, v), m) in var.iter_mut().zip(&r.voxels).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| math::sqrt(v / n).max(STD_FLOOR))
            .collect();
        subjects.insert(s, (mean, std));
    }
    Ok(StandardizationStats { subjects })
}

pub fn apply_standardization(
    record: &VoxelRecord,
    stats: &StandardizationStats,
) -> Result<VoxelRecord> {
    let (mean, std) = stats.get(record.subject)?;
    if mean.len() != record.voxels.len() {
        return Err(Error::Data(format!(
            "subject {} record has {} voxels, stats cover {}",
            record.subject,
            record.voxels.len(),
            mean.len()
        )));
    }
    let mut out = record.clone();
    for ((v, m), s) in out.voxels.iter_mut().zip(mean).zip(std) {
        *v = (*v - m) / s;
    }
    Ok(out)
}

/// Undoes [`apply_standardization`].
pub fn invert_standardization(
    record: &VoxelRecord,
    stats: &StandardizationStats,
) -> Result<VoxelRecord> {
    let (mean, std) = stats.get(record.subject)?;
    if mean.len() != record.voxels.len() {
        return Err(Error::Data(format!(
            "subject {} record has {} voxels, stats cover {}",
            record.subject,
            record.voxels.len(),
            mean.len()
        )));
    }
    let mut out = record.clone();
    for ((v, m), s) in out.voxels.iter_mut().zip(mean).zip(std) {
        *v = *v * s + m;
    }
    Ok(out)
}

/// How a signal of length `source_len` was extended to `target_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddingPlan {
    pub source_len: usize,
    pub target_len: usize,
}

impl PaddingPlan {
    pub fn new(source_len: usize, target_len: usize, patch_size: usize) -> Result<Self> {
        if source_len == 0 || patch_size == 0 {
            return Err(Error::Config(
                "source length and patch size must be positive".into(),
            ));
        }
        if target_len < source_len {
            return Err(Error::Config(format!(
                "target length {target_len} is shorter than the signal ({source_len})"
            )));
        }
        if target_len % patch_size != 0 {
            return Err(Error::Config(format!(
                "target length {target_len} is not a multiple of patch size {patch_size}"
            )));
        }
        Ok(PaddingPlan {
            source_len,
            target_len,
        })
    }

    /// Source index of padded position `j`.
    pub fn origin(&self, j: usize) -> usize {
        j % self.source_len
    }

    /// `(padded index, source index)` for every padded position.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.source_len..self.target_len).map(|j| (j, self.origin(j)))
    }
}

pub fn pad_wraparound(
    voxels: &[f64],
    target_len: usize,
    patch_size: usize,
) -> Result<(Vec<f64>, PaddingPlan)> {
    let plan = PaddingPlan::new(voxels.len(), target_len, patch_size)?;
    let padded = (0..target_len).map(|j| voxels[plan.origin(j)]).collect();
    Ok((padded, plan))
}

/// Smallest multiple of `patch_size` that is at least the longest length.
pub fn compute_target_length(lengths: &[usize], patch_size: usize) -> Result<usize> {
    let max = *lengths
        .iter()
        .max()
        .ok_or_else(|| Error::Config("no voxel lengths to pad".into()))?;
    if patch_size == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    Ok(max.div_ceil(patch_size) * patch_size)
}
