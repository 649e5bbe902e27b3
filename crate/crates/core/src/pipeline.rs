//! Raw dataset splits to model-ready matrices: repetition averaging,
//! per-subject standardization fitted on train, wrap-around padding.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dual::Stage2Data;
use crate::error::{Error, Result};
use crate::preprocess::{
    apply_standardization, compute_target_length, fit_standardization, pad_wraparound, PaddingPlan,
    StandardizationStats,
};
use crate::synth::{average_repetitions, Dataset, VoxelRecord};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub stats: StandardizationStats,
    pub target_len: usize,
    pub patch_size: usize,
    /// True voxel count of every subject seen in training.
    pub lengths: Vec<Option<usize>>,
    pub train: Stage2Data,
    pub test: Stage2Data,
}

impl Prepared {
    pub fn plan(&self, subject: usize) -> Result<PaddingPlan> {
        let l = self
            .lengths
            .get(subject)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Data(format!("subject {subject} has no training records")))?;
        PaddingPlan::new(l, self.target_len, self.patch_size)
    }
}

/// Standardizes and pads averaged records into a [`Stage2Data`].
pub fn stage2_data(
    records: &[VoxelRecord],
    split: &Dataset,
    stats: &StandardizationStats,
    target_len: usize,
    patch_size: usize,
) -> Result<Stage2Data> {
    if records.is_empty() {
        return Err(Error::Data("split has no records".into()));
    }
    let c = split.num_classes;
    let first = split.vision_for(records[0].stimulus)?;
    let (nx, dx) = first.dims2()?;
    let mut x = Vec::with_capacity(records.len() * target_len);
    let mut vision = Vec::with_capacity(records.len() * nx * dx);
    let mut labels = Vec::with_capacity(records.len() * c);
    for r in records {
        let z = apply_standardization(r, stats)?;
        x.extend(pad_wraparound(&z.voxels, target_len, patch_size)?.0);
        let v = split.vision_for(r.stimulus)?;
        if v.shape() != [nx, dx] {
            return Err(Error::Data(format!(
                "stimulus {} has vision features {:?}, expected [{nx}, {dx}]",
                r.stimulus,
                v.shape()
            )));
        }
        vision.extend_from_slice(v.data());
        labels.extend(r.label_vector());
    }
    let m = records.len();
    Ok(Stage2Data {
        x: Tensor::new(vec![m, target_len], x)?,
        vision: Tensor::new(vec![m * nx, dx], vision)?,
        subjects: records.iter().map(|r| r.subject).collect(),
        labels: Tensor::new(vec![m, c], labels)?,
    })
}

/// Full preprocessing of a train/test pair. `target_len` defaults to the
/// smallest patch multiple covering the longest subject.
pub fn prepare(
    train: &Dataset,
    test: &Dataset,
    patch_size: usize,
    target_len: Option<usize>,
) -> Result<Prepared> {
    train.validate()?;
    test.validate()?;
    if train.num_classes != test.num_classes || train.num_subjects != test.num_subjects {
        return Err(Error::Data(
            "train and test disagree on subject or class counts".into(),
        ));
    }
    let tr = average_repetitions(&train.records)?;
    let te = average_repetitions(&test.records)?;
    let lengths = train.subject_lengths();
    let present: Vec<usize> = lengths.iter().flatten().copied().collect();
    let min = compute_target_length(&present, patch_size)?;
    let target_len = match target_len {
        Some(t) if t < min || t % patch_size != 0 => {
            return Err(Error::Config(format!(
                "sequence length {t} must be a multiple of {patch_size} and at least {min}"
            )))
        }
        Some(t) => t,
        None => min,
    };
    let stats = fit_standardization(&tr)?;
    Ok(Prepared {
        train: stage2_data(&tr, train, &stats, target_len, patch_size)?,
        test: stage2_data(&te, test, &stats, target_len, patch_size)?,
        stats,
        target_len,
        patch_size,
        lengths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, GeneratorConfig};

    #[test]
    fn shapes_follow_config() {
        let cfg = GeneratorConfig {
            num_subjects: 2,
            num_classes: 3,
            base_length: 30,
            train_stimuli_per_subject: 5,
            test_stimuli: 4,
            vision_tokens: 2,
            vision_dim: 3,
            ..GeneratorConfig::default()
        };
        let (train, test, gt) = generate_dataset(&cfg).unwrap();
        let p = prepare(&train, &test, 8, None).unwrap();
        let max = *gt.lengths.iter().max().unwrap();
        assert_eq!(p.target_len, max.div_ceil(8) * 8);
        assert_eq!(p.train.x.shape(), &[10, p.target_len]);
        assert_eq!(p.test.vision.shape(), &[8 * 2, 3]);
        assert_eq!(p.plan(1).unwrap().source_len, gt.lengths[1]);
        assert!(prepare(&train, &test, 8, Some(p.target_len + 4)).is_err());
    }
}
