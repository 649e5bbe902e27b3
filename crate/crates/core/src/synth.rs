//! Synthetic multi-subject voxel data with a known linear mixing of subject
//! and object factors, plus the frozen vision-feature provider.
//!
//! A trial's latent is `ℓ = (u_s, o)` with `u_s` a fixed subject embedding and
//! `o = Σ_c (y_c + σ_sal·ξ_c)·e_c` an object code. The per-stimulus salience
//! jitter `ξ` is hidden from the vision provider, which sees `Σ_c y_c·e_c`
//! only. Voxels are `W_s·Q·ℓ + ε` for an orthonormal `Q` shared by all
//! subjects and a subject-specific expansion `W_s`.

use alloc::collections::{btree_map, BTreeMap};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::math;
use crate::tensor::Tensor;

/// Places class `class` in voxels `[start, start + len)` instead of the latent.
#[derive(Clone, Debug, PartialEq)]
pub struct Injection {
    pub class: usize,
    pub start: usize,
    pub len: usize,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub num_subjects: usize,
    pub num_classes: usize,
    /// Explicit per-subject voxel counts; when empty they are drawn from
    /// `base_length · (1 ± length_jitter)`.
    pub voxel_lengths: Vec<usize>,
    pub base_length: usize,
    pub length_jitter: f64,
    pub latent_dim: usize,
    pub subject_dim: usize,
    pub object_dim: usize,
    pub label_density: f64,
    pub noise_std: f64,
    pub salience_std: f64,
    /// Training stimuli are drawn separately for every subject.
    pub train_stimuli_per_subject: usize,
    /// Test stimuli are shared by all subjects.
    pub test_stimuli: usize,
    pub repetitions: usize,
    pub vision_tokens: usize,
    pub vision_dim: usize,
    pub vision_pos_std: f64,
    /// Use standard basis vectors as class embeddings (needs `object_dim ≥ C`).
    pub identity_object_embedding: bool,
    pub injection: Option<Injection>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_subjects: 4,
            num_classes: 8,
            voxel_lengths: Vec::new(),
            base_length: 480,
            length_jitter: 0.1,
            latent_dim: 32,
            subject_dim: 8,
            object_dim: 24,
            label_density: 0.3,
            noise_std: 0.1,
            salience_std: 0.5,
            train_stimuli_per_subject: 500,
            test_stimuli: 100,
            repetitions: 3,
            vision_tokens: 17,
            vision_dim: 32,
            vision_pos_std: 0.1,
            identity_object_embedding: false,
            injection: None,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: alloc::string::String| Err(Error::Config(m));
        if self.num_subjects == 0 || self.num_classes == 0 {
            return err("num_subjects and num_classes must be positive".into());
        }
        if self.subject_dim + self.object_dim != self.latent_dim
            || self.subject_dim == 0
            || self.object_dim == 0
        {
            return err(format!(
                "subject_dim ({}) + object_dim ({}) must equal latent_dim ({}) with both positive",
                self.subject_dim, self.object_dim, self.latent_dim
            ));
        }
        if !(self.label_density > 0.0 && self.label_density < 1.0) {
            return err(format!(
                "label_density {} not in (0, 1)",
                self.label_density
            ));
        }
        if !(self.noise_std >= 0.0) || !(self.salience_std >= 0.0) || !(self.vision_pos_std >= 0.0)
        {
            return err("noise, salience and vision position std must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.length_jitter) {
            return err(format!(
                "length_jitter {} not in [0, 1)",
                self.length_jitter
            ));
        }
        if self.identity_object_embedding && self.object_dim < self.num_classes {
            return err(format!(
                "identity object embedding needs object_dim ({}) >= num_classes ({})",
                self.object_dim, self.num_classes
            ));
        }
        if !self.voxel_lengths.is_empty() && self.voxel_lengths.len() != self.num_subjects {
            return err(format!(
                "{} voxel lengths given for {} subjects",
                self.voxel_lengths.len(),
                self.num_subjects
            ));
        }
        if self.repetitions == 0 || self.vision_tokens == 0 || self.vision_dim == 0 {
            return err("repetitions, vision_tokens and vision_dim must be positive".into());
        }
        if self.train_stimuli_per_subject == 0 {
            return err("train_stimuli_per_subject must be positive".into());
        }
        if let Some(inj) = &self.injection {
            if inj.class >= self.num_classes || inj.len == 0 {
                return err(format!(
                    "injection class {} or length {} invalid",
                    inj.class, inj.len
                ));
            }
        }
        Ok(())
    }
}

/// One trial: a subject's voxel response to one presentation of a stimulus.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelRecord {
    pub subject: usize,
    pub stimulus: u64,
    pub voxels: Vec<f64>,
    pub labels: Vec<bool>,
    pub repetition: usize,
}

impl VoxelRecord {
    pub fn label_vector(&self) -> Vec<f64> {
        self.labels
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Records of one split plus the vision features of every stimulus they use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub num_subjects: usize,
    pub num_classes: usize,
    pub records: Vec<VoxelRecord>,
    pub vision: BTreeMap<u64, Tensor>,
}

impl Dataset {
    /// Voxel count of every subject, `None` for subjects with no records.
    pub fn subject_lengths(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.num_subjects];
        for r in &self.records {
            out[r.subject].get_or_insert(r.voxels.len());
        }
        out
    }

    pub fn vision_for(&self, stimulus: u64) -> Result<&Tensor> {
        self.vision
            .get(&stimulus)
            .ok_or_else(|| Error::Data(format!("no vision features for stimulus {stimulus}")))
    }

    /// Checks ids, label widths and per-subject voxel counts.
    pub fn validate(&self) -> Result<()> {
        let mut lengths: Vec<Option<usize>> = vec![None; self.num_subjects];
        for r in &self.records {
            if r.subject >= self.num_subjects {
                return Err(Error::Data(format!(
                    "subject {} out of range [0, {})",
                    r.subject, self.num_subjects
                )));
            }
            if r.labels.len() != self.num_classes {
                return Err(Error::Data(format!(
                    "stimulus {} has {} label bits, expected {}",
                    r.stimulus,
                    r.labels.len(),
                    self.num_classes
                )));
            }
            if r.voxels.is_empty() {
                return Err(Error::Data(format!(
                    "stimulus {} has no voxels",
                    r.stimulus
                )));
            }
            match lengths[r.subject] {
                Some(l) if l != r.voxels.len() => {
                    return Err(Error::Data(format!(
                        "subject {} has records of length {} and {}",
                        r.subject,
                        l,
                        r.voxels.len()
                    )))
                }
                _ => lengths[r.subject] = Some(r.voxels.len()),
            }
        }
        Ok(())
    }
}

/// The mixing used to generate a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Orthonormal latent mixing, `latent_dim × latent_dim`.
    pub q: Tensor,
    /// Per-subject expansions `L_s × latent_dim`.
    pub w: Vec<Tensor>,
    /// Subject embeddings, `S × subject_dim`.
    pub subject_embeddings: Tensor,
    /// Class embeddings, `C × object_dim`.
    pub class_embeddings: Tensor,
    /// Vision projection, `object_dim × vision_dim`.
    pub vision_map: Tensor,
    /// Per-token vision offsets, `vision_tokens × vision_dim`.
    pub vision_pos: Tensor,
    pub lengths: Vec<usize>,
}

struct Stimulus {
    id: u64,
    labels: Vec<bool>,
    salience: Vec<f64>,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates `(train, test, ground_truth)`; every stimulus appears
/// `repetitions` times per subject with fresh measurement noise.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<(Dataset, Dataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (s_n, c_n, dl) = (cfg.num_subjects, cfg.num_classes, cfg.latent_dim);

    let q = linalg::random_orthonormal(dl, dl, &mut rng)?;
    let lengths: Vec<usize> = if cfg.voxel_lengths.is_empty() {
        (0..s_n)
            .map(|_| {
                let f = 1.0 - cfg.length_jitter + 2.0 * cfg.length_jitter * rng.random::<f64>();
                (math::floor(cfg.base_length as f64 * f) as usize).max(1)
            })
            .collect()
    } else {
        cfg.voxel_lengths.clone()
    };
    if let Some(inj) = &cfg.injection {
        let shortest = *lengths.iter().min().unwrap_or(&0);
        if inj.start + inj.len > shortest {
            return Err(Error::Config(format!(
                "injection [{}, {}) exceeds the shortest subject length {shortest}",
                inj.start,
                inj.start + inj.len
            )));
        }
    }
    let w_scale = 1.0 / math::sqrt(dl as f64);
    let w: Vec<Tensor> = lengths
        .iter()
        .map(|&l| linalg::gaussian(&[l, dl], w_scale, &mut rng))
        .collect();
    let subject_embeddings = linalg::gaussian(&[s_n, cfg.subject_dim], 1.0, &mut rng);
    let class_embeddings = if cfg.identity_object_embedding {
        let mut e = Tensor::zeros(&[c_n, cfg.object_dim]);
        for c in 0..c_n {
            e.set(c, c, 1.0);
        }
        e
    } else {
        linalg::gaussian(&[c_n, cfg.object_dim], 1.0, &mut rng)
    };
    let vision_map = linalg::gaussian(
        &[cfg.object_dim, cfg.vision_dim],
        1.0 / math::sqrt(cfg.object_dim as f64),
        &mut rng,
    );
    let vision_pos = linalg::gaussian(
        &[cfg.vision_tokens, cfg.vision_dim],
        cfg.vision_pos_std,
        &mut rng,
    );
    let gt = GroundTruth {
        q,
        w,
        subject_embeddings,
        class_embeddings,
        vision_map,
        vision_pos,
        lengths,
    };

    let mut next_id = 0u64;
    let mut draw_stimulus = |rng: &mut ChaCha8Rng| {
        let labels: Vec<bool> = (0..c_n)
            .map(|_| rng.random::<f64>() < cfg.label_density)
            .collect();
        let salience: Vec<f64> = (0..c_n).map(|_| cfg.salience_std * normal(rng)).collect();
        let id = next_id;
        next_id += 1;
        Stimulus {
            id,
            labels,
            salience,
        }
    };

    let test_stimuli: Vec<Stimulus> = (0..cfg.test_stimuli)
        .map(|_| draw_stimulus(&mut rng))
        .collect();
    let mut train = Dataset {
        num_subjects: s_n,
        num_classes: c_n,
        ..Dataset::default()
    };
    let mut test = train.clone();
    for s in 0..s_n {
        let stimuli: Vec<Stimulus> = (0..cfg.train_stimuli_per_subject)
            .map(|_| draw_stimulus(&mut rng))
            .collect();
        for st in &stimuli {
            emit(cfg, &gt, s, st, &mut rng, &mut train)?;
        }
    }
    for s in 0..s_n {
        for st in &test_stimuli {
            emit(cfg, &gt, s, st, &mut rng, &mut test)?;
        }
    }
    Ok((train, test, gt))
}

fn emit(
    cfg: &GeneratorConfig,
    gt: &GroundTruth,
    subject: usize,
    st: &Stimulus,
    rng: &mut ChaCha8Rng,
    out: &mut Dataset,
) -> Result<()> {
    let injected = cfg.injection.as_ref().map(|i| i.class);
    let mut latent = Vec::with_capacity(cfg.latent_dim);
    latent.extend_from_slice(gt.subject_embeddings.row(subject));
    let mut object = vec![0.0; cfg.object_dim];
    for c in 0..cfg.num_classes {
        if Some(c) == injected {
            continue;
        }
        let weight = if st.labels[c] { 1.0 } else { 0.0 } + st.salience[c];
        for (o, e) in object.iter_mut().zip(gt.class_embeddings.row(c)) {
            *o += weight * e;
        }
    }
    latent.extend_from_slice(&object);
    let mixed = gt.q.matmul(&Tensor::matrix(cfg.latent_dim, 1, latent)?)?;
    let clean = gt.w[subject].matmul(&mixed)?.into_data();

    if let btree_map::Entry::Vacant(e) = out.vision.entry(st.id) {
        e.insert(vision_features(gt, &st.labels)?);
    }
    for rep in 0..cfg.repetitions {
        let mut voxels = clean.clone();
        for v in &mut voxels {
            *v += cfg.noise_std * normal(rng);
        }
        if let Some(inj) = &cfg.injection {
            if st.labels[inj.class] {
                for v in &mut voxels[inj.start..inj.start + inj.len] {
                    *v += inj.amplitude;
                }
            }
        }
        out.records.push(VoxelRecord {
            subject,
            stimulus: st.id,
            voxels,
            labels: st.labels.clone(),
            repetition: rep,
        });
    }
    Ok(())
}

/// Frozen vision tokens of a stimulus: `(Σ_c y_c e_c)·M` broadcast over
/// tokens plus a fixed per-token offset.
pub fn vision_features(gt: &GroundTruth, labels: &[bool]) -> Result<Tensor> {
    let (c_n, od) = gt.class_embeddings.dims2()?;
    if labels.len() != c_n {
        return Err(Error::dim("vision_features", &[labels.len()], &[c_n]));
    }
    let mut code = vec![0.0; od];
    for (c, _) in labels.iter().enumerate().filter(|(_, on)| **on) {
        for (o, e) in code.iter_mut().zip(gt.class_embeddings.row(c)) {
            *o += e;
        }
    }
    let proj = Tensor::matrix(1, od, code)?.matmul(&gt.vision_map)?;
    let mut out = gt.vision_pos.clone();
    let dx = proj.len();
    for row in out.data_mut().chunks_mut(dx) {
        for (o, p) in row.iter_mut().zip(proj.data()) {
            *o += p;
        }
    }
    Ok(out)
}

/// One record per `(subject, stimulus)` whose voxels are the mean over repetitions.
///
/// Output order follows the first appearance of each pair.
pub fn average_repetitions(records: &[VoxelRecord]) -> Result<Vec<VoxelRecord>> {
    let mut slot: BTreeMap<(usize, u64), usize> = BTreeMap::new();
    let mut sums: Vec<(VoxelRecord, usize)> = Vec::new();
    for r in records {
        match slot.get(&(r.subject, r.stimulus)) {
            Some(&i) => {
                let (acc, n) = &mut sums[i];
                if acc.labels != r.labels {
                    return Err(Error::Data(format!(
                        "subject {} stimulus {} has inconsistent labels across repetitions",
                        r.subject, r.stimulus
                    )));
                }
                if acc.voxels.len() != r.voxels.len() {
                    return Err(Error::Data(format!(
                        "subject {} stimulus {} has repetitions of different lengths",
                        r.subject, r.stimulus
                    )));
                }
                acc.voxels
                    .iter_mut()
                    .zip(&r.voxels)
                    .for_each(|(a, v)| *a += v);
                *n += 1;
            }
            None => {
                slot.insert((r.subject, r.stimulus), sums.len());
                let mut first = r.clone();
                first.repetition = 0;
                sums.push((first, 1));
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(mut r, n)| {
            if n > 1 {
                r.voxels.iter_mut().for_each(|v| *v /= n as f64);
            }
            r
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            num_subjects: 2,
            num_classes: 4,
            base_length: 40,
            latent_dim: 8,
            subject_dim: 2,
            object_dim: 6,
            train_stimuli_per_subject: 10,
            test_stimuli: 4,
            ..GeneratorConfig::default()
        }
    }

    fn rec(v: &[f64], rep: usize) -> VoxelRecord {
        VoxelRecord {
            subject: 0,
            stimulus: 7,
            voxels: v.to_vec(),
            labels: vec![true, false],
            repetition: rep,
        }
    }

    #[test]
    fn average_of_three_repetitions() {
        let out = average_repetitions(&[rec(&[1.0; 3], 0), rec(&[3.0; 3], 1), rec(&[5.0; 3], 2)])
            .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].voxels, vec![3.0; 3]);
    }

    #[test]
    fn single_repetition_unchanged() {
        let r = rec(&[0.1, 0.7], 0);
        assert_eq!(average_repetitions(core::slice::from_ref(&r)).unwrap(), vec![r]);
    }

    #[test]
    fn inconsistent_labels_are_a_data_error() {
        let mut b = rec(&[1.0], 1);
        b.labels = vec![false, false];
        assert!(matches!(
            average_repetitions(&[rec(&[1.0], 0), b]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn q_is_orthonormal_and_shapes_hold() {
        let (train, test, gt) = generate_dataset(&small()).unwrap();
        assert!(linalg::orthonormality_error(&gt.q).unwrap() <= 1e-10);
        assert_eq!(train.records.len(), 2 * 10 * 3);
        assert_eq!(test.records.len(), 2 * 4 * 3);
        train.validate().unwrap();
        for r in &train.records {
            assert_eq!(r.voxels.len(), gt.lengths[r.subject]);
            assert_eq!(train.vision_for(r.stimulus).unwrap().shape(), &[17, 32]);
        }
        for l in &gt.lengths {
            assert!((36..=44).contains(l));
        }
    }

    #[test]
    fn split_is_disjoint_by_stimulus() {
        let (train, test, _) = generate_dataset(&small()).unwrap();
        for r in &test.records {
            assert!(train.records.iter().all(|t| t.stimulus != r.stimulus));
        }
    }

    #[test]
    fn identical_seed_identical_data() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&GeneratorConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn identity_embedding_needs_room() {
        let cfg = GeneratorConfig {
            identity_object_embedding: true,
            object_dim: 3,
            subject_dim: 5,
            ..small()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn bad_dimensions_rejected() {
        let cfg = GeneratorConfig {
            subject_dim: 3,
            ..small()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = GeneratorConfig {
            label_density: 1.0,
            ..small()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn injection_marks_exact_voxels() {
        let cfg = GeneratorConfig {
            noise_std: 0.0,
            salience_std: 0.0,
            injection: Some(Injection {
                class: 1,
                start: 4,
                len: 3,
                amplitude: 2.0,
            }),
            ..small()
        };
        let (train, _, gt) = generate_dataset(&cfg).unwrap();
        let mut off = cfg.clone();
        off.injection = None;
        for r in train.records.iter().filter(|r| r.repetition == 0) {
            // Rebuild the voxels without the injected class to isolate the added block.
            let mut latent = gt.subject_embeddings.row(r.subject).to_vec();
            let mut o = vec![0.0; 6];
            for c in (0..4).filter(|&c| c != 1 && r.labels[c]) {
                o.iter_mut()
                    .zip(gt.class_embeddings.row(c))
                    .for_each(|(a, e)| *a += e);
            }
            latent.extend(o);
            let base = gt.w[r.subject]
                .matmul(&gt.q.matmul(&Tensor::matrix(8, 1, latent).unwrap()).unwrap())
                .unwrap();
            for (i, (v, b)) in r.voxels.iter().zip(base.data()).enumerate() {
                let extra = if r.labels[1] && (4..7).contains(&i) {
                    2.0
                } else {
                    0.0
                };
                assert!((v - b - extra).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vision_ignores_salience_and_subject() {
        let (train, _, gt) = generate_dataset(&small()).unwrap();
        let r = &train.records[0];
        assert_eq!(
            train.vision_for(r.stimulus).unwrap(),
            &vision_features(&gt, &r.labels).unwrap()
        );
    }
}
