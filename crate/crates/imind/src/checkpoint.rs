//! Checkpoint directories:
//!
//! ```text
//! <dir>/config.json           kind, model configs, parameter names in order
//! <dir>/params/<name>.mkt     one tensor per parameter
//! <dir>/stats.json            standardization subjects, voxel counts, padding
//! <dir>/stats/s<id>_{mean,std}.mkt
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use imind_core::dual::{DualConfig, DualModel};
use imind_core::mae::{Encoder, EncoderConfig};
use imind_core::params::ParamStore;
use imind_core::preprocess::{PaddingPlan, StandardizationStats};
use imind_core::{Error as CoreError, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::mkt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Stage1,
    Stage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub patch_size: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
}

impl From<&EncoderConfig> for EncoderSpec {
    fn from(c: &EncoderConfig) -> Self {
        EncoderSpec {
            patch_size: c.patch_size,
            seq_len: c.seq_len,
            dim: c.dim,
            layers: c.layers,
            heads: c.heads,
            decoder_dim: c.decoder_dim,
            decoder_layers: c.decoder_layers,
            decoder_heads: c.decoder_heads,
            mask_ratio: c.mask_ratio,
        }
    }
}

impl From<&EncoderSpec> for EncoderConfig {
    fn from(c: &EncoderSpec) -> Self {
        EncoderConfig {
            patch_size: c.patch_size,
            seq_len: c.seq_len,
            dim: c.dim,
            layers: c.layers,
            heads: c.heads,
            decoder_dim: c.decoder_dim,
            decoder_layers: c.decoder_layers,
            decoder_heads: c.decoder_heads,
            mask_ratio: c.mask_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualSpec {
    pub num_subjects: usize,
    pub num_classes: usize,
    pub obj_dim: usize,
    pub heads: usize,
    pub vision_tokens: usize,
    pub vision_dim: usize,
    pub fusion: bool,
    pub subject_loss: bool,
    pub orth_loss: bool,
    pub lambda: f64,
}

impl From<&DualConfig> for DualSpec {
    fn from(c: &DualConfig) -> Self {
        DualSpec {
            num_subjects: c.num_subjects,
            num_classes: c.num_classes,
            obj_dim: c.obj_dim,
            heads: c.heads,
            vision_tokens: c.vision_tokens,
            vision_dim: c.vision_dim,
            fusion: c.fusion,
            subject_loss: c.subject_loss,
            orth_loss: c.orth_loss,
            lambda: c.lambda,
        }
    }
}

impl From<&DualSpec> for DualConfig {
    fn from(c: &DualSpec) -> Self {
        DualConfig {
            num_subjects: c.num_subjects,
            num_classes: c.num_classes,
            obj_dim: c.obj_dim,
            heads: c.heads,
            vision_tokens: c.vision_tokens,
            vision_dim: c.vision_dim,
            fusion: c.fusion,
            subject_loss: c.subject_loss,
            orth_loss: c.orth_loss,
            lambda: c.lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    kind: Kind,
    encoder: EncoderSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dual: Option<DualSpec>,
    params: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StatsSidecar {
    subjects: Vec<usize>,
    /// True voxel count per subject id; `null` for subjects absent from training.
    lengths: Vec<Option<usize>>,
    target_len: usize,
    patch_size: usize,
}

/// Standardization and padding fitted on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessing {
    pub stats: StandardizationStats,
    pub lengths: Vec<Option<usize>>,
    pub target_len: usize,
    pub patch_size: usize,
}

impl Preprocessing {
    pub fn plan(&self, subject: usize) -> CliResult<PaddingPlan> {
        let l = self
            .lengths
            .get(subject)
            .copied()
            .flatten()
            .ok_or_else(|| CliError::Data(format!("subject {subject} has no training records")))?;
        Ok(PaddingPlan::new(l, self.target_len, self.patch_size)?)
    }
}

#[derive(Clone, Debug)]
pub struct Stage1 {
    pub encoder: EncoderConfig,
    pub store: ParamStore,
    pub prep: Preprocessing,
}

#[derive(Clone, Debug)]
pub struct Stage2 {
    pub encoder: EncoderConfig,
    pub dual: DualConfig,
    pub model: DualModel,
    pub store: ParamStore,
    pub prep: Preprocessing,
}

fn mkdir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'a> Deserialize<'a>>(path: &Path) -> CliResult<T> {
    let s = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_prep(dir: &Path, prep: &Preprocessing) -> CliResult<()> {
    let sd = dir.join("stats");
    mkdir(&sd)?;
    for (id, (mean, std)) in &prep.stats.subjects {
        mkt::write(
            &sd.join(format!("s{id}_mean.mkt")),
            &Tensor::vector(mean.clone()),
        )?;
        mkt::write(
            &sd.join(format!("s{id}_std.mkt")),
            &Tensor::vector(std.clone()),
        )?;
    }
    write_json(
        &dir.join("stats.json"),
        &StatsSidecar {
            subjects: prep.stats.subjects.keys().copied().collect(),
            lengths: prep.lengths.clone(),
            target_len: prep.target_len,
            patch_size: prep.patch_size,
        },
    )
}

fn read_prep(dir: &Path) -> CliResult<Preprocessing> {
    let side: StatsSidecar = read_json(&dir.join("stats.json"))?;
    let mut subjects = BTreeMap::new();
    for id in side.subjects {
        let mean = mkt::read(&dir.join("stats").join(format!("s{id}_mean.mkt")))?;
        let std = mkt::read(&dir.join("stats").join(format!("s{id}_std.mkt")))?;
        if mean.shape() != std.shape() || mean.rank() != 1 {
            return Err(CliError::Data(format!(
                "subject {id}: malformed standardization stats"
            )));
        }
        subjects.insert(id, (mean.into_data(), std.into_data()));
    }
    Ok(Preprocessing {
        stats: StandardizationStats { subjects },
        lengths: side.lengths,
        target_len: side.target_len,
        patch_size: side.patch_size,
    })
}

fn write_params(dir: &Path, store: &ParamStore) -> CliResult<Vec<String>> {
    let pd = dir.join("params");
    mkdir(&pd)?;
    let mut names = Vec::with_capacity(store.len());
    for p in store.params() {
        mkt::write(&pd.join(format!("{}.mkt", p.name)), &p.value)?;
        names.push(p.name.clone());
    }
    Ok(names)
}

/// Fills every parameter of the freshly built `store` from `dir/params`.
fn fill_params(dir: &Path, names: &[String], store: &mut ParamStore) -> CliResult<()> {
    let expected: Vec<String> = store.params().iter().map(|p| p.name.clone()).collect();
    if expected != names {
        return Err(CoreError::Checkpoint(format!(
            "{}: holds {} tensors that do not match the {} of the configured model",
            dir.display(),
            names.len(),
            expected.len()
        ))
        .into());
    }
    for name in names {
        let t = mkt::read(&dir.join("params").join(format!("{name}.mkt")))?;
        store.load(name, t)?;
    }
    Ok(())
}

fn read_manifest(dir: &Path, want: Kind) -> CliResult<Manifest> {
    let path = dir.join("config.json");
    if !path.exists() {
        return Err(CliError::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    let m: Manifest = read_json(&path)?;
    if m.kind != want {
        return Err(CoreError::Checkpoint(format!(
            "{}: expected a {want:?} checkpoint, found {:?}",
            dir.display(),
            m.kind
        ))
        .into());
    }
    Ok(m)
}

pub fn save_stage1(dir: &Path, ck: &Stage1) -> CliResult<()> {
    mkdir(dir)?;
    let params = write_params(dir, &ck.store)?;
    write_prep(dir, &ck.prep)?;
    write_json(
        &dir.join("config.json"),
        &Manifest {
            kind: Kind::Stage1,
            encoder: (&ck.encoder).into(),
            dual: None,
            params,
        },
    )
}

pub fn load_stage1(dir: &Path) -> CliResult<Stage1> {
    let m = read_manifest(dir, Kind::Stage1)?;
    let encoder: EncoderConfig = (&m.encoder).into();
    encoder.validate()?;
    let mut store = ParamStore::new();
    Encoder::new(&mut store, &encoder, &mut ChaCha8Rng::seed_from_u64(0))?;
    fill_params(dir, &m.params, &mut store)?;
    Ok(Stage1 {
        encoder,
        store,
        prep: read_prep(dir)?,
    })
}

pub fn save_stage2(dir: &Path, ck: &Stage2) -> CliResult<()> {
    mkdir(dir)?;
    let params = write_params(dir, &ck.store)?;
    write_prep(dir, &ck.prep)?;
    write_json(
        &dir.join("config.json"),
        &Manifest {
            kind: Kind::Stage2,
            encoder: (&ck.encoder).into(),
            dual: Some((&ck.dual).into()),
            params,
        },
    )
}

pub fn load_stage2(dir: &Path) -> CliResult<Stage2> {
    let m = read_manifest(dir, Kind::Stage2)?;
    let encoder: EncoderConfig = (&m.encoder).into();
    encoder.validate()?;
    let dual: DualConfig = m
        .dual
        .as_ref()
        .ok_or_else(|| CoreError::Checkpoint(format!("{}: no dual config", dir.display())))?
        .into();
    let mut store = ParamStore::new();
    let model = DualModel::new(
        &mut store,
        &encoder,
        &dual,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    fill_params(dir, &m.params, &mut store)?;
    Ok(Stage2 {
        encoder,
        dual,
        model,
        store,
        prep: read_prep(dir)?,
    })
}
