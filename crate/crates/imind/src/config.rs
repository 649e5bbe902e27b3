//! Flat `section.key = value` run configuration. `#` starts a comment;
//! unknown keys are rejected.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use imind_core::attribution::Statistic;
use imind_core::dual::DualConfig;
use imind_core::mae::EncoderConfig;
use imind_core::metrics::AucAverage;
use imind_core::synth::{GeneratorConfig, Injection};
use imind_core::train::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub batch_size: usize,
    pub auc_average: AucAverage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeSection {
    pub class: usize,
    pub subject: usize,
    pub statistic: Statistic,
    pub residual: bool,
    /// Voxels per synthetic ROI label when no label file is given.
    pub roi_block: usize,
    pub roi_file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineSection {
    pub classifier_steps: usize,
    pub classifier_lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathSection {
    pub dataset: Option<PathBuf>,
    pub stage1: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: GeneratorConfig,
    pub encoder: EncoderConfig,
    /// Model input length; `None` pads to the longest subject.
    pub seq_len: Option<usize>,
    pub pretrain: TrainConfig,
    pub dual: DualConfig,
    pub train: TrainConfig,
    /// Replace the trained basis by its orthogonal polar factor before saving.
    pub retract: bool,
    pub eval: EvalSection,
    pub attribute: AttributeSection,
    pub baselines: BaselineSection,
    pub paths: PathSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            synth: GeneratorConfig::default(),
            encoder: EncoderConfig::default(),
            seq_len: None,
            pretrain: TrainConfig {
                epochs: 4,
                ..TrainConfig::default()
            },
            dual: DualConfig::default(),
            train: TrainConfig::default(),
            retract: false,
            eval: EvalSection {
                batch_size: 50,
                auc_average: AucAverage::Macro,
            },
            attribute: AttributeSection {
                class: 0,
                subject: 0,
                statistic: Statistic::Median,
                residual: false,
                roi_block: 64,
                roi_file: None,
            },
            baselines: BaselineSection {
                classifier_steps: 300,
                classifier_lr: 1e-2,
            },
            paths: PathSection {
                dataset: None,
                stage1: None,
                checkpoint: None,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> CliResult<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| CliError::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or("none".into(), |p| p.display().to_string())
}

fn parse_injection(key: &str, v: &str) -> CliResult<Option<Injection>> {
    if v == "none" {
        return Ok(None);
    }
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(CliError::Config(format!(
            "`{key}` expects `none` or `class,start,len,amplitude`, got `{v}`"
        )));
    }
    Ok(Some(Injection {
        class: parse(key, parts[0])?,
        start: parse(key, parts[1])?,
        len: parse(key, parts[2])?,
        amplitude: parse(key, parts[3])?,
    }))
}

fn train_key(t: &mut TrainConfig, key: &str, field: &str, v: &str) -> CliResult<bool> {
    match field {
        "epochs" => t.epochs = parse(key, v)?,
        "batch_size" => t.batch_size = parse(key, v)?,
        "lr" => t.lr = parse(key, v)?,
        "warmup_frac" => t.warmup_frac = parse(key, v)?,
        "weight_decay" => t.weight_decay = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> CliResult<()> {
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        let known = match (section, field) {
            ("", "seed") => {
                self.seed = parse(key, v)?;
                true
            }
            ("synth", f) => {
                let s = &mut self.synth;
                match f {
                    "num_subjects" => s.num_subjects = parse(key, v)?,
                    "num_classes" => s.num_classes = parse(key, v)?,
                    "voxel_lengths" => {
                        s.voxel_lengths = v
                            .split(',')
                            .map(str::trim)
                            .filter(|x| !x.is_empty())
                            .map(|x| parse(key, x))
                            .collect::<CliResult<_>>()?
                    }
                    "base_length" => s.base_length = parse(key, v)?,
                    "length_jitter" => s.length_jitter = parse(key, v)?,
                    "latent_dim" => s.latent_dim = parse(key, v)?,
                    "subject_dim" => s.subject_dim = parse(key, v)?,
                    "object_dim" => s.object_dim = parse(key, v)?,
                    "label_density" => s.label_density = parse(key, v)?,
                    "noise_std" => s.noise_std = parse(key, v)?,
                    "salience_std" => s.salience_std = parse(key, v)?,
                    "train_stimuli_per_subject" => s.train_stimuli_per_subject = parse(key, v)?,
                    "test_stimuli" => s.test_stimuli = parse(key, v)?,
                    "repetitions" => s.repetitions = parse(key, v)?,
                    "vision_tokens" => s.vision_tokens = parse(key, v)?,
                    "vision_dim" => s.vision_dim = parse(key, v)?,
                    "vision_pos_std" => s.vision_pos_std = parse(key, v)?,
                    "identity_object_embedding" => s.identity_object_embedding = parse(key, v)?,
                    "injection" => s.injection = parse_injection(key, v)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            ("encoder", f) => {
                let e = &mut self.encoder;
                match f {
                    "seq_len" => {
                        self.seq_len = if v == "auto" {
                            None
                        } else {
                            Some(parse(key, v)?)
                        }
                    }
                    "patch_size" => e.patch_size = parse(key, v)?,
                    "dim" => e.dim = parse(key, v)?,
                    "layers" => e.layers = parse(key, v)?,
                    "heads" => e.heads = parse(key, v)?,
                    "decoder_dim" => e.decoder_dim = parse(key, v)?,
                    "decoder_layers" => e.decoder_layers = parse(key, v)?,
                    "decoder_heads" => e.decoder_heads = parse(key, v)?,
                    "mask_ratio" => e.mask_ratio = parse(key, v)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            ("pretrain", f) => train_key(&mut self.pretrain, key, f, v)?,
            ("train", "retract") => {
                self.retract = parse(key, v)?;
                true
            }
            ("train", f) => train_key(&mut self.train, key, f, v)?,
            ("dual", f) => {
                let d = &mut self.dual;
                match f {
                    "obj_dim" => d.obj_dim = parse(key, v)?,
                    "heads" => d.heads = parse(key, v)?,
                    "fusion" => d.fusion = parse(key, v)?,
                    "subject_loss" => d.subject_loss = parse(key, v)?,
                    "orth_loss" => d.orth_loss = parse(key, v)?,
                    "lambda" => d.lambda = parse(key, v)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            ("eval", "batch_size") => {
                self.eval.batch_size = parse(key, v)?;
                true
            }
            ("eval", "auc_average") => {
                self.eval.auc_average = match v {
                    "macro" => AucAverage::Macro,
                    "micro" => AucAverage::Micro,
                    _ => return Err(CliError::Config(format!("`{key}` must be macro or micro"))),
                };
                true
            }
            ("attribute", f) => {
                let a = &mut self.attribute;
                match f {
                    "class" => a.class = parse(key, v)?,
                    "subject" => a.subject = parse(key, v)?,
                    "statistic" => {
                        a.statistic = match v {
                            "median" => Statistic::Median,
                            "mean" => Statistic::Mean,
                            _ => {
                                return Err(CliError::Config(format!(
                                    "`{key}` must be median or mean"
                                )))
                            }
                        }
                    }
                    "residual" => a.residual = parse(key, v)?,
                    "roi_block" => a.roi_block = parse(key, v)?,
                    "roi_file" => a.roi_file = opt_path(v),
                    _ => return Err(unknown(key)),
                }
                true
            }
            ("baselines", f) => {
                let b = &mut self.baselines;
                match f {
                    "classifier_steps" => b.classifier_steps = parse(key, v)?,
                    "classifier_lr" => b.classifier_lr = parse(key, v)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            ("paths", f) => {
                let p = &mut self.paths;
                match f {
                    "dataset" => p.dataset = opt_path(v),
                    "stage1" => p.stage1 = opt_path(v),
                    "checkpoint" => p.checkpoint = opt_path(v),
                    _ => return Err(unknown(key)),
                }
                true
            }
            _ => false,
        };
        if known {
            Ok(())
        } else {
            Err(unknown(key))
        }
    }

    /// Every key with its resolved value, in a stable order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let s = &self.synth;
        let e = &self.encoder;
        let d = &self.dual;
        let a = &self.attribute;
        let mut out: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("synth.num_subjects", s.num_subjects.to_string()),
            ("synth.num_classes", s.num_classes.to_string()),
            (
                "synth.voxel_lengths",
                s.voxel_lengths
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("synth.base_length", s.base_length.to_string()),
            ("synth.length_jitter", s.length_jitter.to_string()),
            ("synth.latent_dim", s.latent_dim.to_string()),
            ("synth.subject_dim", s.subject_dim.to_string()),
            ("synth.object_dim", s.object_dim.to_string()),
            ("synth.label_density", s.label_density.to_string()),
            ("synth.noise_std", s.noise_std.to_string()),
            ("synth.salience_std", s.salience_std.to_string()),
            (
                "synth.train_stimuli_per_subject",
                s.train_stimuli_per_subject.to_string(),
            ),
            ("synth.test_stimuli", s.test_stimuli.to_string()),
            ("synth.repetitions", s.repetitions.to_string()),
            ("synth.vision_tokens", s.vision_tokens.to_string()),
            ("synth.vision_dim", s.vision_dim.to_string()),
            ("synth.vision_pos_std", s.vision_pos_std.to_string()),
            (
                "synth.identity_object_embedding",
                s.identity_object_embedding.to_string(),
            ),
            (
                "synth.injection",
                s.injection.as_ref().map_or("none".into(), |i| {
                    format!("{},{},{},{}", i.class, i.start, i.len, i.amplitude)
                }),
            ),
            (
                "encoder.seq_len",
                self.seq_len.map_or("auto".into(), |l| l.to_string()),
            ),
            ("encoder.patch_size", e.patch_size.to_string()),
            ("encoder.dim", e.dim.to_string()),
            ("encoder.layers", e.layers.to_string()),
            ("encoder.heads", e.heads.to_string()),
            ("encoder.decoder_dim", e.decoder_dim.to_string()),
            ("encoder.decoder_layers", e.decoder_layers.to_string()),
            ("encoder.decoder_heads", e.decoder_heads.to_string()),
            ("encoder.mask_ratio", e.mask_ratio.to_string()),
        ];
        for (name, t) in [("pretrain", &self.pretrain), ("train", &self.train)] {
            out.extend([
                (leak(name, "epochs"), t.epochs.to_string()),
                (leak(name, "batch_size"), t.batch_size.to_string()),
                (leak(name, "lr"), t.lr.to_string()),
                (leak(name, "warmup_frac"), t.warmup_frac.to_string()),
                (leak(name, "weight_decay"), t.weight_decay.to_string()),
            ]);
        }
        out.extend([
            ("train.retract", self.retract.to_string()),
            ("dual.obj_dim", d.obj_dim.to_string()),
            ("dual.heads", d.heads.to_string()),
            ("dual.fusion", d.fusion.to_string()),
            ("dual.subject_loss", d.subject_loss.to_string()),
            ("dual.orth_loss", d.orth_loss.to_string()),
            ("dual.lambda", d.lambda.to_string()),
            ("eval.batch_size", self.eval.batch_size.to_string()),
            (
                "eval.auc_average",
                match self.eval.auc_average {
                    AucAverage::Macro => "macro".into(),
                    AucAverage::Micro => "micro".into(),
                },
            ),
            ("attribute.class", a.class.to_string()),
            ("attribute.subject", a.subject.to_string()),
            ("attribute.statistic", a.statistic.name().into()),
            ("attribute.residual", a.residual.to_string()),
            ("attribute.roi_block", a.roi_block.to_string()),
            ("attribute.roi_file", show_path(&a.roi_file)),
            (
                "baselines.classifier_steps",
                self.baselines.classifier_steps.to_string(),
            ),
            (
                "baselines.classifier_lr",
                self.baselines.classifier_lr.to_string(),
            ),
            ("paths.dataset", show_path(&self.paths.dataset)),
            ("paths.stage1", show_path(&self.paths.stage1)),
            ("paths.checkpoint", show_path(&self.paths.checkpoint)),
        ]);
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn render(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                ))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> CliResult<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// The file contents verbatim (for the echo) plus the parsed config.
    pub fn load(path: Option<&Path>) -> CliResult<(String, Self)> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => String::new(),
        };
        let cfg = RunConfig::from_text(&text)?;
        Ok((text, cfg))
    }
}

fn leak(section: &str, field: &str) -> &'static str {
    // The key set is tiny and fixed; interning avoids juggling owned and borrowed keys.
    Box::leak(format!("{section}.{field}").into_boxed_str())
}

fn unknown(key: &str) -> CliError {
    CliError::Config(format!("unknown key `{key}`"))
}
