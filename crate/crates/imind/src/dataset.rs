//! On-disk dataset layout:
//!
//! ```text
//! <root>/dataset.json              {"num_subjects": S, "num_classes": C}
//! <root>/<split>/manifest.csv      subject_id,stimulus_id,labels,tensor_file,repetition
//! <root>/<split>/tensors/*.mkt     one voxel vector per row
//! <root>/<split>/vision/<id>.mkt   vision tokens of each stimulus
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use imind_core::synth::{Dataset, VoxelRecord};
use imind_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::mkt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub num_subjects: usize,
    pub num_classes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    subject_id: usize,
    stimulus_id: u64,
    labels: String,
    tensor_file: String,
    repetition: usize,
}

pub fn format_labels(labels: &[bool]) -> String {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &on)| on)
        .map(|(c, _)| c.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

pub fn parse_labels(s: &str, num_classes: usize) -> CliResult<Vec<bool>> {
    let mut out = vec![false; num_classes];
    for tok in s.split(';').map(str::trim).filter(|t| !t.is_empty()) {
        let c: usize = tok
            .parse()
            .map_err(|_| CliError::Data(format!("label `{tok}` is not a class id")))?;
        if c >= num_classes {
            return Err(CliError::Data(format!(
                "label {c} out of range for {num_classes} classes"
            )));
        }
        out[c] = true;
    }
    Ok(out)
}

fn mkdir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

pub fn write_split(dir: &Path, data: &Dataset) -> CliResult<()> {
    mkdir(&dir.join("tensors"))?;
    mkdir(&dir.join("vision"))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    for r in &data.records {
        let file = format!(
            "tensors/s{}_st{}_r{}.mkt",
            r.subject, r.stimulus, r.repetition
        );
        mkt::write(&dir.join(&file), &Tensor::vector(r.voxels.clone()))?;
        w.serialize(Row {
            subject_id: r.subject,
            stimulus_id: r.stimulus,
            labels: format_labels(&r.labels),
            tensor_file: file,
            repetition: r.repetition,
        })?;
    }
    w.flush().map_err(|e| CliError::io(&manifest, e))?;
    for (id, v) in &data.vision {
        mkt::write(&dir.join("vision").join(format!("{id}.mkt")), v)?;
    }
    Ok(())
}

/// Writes `train/`, `test/` and `dataset.json` under `root`.
pub fn write_dataset(root: &Path, train: &Dataset, test: &Dataset) -> CliResult<()> {
    mkdir(root)?;
    let info = DatasetInfo {
        num_subjects: train.num_subjects,
        num_classes: train.num_classes,
    };
    let p = root.join("dataset.json");
    fs::write(&p, serde_json::to_string_pretty(&info)? + "\n").map_err(|e| CliError::io(&p, e))?;
    write_split(&root.join("train"), train)?;
    write_split(&root.join("test"), test)
}

pub fn read_info(root: &Path) -> CliResult<DatasetInfo> {
    let p = root.join("dataset.json");
    let s = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
    Ok(serde_json::from_str(&s)?)
}

/// Reads one split; vision features are loaded for every stimulus that has a file.
pub fn load_voxel_dataset(dir: &Path, info: DatasetInfo) -> CliResult<Dataset> {
    let manifest = dir.join("manifest.csv");
    if !manifest.exists() {
        return Err(CliError::io(
            &manifest,
            std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        ));
    }
    let mut rdr = csv::Reader::from_path(&manifest)?;
    let mut records = Vec::new();
    let mut vision = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: Row = row?;
        if row.subject_id >= info.num_subjects {
            return Err(CliError::Data(format!(
                "{}: subject {} out of range [0, {})",
                manifest.display(),
                row.subject_id,
                info.num_subjects
            )));
        }
        let t = mkt::read(&dir.join(&row.tensor_file))?;
        if t.rank() != 1 {
            return Err(CliError::Data(format!(
                "{}: voxel tensor must be a vector, got shape {:?}",
                row.tensor_file,
                t.shape()
            )));
        }
        if !vision.contains_key(&row.stimulus_id) {
            let vp: PathBuf = dir.join("vision").join(format!("{}.mkt", row.stimulus_id));
            if vp.exists() {
                vision.insert(row.stimulus_id, mkt::read(&vp)?);
            }
        }
        records.push(VoxelRecord {
            subject: row.subject_id,
            stimulus: row.stimulus_id,
            voxels: t.into_data(),
            labels: parse_labels(&row.labels, info.num_classes)?,
            repetition: row.repetition,
        });
    }
    let ds = Dataset {
        num_subjects: info.num_subjects,
        num_classes: info.num_classes,
        records,
        vision,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_dataset(root: &Path) -> CliResult<(Dataset, Dataset)> {
    let info = read_info(root)?;
    Ok((
        load_voxel_dataset(&root.join("train"), info)?,
        load_voxel_dataset(&root.join("test"), info)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_strings() {
        let y = parse_labels("1;4;7", 10).unwrap();
        let on: Vec<usize> = (0..10).filter(|&c| y[c]).collect();
        assert_eq!(on, vec![1, 4, 7]);
        assert_eq!(format_labels(&y), "1;4;7");
        assert_eq!(parse_labels("", 3).unwrap(), vec![false; 3]);
        assert!(parse_labels("3", 3).is_err());
        assert!(parse_labels("x", 3).is_err());
    }

    #[test]
    fn empty_manifest_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("manifest.csv"),
            "subject_id,stimulus_id,labels,tensor_file,repetition\n",
        )
        .unwrap();
        let info = DatasetInfo {
            num_subjects: 2,
            num_classes: 3,
        };
        let d = load_voxel_dataset(dir.path(), info).unwrap();
        assert!(d.records.is_empty());
    }

    #[test]
    fn missing_tensor_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("manifest.csv"),
            "subject_id,stimulus_id,labels,tensor_file,repetition\n0,1,,tensors/none.mkt,0\n",
        )
        .unwrap();
        let info = DatasetInfo {
            num_subjects: 1,
            num_classes: 1,
        };
        let e = load_voxel_dataset(dir.path(), info).unwrap_err();
        assert!(e.to_string().contains("none.mkt"), "{e}");
    }
}
