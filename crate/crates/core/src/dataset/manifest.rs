//! Manifest-driven ingestion: UTF-8 CSV with header
//! `path,scene_label,device_id,split`, rows referencing WAV or feature
//! tensor files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::{default_hierarchy, Clip, SceneDataset, Split};
use crate::error::{Error, Result};
use crate::features::{log_mel, stft_power, wav, FeatureConfig};
use crate::fusion::ClassHierarchy;

/// Load a manifest. Referenced files are validated up front and every
/// problem is reported with its row number. Ordering follows the manifest.
pub fn load_manifest(
    path: &Path,
    feat_cfg: &FeatureConfig,
    hierarchy_map: Option<&BTreeMap<String, String>>,
) -> Result<SceneDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "path,scene_label,device_id,split" => {}
        Some((_, header)) => {
            return Err(Error::Data(format!(
                "manifest header must be 'path,scene_label,device_id,split', got '{header}'"
            )))
        }
        None => {
            return Err(Error::Data("manifest is empty (missing header)".to_string()));
        }
    }

    struct Row {
        file: std::path::PathBuf,
        label: String,
        device: String,
        split: Split,
    }

    let mut rows = Vec::new();
    let mut problems = Vec::new();
    let mut seen_paths = BTreeSet::new();
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            problems.push(format!("row {}: expected 4 fields, got {}", lineno + 1, fields.len()));
            continue;
        }
        let file = base.join(fields[0]);
        if !seen_paths.insert(fields[0].to_string()) {
            problems.push(format!("row {}: duplicate clip '{}'", lineno + 1, fields[0]));
            continue;
        }
        if !file.exists() {
            problems.push(format!("row {}: missing file {}", lineno + 1, file.display()));
            continue;
        }
        let split = match fields[3] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                problems.push(format!("row {}: unknown split '{other}'", lineno + 1));
                continue;
            }
        };
        if let Some(map) = hierarchy_map {
            if !map.contains_key(fields[1]) {
                problems.push(format!(
                    "row {}: label '{}' missing from the configured hierarchy",
                    lineno + 1,
                    fields[1]
                ));
                continue;
            }
        }
        rows.push(Row {
            file,
            label: fields[1].to_string(),
            device: fields[2].to_string(),
            split,
        });
    }
    if !problems.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} has {} problem(s):\n  {}",
            path.display(),
            problems.len(),
            problems.join("\n  ")
        )));
    }
    if rows.is_empty() {
        log::warn!("manifest {} contains no clips", path.display());
    }

    let mut classes: Vec<String> = rows.iter().map(|r| r.label.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    classes.sort();
    let hierarchy: ClassHierarchy = match hierarchy_map {
        Some(map) => ClassHierarchy::from_map(classes.clone(), map)?,
        None => default_hierarchy(&classes)?,
    };

    let mut clips = Vec::with_capacity(rows.len());
    let mut devices = BTreeSet::new();
    let mut seen_devices = BTreeSet::new();
    for row in &rows {
        let lmfb = match row.file.extension().and_then(|e| e.to_str()) {
            Some("wav") => {
                let (samples, rate) = wav::read_wav(&row.file)?;
                let power = stft_power(&samples, feat_cfg)?;
                log_mel(&power, feat_cfg, rate)?
            }
            _ => {
                let (tensor, _) = crate::features::read_feature_file(&row.file)?;
                if tensor.rank() != 2 {
                    return Err(Error::Data(format!(
                        "{}: feature file must be [frames, mels], got {:?}",
                        row.file.display(),
                        tensor.shape()
                    )));
                }
                tensor
            }
        };
        let label = classes.iter().position(|c| c == &row.label).unwrap();
        devices.insert(row.device.clone());
        if row.split == Split::Train {
            seen_devices.insert(row.device.clone());
        }
        clips.push(Clip {
            id: row.file.to_string_lossy().to_string(),
            lmfb,
            label,
            device: row.device.clone(),
            split: row.split,
        });
    }

    Ok(SceneDataset {
        classes,
        hierarchy,
        devices: devices.into_iter().collect(),
        seen_devices: seen_devices.into_iter().collect(),
        clips,
    })
}
