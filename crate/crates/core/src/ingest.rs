//! Cohort directory ingestion and the matching writer.
//!
//! Layout:
//!
//! ```text
//! <root>/<patient_id>/<modality>.ptnsr
//! <root>/<patient_id>/<modality>.meta.json       # spacing, thickness
//! <root>/<patient_id>/masks/<lesion_id>.<modality>.ptnsr
//! <root>/<patient_id>/masks/<lesion_id>.<modality>.meta.json  # significance
//! ```
//!
//! One volume per (patient, modality); masks are aligned to their parent
//! volume's grid. Native scanner formats are out of scope; this adapter only
//! understands the portable tensor format.

use crate::io::{read_tensor, write_tensor3, TensorData};
use crate::types::{LesionMask, Modality, Significance, Volume};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    TensorIo(#[from] crate::io::TensorIoError),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("metadata error: {0}")]
    Meta(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeMeta {
    in_plane_spacing: (f64, f64),
    slice_thickness: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskMeta {
    significance: String,
}

/// Write a cohort in the directory layout above.
pub fn write_cohort(
    root: &Path,
    cohort: &[(Volume, Vec<LesionMask>)],
) -> Result<(), IngestError> {
    for (volume, masks) in cohort {
        let patient_dir = root.join(&volume.patient_id);
        let masks_dir = patient_dir.join("masks");
        std::fs::create_dir_all(&masks_dir)?;
        let modality = volume.modality.as_str();
        write_tensor3(&patient_dir.join(format!("{modality}.ptnsr")), &volume.voxels)?;
        let meta = VolumeMeta {
            in_plane_spacing: volume.in_plane_spacing,
            slice_thickness: volume.slice_thickness,
        };
        std::fs::write(
            patient_dir.join(format!("{modality}.meta.json")),
            serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )?;
        for mask in masks {
            let as_f32 = mask.mask.mapv(|v| v as f32);
            write_tensor3(
                &masks_dir.join(format!("{}.{modality}.ptnsr", mask.lesion_id)),
                &as_f32,
            )?;
            let mmeta = MaskMeta {
                significance: match mask.significance {
                    Significance::CS => "CS".into(),
                    Significance::NCS => "NCS".into(),
                },
            };
            std::fs::write(
                masks_dir.join(format!("{}.{modality}.meta.json", mask.lesion_id)),
                serde_json::to_string_pretty(&mmeta).expect("meta serializes"),
            )?;
        }
    }
    Ok(())
}

/// Read a cohort tree. Returns entries ordered by patient id then modality;
/// a patient missing either modality is skipped with a warning.
pub fn ingest_cohort(root: &Path) -> Result<Vec<(Volume, Vec<LesionMask>)>, IngestError> {
    let mut patients: Vec<String> = Vec::new();
    if !root.exists() {
        return Ok(Vec::new());
    }
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            patients.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    patients.sort();

    let mut out = Vec::new();
    'patient: for patient_id in patients {
        let patient_dir = root.join(&patient_id);
        // Check both modalities exist before loading anything.
        for m in Modality::ALL {
            if !patient_dir.join(format!("{}.ptnsr", m.as_str())).exists() {
                log::warn!(
                    "patient {patient_id}: missing {} volume, skipping patient",
                    m.as_str()
                );
                continue 'patient;
            }
        }
        let mut patient_entries = Vec::new();
        for modality in Modality::ALL {
            let mstr = modality.as_str();
            let voxels = match read_tensor(&patient_dir.join(format!("{mstr}.ptnsr")))? {
                TensorData::D3(a) => a,
                TensorData::D2(_) => {
                    return Err(IngestError::Meta(format!(
                        "{patient_id}/{mstr}: volume must be rank 3"
                    )))
                }
            };
            let meta: VolumeMeta = read_json(&patient_dir.join(format!("{mstr}.meta.json")))?;
            let volume = Volume::new(
                patient_id.clone(),
                modality,
                voxels,
                meta.in_plane_spacing,
                meta.slice_thickness,
            )
            .map_err(|e| IngestError::Meta(format!("{patient_id}/{mstr}: {e}")))?;
            let masks = read_masks(&patient_dir.join("masks"), &patient_id, modality, &volume)?;
            patient_entries.push((volume, masks));
        }
        out.extend(patient_entries);
    }
    Ok(out)
}

fn read_masks(
    masks_dir: &Path,
    patient_id: &str,
    modality: Modality,
    volume: &Volume,
) -> Result<Vec<LesionMask>, IngestError> {
    let mut masks = Vec::new();
    if !masks_dir.exists() {
        return Ok(masks);
    }
    let suffix = format!(".{}.ptnsr", modality.as_str());
    let mut files: Vec<String> = std::fs::read_dir(masks_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(&suffix))
        .collect();
    files.sort();
    for file in files {
        let lesion_id = file.trim_end_matches(&suffix).to_string();
        let raw = match read_tensor(&masks_dir.join(&file))? {
            TensorData::D3(a) => a,
            TensorData::D2(_) => {
                return Err(IngestError::Meta(format!(
                    "{patient_id}/masks/{file}: mask must be rank 3"
                )))
            }
        };
        let mask: Array3<u8> = raw.mapv(|v| u8::from(v > 0.5));
        let meta: MaskMeta = read_json(
            &masks_dir.join(format!("{lesion_id}.{}.meta.json", modality.as_str())),
        )?;
        let significance = match meta.significance.as_str() {
            "CS" => Significance::CS,
            "NCS" => Significance::NCS,
            other => {
                return Err(IngestError::Meta(format!(
                    "{patient_id}/masks/{file}: bad significance {other:?}"
                )))
            }
        };
        let mask = LesionMask::new(patient_id, lesion_id, significance, mask)
            .map_err(|e| IngestError::Meta(e.to_string()))?;
        mask.check_aligned(volume)
            .map_err(|e| IngestError::Alignment(e.to_string()))?;
        masks.push(mask);
    }
    Ok(masks)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IngestError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| IngestError::Meta(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| IngestError::Meta(format!("{}: {e}", path.display())))
}
