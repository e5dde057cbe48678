//! Domain types shared across the pipeline.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The two MRI modalities the pipeline works with.
///
/// Ordering (`T2w < Adc`) is the canonical ordering used wherever a
/// deterministic modality order is required.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T2w,
    Adc,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::T2w, Modality::Adc];

    /// Lowercase name used in file layouts and configs.
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::T2w => "t2w",
            Modality::Adc => "adc",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s.to_ascii_lowercase().as_str() {
            "t2w" => Some(Modality::T2w),
            "adc" => Some(Modality::Adc),
            _ => None,
        }
    }
}

/// Clinical significance of a lesion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Significance {
    /// Clinically significant.
    CS,
    /// Non clinically significant.
    NCS,
}

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("mask/volume misaligned: {0}")]
    Misaligned(String),
}

/// A single-modality image volume for one patient.
///
/// Voxels are indexed `(slice, row, col)`.
#[derive(Debug, Clone)]
pub struct Volume {
    pub patient_id: String,
    pub modality: Modality,
    pub voxels: Array3<f32>,
    /// In-plane spacing in mm per pixel, `(row, col)`.
    pub in_plane_spacing: (f64, f64),
    /// Slice thickness in mm.
    pub slice_thickness: f64,
}

impl Volume {
    /// Build a volume, validating shape and finiteness.
    pub fn new(
        patient_id: impl Into<String>,
        modality: Modality,
        voxels: Array3<f32>,
        in_plane_spacing: (f64, f64),
        slice_thickness: f64,
    ) -> Result<Volume, DomainError> {
        let dims = voxels.dim();
        if dims.0 < 1 || dims.1 < 1 || dims.2 < 1 {
            return Err(DomainError::InvalidVolume(format!(
                "all dims must be >= 1, got {:?}",
                dims
            )));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(DomainError::InvalidVolume(
                "voxels contain non-finite values".into(),
            ));
        }
        Ok(Volume {
            patient_id: patient_id.into(),
            modality,
            voxels,
            in_plane_spacing,
            slice_thickness,
        })
    }

    /// `(slices, rows, cols)`
    pub fn shape(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    pub fn n_slices(&self) -> usize {
        self.voxels.dim().0
    }

    /// A copy of slice `idx` as a 2D image.
    pub fn slice_image(&self, idx: usize) -> Array2<f32> {
        self.voxels.index_axis(ndarray::Axis(0), idx).to_owned()
    }
}

/// A binary lesion mask aligned to its parent [`Volume`] grid.
#[derive(Debug, Clone)]
pub struct LesionMask {
    pub patient_id: String,
    pub lesion_id: String,
    pub significance: Significance,
    pub mask: Array3<u8>,
}

impl LesionMask {
    /// Build a mask, validating non-emptiness.
    pub fn new(
        patient_id: impl Into<String>,
        lesion_id: impl Into<String>,
        significance: Significance,
        mask: Array3<u8>,
    ) -> Result<LesionMask, DomainError> {
        if !mask.iter().any(|&v| v != 0) {
            return Err(DomainError::InvalidMask(
                "mask contains no nonzero voxel".into(),
            ));
        }
        Ok(LesionMask {
            patient_id: patient_id.into(),
            lesion_id: lesion_id.into(),
            significance,
            mask,
        })
    }

    /// Check alignment against the parent volume's grid.
    pub fn check_aligned(&self, volume: &Volume) -> Result<(), DomainError> {
        if self.mask.dim() != volume.voxels.dim() {
            return Err(DomainError::Misaligned(format!(
                "mask {} is {:?} but volume {}/{} is {:?}",
                self.lesion_id,
                self.mask.dim(),
                volume.patient_id,
                volume.modality.as_str(),
                volume.voxels.dim()
            )));
        }
        Ok(())
    }

    /// Does the mask have any nonzero voxel on slice `idx`?
    pub fn intersects_slice(&self, idx: usize) -> bool {
        self.mask
            .index_axis(ndarray::Axis(0), idx)
            .iter()
            .any(|&v| v != 0)
    }
}

/// One labeled 2D slice: the unit of the triage classification task.
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub patient_id: String,
    pub modality: Modality,
    pub slice_index: usize,
    pub image: Array2<f32>,
    /// 1 iff the slice intersects at least one CS lesion voxel.
    pub label: u8,
}
