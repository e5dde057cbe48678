//! Deterministic synthetic phantom cohorts for desk-scale experiments.
//!
//! Each patient gets one volume per modality plus aligned lesion masks.
//! Lesions are Gaussian-profile blobs placed with a spatial bias toward a
//! central gland region, bright on T2w and dark on ADC. CS lesions are
//! larger and stronger than NCS ones, so the discriminative signal lives at
//! patch scale: a patch containing the lesion separates the classes far
//! better than whole-slice statistics do.

use crate::types::{LesionMask, Modality, Significance, Volume};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub n_patients: usize,
    /// Fraction of patients carrying a CS lesion (exact up to rounding).
    pub cs_fraction: f64,
    pub t2w_hw: (usize, usize),
    pub adc_hw: (usize, usize),
    #[serde(default = "default_slices")]
    pub slices_per_volume: usize,
    /// Peak lesion intensity added to (T2w) or subtracted from (ADC) the
    /// background, before noise.
    #[serde(default = "default_contrast")]
    pub lesion_contrast: f64,
    /// Standard deviation of the additive Gaussian pixel noise.
    #[serde(default = "default_noise")]
    pub noise_level: f64,
    pub seed: u64,
}

fn default_slices() -> usize {
    6
}

fn default_contrast() -> f64 {
    0.5
}

fn default_noise() -> f64 {
    0.08
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.n_patients < 2 {
            return Err(PhantomError::Invalid(format!(
                "n_patients must be >= 2, got {}",
                self.n_patients
            )));
        }
        if !(self.cs_fraction > 0.0 && self.cs_fraction < 1.0) {
            return Err(PhantomError::Invalid(format!(
                "cs_fraction must be in (0,1), got {}",
                self.cs_fraction
            )));
        }
        for (name, (h, w)) in [("t2w_hw", self.t2w_hw), ("adc_hw", self.adc_hw)] {
            if h < 8 || w < 8 {
                return Err(PhantomError::Invalid(format!(
                    "{name} must be at least 8x8, got {h}x{w}"
                )));
            }
        }
        if self.slices_per_volume < 2 {
            return Err(PhantomError::Invalid(format!(
                "slices_per_volume must be >= 2, got {}",
                self.slices_per_volume
            )));
        }
        if !(self.lesion_contrast > 0.0) {
            return Err(PhantomError::Invalid(format!(
                "lesion_contrast must be > 0, got {}",
                self.lesion_contrast
            )));
        }
        if self.noise_level < 0.0 {
            return Err(PhantomError::Invalid(format!(
                "noise_level must be >= 0, got {}",
                self.noise_level
            )));
        }
        Ok(())
    }

    pub fn hw(&self, modality: Modality) -> (usize, usize) {
        match modality {
            Modality::T2w => self.t2w_hw,
            Modality::Adc => self.adc_hw,
        }
    }
}

/// Lesion geometry in normalized coordinates, shared across modalities.
#[derive(Debug, Clone)]
struct LesionGeom {
    significance: Significance,
    /// Centre in [0,1]^2 (row, col).
    cy: f64,
    cx: f64,
    /// In-plane radius as a fraction of the smaller image dim.
    radius: f64,
    /// Slice centre and through-plane spread (in slice units).
    zc: f64,
    sigma_z: f64,
    /// Intensity multiplier relative to `lesion_contrast`.
    strength: f64,
}

/// Mask threshold on the radial profile; independent of noise so the mask
/// shape is exactly reproducible.
const MASK_PROFILE_THRESHOLD: f64 = 0.35;
const Z_PROFILE_THRESHOLD: f64 = 0.4;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on explicit uniforms keeps the stream portable.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn patient_rng(seed: u64, patient: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(patient as u64 + 1),
    )
}

fn draw_lesions(rng: &mut ChaCha8Rng, cs_patient: bool, n_slices: usize) -> Vec<LesionGeom> {
    let mut lesions = Vec::new();
    let n_extra_ncs = usize::from(rng.gen_bool(0.4));
    let kinds: Vec<Significance> = if cs_patient {
        std::iter::once(Significance::CS)
            .chain(std::iter::repeat(Significance::NCS).take(n_extra_ncs))
            .collect()
    } else {
        vec![Significance::NCS; 1 + n_extra_ncs]
    };
    for significance in kinds {
        // Central bias: most lesions land in the middle of the gland.
        let cy = (0.5 + 0.12 * normal(rng)).clamp(0.22, 0.78);
        let cx = (0.5 + 0.12 * normal(rng)).clamp(0.22, 0.78);
        let (radius, strength) = match significance {
            Significance::CS => (rng.gen_range(0.07..0.10), 1.0),
            Significance::NCS => (rng.gen_range(0.035..0.055), 0.55),
        };
        let zc = rng.gen_range(0.8..(n_slices as f64 - 1.8).max(0.81));
        let sigma_z = rng.gen_range(0.55..0.9);
        lesions.push(LesionGeom {
            significance,
            cy,
            cx,
            radius,
            zc,
            sigma_z,
            strength,
        });
    }
    lesions
}

fn z_profile(geom: &LesionGeom, s: usize) -> f64 {
    let dz = s as f64 - geom.zc;
    (-dz * dz / (2.0 * geom.sigma_z * geom.sigma_z)).exp()
}

/// Build the volume and per-lesion masks for one patient and modality.
fn render_volume(
    spec: &PhantomSpec,
    patient_id: &str,
    modality: Modality,
    lesions: &[LesionGeom],
    rng: &mut ChaCha8Rng,
) -> (Volume, Vec<LesionMask>) {
    let (h, w) = spec.hw(modality);
    let n_slices = spec.slices_per_volume;
    let sign = match modality {
        Modality::T2w => 1.0,
        Modality::Adc => -1.0,
    };
    let min_dim = h.min(w) as f64;
    let gland_sigma = 0.25 * min_dim;
    let cy0 = (h as f64 - 1.0) / 2.0;
    let cx0 = (w as f64 - 1.0) / 2.0;

    let mut voxels = Array3::<f32>::zeros((n_slices, h, w));
    for s in 0..n_slices {
        for y in 0..h {
            for x in 0..w {
                let dgy = y as f64 - cy0;
                let dgx = x as f64 - cx0;
                let gland = 0.10
                    * (-(dgy * dgy + dgx * dgx) / (2.0 * gland_sigma * gland_sigma)).exp();
                let mut v = 0.45 + gland + spec.noise_level * normal(rng);
                for geom in lesions {
                    let zz = z_profile(geom, s);
                    if zz < 1e-4 {
                        continue;
                    }
                    let ly = geom.cy * (h as f64 - 1.0);
                    let lx = geom.cx * (w as f64 - 1.0);
                    let sigma = geom.radius * min_dim;
                    let d2 = (y as f64 - ly).powi(2) + (x as f64 - lx).powi(2);
                    let profile = (-d2 / (2.0 * sigma * sigma)).exp();
                    v += sign * spec.lesion_contrast * geom.strength * zz * profile;
                }
                voxels[[s, y, x]] = v as f32;
            }
        }
    }
    let volume = Volume::new(
        patient_id,
        modality,
        voxels,
        match modality {
            Modality::T2w => (0.5, 0.5),
            Modality::Adc => (2.0, 2.0),
        },
        3.6,
    )
    .expect("phantom volumes are finite by construction");

    let mut masks = Vec::new();
    for (i, geom) in lesions.iter().enumerate() {
        let mut m = Array3::<u8>::zeros((n_slices, h, w));
        let ly = geom.cy * (h as f64 - 1.0);
        let lx = geom.cx * (w as f64 - 1.0);
        let sigma = geom.radius * min_dim;
        for s in 0..n_slices {
            if z_profile(geom, s) < Z_PROFILE_THRESHOLD {
                continue;
            }
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - ly).powi(2) + (x as f64 - lx).powi(2);
                    if (-d2 / (2.0 * sigma * sigma)).exp() >= MASK_PROFILE_THRESHOLD {
                        m[[s, y, x]] = 1;
                    }
                }
            }
        }
        // The centre voxel of the nearest slice always qualifies:
        // both profiles are ~1 there.
        let sc = (geom.zc.round() as usize).min(n_slices - 1);
        m[[sc, ly.round() as usize, lx.round() as usize]] = 1;
        masks.push(
            LesionMask::new(
                patient_id,
                format!("l{i}"),
                geom.significance,
                m,
            )
            .expect("mask has at least the centre voxel"),
        );
    }
    (volume, masks)
}

/// Generate the cohort: one (volume, masks) entry per patient and modality,
/// ordered by patient id then modality. Deterministic given the spec.
pub fn generate_phantom_cohort(
    spec: &PhantomSpec,
) -> Result<Vec<(Volume, Vec<LesionMask>)>, PhantomError> {
    spec.validate()?;
    let n = spec.n_patients;
    // Exact CS share up to rounding, clamped so both classes exist.
    let n_cs = ((n as f64 * spec.cs_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut assign_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xA5A5_5A5A_DEAD_BEEF);
    order.shuffle(&mut assign_rng);
    let mut is_cs = vec![false; n];
    for &i in order.iter().take(n_cs) {
        is_cs[i] = true;
    }

    let mut out = Vec::with_capacity(n * 2);
    for i in 0..n {
        let patient_id = format!("p{:04}", i);
        let mut rng = patient_rng(spec.seed, i);
        let lesions = draw_lesions(&mut rng, is_cs[i], spec.slices_per_volume);
        for modality in Modality::ALL {
            let (volume, masks) = render_volume(spec, &patient_id, modality, &lesions, &mut rng);
            for m in &masks {
                debug_assert!(m.check_aligned(&volume).is_ok());
            }
            out.push((volume, masks));
        }
    }
    Ok(out)
}
