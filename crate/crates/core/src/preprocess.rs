//! Deterministic slice conditioning.
//!
//! Order of operations for intensity handling: clip to the chosen
//! percentiles first, then affinely map clip-min to 0 and clip-max to 1.
//! That order is the only one whose output is guaranteed to lie in [0, 1].

use ndarray::{Array2, Array3, ArrayViewD};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("validation error: {0}")]
    Validation(String),
}

/// Bilinear resample with corner-aligned sampling.
///
/// Output values never leave `[min(image), max(image)]` (convex combination
/// of input pixels), and resampling to the input dims is the exact identity.
pub fn resample_slice(
    image: &Array2<f32>,
    target_hw: (usize, usize),
) -> Result<Array2<f32>, PreprocessError> {
    let (h, w) = image.dim();
    let (th, tw) = target_hw;
    if h < 2 || w < 2 {
        return Err(PreprocessError::Validation(format!(
            "input dims must be >= 2x2, got {h}x{w}"
        )));
    }
    if th < 2 || tw < 2 {
        return Err(PreprocessError::Validation(format!(
            "target dims must be >= 2x2, got {th}x{tw}"
        )));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(PreprocessError::Validation(
            "input contains non-finite values".into(),
        ));
    }
    if (th, tw) == (h, w) {
        return Ok(image.clone());
    }

    let sy = (h - 1) as f64 / (th - 1) as f64;
    let sx = (w - 1) as f64 / (tw - 1) as f64;
    let mut out = Array2::<f32>::zeros((th, tw));
    for ty in 0..th {
        let fy = ty as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = (fy - y0 as f64) as f32;
        for tx in 0..tw {
            let fx = tx as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = (fx - x0 as f64) as f32;
            let v00 = image[[y0, x0]];
            let v01 = image[[y0, x1]];
            let v10 = image[[y1, x0]];
            let v11 = image[[y1, x1]];
            let top = v00 + (v01 - v00) * dx;
            let bot = v10 + (v11 - v10) * dx;
            out[[ty, tx]] = top + (bot - top) * dy;
        }
    }
    Ok(out)
}

/// Nearest-neighbour resample for binary masks (keeps values in {0,1}).
pub fn resample_mask_nearest(
    mask: &Array2<u8>,
    target_hw: (usize, usize),
) -> Result<Array2<u8>, PreprocessError> {
    let (h, w) = mask.dim();
    let (th, tw) = target_hw;
    if h < 2 || w < 2 || th < 2 || tw < 2 {
        return Err(PreprocessError::Validation(
            "mask and target dims must be >= 2x2".into(),
        ));
    }
    if (th, tw) == (h, w) {
        return Ok(mask.clone());
    }
    let sy = (h - 1) as f64 / (th - 1) as f64;
    let sx = (w - 1) as f64 / (tw - 1) as f64;
    let mut out = Array2::<u8>::zeros((th, tw));
    for ty in 0..th {
        let y = (ty as f64 * sy).round() as usize;
        for tx in 0..tw {
            let x = (tx as f64 * sx).round() as usize;
            out[[ty, tx]] = mask[[y.min(h - 1), x.min(w - 1)]];
        }
    }
    Ok(out)
}

/// Percentile of `values` with linear interpolation between order statistics.
///
/// `p` is in [0, 100]; rank = p/100 * (n-1).
pub fn percentile(values: &[f32], p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi.min(n - 1)] * frac
}

/// Clip to `[P(p_low), P(p_high)]` then map clip-min to 0 and clip-max to 1.
///
/// A constant image (degenerate clip range) maps to all zeros.
pub fn normalize_intensity(
    image: &Array2<f32>,
    p_low: f64,
    p_high: f64,
) -> Result<Array2<f32>, PreprocessError> {
    if !(0.0..=100.0).contains(&p_low) || !(0.0..=100.0).contains(&p_high) || p_low >= p_high {
        return Err(PreprocessError::Validation(format!(
            "need 0 <= p_low < p_high <= 100, got {p_low}, {p_high}"
        )));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(PreprocessError::Validation(
            "image contains non-finite values".into(),
        ));
    }
    let values: Vec<f32> = image.iter().copied().collect();
    let lo = percentile(&values, p_low);
    let hi = percentile(&values, p_high);
    let range = hi - lo;
    let out = if range <= 0.0 {
        Array2::<f32>::zeros(image.dim())
    } else {
        image.mapv(|v| {
            let clipped = (v as f64).clamp(lo, hi);
            ((clipped - lo) / range) as f32
        })
    };
    Ok(out)
}

/// Replicate a single-channel image over three channels, `(3, H, W)`.
///
/// Multi-channel input is a validation error.
pub fn replicate_channels(image: ArrayViewD<'_, f32>) -> Result<Array3<f32>, PreprocessError> {
    if image.ndim() != 2 {
        return Err(PreprocessError::Validation(format!(
            "expected single-channel 2D image, got rank {}",
            image.ndim()
        )));
    }
    let img = image
        .into_dimensionality::<ndarray::Ix2>()
        .expect("rank checked");
    let (h, w) = img.dim();
    let mut out = Array3::<f32>::zeros((3, h, w));
    for c in 0..3 {
        out.index_axis_mut(ndarray::Axis(0), c).assign(&img);
    }
    Ok(out)
}
