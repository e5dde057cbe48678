//! Non-overlapping patch grids, patch extraction, lesion-frequency maps and
//! top-k patch pre-selection.
//!
//! Grids tile the image exactly (no padding, no offset), so patch counts obey
//! `|patches| = cells_selected * n_slices` and reassembling all patches in
//! row-major order reconstructs the slice bit-exactly.

use crate::types::{Modality, SliceSample};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// Minimum patch edge supported by the backbone families.
pub const MIN_PATCH_SIZE: usize = 32;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("tiling error: {0}")]
    Tiling(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    TensorIo(#[from] crate::io::TensorIoError),
}

/// An exact non-overlapping tiling of an image into square patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_hw: (usize, usize),
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    /// All cells in row-major order.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_cells());
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push((r, c));
            }
        }
        out
    }
}

/// One extracted patch; the label is inherited from the parent slice.
#[derive(Debug, Clone)]
pub struct Patch {
    pub patient_id: String,
    pub modality: Modality,
    pub slice_index: usize,
    pub grid_cell: (usize, usize),
    pub pixels: Array2<f32>,
    pub label: u8,
}

/// Per-cell count of training slices whose lesion mask intersects the cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyMap {
    pub grid: PatchGrid,
    pub counts: Vec<Vec<usize>>,
}

/// Build the grid; image dims must be exact multiples of `patch_size`.
pub fn make_grid(image_hw: (usize, usize), patch_size: usize) -> Result<PatchGrid, PatchError> {
    if patch_size < MIN_PATCH_SIZE {
        return Err(PatchError::Validation(format!(
            "patch_size must be >= {MIN_PATCH_SIZE}, got {patch_size}"
        )));
    }
    let (h, w) = image_hw;
    if h % patch_size != 0 || w % patch_size != 0 {
        return Err(PatchError::Tiling(format!(
            "image {h}x{w} is not divisible by patch size {patch_size} (no padding permitted)"
        )));
    }
    let rows = h / patch_size;
    let cols = w / patch_size;
    if rows * cols == 0 {
        return Err(PatchError::Tiling("grid has no cells".into()));
    }
    Ok(PatchGrid {
        image_hw,
        patch_size,
        rows,
        cols,
    })
}

/// Extract the (selected) patches of one slice, in row-major cell order.
pub fn extract_patches(
    sample: &SliceSample,
    grid: &PatchGrid,
    selection: Option<&BTreeSet<(usize, usize)>>,
) -> Result<Vec<Patch>, PatchError> {
    if sample.image.dim() != grid.image_hw {
        return Err(PatchError::Validation(format!(
            "sample {:?} does not match grid image {:?}",
            sample.image.dim(),
            grid.image_hw
        )));
    }
    if let Some(sel) = selection {
        for &(r, c) in sel {
            if r >= grid.rows || c >= grid.cols {
                return Err(PatchError::Validation(format!(
                    "selected cell ({r},{c}) out of range for {}x{} grid",
                    grid.rows, grid.cols
                )));
            }
        }
    }
    let p = grid.patch_size;
    let mut out = Vec::new();
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            if let Some(sel) = selection {
                if !sel.contains(&(r, c)) {
                    continue;
                }
            }
            let pixels = sample
                .image
                .slice(s![r * p..(r + 1) * p, c * p..(c + 1) * p])
                .to_owned();
            out.push(Patch {
                patient_id: sample.patient_id.clone(),
                modality: sample.modality,
                slice_index: sample.slice_index,
                grid_cell: (r, c),
                pixels,
                label: sample.label,
            });
        }
    }
    Ok(out)
}

/// Count, per grid cell, how many training slices have a lesion voxel there.
///
/// `slice_masks` holds one combined (all-lesion) 2D mask per training slice.
/// Evaluation-time data never feeds this function; selection is decided from
/// the training split alone.
pub fn lesion_frequency_map(
    slice_masks: &[Array2<u8>],
    grid: &PatchGrid,
) -> Result<FrequencyMap, PatchError> {
    let mut counts = vec![vec![0usize; grid.cols]; grid.rows];
    let p = grid.patch_size;
    for (i, mask) in slice_masks.iter().enumerate() {
        if mask.dim() != grid.image_hw {
            return Err(PatchError::Alignment(format!(
                "slice mask {} is {:?}, grid expects {:?}",
                i,
                mask.dim(),
                grid.image_hw
            )));
        }
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let cell = mask.slice(s![r * p..(r + 1) * p, c * p..(c + 1) * p]);
                if cell.iter().any(|&v| v != 0) {
                    counts[r][c] += 1;
                }
            }
        }
    }
    Ok(FrequencyMap {
        grid: *grid,
        counts,
    })
}

/// The `k` cells with highest counts; ties broken by row-major cell order.
pub fn select_top_k(freq: &FrequencyMap, k: usize) -> Result<Vec<(usize, usize)>, PatchError> {
    let n = freq.grid.n_cells();
    if k < 1 || k > n {
        return Err(PatchError::Validation(format!(
            "k must be in 1..={n}, got {k}"
        )));
    }
    let mut ranked: Vec<((usize, usize), usize)> = Vec::with_capacity(n);
    for r in 0..freq.grid.rows {
        for c in 0..freq.grid.cols {
            ranked.push(((r, c), freq.counts[r][c]));
        }
    }
    // Stable sort by descending count keeps row-major order among ties.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    Ok(ranked.into_iter().take(k).map(|(cell, _)| cell).collect())
}

/// Offline patch export: one portable tensor per patch plus an index CSV.
///
/// Files are named `<patient>_<slice>_<row>_<col>.ptnsr`; the CSV has the
/// columns `patient,slice,row,col,label`.
pub fn export_patches(patches: &[Patch], dir: &Path) -> Result<(), PatchError> {
    std::fs::create_dir_all(dir)?;
    let mut index = String::from("patient,slice,row,col,label\n");
    for p in patches {
        let name = format!(
            "{}_{}_{}_{}.ptnsr",
            p.patient_id, p.slice_index, p.grid_cell.0, p.grid_cell.1
        );
        crate::io::write_tensor2(&dir.join(name), &p.pixels)?;
        let _ = writeln!(
            index,
            "{},{},{},{},{}",
            p.patient_id, p.slice_index, p.grid_cell.0, p.grid_cell.1, p.label
        );
    }
    std::fs::write(dir.join("index.csv"), index)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(hw: (usize, usize), label: u8) -> SliceSample {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        SliceSample {
            patient_id: "p0".into(),
            modality: Modality::T2w,
            slice_index: 0,
            image: Array2::from_shape_fn(hw, |_| rng.gen_range(0.0f32..1.0)),
            label,
        }
    }

    #[test]
    fn grid_examples() {
        let g = make_grid((320, 320), 80).unwrap();
        assert_eq!((g.rows, g.cols, g.n_cells()), (4, 4, 16));
        let g = make_grid((128, 128), 64).unwrap();
        assert_eq!((g.rows, g.cols, g.n_cells()), (2, 2, 4));
        assert!(matches!(
            make_grid((320, 320), 96),
            Err(PatchError::Tiling(_))
        ));
        assert!(matches!(
            make_grid((320, 320), 16),
            Err(PatchError::Validation(_))
        ));
    }

    #[test]
    fn degenerate_grid_single_patch_equals_slice() {
        let s = sample((64, 64), 1);
        let g = make_grid((64, 64), 64).unwrap();
        let patches = extract_patches(&s, &g, None).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].pixels, s.image);
        assert_eq!(patches[0].label, 1);
    }

    #[test]
    fn patches_reassemble_slice_exactly() {
        let s = sample((128, 128), 0);
        let g = make_grid((128, 128), 32).unwrap();
        let patches = extract_patches(&s, &g, None).unwrap();
        assert_eq!(patches.len(), 16);
        let mut rebuilt = Array2::<f32>::zeros((128, 128));
        for p in &patches {
            let (r, c) = p.grid_cell;
            rebuilt
                .slice_mut(s![r * 32..(r + 1) * 32, c * 32..(c + 1) * 32])
                .assign(&p.pixels);
        }
        assert_eq!(rebuilt, s.image);
    }

    #[test]
    fn selection_restricts_cells() {
        let s = sample((128, 128), 1);
        let g = make_grid((128, 128), 32).unwrap();
        let sel: BTreeSet<(usize, usize)> = [(0, 0), (3, 3)].into_iter().collect();
        let patches = extract_patches(&s, &g, Some(&sel)).unwrap();
        assert_eq!(patches.len(), 2);
        assert_eq!(patches[0].grid_cell, (0, 0));
        assert_eq!(patches[1].grid_cell, (3, 3));
    }

    #[test]
    fn selection_out_of_range_is_error() {
        let s = sample((128, 128), 1);
        let g = make_grid((128, 128), 32).unwrap();
        let sel: BTreeSet<(usize, usize)> = [(4, 0)].into_iter().collect();
        assert!(extract_patches(&s, &g, Some(&sel)).is_err());
    }

    #[test]
    fn frequency_map_point_mass() {
        let g = make_grid((128, 128), 32).unwrap();
        let mut mask = Array2::<u8>::zeros((128, 128));
        mask[[40, 40]] = 1; // cell (1,1)
        let f = lesion_frequency_map(&[mask], &g).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expect = usize::from((r, c) == (1, 1));
                assert_eq!(f.counts[r][c], expect);
            }
        }
    }

    #[test]
    fn frequency_map_two_disjoint_lesions() {
        let g = make_grid((128, 128), 32).unwrap();
        let mut m1 = Array2::<u8>::zeros((128, 128));
        m1[[10, 10]] = 1; // cell (0,0)
        let mut m2 = Array2::<u8>::zeros((128, 128));
        m2[[100, 100]] = 1; // cell (3,3)
        let f = lesion_frequency_map(&[m1, m2], &g).unwrap();
        let total: usize = f.counts.iter().flatten().sum();
        assert_eq!(total, 2);
        assert_eq!(f.counts[0][0], 1);
        assert_eq!(f.counts[3][3], 1);
    }

    #[test]
    fn frequency_map_alignment_error() {
        let g = make_grid((128, 128), 32).unwrap();
        let mask = Array2::<u8>::zeros((64, 64));
        assert!(matches!(
            lesion_frequency_map(&[mask], &g),
            Err(PatchError::Alignment(_))
        ));
    }

    #[test]
    fn top_k_full_selection() {
        let g = make_grid((128, 128), 32).unwrap();
        let f = FrequencyMap {
            grid: g,
            counts: vec![vec![0; 4]; 4],
        };
        let cells = select_top_k(&f, 16).unwrap();
        assert_eq!(cells, g.cells());
    }

    #[test]
    fn top_k_tie_break_row_major() {
        let g = make_grid((64, 64), 32).unwrap();
        let f = FrequencyMap {
            grid: g,
            counts: vec![vec![3, 1], vec![2, 2]],
        };
        let cells = select_top_k(&f, 2).unwrap();
        assert_eq!(cells, vec![(0, 0), (1, 0)]);
        assert!(select_top_k(&f, 0).is_err());
        assert!(select_top_k(&f, 5).is_err());
    }

    #[test]
    fn export_writes_files_and_index() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample((64, 64), 1);
        let g = make_grid((64, 64), 32).unwrap();
        let patches = extract_patches(&s, &g, None).unwrap();
        export_patches(&patches, dir.path()).unwrap();
        let index = std::fs::read_to_string(dir.path().join("index.csv")).unwrap();
        assert_eq!(index.lines().count(), 5); // header + 4 patches
        let back = crate::io::read_tensor(&dir.path().join("p0_0_0_0.ptnsr"))
            .unwrap()
            .into_d2()
            .unwrap();
        assert_eq!(back, patches[0].pixels);
    }
}
