//! Slice labeling from lesion masks and patient-level stratified splitting.
//!
//! Only lesion-bearing slices enter the dataset; a slice's label is 1 iff it
//! intersects at least one CS lesion voxel. Splitting assigns whole patients
//! to sets so no patient's slices can leak across train/test/validation.

use crate::types::{LesionMask, Significance, SliceSample, Volume};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("sizing error: {0}")]
    Sizing(String),
    #[error("validation error: {0}")]
    Validation(String),
}

/// Which split a patient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSet {
    Train,
    Test,
    Val,
}

impl SplitSet {
    pub const ALL: [SplitSet; 3] = [SplitSet::Train, SplitSet::Test, SplitSet::Val];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitSet::Train => "train",
            SplitSet::Test => "test",
            SplitSet::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Option<SplitSet> {
        match s {
            "train" => Some(SplitSet::Train),
            "test" => Some(SplitSet::Test),
            "val" => Some(SplitSet::Val),
            _ => None,
        }
    }
}

/// Fractions for (train, test, val); must be positive and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub test: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.70,
            test: 0.20,
            val: 0.10,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<(), CohortError> {
        for (name, f) in [("train", self.train), ("test", self.test), ("val", self.val)] {
            if !(f > 0.0) {
                return Err(CohortError::Validation(format!(
                    "fraction {name} must be positive, got {f}"
                )));
            }
        }
        let sum = self.train + self.test + self.val;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CohortError::Validation(format!(
                "fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    fn get(&self, set: SplitSet) -> f64 {
        match set {
            SplitSet::Train => self.train,
            SplitSet::Test => self.test,
            SplitSet::Val => self.val,
        }
    }
}

/// Per-patient statistics that drive the split (one modality as basis;
/// label structure is identical across modalities of the same patient).
#[derive(Debug, Clone)]
pub struct PatientStats {
    pub patient_id: String,
    pub n_cs_slices: usize,
    pub n_ncs_slices: usize,
}

impl PatientStats {
    /// Stratum: does this patient carry at least one CS lesion slice?
    pub fn is_cs_patient(&self) -> bool {
        self.n_cs_slices > 0
    }

    pub fn from_samples(samples: &[SliceSample]) -> Vec<PatientStats> {
        let mut by_patient: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for s in samples {
            let e = by_patient.entry(s.patient_id.clone()).or_insert((0, 0));
            if s.label == 1 {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
        }
        by_patient
            .into_iter()
            .map(|(patient_id, (cs, ncs))| PatientStats {
                patient_id,
                n_cs_slices: cs,
                n_ncs_slices: ncs,
            })
            .collect()
    }
}

/// Per-set bookkeeping recorded in the manifest.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetCounts {
    pub patients: usize,
    pub slices: usize,
    pub cs_slices: usize,
    pub ncs_slices: usize,
}

/// Result of a stratified patient-level split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub assignments: BTreeMap<String, SplitSet>,
    pub seed: u64,
    pub fractions: SplitFractions,
    pub counts: BTreeMap<SplitSet, SetCounts>,
}

impl SplitManifest {
    pub fn patients_in(&self, set: SplitSet) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &s)| s == set)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn set_of(&self, patient_id: &str) -> Option<SplitSet> {
        self.assignments.get(patient_id).copied()
    }

    /// CSV serialization: header then `patient_id,set` rows, sorted by id.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("patient_id,set\n");
        for (p, s) in &self.assignments {
            let _ = writeln!(out, "{},{}", p, s.as_str());
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<BTreeMap<String, SplitSet>, CohortError> {
        let mut out = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line.trim() != "patient_id,set" {
                    return Err(CohortError::Validation(format!(
                        "bad CSV header: {line:?}"
                    )));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (p, s) = line
                .split_once(',')
                .ok_or_else(|| CohortError::Validation(format!("bad CSV row: {line:?}")))?;
            let set = SplitSet::parse(s.trim())
                .ok_or_else(|| CohortError::Validation(format!("bad set name: {s:?}")))?;
            out.insert(p.trim().to_string(), set);
        }
        Ok(out)
    }
}

/// Emit one labeled sample per lesion-bearing slice of `volume`.
///
/// The label is 1 iff any intersecting lesion is CS; slices with no lesion
/// voxels at all are excluded.
pub fn label_slices(
    volume: &Volume,
    masks: &[LesionMask],
) -> Result<Vec<SliceSample>, CohortError> {
    for m in masks {
        m.check_aligned(volume)
            .map_err(|e| CohortError::Alignment(e.to_string()))?;
    }
    let mut out = Vec::new();
    for s in 0..volume.n_slices() {
        let mut any = false;
        let mut cs = false;
        for m in masks {
            if m.intersects_slice(s) {
                any = true;
                if m.significance == Significance::CS {
                    cs = true;
                }
            }
        }
        if any {
            out.push(SliceSample {
                patient_id: volume.patient_id.clone(),
                modality: volume.modality,
                slice_index: s,
                image: volume.slice_image(s),
                label: if cs { 1 } else { 0 },
            });
        }
    }
    Ok(out)
}

/// Split patients into train/test/val, stratified on "has a CS lesion".
///
/// Within each stratum, set sizes come from largest-remainder rounding of
/// `stratum_size * fraction` (remainder ties broken in train/test/val
/// order); patients are assigned after a canonical sort and a seeded
/// shuffle, which makes the manifest independent of input order.
pub fn stratified_patient_split(
    patients: &[PatientStats],
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitManifest, CohortError> {
    fractions.validate()?;
    if patients.len() < 3 {
        return Err(CohortError::Sizing(format!(
            "need at least 3 patients, got {}",
            patients.len()
        )));
    }
    {
        let mut ids: Vec<&str> = patients.iter().map(|p| p.patient_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != patients.len() {
            return Err(CohortError::Validation("duplicate patient ids".into()));
        }
    }

    let mut strata: [Vec<&PatientStats>; 2] = [Vec::new(), Vec::new()];
    for p in patients {
        strata[if p.is_cs_patient() { 1 } else { 0 }].push(p);
    }

    let mut assignments: BTreeMap<String, SplitSet> = BTreeMap::new();
    for (stratum_idx, stratum) in strata.iter_mut().enumerate() {
        if stratum.is_empty() {
            continue;
        }
        stratum.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        let sizes = largest_remainder(stratum.len(), fractions);
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(stratum_idx as u64),
        );
        let mut order: Vec<usize> = (0..stratum.len()).collect();
        order.shuffle(&mut rng);
        let mut cursor = 0usize;
        for (set, n) in SplitSet::ALL.iter().zip(sizes.iter()) {
            for &i in &order[cursor..cursor + n] {
                assignments.insert(stratum[i].patient_id.clone(), *set);
            }
            cursor += n;
        }
    }

    let mut counts: BTreeMap<SplitSet, SetCounts> = BTreeMap::new();
    for set in SplitSet::ALL {
        counts.insert(set, SetCounts::default());
    }
    for p in patients {
        let set = assignments[&p.patient_id];
        let c = counts.get_mut(&set).expect("all sets present");
        c.patients += 1;
        c.slices += p.n_cs_slices + p.n_ncs_slices;
        c.cs_slices += p.n_cs_slices;
        c.ncs_slices += p.n_ncs_slices;
    }
    for set in SplitSet::ALL {
        if counts[&set].patients == 0 {
            return Err(CohortError::Sizing(format!(
                "split would leave the {} set empty",
                set.as_str()
            )));
        }
    }

    Ok(SplitManifest {
        assignments,
        seed,
        fractions,
        counts,
    })
}

/// Largest-remainder apportionment of `n` items to the three sets.
/// Remainder ties go to the earlier set in train/test/val order.
pub fn largest_remainder(n: usize, fractions: SplitFractions) -> [usize; 3] {
    let quotas: Vec<f64> = SplitSet::ALL
        .iter()
        .map(|&s| n as f64 * fractions.get(s))
        .collect();
    let mut sizes: [usize; 3] = [0; 3];
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(3);
    let mut assigned = 0usize;
    for (i, q) in quotas.iter().enumerate() {
        sizes[i] = q.floor() as usize;
        assigned += sizes[i];
        remainders.push((i, q - q.floor()));
    }
    // Stable sort keeps set order for equal remainders.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let mut left = n - assigned;
    for (i, _) in remainders {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}
