//! Toy clip data: exact-physics simulation, programmatic quality scoring,
//! and the curation pipeline (filtering, hard-example mining, mixing,
//! weighted sampling).

mod curation;
mod manifest;
mod simulate;

pub use curation::{
    build_teacher_corpus, curate, draw_batch, hard_mine, mix_dataset, quality_filter,
    CurationConfig,
};
pub use manifest::{read_manifest, write_manifest};
pub use simulate::{
    generate_prompt_set, physics_score, quality_score, simulate_real_clip, smoothness_score,
    two_mode_clip, two_mode_prototype, two_mode_training_set, PromptParams, TwoModeSpec,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum Category {
    EasyLinear,
    HardBounce,
    HardCollision,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::EasyLinear, Category::HardBounce, Category::HardCollision];

    pub fn index(self) -> usize {
        match self {
            Category::EasyLinear => 0,
            Category::HardBounce => 1,
            Category::HardCollision => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Malformed { what: "category", detail: format!("index {i}") })
    }

    pub fn label(self) -> &'static str {
        match self {
            Category::EasyLinear => "easy-linear",
            Category::HardBounce => "hard-bounce",
            Category::HardCollision => "hard-collision",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| Error::Malformed { what: "category", detail: s.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Origin {
    Teacher,
    SimulatorReal,
}

impl Origin {
    pub fn label(self) -> &'static str {
        match self {
            Origin::Teacher => "teacher",
            Origin::SimulatorReal => "simulator-real",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Origin::Teacher),
            "simulator-real" => Ok(Origin::SimulatorReal),
            other => Err(Error::Malformed { what: "origin", detail: other.to_string() }),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Flags {
    pub hard_category: bool,
    pub failure: bool,
}

/// One clip: a `[frames, 4]` tensor of two particle positions per frame,
/// plus its curation metadata.
#[derive(Debug, Clone)]
pub struct ClipRecord {
    pub id: u64,
    pub category: Category,
    pub frames: Tensor,
    pub origin: Origin,
    pub quality: f64,
    pub physics: f64,
    pub weight: f64,
    pub flags: Flags,
}

/// Geometry and scoring constants of the toy world. Walls sit at `±wall`
/// on both coordinates; all velocities are per frame.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct WorldConfig {
    pub frames: usize,
    pub wall: f64,
    /// Frames this close to a wall or to the other particle count as
    /// contact; scoring masks them out of the free-flight checks.
    pub contact_band: f64,
    /// Acceleration below this is free of penalty.
    pub accel_tol: f64,
    /// Penalty scale for acceleration spikes.
    pub accel_scale: f64,
    /// Penalty scale for wall penetration depth.
    pub penetration_scale: f64,
    /// Penalty scale for speed changes across contact events.
    pub speed_change_scale: f64,
    /// Speed changes below this are measurement noise, not violations.
    pub speed_tol: f64,
    /// Mean free-flight acceleration that zeroes the smoothness score.
    pub smooth_scale: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            wall: 1.0,
            contact_band: 0.22,
            accel_tol: 0.012,
            accel_scale: 1.0,
            penetration_scale: 0.25,
            speed_change_scale: 0.5,
            speed_tol: 1e-4,
            smooth_scale: 0.15,
        }
    }
}

pub const CHANNELS: usize = 4;

/// Per-(category, origin) record counts plus flag totals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub total: usize,
    pub synthetic: usize,
    pub real: usize,
    pub hard: usize,
    pub failures: usize,
    pub counts: BTreeMap<(Category, Origin), usize>,
}

impl Manifest {
    pub fn from_records(records: &[ClipRecord]) -> Self {
        let mut m = Manifest::default();
        for r in records {
            m.total += 1;
            match r.origin {
                Origin::Teacher => m.synthetic += 1,
                Origin::SimulatorReal => m.real += 1,
            }
            if r.flags.hard_category {
                m.hard += 1;
            }
            if r.flags.failure {
                m.failures += 1;
            }
            *m.counts.entry((r.category, r.origin)).or_default() += 1;
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct CuratedDataset {
    pub records: Vec<ClipRecord>,
    pub manifest: Manifest,
}

impl CuratedDataset {
    pub fn new(records: Vec<ClipRecord>) -> Self {
        let manifest = Manifest::from_records(&records);
        Self { records, manifest }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Rebuild the manifest and confirm it matches the stored one.
    pub fn manifest_consistent(&self) -> bool {
        Manifest::from_records(&self.records) == self.manifest
    }
}
