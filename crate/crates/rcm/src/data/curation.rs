//! The curation pipeline: teacher corpus generation, top-fraction quality
//! filtering, hard-example mining with contrastive failure weighting, and
//! synthetic/real mixing.

use super::{Category, ClipRecord, CuratedDataset, Flags, Origin, WorldConfig};
use crate::diffusion;
use crate::error::{Error, Result};
use crate::model::ToyTransformer;
use crate::rng::DeterministicRng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CurationConfig {
    /// Prompts per category for the base corpus.
    pub prompts_per_category: usize,
    /// Denoising steps for teacher generation.
    pub teacher_steps: usize,
    /// Guidance scale for teacher generation.
    pub guidance: f64,
    /// Fraction of generations kept by the quality filter.
    pub keep_fraction: f64,
    /// Physics/smoothness blend of the quality score.
    pub physics_blend: f64,
    /// Extra generation requested per prompt in hard categories.
    pub oversample: usize,
    /// Sampling-weight multiplier for retained failures.
    pub failure_weight: f64,
    /// Detector threshold separating pass from failure.
    pub physics_threshold: f64,
    /// Synthetic share of the mixed dataset.
    pub synthetic_fraction: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            prompts_per_category: 24,
            teacher_steps: 50,
            guidance: 1.0,
            keep_fraction: 0.3,
            physics_blend: 0.5,
            oversample: 5,
            failure_weight: 0.2,
            physics_threshold: 0.7,
            synthetic_fraction: 0.7,
        }
    }
}

/// Generate and score one teacher clip per prompt index for a category.
pub fn build_teacher_corpus(
    teacher: &ToyTransformer,
    category: Category,
    count: usize,
    sched: &NoiseSchedule,
    world: &WorldConfig,
    cfg: &CurationConfig,
    seed: u64,
    first_id: u64,
) -> Result<Vec<ClipRecord>> {
    let clips = diffusion::teacher_sample(
        teacher,
        count,
        cfg.teacher_steps,
        category.index(),
        seed ^ (category.index() as u64).wrapping_mul(0x9e37),
        sched,
        cfg.guidance,
    )?;
    clips
        .into_iter()
        .enumerate()
        .map(|(i, frames)| {
            let physics = super::physics_score(&frames, world)?;
            let quality = super::quality_score(&frames, world, cfg.physics_blend)?;
            Ok(ClipRecord {
                id: first_id + i as u64,
                category,
                frames,
                origin: Origin::Teacher,
                quality,
                physics,
                weight: 1.0,
                flags: Flags::default(),
            })
        })
        .collect()
}

/// Keep the best `floor(keep_fraction * N)` records by quality, ties broken
/// by ascending id. Output preserves the input order of the survivors.
pub fn quality_filter(records: &[ClipRecord], keep_fraction: f64) -> Result<Vec<ClipRecord>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("quality_filter"));
    }
    if !(0.0 < keep_fraction && keep_fraction <= 1.0) {
        return Err(Error::Config(format!("keep_fraction {keep_fraction} outside (0, 1]")));
    }
    let keep = ((keep_fraction * records.len() as f64).floor() as usize).min(records.len());
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .quality
            .total_cmp(&records[a].quality)
            .then(records[a].id.cmp(&records[b].id))
    });
    let mut selected = vec![false; records.len()];
    for &idx in order.iter().take(keep) {
        selected[idx] = true;
    }
    Ok(records
        .iter()
        .zip(&selected)
        .filter(|(_, &s)| s)
        .map(|(r, _)| r.clone())
        .collect())
}

/// Mark categories whose mean detector score falls below `threshold` as
/// hard, request `oversample x` extra generation per existing record in
/// them, and retain failing records at `failure_weight x` their weight.
/// Passing records are never deleted.
pub fn hard_mine<D, G>(
    records: &[ClipRecord],
    detector: D,
    mut generator: G,
    oversample: usize,
    failure_weight: f64,
    threshold: f64,
) -> Result<Vec<ClipRecord>>
where
    D: Fn(&ClipRecord) -> f64,
    G: FnMut(Category, usize) -> Result<Vec<ClipRecord>>,
{
    if oversample < 1 {
        return Err(Error::Config("oversample must be >= 1".into()));
    }
    if !(0.0 < failure_weight && failure_weight <= 1.0) {
        return Err(Error::Config(format!("failure_weight {failure_weight} outside (0, 1]")));
    }

    let mut hard = Vec::new();
    for category in Category::ALL {
        let scores: Vec<f64> = records
            .iter()
            .filter(|r| r.category == category)
            .map(&detector)
            .collect();
        if scores.is_empty() {
            continue;
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        if mean < threshold {
            hard.push((category, scores.len()));
        }
    }

    let mut out = records.to_vec();
    for &(category, base) in &hard {
        let mined = generator(category, oversample * base)?;
        out.extend(mined);
    }
    for r in &mut out {
        if hard.iter().any(|&(c, _)| c == r.category) {
            r.flags.hard_category = true;
            if detector(r) < threshold {
                r.flags.failure = true;
                r.weight *= failure_weight;
            }
        }
    }
    Ok(out)
}

/// Combine pools at a synthetic:real ratio. All synthetic records are kept;
/// the real pool is subsampled (ascending id) to the round-nearest count
/// that realises the ratio, within one record.
pub fn mix_dataset(
    synthetic: Vec<ClipRecord>,
    real: Vec<ClipRecord>,
    synthetic_fraction: f64,
) -> Result<CuratedDataset> {
    if synthetic.is_empty() || real.is_empty() {
        return Err(Error::EmptyInput("mix_dataset"));
    }
    if !(0.0 < synthetic_fraction && synthetic_fraction < 1.0) {
        return Err(Error::Config(format!(
            "synthetic_fraction {synthetic_fraction} outside (0, 1)"
        )));
    }
    let n_s = synthetic.len();
    let need_real =
        ((n_s as f64) * (1.0 - synthetic_fraction) / synthetic_fraction).round() as usize;
    if need_real > real.len() || need_real == 0 {
        return Err(Error::MixInfeasible {
            need: need_real,
            have: real.len(),
            synthetic: n_s,
            fraction: synthetic_fraction,
        });
    }
    let mut real = real;
    real.sort_by_key(|r| r.id);
    real.truncate(need_real);
    let mut records = synthetic;
    records.extend(real);
    Ok(CuratedDataset::new(records))
}

/// Weighted sampling with replacement; probability proportional to record
/// weight. Zero-weight records are never drawn.
pub fn draw_batch<'a>(
    dataset: &'a CuratedDataset,
    batchsize: usize,
    rng: &mut DeterministicRng,
) -> Result<Vec<&'a ClipRecord>> {
    let mut cumulative = Vec::with_capacity(dataset.records.len());
    let mut total = 0.0;
    for r in &dataset.records {
        if r.weight < 0.0 {
            return Err(Error::Config(format!("negative weight on record {}", r.id)));
        }
        total += r.weight;
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(Error::EmptyInput("draw_batch: total weight is zero"));
    }
    Ok((0..batchsize)
        .map(|_| {
            let u = rng.uniform() * total;
            let idx = cumulative.partition_point(|&c| c <= u).min(dataset.records.len() - 1);
            &dataset.records[idx]
        })
        .collect())
}

/// The full pipeline: teacher corpus per category, top-fraction filter,
/// hard mining against the physics detector, then an optional mix with
/// exact simulator clips.
pub fn curate(
    teacher: &ToyTransformer,
    sched: &NoiseSchedule,
    world: &WorldConfig,
    cfg: &CurationConfig,
    seed: u64,
    with_real: bool,
) -> Result<CuratedDataset> {
    let mut next_id = 0u64;
    let mut corpus = Vec::new();
    for category in Category::ALL {
        let batch = build_teacher_corpus(
            teacher,
            category,
            cfg.prompts_per_category,
            sched,
            world,
            cfg,
            seed,
            next_id,
        )?;
        next_id += batch.len() as u64;
        corpus.extend(batch);
    }

    let filtered = quality_filter(&corpus, cfg.keep_fraction)?;

    let world2 = *world;
    let cfg2 = cfg.clone();
    let mut mine_round = 0u64;
    let mined = hard_mine(
        &filtered,
        |r| r.physics,
        |category, count| {
            mine_round += 1;
            let batch = build_teacher_corpus(
                teacher,
                category,
                count,
                sched,
                &world2,
                &cfg2,
                seed ^ 0x6d696e65 ^ mine_round,
                next_id,
            )?;
            next_id += batch.len() as u64;
            Ok(batch)
        },
        cfg.oversample,
        cfg.failure_weight,
        cfg.physics_threshold,
    )?;

    if !with_real {
        return Ok(CuratedDataset::new(mined));
    }

    let need_real = ((mined.len() as f64) * (1.0 - cfg.synthetic_fraction)
        / cfg.synthetic_fraction)
        .round() as usize;
    let prompts = super::generate_prompt_set(need_real.max(1), seed ^ 0x7265616c, world);
    let real: Vec<ClipRecord> = prompts
        .iter()
        .enumerate()
        .map(|(i, p)| super::simulate_real_clip(p, world, next_id + i as u64))
        .collect();
    mix_dataset(mined, real, cfg.synthetic_fraction)
}
