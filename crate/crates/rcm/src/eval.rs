//! Few-step sampling and the evaluation metrics: sliced Wasserstein
//! distance, mode coverage, physics quality, and consistency spread.

use crate::diffusion::{add_noise, integrate_pfode};
use crate::error::{Error, Result};
use crate::losses::ConsistencyStudent;
use crate::model::ToyTransformer;
use crate::rng::DeterministicRng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Anything that maps a noisy state and time to a clean-data prediction.
pub trait ConsistencyFn {
    fn predict(&self, x: &Tensor, t: f64, category: usize) -> Result<Tensor>;
    fn clip_shape(&self) -> [usize; 2];
}

impl ConsistencyFn for ConsistencyStudent {
    fn predict(&self, x: &Tensor, t: f64, category: usize) -> Result<Tensor> {
        self.apply(x, t, category)
    }
    fn clip_shape(&self) -> [usize; 2] {
        [self.net.config.frames, self.net.config.channels]
    }
}

/// Closure-backed consistency map, mostly for tests.
pub struct FnConsistency<F> {
    pub f: F,
    pub shape: [usize; 2],
}

impl<F> ConsistencyFn for FnConsistency<F>
where
    F: Fn(&Tensor, f64, usize) -> Result<Tensor>,
{
    fn predict(&self, x: &Tensor, t: f64, category: usize) -> Result<Tensor> {
        (self.f)(x, t, category)
    }
    fn clip_shape(&self) -> [usize; 2] {
        self.shape
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SampleStats {
    /// Consistency-map evaluations taken.
    pub evaluations: u64,
}

/// Few-step sampling: start from noise at the horizon, predict clean data,
/// and re-noise the prediction with fresh noise at the next grid time.
/// The grid is uniform and descending, `t_i = T (1 - i/steps)`.
pub fn multistep_sample(
    model: &impl ConsistencyFn,
    steps: usize,
    n: usize,
    category: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Tensor>> {
    multistep_sample_with_stats(model, steps, n, category, sched, seed).map(|(c, _)| c)
}

pub fn multistep_sample_with_stats(
    model: &impl ConsistencyFn,
    steps: usize,
    n: usize,
    category: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(Vec<Tensor>, SampleStats)> {
    if steps == 0 {
        return Err(Error::Malformed { what: "multistep_sample", detail: "steps must be >= 1".into() });
    }
    let shape = model.clip_shape();
    let mut stats = SampleStats::default();
    let clips = (0..n)
        .map(|i| {
            let mut rng = DeterministicRng::derive(seed, &[0x6d756c7469, i as u64]);
            let mut x = rng.normal_tensor(&shape);
            let mut prediction = None;
            for k in 0..steps {
                let t_here = sched.horizon * (1.0 - k as f64 / steps as f64);
                let x0 = model.predict(&x, t_here, category)?;
                stats.evaluations += 1;
                let t_next = sched.horizon * (1.0 - (k + 1) as f64 / steps as f64);
                if k + 1 < steps {
                    let fresh = rng.normal_tensor(&shape);
                    x = add_noise(&x0, &fresh, t_next, sched)?;
                }
                prediction = Some(x0);
            }
            Ok(prediction.expect("steps >= 1"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((clips, stats))
}

fn flatten(t: &Tensor) -> &[f64] {
    t.data()
}

/// Exact 1-D 2-Wasserstein distance between two empirical distributions
/// with equal point weights, by merging the quantile functions.
fn wasserstein_1d(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let mut acc = 0.0;
    let mut q = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < na && j < nb {
        let qa = (i + 1) as f64 / na as f64;
        let qb = (j + 1) as f64 / nb as f64;
        let q_next = qa.min(qb);
        let d = a[i] - b[j];
        acc += d * d * (q_next - q);
        q = q_next;
        if qa <= qb + 1e-15 {
            i += 1;
        }
        if qb <= qa + 1e-15 {
            j += 1;
        }
    }
    acc.sqrt()
}

/// Sliced 2-Wasserstein distance: mean over seeded random unit projections
/// of the exact 1-D distance between the projected samples.
pub fn sliced_wasserstein(
    a: &[Tensor],
    b: &[Tensor],
    projections: usize,
    seed: u64,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("sliced_wasserstein"));
    }
    let dim = a[0].numel();
    if b[0].numel() != dim {
        return Err(Error::ShapeMismatch {
            op: "sliced_wasserstein",
            lhs: a[0].shape().to_vec(),
            rhs: b[0].shape().to_vec(),
        });
    }
    let mut rng = DeterministicRng::derive(seed, &[0x736c696365]);
    let mut total = 0.0;
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut dir {
            *v /= norm;
        }
        let project = |set: &[Tensor]| -> Vec<f64> {
            set.iter()
                .map(|t| flatten(t).iter().zip(&dir).map(|(x, d)| x * d).sum())
                .collect()
        };
        total += wasserstein_1d(project(a), project(b));
    }
    Ok(total / projections as f64)
}

/// A mode of the data distribution: its centre clip and the per-coordinate
/// standard deviation of jitter around it.
#[derive(Debug, Clone)]
pub struct ModeSpec {
    pub center: Tensor,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ModeMetrics {
    pub recall: f64,
    pub precision: f64,
    /// Mean over covered modes of within-mode sample variance divided by
    /// the data variance.
    pub variance_ratio: f64,
}

/// Coverage metrics against known mode centres. A sample belongs to a mode
/// when its Euclidean distance to the centre is at most
/// `radius_mult * std * sqrt(dim)`.
pub fn mode_metrics(samples: &[Tensor], modes: &[ModeSpec], radius_mult: f64) -> Result<ModeMetrics> {
    if modes.is_empty() {
        return Err(Error::EmptyInput("mode_metrics: no modes"));
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("mode_metrics: no samples"));
    }
    let dim = modes[0].center.numel() as f64;
    let mut assigned = vec![Vec::new(); modes.len()];
    let mut hit = 0usize;
    for s in samples {
        let mut best: Option<(usize, f64)> = None;
        for (m, spec) in modes.iter().enumerate() {
            let d = s
                .data()
                .iter()
                .zip(spec.center.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if best.map(|(_, bd)| d < bd).unwrap_or(true) {
                best = Some((m, d));
            }
        }
        let (m, d) = best.expect("modes nonempty");
        let radius = radius_mult * modes[m].std * dim.sqrt();
        if d <= radius {
            assigned[m].push(s);
            hit += 1;
        }
    }

    let covered = assigned.iter().filter(|v| !v.is_empty()).count();
    let recall = covered as f64 / modes.len() as f64;
    let precision = hit as f64 / samples.len() as f64;

    // Within-mode variance, per coordinate around the member mean, against
    // the data jitter variance.
    let mut ratios = Vec::new();
    for (members, spec) in assigned.iter().zip(modes) {
        if members.len() < 2 {
            continue;
        }
        let n = members.len() as f64;
        let dim = spec.center.numel();
        let mut var_sum = 0.0;
        for c in 0..dim {
            let mean: f64 = members.iter().map(|t| t.data()[c]).sum::<f64>() / n;
            let var: f64 =
                members.iter().map(|t| (t.data()[c] - mean).powi(2)).sum::<f64>() / n;
            var_sum += var;
        }
        ratios.push(var_sum / dim as f64 / (spec.std * spec.std));
    }
    let variance_ratio = if ratios.is_empty() {
        0.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    Ok(ModeMetrics { recall, precision, variance_ratio })
}

/// Mean over coordinates of the population standard deviation over a set.
fn coordinate_spread(set: &[Tensor]) -> f64 {
    let n = set.len() as f64;
    let dim = set[0].numel();
    let mut total = 0.0;
    for c in 0..dim {
        let mean: f64 = set.iter().map(|t| t.data()[c]).sum::<f64>() / n;
        let var: f64 = set.iter().map(|t| (t.data()[c] - mean).powi(2)).sum::<f64>() / n;
        total += var.sqrt();
    }
    total / dim as f64
}

/// Disagreement of the consistency map along teacher trajectories: the mean
/// over trajectories of the spread of its predictions across grid points.
/// A perfectly self-consistent map scores zero.
pub fn consistency_spread(
    model: &impl ConsistencyFn,
    teacher: &ToyTransformer,
    n_trajectories: usize,
    grid: usize,
    category: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    if n_trajectories == 0 || grid == 0 {
        return Err(Error::EmptyInput("consistency_spread"));
    }
    let shape = model.clip_shape();
    let mut total = 0.0;
    for i in 0..n_trajectories {
        let mut rng = DeterministicRng::derive(seed, &[0x737072656164, i as u64]);
        let x_start = rng.normal_tensor(&shape);
        let traj = integrate_pfode(teacher, &x_start, grid, sched, category, 1.0)?;
        let predictions: Vec<Tensor> = traj
            .times
            .iter()
            .zip(&traj.states)
            .map(|(&t, x)| model.predict(x, t, category))
            .collect::<Result<_>>()?;
        total += coordinate_spread(&predictions);
    }
    Ok(total / n_trajectories as f64)
}

/// Summary of one evaluated sample set.
#[derive(Debug, Clone, Copy)]
pub struct SampleReport {
    pub steps: usize,
    pub n: usize,
    pub sliced_wasserstein: f64,
    pub mode_recall: f64,
    pub mode_precision: f64,
    pub per_mode_variance_ratio: f64,
    pub physics_mean: f64,
    pub wall_time: f64,
}

/// Score a sample set against reference data and known modes.
pub fn evaluate_samples(
    samples: &[Tensor],
    reference: &[Tensor],
    modes: &[ModeSpec],
    world: &crate::data::WorldConfig,
    steps: usize,
    projections: usize,
    seed: u64,
    wall_time: f64,
) -> Result<SampleReport> {
    let sw = sliced_wasserstein(samples, reference, projections, seed)?;
    let mm = mode_metrics(samples, modes, 3.0)?;
    let mut physics_total = 0.0;
    for s in samples {
        physics_total += crate::data::physics_score(s, world)?;
    }
    Ok(SampleReport {
        steps,
        n: samples.len(),
        sliced_wasserstein: sw,
        mode_recall: mm.recall,
        mode_precision: mm.precision,
        per_mode_variance_ratio: mm.variance_ratio,
        physics_mean: physics_total / samples.len().max(1) as f64,
        wall_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1.0)
    }

    #[test]
    fn single_step_sampling_uses_one_evaluation_per_clip() {
        let model = FnConsistency {
            f: |x: &Tensor, _t: f64, _c: usize| Ok(x.clone()),
            shape: [4, 2],
        };
        let (clips, stats) = multistep_sample_with_stats(&model, 1, 5, 0, &sched(), 3).unwrap();
        assert_eq!(clips.len(), 5);
        assert_eq!(stats.evaluations, 5);
        let (_, stats4) = multistep_sample_with_stats(&model, 4, 5, 0, &sched(), 3).unwrap();
        assert_eq!(stats4.evaluations, 20);
    }

    #[test]
    fn perfect_point_mass_student_is_exact_for_any_step_count() {
        let mut rng = DeterministicRng::seed_from(5);
        let point = rng.normal_tensor(&[4, 2]);
        let target = point.clone();
        let model = FnConsistency {
            f: move |_x: &Tensor, _t: f64, _c: usize| Ok(target.clone()),
            shape: [4, 2],
        };
        for steps in [1usize, 2, 4, 8] {
            let clips = multistep_sample(&model, steps, 3, 0, &sched(), 7).unwrap();
            for c in clips {
                assert_eq!(c.data(), point.data());
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let model = FnConsistency {
            f: |x: &Tensor, t: f64, _c: usize| Ok(crate::tensor::scale(x, 1.0 - t)),
            shape: [4, 2],
        };
        let a = multistep_sample(&model, 4, 3, 0, &sched(), 11).unwrap();
        let b = multistep_sample(&model, 4, 3, 0, &sched(), 11).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn wasserstein_identical_sets_is_zero_and_symmetric() {
        let mut rng = DeterministicRng::seed_from(1);
        let a: Vec<Tensor> = (0..20).map(|_| rng.normal_tensor(&[3, 2])).collect();
        let b: Vec<Tensor> = (0..15).map(|_| rng.normal_tensor(&[3, 2])).collect();
        assert!(sliced_wasserstein(&a, &a, 16, 0).unwrap() <= 1e-9);
        let ab = sliced_wasserstein(&a, &b, 16, 0).unwrap();
        let ba = sliced_wasserstein(&b, &a, 16, 0).unwrap();
        assert!((ab - ba).abs() <= 1e-9);
    }

    #[test]
    fn wasserstein_point_masses_at_distance_d() {
        let a = vec![Tensor::from_vec(vec![1, 1], vec![0.0]).unwrap(); 10];
        let b = vec![Tensor::from_vec(vec![1, 1], vec![2.5]).unwrap(); 7];
        let d = sliced_wasserstein(&a, &b, 8, 4).unwrap();
        assert!((d - 2.5).abs() <= 1e-9, "{d}");
    }

    #[test]
    fn wasserstein_shifted_gaussians() {
        let mut rng = DeterministicRng::seed_from(9);
        let a: Vec<Tensor> = (0..10000).map(|_| rng.normal_tensor(&[1, 1])).collect();
        let b: Vec<Tensor> = (0..10000)
            .map(|_| rng.normal_tensor(&[1, 1]).map(|v| v + 1.0))
            .collect();
        let d = sliced_wasserstein(&a, &b, 4, 2).unwrap();
        assert!((d - 1.0).abs() <= 0.05, "{d}");
    }

    #[test]
    fn mode_metrics_exact_hits() {
        let mut rng = DeterministicRng::seed_from(2);
        let c1 = rng.normal_tensor(&[2, 2]);
        let c2 = rng.normal_tensor(&[2, 2]).map(|v| v + 5.0);
        let modes = vec![
            ModeSpec { center: c1.clone(), std: 0.1 },
            ModeSpec { center: c2.clone(), std: 0.1 },
        ];
        let samples = vec![c1.clone(), c2.clone(), c1.clone()];
        let m = mode_metrics(&samples, &modes, 3.0).unwrap();
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.variance_ratio, 0.0);

        // All samples on one of two centres: half the modes are reached.
        let collapsed = vec![c1.clone(), c1.clone(), c1];
        let m = mode_metrics(&collapsed, &modes, 3.0).unwrap();
        assert_eq!(m.recall, 0.5);
    }

    #[test]
    fn spread_of_constant_map_is_zero() {
        let teacher = ToyTransformer::init(
            ModelConfig { frames: 4, channels: 2, width: 8, blocks: 1, heads: 2, time_feats: 3, categories: 2, mlp_mult: 2 },
            3,
        )
        .unwrap();
        let fixed = Tensor::full(&[4, 2], 0.25);
        let constant = FnConsistency {
            f: move |_x: &Tensor, _t: f64, _c: usize| Ok(fixed.clone()),
            shape: [4, 2],
        };
        let s = consistency_spread(&constant, &teacher, 3, 6, 0, &sched(), 5).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn spread_of_identity_map_is_trajectory_spread() {
        // With a nontrivial teacher the identity map's spread equals the
        // spread of the trajectory states themselves.
        let mut teacher = ToyTransformer::init(
            ModelConfig { frames: 4, channels: 2, width: 8, blocks: 1, heads: 2, time_feats: 3, categories: 2, mlp_mult: 2 },
            4,
        )
        .unwrap();
        let mut rng = DeterministicRng::seed_from(6);
        let noise = crate::tensor::ParamSet::from_iter(
            teacher
                .params
                .iter()
                .map(|(n, t)| (n.clone(), rng.normal_tensor(t.shape())))
                .collect::<Vec<_>>(),
        );
        teacher.params = teacher.params.axpy(0.1, &noise).unwrap();

        let identity = FnConsistency {
            f: |x: &Tensor, _t: f64, _c: usize| Ok(x.clone()),
            shape: [4, 2],
        };
        let s = consistency_spread(&identity, &teacher, 2, 5, 0, &sched(), 8).unwrap();

        let mut manual = 0.0;
        for i in 0..2u64 {
            let mut r = DeterministicRng::derive(8, &[0x737072656164, i]);
            let x0 = r.normal_tensor(&[4, 2]);
            let traj = integrate_pfode(&teacher, &x0, 5, &sched(), 0, 1.0).unwrap();
            manual += super::coordinate_spread(&traj.states);
        }
        manual /= 2.0;
        assert!((s - manual).abs() <= 1e-12);
        assert!(s > 0.0);
    }

    #[test]
    fn spread_is_stable_under_grid_refinement() {
        let mut teacher = ToyTransformer::init(
            ModelConfig { frames: 4, channels: 2, width: 8, blocks: 1, heads: 2, time_feats: 3, categories: 2, mlp_mult: 2 },
            7,
        )
        .unwrap();
        let mut rng = DeterministicRng::seed_from(9);
        let noise = crate::tensor::ParamSet::from_iter(
            teacher
                .params
                .iter()
                .map(|(n, t)| (n.clone(), rng.normal_tensor(t.shape())))
                .collect::<Vec<_>>(),
        );
        teacher.params = teacher.params.axpy(0.05, &noise).unwrap();
        let identity = FnConsistency {
            f: |x: &Tensor, _t: f64, _c: usize| Ok(x.clone()),
            shape: [4, 2],
        };
        let coarse = consistency_spread(&identity, &teacher, 4, 16, 0, &sched(), 10).unwrap();
        let fine = consistency_spread(&identity, &teacher, 4, 32, 0, &sched(), 10).unwrap();
        assert!(
            (coarse - fine).abs() / coarse.max(1e-12) <= 0.05,
            "coarse {coarse} vs fine {fine}"
        );
    }
}
