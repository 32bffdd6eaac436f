//! Exact kinematics for the three clip categories, and the programmatic
//! scorers that stand in for learned quality detectors.

use super::{Category, ClipRecord, Flags, Origin, WorldConfig, CHANNELS};
use crate::error::{Error, Result};
use crate::rng::DeterministicRng;
use crate::tensor::Tensor;

/// Generation parameters for one prompt. Positions and velocities are per
/// particle; velocities are per frame.
#[derive(Debug, Clone, Copy)]
pub struct PromptParams {
    pub category: Category,
    pub p1: (f64, f64),
    pub v1: (f64, f64),
    pub p2: (f64, f64),
    pub v2: (f64, f64),
}

/// Deterministic stratified prompt draw: categories rotate in a fixed
/// pattern, physical parameters come from a stream derived per index.
pub fn generate_prompt_set(n: usize, seed: u64, world: &WorldConfig) -> Vec<PromptParams> {
    (0..n)
        .map(|i| {
            let category = Category::ALL[i % Category::ALL.len()];
            let mut rng = DeterministicRng::derive(seed, &[0x70726f6d7074, i as u64]);
            sample_params(category, &mut rng, world)
        })
        .collect()
}

fn sample_params(category: Category, rng: &mut DeterministicRng, world: &WorldConfig) -> PromptParams {
    match category {
        Category::EasyLinear => {
            // Slow drift that never reaches a wall.
            let max_v = 0.4 * world.wall / world.frames as f64;
            PromptParams {
                category,
                p1: (rng.uniform_in(-0.5, 0.5), rng.uniform_in(-0.5, 0.5)),
                v1: (rng.uniform_in(-max_v, max_v), rng.uniform_in(-max_v, max_v)),
                p2: (rng.uniform_in(-0.5, 0.5), rng.uniform_in(-0.5, 0.5)),
                v2: (rng.uniform_in(-max_v, max_v), rng.uniform_in(-max_v, max_v)),
            }
        }
        Category::HardBounce => {
            // Particle 1 heads for the nearest x wall fast enough to bounce
            // inside the clip; particle 2 drifts gently.
            let x0 = rng.uniform_in(-0.5, 0.5);
            let speed = rng.uniform_in(0.1, 0.16);
            let vx = if x0 >= 0.0 { speed } else { -speed };
            let max_v = 0.3 / world.frames as f64;
            PromptParams {
                category,
                p1: (x0, rng.uniform_in(-0.4, 0.4)),
                v1: (vx, rng.uniform_in(-0.04, 0.04)),
                p2: (rng.uniform_in(-0.5, 0.5), rng.uniform_in(-0.5, 0.5)),
                v2: (rng.uniform_in(-max_v, max_v), rng.uniform_in(-max_v, max_v)),
            }
        }
        Category::HardCollision => {
            // Symmetric approach along x; velocities exchange at contact and
            // the pair separates without reaching a wall.
            let half_gap = rng.uniform_in(0.25, 0.45);
            let speed = rng.uniform_in(0.05, 0.065);
            let y = rng.uniform_in(-0.35, 0.35);
            PromptParams {
                category,
                p1: (-half_gap, y),
                v1: (speed, 0.0),
                p2: (half_gap, y),
                v2: (-speed, 0.0),
            }
        }
    }
}

/// Position after `f` frames of motion in a box `[-wall, wall]` with
/// specular reflection (restitution 1), via the standard unfold-and-fold
/// triangle wave.
fn reflect_coord(x0: f64, v: f64, f: f64, wall: f64) -> f64 {
    let u = x0 + v * f;
    let period = 4.0 * wall;
    let y = (u + wall).rem_euclid(period);
    if y <= 2.0 * wall {
        y - wall
    } else {
        3.0 * wall - y
    }
}

fn frames_tensor(world: &WorldConfig, pos: impl Fn(usize) -> [f64; CHANNELS]) -> Tensor {
    let mut data = Vec::with_capacity(world.frames * CHANNELS);
    for f in 0..world.frames {
        data.extend_from_slice(&pos(f));
    }
    Tensor::from_vec(vec![world.frames, CHANNELS], data).expect("shape matches data")
}

/// Exact clip for the given parameters: linear motion, specular bounce, or
/// equal-mass elastic exchange, depending on the category.
pub fn simulate_clip(params: &PromptParams, world: &WorldConfig) -> Tensor {
    let PromptParams { category, p1, v1, p2, v2 } = *params;
    match category {
        Category::EasyLinear => frames_tensor(world, |f| {
            let f = f as f64;
            [p1.0 + v1.0 * f, p1.1 + v1.1 * f, p2.0 + v2.0 * f, p2.1 + v2.1 * f]
        }),
        Category::HardBounce => frames_tensor(world, |f| {
            let f = f as f64;
            [
                reflect_coord(p1.0, v1.0, f, world.wall),
                reflect_coord(p1.1, v1.1, f, world.wall),
                reflect_coord(p2.0, v2.0, f, world.wall),
                reflect_coord(p2.1, v2.1, f, world.wall),
            ]
        }),
        Category::HardCollision => {
            // Contact time along x; equal masses exchange velocities.
            let closing = v1.0 - v2.0;
            let t_star = if closing > 0.0 { (p2.0 - p1.0) / closing } else { f64::INFINITY };
            frames_tensor(world, |f| {
                let f = f as f64;
                if f <= t_star {
                    [p1.0 + v1.0 * f, p1.1 + v1.1 * f, p2.0 + v2.0 * f, p2.1 + v2.1 * f]
                } else {
                    let x1 = p1.0 + v1.0 * t_star + v2.0 * (f - t_star);
                    let x2 = p2.0 + v2.0 * t_star + v1.0 * (f - t_star);
                    [x1, p1.1 + v1.1 * f, x2, p2.1 + v2.1 * f]
                }
            })
        }
    }
}

/// Simulator output wrapped as a record: exact physics by construction.
pub fn simulate_real_clip(params: &PromptParams, world: &WorldConfig, id: u64) -> ClipRecord {
    let frames = simulate_clip(params, world);
    ClipRecord {
        id,
        category: params.category,
        frames,
        origin: Origin::SimulatorReal,
        quality: 1.0,
        physics: 1.0,
        weight: 1.0,
        flags: Flags::default(),
    }
}

struct ParticleView<'a> {
    data: &'a [f64],
    offset: usize,
}

impl ParticleView<'_> {
    fn pos(&self, f: usize) -> (f64, f64) {
        (self.data[f * CHANNELS + self.offset], self.data[f * CHANNELS + self.offset + 1])
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Frames in contact with a wall or with the other particle, per particle.
fn contact_mask(frames: &Tensor, world: &WorldConfig) -> [Vec<bool>; 2] {
    let n = frames.rows();
    let p1 = ParticleView { data: frames.data(), offset: 0 };
    let p2 = ParticleView { data: frames.data(), offset: 2 };
    let mut masks = [vec![false; n], vec![false; n]];
    for f in 0..n {
        let a = p1.pos(f);
        let b = p2.pos(f);
        let near = dist(a, b) <= world.contact_band;
        let near_wall = |p: (f64, f64)| {
            p.0.abs() >= world.wall - world.contact_band || p.1.abs() >= world.wall - world.contact_band
        };
        masks[0][f] = near || near_wall(a);
        masks[1][f] = near || near_wall(b);
    }
    masks
}

/// Deterministic physics plausibility in `[0, 1]`: one minus a normalised
/// penalty over free-flight acceleration spikes, wall penetration depth,
/// and speed changes across contact events.
pub fn physics_score(frames: &Tensor, world: &WorldConfig) -> Result<f64> {
    let n = frames.rows();
    if n < 3 {
        return Err(Error::TooFewFrames { need: 3, got: n });
    }
    let masks = contact_mask(frames, world);
    let mut penalty = 0.0;

    for (p, mask) in masks.iter().enumerate() {
        let view = ParticleView { data: frames.data(), offset: 2 * p };

        // (a) acceleration spikes away from any contact
        for f in 1..n - 1 {
            if mask[f - 1] || mask[f] || mask[f + 1] {
                continue;
            }
            let (ax, ay) = accel(&view, f);
            let a = (ax * ax + ay * ay).sqrt();
            if a > world.accel_tol {
                penalty += (a - world.accel_tol) / world.accel_scale;
            }
        }

        // (b) wall penetration depth, every frame
        for f in 0..n {
            let (x, y) = view.pos(f);
            for c in [x, y] {
                let pen = c.abs() - world.wall;
                if pen > 1e-9 {
                    penalty += pen / world.penetration_scale;
                }
            }
        }

        // (c) speed change across each contact event
        let mut f = 0;
        while f < n {
            if !mask[f] {
                f += 1;
                continue;
            }
            let start = f;
            while f < n && mask[f] {
                f += 1;
            }
            let end = f; // event spans [start, end)
            if start >= 2 && end + 1 < n {
                let before = dist(view.pos(start - 1), view.pos(start - 2));
                let after = dist(view.pos(end + 1), view.pos(end));
                let change = (after - before).abs();
                if change > world.speed_tol {
                    penalty += (change - world.speed_tol) / world.speed_change_scale;
                }
            }
        }
    }

    Ok((1.0 - penalty).clamp(0.0, 1.0))
}

fn accel(view: &ParticleView, f: usize) -> (f64, f64) {
    let (x0, y0) = view.pos(f - 1);
    let (x1, y1) = view.pos(f);
    let (x2, y2) = view.pos(f + 1);
    (x2 - 2.0 * x1 + x0, y2 - 2.0 * y1 + y0)
}

/// Trajectory smoothness in `[0, 1]`: mean free-flight acceleration against
/// a fixed scale.
pub fn smoothness_score(frames: &Tensor, world: &WorldConfig) -> Result<f64> {
    let n = frames.rows();
    if n < 3 {
        return Err(Error::TooFewFrames { need: 3, got: n });
    }
    let masks = contact_mask(frames, world);
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, mask) in masks.iter().enumerate() {
        let view = ParticleView { data: frames.data(), offset: 2 * p };
        for f in 1..n - 1 {
            if mask[f - 1] || mask[f] || mask[f + 1] {
                continue;
            }
            let (ax, ay) = accel(&view, f);
            total += ((ax * ax + ay * ay).sqrt() - world.accel_tol).max(0.0);
            count += 1;
        }
    }
    if count == 0 {
        return Ok(1.0);
    }
    Ok((1.0 - total / count as f64 / world.smooth_scale).clamp(0.0, 1.0))
}

/// Blend of physics and smoothness used as the filter score.
pub fn quality_score(frames: &Tensor, world: &WorldConfig, physics_blend: f64) -> Result<f64> {
    let p = physics_score(frames, world)?;
    let s = smoothness_score(frames, world)?;
    Ok(physics_blend * p + (1.0 - physics_blend) * s)
}

/// The bimodal evaluation task: two mirrored drift prototypes plus
/// coordinate jitter. Both modes share a category so conditioning cannot
/// separate them.
#[derive(Debug, Clone, Copy)]
pub struct TwoModeSpec {
    pub jitter_std: f64,
}

impl Default for TwoModeSpec {
    fn default() -> Self {
        Self { jitter_std: 0.05 }
    }
}

/// The exact clip at the centre of one mode.
pub fn two_mode_prototype(world: &WorldConfig, right: bool) -> Tensor {
    let sgn = if right { 1.0 } else { -1.0 };
    let params = PromptParams {
        category: Category::EasyLinear,
        p1: (-0.45 * sgn, 0.25),
        v1: (0.055 * sgn, 0.0),
        p2: (-0.5 * sgn, -0.3),
        v2: (0.06 * sgn, 0.0),
    };
    simulate_clip(&params, world)
}

/// A jittered draw from one mode.
pub fn two_mode_clip(world: &WorldConfig, right: bool, spec: &TwoModeSpec, rng: &mut DeterministicRng) -> Tensor {
    let proto = two_mode_prototype(world, right);
    let noise = rng.normal_tensor(proto.shape());
    crate::tensor::add(&proto, &crate::tensor::scale(&noise, spec.jitter_std))
        .expect("shapes match")
}

/// Balanced training pairs `(clip, category)` alternating between modes.
pub fn two_mode_training_set(
    world: &WorldConfig,
    n: usize,
    spec: &TwoModeSpec,
    seed: u64,
) -> Vec<(Tensor, usize)> {
    (0..n)
        .map(|i| {
            let mut rng = DeterministicRng::derive(seed, &[0x326d6f6465, i as u64]);
            let clip = two_mode_clip(world, i % 2 == 0, spec, &mut rng);
            (clip, Category::EasyLinear.index())
        })
        .collect()
}
