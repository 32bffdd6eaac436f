//! Forward corruption, teacher training via flow matching, and sampling by
//! integrating the probability-flow ODE.
//!
//! The sampler walks the generation direction: with `s = T - t` measuring
//! progress from noise to data, it integrates `dx/ds = field(x, t)` with a
//! second-order (Heun) step on a uniform grid. The teacher learns the
//! forward-process derivative `d x_t / dt`, so its field enters the sampler
//! negated.

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::model::ToyTransformer;
use crate::optim::{clip_global_norm, AdamW};
use crate::rng::DeterministicRng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{self, ParamSet, Tape, Tensor};

/// `alpha(t) x0 + sigma(t) eps`. Endpoints return the operands bitwise.
pub fn add_noise(x0: &Tensor, eps: &Tensor, t: f64, sched: &NoiseSchedule) -> Result<Tensor> {
    x0.check_same_shape(eps, "add_noise")?;
    sched.check_time(t)?;
    if t == 0.0 {
        return Ok(x0.clone());
    }
    if t == sched.horizon {
        return Ok(eps.clone());
    }
    tensor::add(
        &tensor::scale(x0, sched.alpha(t)),
        &tensor::scale(eps, sched.sigma(t)),
    )
}

/// Training target for the teacher: the time derivative of the forward
/// process, `dalpha(t) x0 + dsigma(t) eps`. Constant in `t` for the linear
/// schedule: `(eps - x0) / T`.
pub fn velocity_target(x0: &Tensor, eps: &Tensor, sched: &NoiseSchedule, t: f64) -> Result<Tensor> {
    x0.check_same_shape(eps, "velocity_target")?;
    tensor::add(
        &tensor::scale(x0, sched.dalpha(t)),
        &tensor::scale(eps, sched.dsigma(t)),
    )
}

/// One corrupted training example with its regression target.
#[derive(Debug, Clone)]
pub struct FlowItem {
    pub x_t: Tensor,
    pub t: f64,
    pub category: usize,
    pub target: Tensor,
}

/// Sample `(t, eps)` per element and build the corrupted inputs and targets.
pub fn prepare_flow_batch(
    batch: &[(Tensor, usize)],
    sched: &NoiseSchedule,
    rng: &mut DeterministicRng,
) -> Result<Vec<FlowItem>> {
    batch
        .iter()
        .map(|(x0, category)| {
            let t = rng.uniform_in(0.0, sched.horizon);
            let eps = rng.normal_tensor(x0.shape());
            Ok(FlowItem {
                x_t: add_noise(x0, &eps, t, sched)?,
                t,
                category: *category,
                target: velocity_target(x0, &eps, sched, t)?,
            })
        })
        .collect()
}

fn flow_loss_on_tape(
    tape: &mut Tape,
    params: &std::collections::BTreeMap<String, crate::tensor::Val>,
    teacher: &ToyTransformer,
    items: &[FlowItem],
) -> Result<crate::tensor::Val> {
    let mut total = None;
    for item in items {
        let x = Executor::constant(tape, item.x_t.clone());
        let t = Executor::constant(tape, Tensor::scalar(item.t));
        let v = teacher.forward(tape, params, &x, &t, item.category)?;
        let target = Executor::constant(tape, item.target.clone());
        let diff = tape.sub(v, target)?;
        let l = tape.mean_sq(diff);
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.ok_or(Error::EmptyInput("flow batch"))?;
    Ok(tape.scale(total, 1.0 / items.len() as f64))
}

/// Mean-squared flow-matching loss of a prepared batch.
pub fn flow_matching_loss(teacher: &ToyTransformer, items: &[FlowItem]) -> Result<f64> {
    let (value, _) = flow_matching_grad(teacher, items)?;
    Ok(value)
}

/// Loss and its gradient with respect to the teacher parameters.
pub fn flow_matching_grad(teacher: &ToyTransformer, items: &[FlowItem]) -> Result<(f64, ParamSet)> {
    tensor::grad_eval(
        |tape, params| flow_loss_on_tape(tape, params, teacher, items),
        &teacher.params,
    )
}

/// One optimiser step of flow matching; returns the pre-step loss.
/// A non-finite loss aborts without touching the parameters.
pub fn train_teacher_step(
    teacher: &mut ToyTransformer,
    opt: &mut AdamW,
    batch: &[(Tensor, usize)],
    sched: &NoiseSchedule,
    lr: f64,
    grad_clip: f64,
    rng: &mut DeterministicRng,
) -> Result<f64> {
    let items = prepare_flow_batch(batch, sched, rng)?;
    let (loss, grads) = flow_matching_grad(teacher, &items)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: opt.steps_taken(), scm: loss, dmd: 0.0 });
    }
    let (clipped, _) = clip_global_norm(&grads, grad_clip);
    opt.step(&mut teacher.params, &clipped, lr)?;
    Ok(loss)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TeacherTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub prompt_dropout: f64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch: 32,
            lr: 2e-3,
            warmup: 20,
            grad_clip: 1.0,
            weight_decay: 0.0,
            prompt_dropout: 0.1,
        }
    }
}

/// Train the teacher on `(clip, category)` pairs with uniform batch
/// sampling, linear warmup, and prompt dropout. Returns the per-step losses.
pub fn train_teacher(
    teacher: &mut ToyTransformer,
    data: &[(Tensor, usize)],
    cfg: &TeacherTrainConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("teacher training set"));
    }
    let null_cat = teacher.config.null_category();
    let mut opt = AdamW::new(&teacher.params, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let mut rng = DeterministicRng::derive(seed, &[0x7465616368, step]);
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let (x0, category) = &data[rng.index(data.len())];
            let category = if rng.uniform() < cfg.prompt_dropout { null_cat } else { *category };
            batch.push((x0.clone(), category));
        }
        let lr = if step <= cfg.warmup {
            cfg.lr * step as f64 / cfg.warmup as f64
        } else {
            cfg.lr
        };
        losses.push(train_teacher_step(teacher, &mut opt, &batch, sched, lr, cfg.grad_clip, &mut rng)?);
    }
    Ok(losses)
}

/// States along an integrated sampling path, times strictly decreasing from
/// the horizon to zero.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Tensor>,
}

impl Trajectory {
    pub fn last(&self) -> &Tensor {
        self.states.last().expect("trajectory has at least the start state")
    }
}

/// Heun integration of `dx/ds = field(x, t)` in the generation direction
/// (`t` runs from `horizon` down to 0 on a uniform grid).
pub fn heun_integrate<F>(field: F, x_start: &Tensor, steps: usize, horizon: f64) -> Result<Trajectory>
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::Malformed { what: "heun_integrate", detail: "steps must be >= 1".into() });
    }
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut x = x_start.clone();
    times.push(horizon);
    states.push(x.clone());
    for k in 0..steps {
        let t_here = horizon * (1.0 - k as f64 / steps as f64);
        let t_next = if k + 1 == steps { 0.0 } else { horizon * (1.0 - (k + 1) as f64 / steps as f64) };
        let h = t_here - t_next;
        let d1 = field(&x, t_here)?;
        let x_euler = tensor::add(&x, &tensor::scale(&d1, h))?;
        let d2 = field(&x_euler, t_next)?;
        let avg = tensor::scale(&tensor::add(&d1, &d2)?, 0.5);
        x = tensor::add(&x, &tensor::scale(&avg, h))?;
        if !x.is_finite() {
            return Err(Error::DivergedAt { step: k });
        }
        times.push(t_next);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

/// Teacher velocity with classifier-free guidance,
/// `v = v_null + g (v_cond - v_null)`. A scale of exactly 1 skips the
/// null-conditioned evaluation entirely, so it is bitwise identical to the
/// unguided field.
pub fn guided_velocity(
    teacher: &ToyTransformer,
    x: &Tensor,
    t: f64,
    category: usize,
    guidance_scale: f64,
) -> Result<Tensor> {
    let v_cond = teacher.eval(x, t, category)?;
    if guidance_scale == 1.0 {
        return Ok(v_cond);
    }
    let v_null = teacher.eval(x, t, teacher.config.null_category())?;
    let diff = tensor::sub(&v_cond, &v_null)?;
    tensor::add(&v_null, &tensor::scale(&diff, guidance_scale))
}

/// Integrate the probability-flow ODE from `x` at the horizon down to 0.
/// The teacher predicts the forward-process derivative, so the generation
/// field is its negation.
pub fn integrate_pfode(
    teacher: &ToyTransformer,
    x_start: &Tensor,
    steps: usize,
    sched: &NoiseSchedule,
    category: usize,
    guidance_scale: f64,
) -> Result<Trajectory> {
    heun_integrate(
        |x, t| {
            let v = guided_velocity(teacher, x, t, category, guidance_scale)?;
            Ok(tensor::scale(&v, -1.0))
        },
        x_start,
        steps,
        sched.horizon,
    )
}

/// Draw `n` clips by integrating from seeded Gaussian noise. Each clip's
/// stream depends only on `(seed, index)`.
pub fn teacher_sample(
    teacher: &ToyTransformer,
    n: usize,
    steps: usize,
    category: usize,
    seed: u64,
    sched: &NoiseSchedule,
    guidance_scale: f64,
) -> Result<Vec<Tensor>> {
    let shape = [teacher.config.frames, teacher.config.channels];
    (0..n)
        .map(|i| {
            let mut rng = DeterministicRng::derive(seed, &[0x73616d706c65, i as u64]);
            let x_start = rng.normal_tensor(&shape);
            let traj = integrate_pfode(teacher, &x_start, steps, sched, category, guidance_scale)?;
            Ok(traj.last().clone())
        })
        .collect()
}
