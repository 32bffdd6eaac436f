//! The distillation objectives: the consistency map and its EMA target, the
//! trajectory-derivative target computed with forward-mode JVPs, the
//! consistency loss, the score-distillation regulariser on student
//! generations, and their weighted combination.

use crate::diffusion::add_noise;
use crate::error::{Error, Result};
use crate::exec::{DualExec, EvalExec, Executor};
use crate::model::{ModelConfig, ToyTransformer};
use crate::rng::DeterministicRng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{self, DualTensor, ParamSet, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Weighting {
    Uniform,
    /// `1 / (t + 0.01)`, emphasising low-noise times.
    InverseTime,
}

impl Weighting {
    pub fn weight(self, t: f64) -> f64 {
        match self {
            Weighting::Uniform => 1.0,
            Weighting::InverseTime => 1.0 / (t + 0.01),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub lambda_consistency: f64,
    pub lambda_dmd: f64,
    /// Stability constant in the consistency target normaliser.
    pub c: f64,
    /// Step size of the score-distillation correction.
    pub eta: f64,
    /// Floor added to the correction normaliser.
    pub eps_norm: f64,
    pub weighting: Weighting,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_consistency: 1.0,
            lambda_dmd: 0.1,
            c: 1e-2,
            eta: 1.0,
            eps_norm: 1e-3,
            weighting: Weighting::Uniform,
        }
    }
}

/// The few-step student. Its map to clean data is
/// `F(x_t, t) = x_t - t * f(x_t, t)`, so `F(x, 0) = x` holds by
/// construction for any parameters.
#[derive(Debug, Clone)]
pub struct ConsistencyStudent {
    pub net: ToyTransformer,
}

impl ConsistencyStudent {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self { net: ToyTransformer::init(config, seed)? })
    }

    pub fn params(&self) -> &ParamSet {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.net.params
    }

    /// The consistency map under any executor.
    pub fn apply_in<E: Executor>(
        &self,
        ex: &mut E,
        params: &std::collections::BTreeMap<String, E::V>,
        x: &E::V,
        t: &E::V,
        category: usize,
    ) -> Result<E::V> {
        let f = self.net.forward(ex, params, x, t, category)?;
        let tf = ex.scale_by(&f, t)?;
        ex.sub(x, &tf)
    }

    /// Plain evaluation with the student's own parameters.
    pub fn apply(&self, x_t: &Tensor, t: f64, category: usize) -> Result<Tensor> {
        self.apply_with(&self.net.params, x_t, t, category)
    }

    /// Plain evaluation with an explicit parameter set (e.g. the EMA copy).
    pub fn apply_with(
        &self,
        params: &ParamSet,
        x_t: &Tensor,
        t: f64,
        category: usize,
    ) -> Result<Tensor> {
        let mut ex = EvalExec;
        let lifted = ex.lift(params);
        self.apply_in(&mut ex, &lifted, &x_t.clone(), &Tensor::scalar(t), category)
    }
}

/// Free-function form of the consistency map.
pub fn consistency_apply(
    student: &ConsistencyStudent,
    x_t: &Tensor,
    t: f64,
    category: usize,
) -> Result<Tensor> {
    student.apply(x_t, t, category)
}

/// Exponential moving average of the student parameters.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub params: ParamSet,
    pub decay: f64,
}

impl EmaState {
    pub fn new(params: ParamSet, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay {decay} outside [0, 1)")));
        }
        Ok(Self { params, decay })
    }
}

/// Leafwise `decay * ema + (1 - decay) * student`.
pub fn ema_update(ema: &EmaState, student: &ParamSet) -> Result<EmaState> {
    Ok(EmaState {
        params: ema.params.lerp(ema.decay, 1.0 - ema.decay, student)?,
        decay: ema.decay,
    })
}

/// The instantaneous rate of change of the EMA consistency map along the
/// teacher's flow:
///
/// ```text
/// g = w(t) * [ (d F / d x) v(x_t, t)  +  d F / d t ]
/// ```
///
/// Both terms are Jacobian-vector products taken in one forward pass each:
/// the spatial term seeds the input tangent with the teacher velocity, the
/// time term seeds the scalar time input. No gradient flows through `g`.
pub fn scm_target_g(
    student: &ConsistencyStudent,
    ema: &EmaState,
    teacher: &ToyTransformer,
    x_t: &Tensor,
    t: f64,
    category: usize,
    weighting: Weighting,
) -> Result<Tensor> {
    let velocity = teacher.eval(x_t, t, category)?;

    let mut ex = DualExec;
    let lifted = ex.lift(&ema.params);

    // Spatial term: tangent in x along the teacher velocity.
    let x_dual = DualTensor::new(x_t.clone(), velocity)?;
    let t_const = DualTensor::constant(Tensor::scalar(t));
    let spatial = student
        .apply_in(&mut ex, &lifted, &x_dual, &t_const, category)?
        .into_parts()
        .1;

    // Time term: unit tangent in the scalar time input.
    let x_const = DualTensor::constant(x_t.clone());
    let t_dual = DualTensor::new(Tensor::scalar(t), Tensor::scalar(1.0))?;
    let time = student
        .apply_in(&mut ex, &lifted, &x_const, &t_dual, category)?
        .into_parts()
        .1;

    Ok(tensor::scale(
        &tensor::add(&spatial, &time)?,
        weighting.weight(t),
    ))
}

/// One consistency-loss element with its detached target.
#[derive(Debug, Clone)]
pub struct ScmItem {
    pub x_t: Tensor,
    pub t: f64,
    pub category: usize,
    /// `F_ema(x_t, t) - g / (|g|^2 + c)`, fully detached.
    pub target: Tensor,
    pub weight: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ScmBatch {
    pub items: Vec<ScmItem>,
    /// Elements dropped because their target came out non-finite.
    pub skipped: usize,
}

/// Sample `t` and noise per element and build the detached targets.
pub fn scm_prepare(
    student: &ConsistencyStudent,
    ema: &EmaState,
    teacher: &ToyTransformer,
    batch: &[(Tensor, usize)],
    cfg: &LossConfig,
    sched: &NoiseSchedule,
    rng: &mut DeterministicRng,
) -> Result<ScmBatch> {
    let mut out = ScmBatch::default();
    for (x0, category) in batch {
        let t = rng.uniform_in(0.0, sched.horizon);
        let eps = rng.normal_tensor(x0.shape());
        let x_t = add_noise(x0, &eps, t, sched)?;
        let g = scm_target_g(student, ema, teacher, &x_t, t, *category, cfg.weighting)?;
        if !g.is_finite() {
            out.skipped += 1;
            continue;
        }
        let f_ema = student.apply_with(&ema.params, &x_t, t, *category)?;
        // The target steps the EMA prediction against the trajectory
        // derivative: points closer to the data end of the path are the
        // more trustworthy ones, so their predictions are pulled backward
        // along g, normalised by |g|^2 plus the stability constant.
        let increment = tensor::scale(&g, -1.0 / (g.sq_norm() + cfg.c));
        let target = tensor::add(&f_ema, &increment)?;
        out.items.push(ScmItem {
            x_t,
            t,
            category: *category,
            target,
            weight: cfg.weighting.weight(t),
        });
    }
    Ok(out)
}

fn scm_loss_on_tape(
    tape: &mut Tape,
    params: &std::collections::BTreeMap<String, crate::tensor::Val>,
    student: &ConsistencyStudent,
    batch: &ScmBatch,
) -> Result<crate::tensor::Val> {
    let mut total = None;
    for item in &batch.items {
        let x = Executor::constant(tape, item.x_t.clone());
        let t = Executor::constant(tape, Tensor::scalar(item.t));
        let f = student.apply_in(tape, params, &x, &t, item.category)?;
        let target = Executor::constant(tape, item.target.clone());
        let diff = tape.sub(f, target)?;
        let sq = tape.sum_sq(diff);
        let weighted = tape.scale(sq, item.weight);
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let total = total.ok_or(Error::EmptyInput("consistency batch"))?;
    Ok(tape.scale(total, 1.0 / batch.items.len() as f64))
}

/// Loss value of a prepared batch at the given student parameters.
pub fn scm_eval(student: &ConsistencyStudent, batch: &ScmBatch) -> Result<f64> {
    scm_eval_grad(student, batch).map(|(v, _)| v)
}

/// Loss and gradient with respect to the student parameters; the EMA map,
/// the teacher, and the target carry no gradient by construction.
pub fn scm_eval_grad(student: &ConsistencyStudent, batch: &ScmBatch) -> Result<(f64, ParamSet)> {
    tensor::grad_eval(
        |tape, params| scm_loss_on_tape(tape, params, student, batch),
        &student.net.params,
    )
}

/// The consistency loss: sample, build targets, evaluate.
pub fn scm_loss(
    student: &ConsistencyStudent,
    ema: &EmaState,
    teacher: &ToyTransformer,
    batch: &[(Tensor, usize)],
    cfg: &LossConfig,
    sched: &NoiseSchedule,
    rng: &mut DeterministicRng,
) -> Result<f64> {
    let prepared = scm_prepare(student, ema, teacher, batch, cfg, sched, rng)?;
    scm_eval(student, &prepared)
}

/// Score-distillation correction target:
/// `x0 - eta * (f_student - f_teacher) / (mean|x0 - f_teacher| + eps)`.
pub fn dmd_target(
    x0: &Tensor,
    f_student: &Tensor,
    f_teacher: &Tensor,
    eta: f64,
    eps_norm: f64,
) -> Result<Tensor> {
    let residual = tensor::sub(x0, f_teacher)?;
    let normalizer = residual.mean_abs() + eps_norm;
    let correction = tensor::scale(&tensor::sub(f_student, f_teacher)?, eta / normalizer);
    tensor::sub(x0, &correction)
}

/// One score-distillation element: the generator noise and the detached
/// correction target.
#[derive(Debug, Clone)]
pub struct DmdItem {
    pub eps: Tensor,
    pub category: usize,
    pub target: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct DmdBatch {
    pub items: Vec<DmdItem>,
    /// Generator passes taken while building the batch.
    pub generator_passes: u64,
}

/// Generate one-step samples, re-noise them, and build the detached targets
/// from the student/teacher prediction gap.
pub fn dmd_prepare(
    student: &ConsistencyStudent,
    teacher: &ToyTransformer,
    categories: &[usize],
    cfg: &LossConfig,
    sched: &NoiseSchedule,
    rng: &mut DeterministicRng,
) -> Result<DmdBatch> {
    let shape = [student.net.config.frames, student.net.config.channels];
    let horizon = sched.horizon;
    let mut out = DmdBatch::default();
    for &category in categories {
        let eps = rng.normal_tensor(&shape);
        let x0 = student.apply(&eps, horizon, category)?;
        out.generator_passes += 1;

        let t = rng.uniform_in(0.0, horizon);
        let eps2 = rng.normal_tensor(&shape);
        let x_t = add_noise(&x0, &eps2, t, sched)?;
        let f_student = student.apply(&x_t, t, category)?;
        let velocity = teacher.eval(&x_t, t, category)?;
        // Clean-data prediction implied by the teacher velocity on the
        // linear schedule.
        let f_teacher = tensor::sub(&x_t, &tensor::scale(&velocity, t))?;
        let target = dmd_target(&x0, &f_student, &f_teacher, cfg.eta, cfg.eps_norm)?;
        out.items.push(DmdItem { eps, category, target });
    }
    Ok(out)
}

fn dmd_loss_on_tape(
    tape: &mut Tape,
    params: &std::collections::BTreeMap<String, crate::tensor::Val>,
    student: &ConsistencyStudent,
    batch: &DmdBatch,
    horizon: f64,
) -> Result<crate::tensor::Val> {
    let mut total = None;
    for item in &batch.items {
        let eps = Executor::constant(tape, item.eps.clone());
        let t = Executor::constant(tape, Tensor::scalar(horizon));
        let x0 = student.apply_in(tape, params, &eps, &t, item.category)?;
        let target = Executor::constant(tape, item.target.clone());
        let diff = tape.sub(x0, target)?;
        let sq = tape.sum_sq(diff);
        total = Some(match total {
            None => sq,
            Some(acc) => tape.add(acc, sq)?,
        });
    }
    let total = total.ok_or(Error::EmptyInput("score-distillation batch"))?;
    Ok(tape.scale(total, 1.0 / batch.items.len() as f64))
}

/// Loss value of a prepared batch; gradient reaches only the generator pass.
pub fn dmd_eval(student: &ConsistencyStudent, batch: &DmdBatch, sched: &NoiseSchedule) -> Result<f64> {
    dmd_eval_grad(student, batch, sched).map(|(v, _)| v)
}

pub fn dmd_eval_grad(
    student: &ConsistencyStudent,
    batch: &DmdBatch,
    sched: &NoiseSchedule,
) -> Result<(f64, ParamSet)> {
    tensor::grad_eval(
        |tape, params| dmd_loss_on_tape(tape, params, student, batch, sched.horizon),
        &student.net.params,
    )
}

/// The score-distillation regulariser on `batchsize` student generations,
/// categories drawn uniformly.
pub fn dmd_loss(
    student: &ConsistencyStudent,
    teacher: &ToyTransformer,
    cfg: &LossConfig,
    sched: &NoiseSchedule,
    rng: &mut DeterministicRng,
    batchsize: usize,
) -> Result<f64> {
    let categories: Vec<usize> =
        (0..batchsize).map(|_| rng.index(student.net.config.categories)).collect();
    let prepared = dmd_prepare(student, teacher, &categories, cfg, sched, rng)?;
    dmd_eval(student, &prepared, sched)
}

/// Combined objective summary.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RcmLoss {
    pub total: f64,
    pub scm: f64,
    pub dmd: f64,
}

/// Combined objective with gradients and counters.
#[derive(Debug, Clone)]
pub struct RcmStep {
    pub loss: RcmLoss,
    pub grads: ParamSet,
    pub dmd_generator_passes: u64,
    pub skipped_nonfinite: u64,
}

/// `total = lambda_consistency * scm + lambda_dmd * dmd`. A zero weight
/// short-circuits its term entirely (in particular, no generator passes run
/// when `lambda_dmd = 0`).
pub fn rcm_loss_grad(
    student: &ConsistencyStudent,
    ema: &EmaState,
    teacher: &ToyTransformer,
    batch: &[(Tensor, usize)],
    cfg: &LossConfig,
    sched: &NoiseSchedule,
    rng: &mut DeterministicRng,
) -> Result<RcmStep> {
    let mut loss = RcmLoss::default();
    let mut grads = student.net.params.zeros_like();
    let mut passes = 0;
    let mut skipped = 0;

    if cfg.lambda_consistency != 0.0 {
        let prepared = scm_prepare(student, ema, teacher, batch, cfg, sched, rng)?;
        skipped += prepared.skipped as u64;
        if !prepared.items.is_empty() {
            let (value, g) = scm_eval_grad(student, &prepared)?;
            loss.scm = value;
            grads = grads.axpy(cfg.lambda_consistency, &g)?;
        }
    }
    if cfg.lambda_dmd != 0.0 {
        let categories: Vec<usize> = batch.iter().map(|(_, c)| *c).collect();
        let prepared = dmd_prepare(student, teacher, &categories, cfg, sched, rng)?;
        passes += prepared.generator_passes;
        let (value, g) = dmd_eval_grad(student, &prepared, sched)?;
        loss.dmd = value;
        grads = grads.axpy(cfg.lambda_dmd, &g)?;
    }
    loss.total = cfg.lambda_consistency * loss.scm + cfg.lambda_dmd * loss.dmd;
    Ok(RcmStep { loss, grads, dmd_generator_passes: passes, skipped_nonfinite: skipped })
}

/// Loss components only.
pub fn rcm_loss(
    student: &ConsistencyStudent,
    ema: &EmaState,
    teacher: &ToyTransformer,
    batch: &[(Tensor, usize)],
    cfg: &LossConfig,
    sched: &NoiseSchedule,
    rng: &mut DeterministicRng,
) -> Result<RcmLoss> {
    rcm_loss_grad(student, ema, teacher, batch, cfg, sched, rng).map(|s| s.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_abs_diff, with_precision, Precision};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            frames: 4,
            channels: 2,
            width: 8,
            blocks: 1,
            heads: 2,
            time_feats: 3,
            categories: 2,
            mlp_mult: 2,
        }
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1.0)
    }

    fn perturb(params: &ParamSet, scale: f64, seed: u64) -> ParamSet {
        let mut rng = DeterministicRng::seed_from(seed);
        let noise = ParamSet::from_iter(
            params
                .iter()
                .map(|(n, t)| (n.clone(), rng.normal_tensor(t.shape())))
                .collect::<Vec<_>>(),
        );
        params.axpy(scale, &noise).unwrap()
    }

    fn perturbed_student(seed: u64) -> ConsistencyStudent {
        let mut s = ConsistencyStudent::init(tiny_config(), seed).unwrap();
        s.net.params = perturb(&s.net.params, 0.1, seed + 100);
        s
    }

    fn perturbed_teacher(seed: u64) -> ToyTransformer {
        let mut t = ToyTransformer::init(tiny_config(), seed).unwrap();
        t.params = perturb(&t.params, 0.1, seed + 200);
        t
    }

    /// A student whose network output is the constant row `values`,
    /// regardless of input: every weight zero except the output bias.
    fn constant_net(values: &[f64]) -> ToyTransformer {
        let mut net = ToyTransformer::init(tiny_config(), 0).unwrap();
        net.params = net.params.zeros_like();
        *net.params.get_mut("out.b").unwrap() =
            Tensor::from_vec(vec![1, values.len()], values.to_vec()).unwrap();
        net
    }

    #[test]
    fn ema_update_cases() {
        let mut rng = DeterministicRng::seed_from(1);
        let student = ParamSet::from_iter(vec![("w".to_string(), rng.normal_tensor(&[2, 2]))]);

        // decay 0 copies the student.
        let ema = EmaState::new(student.zeros_like(), 0.0).unwrap();
        let updated = ema_update(&ema, &student).unwrap();
        assert_eq!(updated.params, student);

        // identical inputs stay put.
        let ema = EmaState::new(student.clone(), 0.97).unwrap();
        let updated = ema_update(&ema, &student).unwrap();
        assert_eq!(updated.params, student);

        // decay 0.9999 moving a zero leaf toward 1 lands at 1e-4.
        with_precision(Precision::Double, || {
            let zero = ParamSet::from_iter(vec![("w".to_string(), Tensor::scalar(0.0))]);
            let one = ParamSet::from_iter(vec![("w".to_string(), Tensor::scalar(1.0))]);
            let ema = EmaState::new(zero, 0.9999).unwrap();
            let updated = ema_update(&ema, &one).unwrap();
            let got = updated.params.get("w").unwrap().item();
            assert!((got - 1e-4).abs() <= 1e-12, "{got}");
        });

        // structure mismatch propagates.
        let other = ParamSet::from_iter(vec![("v".to_string(), Tensor::scalar(0.0))]);
        assert!(ema_update(&EmaState::new(other, 0.5).unwrap(), &student).is_err());
    }

    #[test]
    fn consistency_map_boundary_is_bitwise_identity() {
        let student = perturbed_student(3);
        let mut rng = DeterministicRng::seed_from(4);
        for _ in 0..20 {
            let x = rng.normal_tensor(&[4, 2]);
            let out = student.apply(&x, 0.0, 1).unwrap();
            assert_eq!(out.data(), x.data());
        }
    }

    #[test]
    fn zero_network_gives_identity_map() {
        let student = ConsistencyStudent::init(tiny_config(), 5).unwrap();
        let mut rng = DeterministicRng::seed_from(6);
        let x = rng.normal_tensor(&[4, 2]);
        let out = student.apply(&x, 0.7, 0).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn oracle_network_recovers_clean_data() {
        // Constant frames: x0 and x_t share one row each, so the required
        // f = (x_t - x0)/t is a constant row the output bias can express.
        let t = 0.8;
        let x0_row = [0.3, -0.5];
        let xt_row = [0.9, 0.1];
        let f_row: Vec<f64> = xt_row.iter().zip(&x0_row).map(|(a, b)| (a - b) / t).collect();
        let student = ConsistencyStudent { net: constant_net(&f_row) };

        let x_t = Tensor::from_vec(vec![4, 2], xt_row.repeat(4)).unwrap();
        let got = student.apply(&x_t, t, 0).unwrap();
        let want = Tensor::from_vec(vec![4, 2], x0_row.repeat(4)).unwrap();
        assert!(max_abs_diff(&got, &want) <= 1e-6);
    }

    #[test]
    fn target_g_is_velocity_for_identity_map() {
        // Zero-initialised student: F(x, t) = x, so dF/dx = I and dF/dt = 0.
        let student = ConsistencyStudent::init(tiny_config(), 7).unwrap();
        let ema = EmaState::new(student.params().clone(), 0.99).unwrap();
        let teacher = perturbed_teacher(8);
        let mut rng = DeterministicRng::seed_from(9);
        let x_t = rng.normal_tensor(&[4, 2]);
        let g = scm_target_g(&student, &ema, &teacher, &x_t, 0.4, 1, Weighting::Uniform).unwrap();
        let v = teacher.eval(&x_t, 0.4, 1).unwrap();
        assert!(max_abs_diff(&g, &v) <= 1e-9);
    }

    #[test]
    fn target_g_reduces_to_time_term_for_zero_velocity() {
        // Teacher outputs zero; the student net is a time-independent
        // constant c, so F = x - t c and g = dF/dt = -c.
        let teacher = ToyTransformer::init(tiny_config(), 10).unwrap();
        let c_row = [0.7, -0.2];
        let student = ConsistencyStudent { net: constant_net(&c_row) };
        let ema = EmaState::new(student.params().clone(), 0.99).unwrap();
        let mut rng = DeterministicRng::seed_from(11);
        let x_t = rng.normal_tensor(&[4, 2]);
        let g = scm_target_g(&student, &ema, &teacher, &x_t, 0.5, 0, Weighting::Uniform).unwrap();
        let want = Tensor::from_vec(vec![4, 2], c_row.repeat(4)).unwrap().map(|v| -v);
        assert!(max_abs_diff(&g, &want) <= 1e-9, "{:?}", g.data());
    }

    /// Step `x` forward in teacher time by `delta` with small Heun substeps
    /// (forward-time field: the learned velocity itself).
    fn step_along_flow(teacher: &ToyTransformer, x: &Tensor, t: f64, delta: f64, category: usize) -> Tensor {
        let sub = 8;
        let h = delta / sub as f64;
        let mut state = x.clone();
        let mut time = t;
        for _ in 0..sub {
            let d1 = teacher.eval(&state, time, category).unwrap();
            let euler = tensor::add(&state, &tensor::scale(&d1, h)).unwrap();
            let d2 = teacher.eval(&euler, time + h, category).unwrap();
            state = tensor::add(&state, &tensor::scale(&tensor::add(&d1, &d2).unwrap(), 0.5 * h)).unwrap();
            time += h;
        }
        state
    }

    #[test]
    fn target_g_matches_trajectory_derivative() {
        with_precision(Precision::Double, || {
            for seed in 0..5u64 {
                let student = perturbed_student(20 + seed);
                let ema = EmaState::new(student.params().clone(), 0.99).unwrap();
                let teacher = perturbed_teacher(30 + seed);
                let mut rng = DeterministicRng::seed_from(40 + seed);
                let x_t = rng.normal_tensor(&[4, 2]);
                let t = rng.uniform_in(0.3, 0.7);
                let category = 1;

                let g = scm_target_g(&student, &ema, &teacher, &x_t, t, category, Weighting::Uniform).unwrap();

                let h = 1e-3;
                let x_plus = step_along_flow(&teacher, &x_t, t, h, category);
                let x_minus = step_along_flow(&teacher, &x_t, t, -h, category);
                let f_plus = student.apply_with(&ema.params, &x_plus, t + h, category).unwrap();
                let f_minus = student.apply_with(&ema.params, &x_minus, t - h, category).unwrap();
                let fd = tensor::scale(&tensor::sub(&f_plus, &f_minus).unwrap(), 1.0 / (2.0 * h));

                let e = crate::tensor::rel_err(&g, &fd);
                assert!(e <= 1e-3, "seed {seed}: rel err {e}");
            }
        });
    }

    #[test]
    fn scm_loss_zero_when_target_matches() {
        // Identity map student, zero teacher: g = 0, target = x_t, F = x_t.
        let student = ConsistencyStudent::init(tiny_config(), 12).unwrap();
        let ema = EmaState::new(student.params().clone(), 0.99).unwrap();
        let teacher = ToyTransformer::init(tiny_config(), 13).unwrap();
        let mut rng = DeterministicRng::seed_from(14);
        let batch = vec![(rng.normal_tensor(&[4, 2]), 0usize); 3];
        let loss = scm_loss(&student, &ema, &teacher, &batch, &LossConfig::default(), &sched(), &mut rng).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn scm_loss_with_fixed_target_matches_formula() {
        // Identity student and a constant teacher velocity c: g = c, so the
        // per-element loss is |g|^2 / (|g|^2 + c_stab)^2.
        let cfg = LossConfig::default();
        let student = ConsistencyStudent::init(tiny_config(), 15).unwrap();
        let ema = EmaState::new(student.params().clone(), 0.99).unwrap();
        let teacher = constant_net(&[0.4, -0.3]);
        let mut rng = DeterministicRng::seed_from(16);
        let batch = vec![(rng.normal_tensor(&[4, 2]), 0usize)];
        let loss = scm_loss(&student, &ema, &teacher, &batch, &cfg, &sched(), &mut rng).unwrap();

        let g_row = [0.4, -0.3];
        let g_sq: f64 = g_row.iter().map(|v| v * v).sum::<f64>() * 4.0;
        let want = g_sq / (g_sq + cfg.c).powi(2);
        assert!((loss - want).abs() <= 1e-6, "{loss} vs {want}");
    }

    #[test]
    fn dmd_target_hand_case() {
        let x0 = Tensor::scalar(1.0);
        let fs = Tensor::scalar(0.5);
        let ft = Tensor::scalar(0.0);
        let target = dmd_target(&x0, &fs, &ft, 1.0, 1e-3).unwrap();
        // normaliser = |1 - 0| + 1e-3; target = 1 - 0.5/1.001.
        let want = 1.0 - 0.5 / 1.001;
        assert!((target.item() - want).abs() <= 1e-6);
        let loss = (1.0 - target.item()).powi(2);
        assert!((loss - 0.24950).abs() <= 1e-3, "hand-case loss {loss}");
    }

    #[test]
    fn dmd_loss_zero_when_predictions_agree() {
        // Zero nets: student and teacher predictions both collapse to x_t.
        let student = ConsistencyStudent::init(tiny_config(), 17).unwrap();
        let teacher = ToyTransformer::init(tiny_config(), 18).unwrap();
        let mut rng = DeterministicRng::seed_from(19);
        let loss = dmd_loss(&student, &teacher, &LossConfig::default(), &sched(), &mut rng, 4).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn dmd_loss_zero_for_zero_step_size() {
        let student = perturbed_student(21);
        let teacher = perturbed_teacher(22);
        let cfg = LossConfig { eta: 0.0, ..LossConfig::default() };
        let mut rng = DeterministicRng::seed_from(23);
        let loss = dmd_loss(&student, &teacher, &cfg, &sched(), &mut rng, 4).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn scm_gradient_matches_finite_differences_with_frozen_targets() {
        with_precision(Precision::Double, || {
            let student = perturbed_student(24);
            let ema = EmaState::new(perturb(student.params(), 0.05, 25), 0.99).unwrap();
            let teacher = perturbed_teacher(26);
            let mut rng = DeterministicRng::seed_from(27);
            let batch = vec![
                (rng.normal_tensor(&[4, 2]), 0usize),
                (rng.normal_tensor(&[4, 2]), 1usize),
            ];
            let prepared = scm_prepare(&student, &ema, &teacher, &batch, &LossConfig::default(), &sched(), &mut rng).unwrap();

            let (_, grad) = scm_eval_grad(&student, &prepared).unwrap();
            let fd = finite_diff_grad(
                |p| {
                    let s = ConsistencyStudent { net: student.net.with_params(p.clone()).unwrap() };
                    scm_eval(&s, &prepared)
                },
                student.params(),
                1e-4,
            )
            .unwrap();
            let num: f64 = grad
                .iter()
                .zip(fd.iter())
                .map(|((_, a), (_, b))| {
                    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
                })
                .sum::<f64>()
                .sqrt();
            let rel = num / fd.global_norm().max(1e-12);
            assert!(rel <= 1e-3, "relative gradient error {rel}");

            // Perturbing the frozen side changes the value but the gradient
            // check above already pinned stop-gradient placement.
            let ema2 = EmaState::new(perturb(&ema.params, 0.05, 28), 0.99).unwrap();
            let mut rng2 = DeterministicRng::seed_from(27);
            let prepared2 = scm_prepare(&student, &ema2, &teacher, &batch, &LossConfig::default(), &sched(), &mut rng2).unwrap();
            let v1 = scm_eval(&student, &prepared).unwrap();
            let v2 = scm_eval(&student, &prepared2).unwrap();
            assert!((v1 - v2).abs() > 0.0);
        });
    }

    #[test]
    fn dmd_gradient_matches_finite_differences_with_frozen_targets() {
        with_precision(Precision::Double, || {
            let student = perturbed_student(31);
            let teacher = perturbed_teacher(32);
            let mut rng = DeterministicRng::seed_from(33);
            let prepared = dmd_prepare(&student, &teacher, &[0, 1, 0], &LossConfig::default(), &sched(), &mut rng).unwrap();

            let (_, grad) = dmd_eval_grad(&student, &prepared, &sched()).unwrap();
            let fd = finite_diff_grad(
                |p| {
                    let s = ConsistencyStudent { net: student.net.with_params(p.clone()).unwrap() };
                    dmd_eval(&s, &prepared, &sched())
                },
                student.params(),
                1e-4,
            )
            .unwrap();
            let num: f64 = grad
                .iter()
                .zip(fd.iter())
                .map(|((_, a), (_, b))| {
                    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
                })
                .sum::<f64>()
                .sqrt();
            let rel = num / fd.global_norm().max(1e-12);
            assert!(rel <= 1e-3, "relative gradient error {rel}");
        });
    }

    #[test]
    fn combined_loss_weighting() {
        let student = perturbed_student(41);
        let ema = EmaState::new(student.params().clone(), 0.99).unwrap();
        let teacher = perturbed_teacher(42);
        let mut rng = DeterministicRng::seed_from(43);
        let batch = vec![(rng.normal_tensor(&[4, 2]), 0usize); 2];

        // Stage-1 weighting: the score term is absent and never evaluated.
        let cfg = LossConfig { lambda_dmd: 0.0, ..LossConfig::default() };
        let mut rng1 = DeterministicRng::seed_from(44);
        let step = rcm_loss_grad(&student, &ema, &teacher, &batch, &cfg, &sched(), &mut rng1).unwrap();
        assert_eq!(step.loss.dmd, 0.0);
        assert_eq!(step.dmd_generator_passes, 0);
        assert_eq!(step.loss.total, step.loss.scm);

        // Mid-curriculum weighting combines both terms.
        let cfg = LossConfig { lambda_dmd: 0.1, lambda_consistency: 1.0, ..LossConfig::default() };
        let mut rng2 = DeterministicRng::seed_from(44);
        let step = rcm_loss_grad(&student, &ema, &teacher, &batch, &cfg, &sched(), &mut rng2).unwrap();
        assert!(step.dmd_generator_passes > 0);
        let want = 1.0 * step.loss.scm + 0.1 * step.loss.dmd;
        assert!((step.loss.total - want).abs() <= 1e-12);

        // Both weights zero: nothing happens.
        let cfg = LossConfig { lambda_dmd: 0.0, lambda_consistency: 0.0, ..LossConfig::default() };
        let mut rng3 = DeterministicRng::seed_from(44);
        let step = rcm_loss_grad(&student, &ema, &teacher, &batch, &cfg, &sched(), &mut rng3).unwrap();
        assert_eq!(step.loss, RcmLoss::default());
        assert_eq!(step.grads.global_norm(), 0.0);
    }
}
