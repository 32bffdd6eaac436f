// Probe: does consistency training reduce along-trajectory spread?
use rcm::data::{two_mode_prototype, two_mode_training_set, TwoModeSpec, WorldConfig};
use rcm::diffusion::{train_teacher, TeacherTrainConfig};
use rcm::eval::{consistency_spread, evaluate_samples, multistep_sample, ModeSpec};
use rcm::losses::*;
use rcm::model::{ModelConfig, ToyTransformer};
use rcm::optim::{clip_global_norm, AdamW};
use rcm::rng::DeterministicRng;
use rcm::schedule::NoiseSchedule;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let steps: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(400);
    let decay: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.99);

    let world = WorldConfig::default();
    let spec = TwoModeSpec::default();
    let sched = NoiseSchedule::linear(1.0);
    let model_cfg = ModelConfig::desk_default();

    // Teacher on the bimodal task.
    let data = two_mode_training_set(&world, 400, &spec, 11);
    let mut teacher = ToyTransformer::init(model_cfg.clone(), 1).unwrap();
    let tc = TeacherTrainConfig { steps: 900, batch: 32, lr: 2e-3, ..TeacherTrainConfig::default() };
    let losses = train_teacher(&mut teacher, &data, &tc, &sched, 2).unwrap();
    println!("teacher loss: {:.4} -> {:.4}", losses[0], losses[losses.len()-1]);

    // Teacher 50-step sample quality.
    let t_samples = rcm::diffusion::teacher_sample(&teacher, 200, 50, 0, 77, &sched, 1.0).unwrap();
    let reference: Vec<_> = two_mode_training_set(&world, 200, &spec, 999).into_iter().map(|(c, _)| c).collect();
    let modes = vec![
        ModeSpec { center: two_mode_prototype(&world, true), std: spec.jitter_std },
        ModeSpec { center: two_mode_prototype(&world, false), std: spec.jitter_std },
    ];
    let rep = evaluate_samples(&t_samples, &reference, &modes, &world, 50, 64, 5, 0.0).unwrap();
    println!("teacher 50-step: W={:.4} recall={:.2} prec={:.2} var={:.2}", rep.sliced_wasserstein, rep.mode_recall, rep.mode_precision, rep.per_mode_variance_ratio);

    // sCM-only distillation.
    let cfg = LossConfig { lambda_dmd: 0.0, ..LossConfig::default() };
    let mut student = ConsistencyStudent::init(model_cfg.clone(), 3).unwrap();
    let mut ema = EmaState::new(student.params().clone(), decay).unwrap();
    let mut opt = AdamW::new(student.params(), 0.01);

    let s0 = consistency_spread(&student, &teacher, 16, 16, 0, &sched, 21).unwrap();
    println!("spread at init: {s0:.4}");

    for step in 1..=steps {
        let mut rng = DeterministicRng::derive(7, &[step]);
        let batch: Vec<_> = (0..16).map(|_| {
            data[rng.index(data.len())].clone()
        }).collect();
        let out = rcm_loss_grad(&student, &ema, &teacher, &batch, &cfg, &sched, &mut rng).unwrap();
        let (g, _) = clip_global_norm(&out.grads, 1.0);
        let warm = (step as f64 / 20.0).min(1.0);
        opt.step(student.params_mut(), &g, lr * warm).unwrap();
        ema = ema_update(&ema, student.params()).unwrap();
        if step % (steps / 4) == 0 {
            let s = consistency_spread(&student, &teacher, 16, 16, 0, &sched, 21).unwrap();
            // sample a g magnitude for diagnostics
            let mut rng2 = DeterministicRng::derive(99, &[step]);
            let (x0c, cat) = data[rng2.index(data.len())].clone();
            let t = rng2.uniform_in(0.0, 1.0);
            let eps = rng2.normal_tensor(x0c.shape());
            let xt = rcm::diffusion::add_noise(&x0c, &eps, t, &sched).unwrap();
            let g = scm_target_g(&student, &ema, &teacher, &xt, t, cat, Weighting::Uniform).unwrap();
            println!("step {step}: scm={:.5} spread={s:.4} |g|^2={:.2}", out.loss.scm, g.sq_norm());
        }
    }

    for steps_s in [1usize, 4] {
        let clips = multistep_sample(&student, steps_s, 200, 0, &sched, 31).unwrap();
        let rep = evaluate_samples(&clips, &reference, &modes, &world, steps_s, 64, 5, 0.0).unwrap();
        println!("student {steps_s}-step: W={:.4} recall={:.2} prec={:.2} var={:.2}", rep.sliced_wasserstein, rep.mode_recall, rep.mode_precision, rep.per_mode_variance_ratio);
    }
}
