// Probe: loss-combination cells on the bimodal task.
use rcm::data::{two_mode_prototype, two_mode_training_set, TwoModeSpec, WorldConfig};
use rcm::diffusion::{train_teacher, TeacherTrainConfig};
use rcm::eval::{evaluate_samples, multistep_sample, ModeSpec};
use rcm::losses::*;
use rcm::model::{ModelConfig, ToyTransformer};
use rcm::optim::{clip_global_norm, AdamW};
use rcm::rng::DeterministicRng;
use rcm::schedule::NoiseSchedule;
use rcm::tensor::Tensor;

fn train_cell(
    teacher: &ToyTransformer,
    data: &[(Tensor, usize)],
    phases: &[(u64, f64, f64)], // (steps, lambda_c, lambda_d)
    seed: u64,
    lr: f64,
) -> ConsistencyStudent {
    let sched = NoiseSchedule::linear(1.0);
    let mut student = ConsistencyStudent::init(teacher.config.clone(), seed).unwrap();
    let mut ema = EmaState::new(student.params().clone(), 0.9).unwrap();
    let mut opt = AdamW::new(student.params(), 0.01);
    let mut global = 0u64;
    for &(steps, lc, ld) in phases {
        let cfg = LossConfig { lambda_consistency: lc, lambda_dmd: ld, ..LossConfig::default() };
        for _ in 0..steps {
            global += 1;
            let mut rng = DeterministicRng::derive(seed ^ 0xabc, &[global]);
            let batch: Vec<_> = (0..16).map(|_| data[rng.index(data.len())].clone()).collect();
            let out = rcm_loss_grad(&student, &ema, teacher, &batch, &cfg, &sched, &mut rng).unwrap();
            let (g, _) = clip_global_norm(&out.grads, 1.0);
            let warm = (global as f64 / 20.0).min(1.0);
            opt.step(student.params_mut(), &g, lr * warm).unwrap();
            ema = ema_update(&ema, student.params()).unwrap();
        }
    }
    student
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    let world = WorldConfig::default();
    let spec = TwoModeSpec::default();
    let sched = NoiseSchedule::linear(1.0);

    let data = two_mode_training_set(&world, 400, &spec, 11 + seed);
    let mut teacher = ToyTransformer::init(ModelConfig::desk_default(), 1 + seed).unwrap();
    let tc = TeacherTrainConfig { steps: 900, batch: 32, lr: 2e-3, ..TeacherTrainConfig::default() };
    train_teacher(&mut teacher, &data, &tc, &sched, 2 + seed).unwrap();

    let reference: Vec<_> = two_mode_training_set(&world, 200, &spec, 999 + seed).into_iter().map(|(c, _)| c).collect();
    let modes = vec![
        ModeSpec { center: two_mode_prototype(&world, true), std: spec.jitter_std },
        ModeSpec { center: two_mode_prototype(&world, false), std: spec.jitter_std },
    ];

    let cells: Vec<(&str, Vec<(u64, f64, f64)>)> = vec![
        ("scm-only", vec![(2400, 1.0, 0.0)]),
        ("combined", vec![(1200, 1.0, 0.0), (1200, 1.0, 0.1)]),
        ("dmd-only", vec![(2400, 0.0, 1.0)]),
    ];
    for (name, phases) in cells {
        let t0 = std::time::Instant::now();
        let student = train_cell(&teacher, &data, &phases, 3 + seed, 1e-3);
        let clips = multistep_sample(&student, 4, 200, 0, &sched, 31 + seed).unwrap();
        let rep = evaluate_samples(&clips, &reference, &modes, &world, 4, 64, 5, 0.0).unwrap();
        println!(
            "{name:9} W={:.4} recall={:.2} prec={:.2} var={:.2}  ({:.0}s)",
            rep.sliced_wasserstein, rep.mode_recall, rep.mode_precision, rep.per_mode_variance_ratio,
            t0.elapsed().as_secs_f64()
        );
    }
}
