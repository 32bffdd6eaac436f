use rcm::diffusion::{train_teacher, TeacherTrainConfig};
use rcm::model::{ModelConfig, ToyTransformer};
use rcm::rng::DeterministicRng;
use rcm::schedule::NoiseSchedule;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let steps: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(800);
    let width: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(16);

    let mut model = ToyTransformer::init(
        ModelConfig { frames: 4, channels: 2, width, blocks: 1, heads: 2, time_feats: 4, categories: 3, mlp_mult: 2 },
        31,
    )
    .unwrap();
    let mut rng = DeterministicRng::seed_from(32);
    let point = rng.normal_tensor(&[4, 2]);
    let data = vec![(point, 0usize)];
    let cfg = TeacherTrainConfig {
        steps, batch: 32, lr, warmup: 10, grad_clip: 1.0, weight_decay: 0.0, prompt_dropout: 0.0,
    };
    let losses = train_teacher(&mut model, &data, &cfg, &NoiseSchedule::linear(1.0), 5).unwrap();
    for (i, chunk) in losses.chunks(steps as usize / 10).enumerate() {
        let mean: f64 = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("decile {i}: {mean:.5}");
    }
}
