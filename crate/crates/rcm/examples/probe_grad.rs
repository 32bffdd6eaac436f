use rcm::diffusion::{flow_matching_grad, flow_matching_loss, prepare_flow_batch};
use rcm::model::{ModelConfig, ToyTransformer};
use rcm::rng::DeterministicRng;
use rcm::schedule::NoiseSchedule;
use rcm::tensor::{finite_diff_grad, with_precision, ParamSet, Precision};

fn main() {
    with_precision(Precision::Double, || {
        let mut model = ToyTransformer::init(
            ModelConfig { frames: 3, channels: 2, width: 8, blocks: 1, heads: 2, time_feats: 3, categories: 2, mlp_mult: 2 },
            1,
        )
        .unwrap();
        let mut rng = DeterministicRng::seed_from(2);
        let noise = ParamSet::from_iter(
            model.params.iter().map(|(n, t)| (n.clone(), rng.normal_tensor(t.shape()))).collect::<Vec<_>>(),
        );
        model.params = model.params.axpy(0.15, &noise).unwrap();

        let sched = NoiseSchedule::linear(1.0);
        let batch = vec![(rng.normal_tensor(&[3, 2]), 0usize), (rng.normal_tensor(&[3, 2]), 1usize)];
        let items = prepare_flow_batch(&batch, &sched, &mut rng).unwrap();

        let (_, grad) = flow_matching_grad(&model, &items).unwrap();
        let fd = finite_diff_grad(
            |p| flow_matching_loss(&model.with_params(p.clone()).unwrap(), &items),
            &model.params,
            1e-5,
        )
        .unwrap();
        let mut worst = (0.0f64, String::new());
        for ((name, a), (_, b)) in grad.iter().zip(fd.iter()) {
            let num = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let den = b.data().iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-10);
            if num / den > worst.0 {
                worst = (num / den, name.clone());
            }
        }
        println!("worst leaf rel err: {} ({})", worst.0, worst.1);
    });
}
