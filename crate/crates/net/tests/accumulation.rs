use candle_core::{DType, Device, Tensor};
use candle_nn::{Optimizer, SGD};
use cephalo_net::train::GradAccumulator;
use cephalo_net::{heatmap_loss, LandmarkModel, Mode, ModelSpec, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 3;

fn inputs() -> (Tensor, Tensor) {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data: Vec<f64> = (0..N * 64 * 64)
        .map(|_| rng.random_range(0.0..255.0))
        .collect();
    let x = Tensor::from_vec(data, (N, 1, 64, 64), &dev).unwrap();
    let mut t = vec![0f64; N * 53 * 64 * 64];
    for plane in 0..N * 53 {
        t[plane * 4096 + (plane * 37) % 4096] = 1.0;
    }
    (x, Tensor::from_vec(t, (N, 53, 64, 64), &dev).unwrap())
}

fn params_after(accumulate: bool) -> Vec<Vec<f64>> {
    let model =
        LandmarkModel::random(&ModelSpec::deterministic(Variant::Nano), DType::F64, 5).unwrap();
    let vars = model.params().vars();
    let mut opt = SGD::new(vars.clone(), 1.0).unwrap();
    let (x, target) = inputs();
    let valid = vec![vec![true; 53]; N];
    // no stochastic layers in this spec, so Train only keeps the graph
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    if accumulate {
        let mut acc = GradAccumulator::new(vars.clone());
        for i in 0..N {
            let y = model
                .forward(&x.narrow(0, i, 1).unwrap(), &mut Mode::Train(&mut rng))
                .unwrap();
            let loss = heatmap_loss(&y, &target.narrow(0, i, 1).unwrap(), &valid[..1]).unwrap();
            acc.accumulate(&loss).unwrap();
        }
        acc.step(&mut opt).unwrap();
    } else {
        let y = model.forward(&x, &mut Mode::Train(&mut rng)).unwrap();
        let loss = heatmap_loss(&y, &target, &valid).unwrap();
        opt.backward_step(&loss).unwrap();
    }
    vars.iter()
        .map(|v| {
            v.as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()
        })
        .collect()
}

#[test]
fn accumulated_singles_match_one_batch_step() {
    let before: Vec<Vec<f64>> =
        LandmarkModel::random(&ModelSpec::deterministic(Variant::Nano), DType::F64, 5)
            .unwrap()
            .params()
            .vars()
            .iter()
            .map(|v| {
                v.as_tensor()
                    .flatten_all()
                    .unwrap()
                    .to_vec1::<f64>()
                    .unwrap()
            })
            .collect();
    let acc = params_after(true);
    let batch = params_after(false);
    let mut moved = 0usize;
    for ((a, b), p) in acc.iter().zip(&batch).zip(&before) {
        for ((a, b), p) in a.iter().zip(b).zip(p) {
            // compare the updates, i.e. the mean gradients, since lr is 1
            let (da, db) = (a - p, b - p);
            if db != 0.0 {
                moved += 1;
            }
            assert!(
                (da - db).abs() <= 1e-5 * db.abs().max(1e-6),
                "update {da} vs {db}"
            );
        }
    }
    assert!(moved > 1000, "only {moved} parameters changed");
}
