use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sdeguard_core::dynamics::{make_system, Gbm, SystemOptions, ZeroController};
use sdeguard_core::simulate::euler_maruyama_path;
use sdeguard_core::training::{train, TrainConfig};

/// Mean absolute endpoint error against the exact solution at steps
/// `2^-4`, `2^-6`, `2^-8` on shared Brownian paths.
fn strong_errors(paths: usize) -> [f64; 3] {
    let gbm = Gbm::new(0.5, 0.8);
    let fine = 1usize << 8;
    let dt = 1.0 / fine as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut err = [0.0; 3];
    for _ in 0..paths {
        let dw: Vec<f64> = (0..fine)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * dt.sqrt()
            })
            .collect();
        let exact = gbm.exact(1.0, 1.0, dw.iter().sum());
        for (k, stride) in [16usize, 4, 1].into_iter().enumerate() {
            let coarse: Vec<Vec<f64>> = dw.chunks(stride).map(|c| vec![c.iter().sum()]).collect();
            let path = euler_maruyama_path(&gbm, &ZeroController(1), &[1.0], dt * stride as f64, &coarse).unwrap();
            err[k] += (path.last_state()[0] - exact).abs();
        }
    }
    err.map(|e| e / paths as f64)
}

#[test]
fn gbm_strong_order_one_half() {
    let e = strong_errors(400);
    // quartering the step halves the error at strong order 1/2
    for w in e.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.2..=2.8).contains(&ratio), "errors {e:?}");
    }
}

#[test]
fn gbm_training_lowers_the_loss() {
    let sys = make_system("gbm", &SystemOptions::default()).unwrap();
    let mut ratios: Vec<f64> = (0..5)
        .map(|seed| {
            let mut cfg = TrainConfig::for_system("gbm").unwrap();
            cfg.iterations = 80;
            cfg.batch_size = 200;
            cfg.seed = seed;
            let out = train(&cfg, &sys).unwrap();
            let first = out.history.first().unwrap().total();
            out.history.tail_mean(10).unwrap() / first
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[2] < 1.0, "{ratios:?}");
}
