//! Run every method over the default stream and print a comparison table.
//!
//!     cargo run --release -p mergeslide --example methods_table
//!
//! Environment knobs for quick sensitivity checks: SIGMA_S, NOISE_STD,
//! BASE_SCALE, RHO_SHARED, LR, FOLDS, SEEDS.

use mergeslide::aggregator::TrainConfig;
use mergeslide::harness::{run_stream, Method, RunHyper};
use mergeslide::stream::{gen_stream, StreamConfig};

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let folds = env_f64("FOLDS", 3.0) as u64;
    let seeds: Vec<u64> = (1..=env_f64("SEEDS", 3.0) as u64).collect();

    let base_config = StreamConfig::default_desk(42, 0);
    let sigma_s = env_f64("SIGMA_S", base_config.signal_fraction);
    let noise_std = env_f64("NOISE_STD", base_config.noise_std);
    let rho_shared = env_f64("RHO_SHARED", base_config.rho_shared.unwrap_or(0.0));
    let base_scale = env_f64("BASE_SCALE", 0.02);
    let lr = env_f64("LR", TrainConfig::default().learning_rate);
    let wd = env_f64("WD", TrainConfig::default().weight_decay);
    eprintln!(
        "sigma_s={sigma_s} noise_std={noise_std} rho_shared={rho_shared} base_scale={base_scale} lr={lr}"
    );

    println!(
        "{:<16} {:>7} {:>12} {:>9} {:>7} {:>7}",
        "method", "bacc", "masked_bacc", "mean_acc", "fgt", "bwt"
    );
    for method in Method::ALL {
        let mut sums = [0.0f64; 5];
        let mut n = 0.0;
        for fold in 0..folds {
            for &seed in &seeds {
                let mut config = StreamConfig::default_desk(42, fold);
                config.signal_fraction = sigma_s;
                config.noise_std = noise_std;
                config.d = env_f64("D", config.d as f64) as usize;
                config.rho_in = env_f64("RHO_IN", config.rho_in);
                config.rho_shared = Some(rho_shared);
                config.normalize = std::env::var("NORMALIZE").is_ok();
                let stream = gen_stream(&config).expect("stream generation");
                let hyper = RunHyper {
                    train_seed: seed,
                    base_init_scale: base_scale,
                    eval_subsample_k: Some(env_f64("EVAL_K", 16.0) as usize),
                    train: TrainConfig {
                        learning_rate: lr,
                        weight_decay: wd,
                        ..TrainConfig::default()
                    },
                    ..RunHyper::default()
                };
                let result = run_stream(&stream, method, &hyper, None).expect("run");
                let r = &result.report;
                for (s, v) in sums
                    .iter_mut()
                    .zip([r.bacc, r.masked_bacc, r.mean_acc, r.fgt, r.bwt])
                {
                    *s += v;
                }
                n += 1.0;
            }
        }
        println!(
            "{:<16} {:>7.4} {:>12.4} {:>9.4} {:>7.4} {:>+7.4}",
            method.name(),
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n,
            sums[4] / n
        );
    }
}
