//! Print the final accuracy-matrix row per method (debug aid).

use mergeslide::aggregator::TrainConfig;
use mergeslide::harness::{run_stream, Method, RunHyper};
use mergeslide::stream::{gen_stream, StreamConfig};

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let mut config = StreamConfig::default_desk(42, 0);
    config.signal_fraction = env_f64("SIGMA_S", config.signal_fraction);
    config.noise_std = env_f64("NOISE_STD", config.noise_std);
    config.rho_shared = Some(env_f64("RHO_SHARED", config.rho_shared.unwrap_or(0.0)));
    config.normalize = std::env::var("NORMALIZE").is_ok();
    let stream = gen_stream(&config).expect("stream");
    let hyper = RunHyper {
        base_init_scale: env_f64("BASE_SCALE", 0.02),
        train: TrainConfig {
            learning_rate: env_f64("LR", 1e-3),
            epochs: env_f64("EPOCHS", 10.0) as usize,
            ..TrainConfig::default()
        },
        ..RunHyper::default()
    };
    let t = stream.num_tasks();
    for method in Method::ALL {
        let result = run_stream(&stream, method, &hyper, None).expect("run");
        let row: Vec<String> = (0..t)
            .map(|i| format!("{:.3}", result.class_il_overall.get(t - 1, i).unwrap()))
            .collect();
        let diag: Vec<String> = (0..t)
            .map(|i| format!("{:.3}", result.class_il_overall.get(i, i).unwrap()))
            .collect();
        println!("{:<16} final_row=[{}] diag=[{}]", method.name(), row.join(" "), diag.join(" "));
    }
}
