//! Inspect the task-routing stage after training the first task (debug aid).

use mergeslide::aggregator::{forward, train_task, AggregatorParams, TrainConfig};
use mergeslide::harness::RunHyper;
use mergeslide::prompt::tcp_infer;
use mergeslide::stream::{gen_stream, StreamConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let mut config = StreamConfig::default_desk(42, 0);
    config.signal_fraction = env_f64("SIGMA_S", config.signal_fraction);
    config.rho_shared = Some(env_f64("RHO_SHARED", config.rho_shared.unwrap_or(0.0)));
    config.normalize = std::env::var("NORMALIZE").is_ok();
    let stream = gen_stream(&config).expect("stream");
    let bank = stream.bank();
    let hyper = RunHyper::default();
    let base = AggregatorParams::base_init(bank.dim(), hyper.base_seed, env_f64("BASE_SCALE", 0.02));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    stream.begin_task_phase(0);
    let (trained, hist) = train_task(
        stream.train_bags(0),
        &base,
        bank.task(0).unwrap().class_embeddings(),
        &TrainConfig::default(),
        &mut rng,
    )
    .unwrap();
    stream.end_task_phase();
    println!("loss history: {:?}", hist.iter().map(|l| (l * 100.0).round() / 100.0).collect::<Vec<_>>());

    for (name, params) in [("base", &base), ("trained_t0", &trained)] {
        let mut task_hits = 0;
        let mut class_hits = 0;
        let mut n = 0;
        let mut mean_scores = vec![0.0; bank.num_tasks()];
        for bag in stream.test_bags(0) {
            let z = forward(&bag.patches, params).unwrap();
            let pred = tcp_infer(&z, bank).unwrap();
            for (s, v) in mean_scores.iter_mut().zip(&pred.task_scores) {
                *s += v;
            }
            if pred.task_id == 0 {
                task_hits += 1;
                if pred.class_id == bag.label {
                    class_hits += 1;
                }
            }
            n += 1;
        }
        let scores: Vec<String> = mean_scores.iter().map(|s| format!("{:.2}", s / n as f64)).collect();
        println!(
            "{name:<12} stage1 {task_hits}/{n}  both {class_hits}/{n}  mean task scores [{}]",
            scores.join(" ")
        );
    }
}
