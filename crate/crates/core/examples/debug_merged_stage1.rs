//! Stage-1 routing accuracy of the fully merged model, per task (debug aid).

use mergeslide::aggregator::{forward, train_task, AggregatorParams, TrainConfig};
use mergeslide::checkpoint::Checkpoint;
use mergeslide::harness::RunHyper;
use mergeslide::merge::{LambdaMode, MergeState};
use mergeslide::prompt::{naive_infer, tcp_infer};
use mergeslide::stream::{gen_stream, StreamConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let mut config = StreamConfig::default_desk(42, 0);
    config.signal_fraction = env_f64("SIGMA_S", config.signal_fraction);
    config.rho_in = env_f64("RHO_IN", config.rho_in);
    config.rho_shared = Some(env_f64("RHO_SHARED", config.rho_shared.unwrap_or(0.0)));
    let stream = gen_stream(&config).expect("stream");
    let bank = stream.bank();
    let hyper = RunHyper::default();
    let base = AggregatorParams::base_init(bank.dim(), hyper.base_seed, env_f64("BASE_SCALE", 0.02));
    let train_cfg = TrainConfig {
        learning_rate: env_f64("LR", 1e-3),
        ..TrainConfig::default()
    };

    let mut state = MergeState::init(base.to_checkpoint(), LambdaMode::Global);
    for k in 0..stream.num_tasks() {
        let mut rng = ChaCha8Rng::seed_from_u64(mergeslide::rand_util::child_seed(1, &[k as u64]));
        stream.begin_task_phase(k);
        let (params, _) = train_task(
            stream.train_bags(k),
            &base,
            bank.task(k).unwrap().class_embeddings(),
            &train_cfg,
            &mut rng,
        )
        .unwrap();
        stream.end_task_phase();
        state.merge_step(&params.to_checkpoint()).unwrap();
    }
    let merged: Checkpoint = state.finalize().unwrap();
    let merged = AggregatorParams::from_checkpoint(&merged).unwrap();

    for (name, params) in [("base", &base), ("merged", &merged)] {
        println!("--- {name}");
        for t in 0..stream.num_tasks() {
            let mut stage1 = 0;
            let mut naive_task = 0;
            let mut naive_both = 0;
            let mut tcp_both = 0;
            let mut n = 0;
            for bag in stream.test_bags(t) {
                let z = forward(&bag.patches, params).unwrap();
                let p = tcp_infer(&z, bank).unwrap();
                let q = naive_infer(&z, bank).unwrap();
                if p.task_id == t {
                    stage1 += 1;
                    if p.class_id == bag.label {
                        tcp_both += 1;
                    }
                }
                if q.task_id == t {
                    naive_task += 1;
                    if q.class_id == bag.label {
                        naive_both += 1;
                    }
                }
                n += 1;
            }
            println!(
                "  task {t} ({}): tcp stage1 {stage1}/{n} acc {tcp_both}/{n} | naive task {naive_task}/{n} acc {naive_both}/{n}",
                stream.task_name(t)
            );
        }
    }
}
