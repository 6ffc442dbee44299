//! End-to-end lifelong-learning runs: per-task fine-tune, merge, evaluate
//! on every seen test set, and summarize with the continual-learning
//! metric suite.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aggregator::{forward, train_task, AggregatorParams, TrainConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::merge::{average_merge, LambdaMode, MergeState};
use crate::metrics::{
    balanced_accuracy, backward_transfer, forgetting, mean_acc, overall_accuracy, AccuracyMatrix,
    Averaging, MeanAccMode, MetricReport, Setting,
};
use crate::matrix::Matrix;
use crate::prompt::{masked_infer, naive_infer, tcp_infer, PromptBank};
use crate::rand_util::child_seed;
use crate::stream::Stream;

/// How the stream is consumed and which weights are evaluated after each
/// task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Orthogonal continual merging, two-stage task-then-class inference.
    MergeTcp,
    /// Orthogonal continual merging, flat argmax over all classes.
    MergeNaive,
    /// Continue fine-tuning the same weights task after task; no merging.
    SeqFinetune,
    /// Evaluate the base weights only; no training at all.
    ZeroShot,
    /// Plain task-vector averaging instead of the orthogonal merge.
    AvgMerge,
    /// Each task evaluated with its own fine-tuned weights (upper
    /// reference; per-task reading of a fully supervised bound).
    PerTaskOracle,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::MergeTcp,
        Method::MergeNaive,
        Method::SeqFinetune,
        Method::ZeroShot,
        Method::AvgMerge,
        Method::PerTaskOracle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::MergeTcp => "merge_tcp",
            Method::MergeNaive => "merge_naive",
            Method::SeqFinetune => "seq_finetune",
            Method::ZeroShot => "zero_shot",
            Method::AvgMerge => "avg_merge",
            Method::PerTaskOracle => "per_task_oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }

    /// Class-incremental inference used for this method's evaluation. The
    /// two-stage mode belongs to the orthogonal merge and its averaging
    /// ablation; every baseline uses the flat argmax.
    fn uses_tcp(&self) -> bool {
        matches!(self, Method::MergeTcp | Method::AvgMerge)
    }
}

/// Everything a run needs besides the stream itself.
#[derive(Debug, Clone)]
pub struct RunHyper {
    pub train: TrainConfig,
    pub lambda_mode: LambdaMode,
    pub mean_acc_mode: MeanAccMode,
    /// Seed for the shared base weights.
    pub base_seed: u64,
    /// Scale of the base initialization noise.
    pub base_init_scale: f64,
    /// Seed driving per-task training randomness (shuffling, subsampling).
    pub train_seed: u64,
    /// Patch budget at evaluation time; `None` scores full bags. Sampling
    /// is deterministic per (task, bag) so reruns match bit for bit.
    pub eval_subsample_k: Option<usize>,
}

impl Default for RunHyper {
    fn default() -> RunHyper {
        RunHyper {
            train: TrainConfig::default(),
            lambda_mode: LambdaMode::Global,
            mean_acc_mode: MeanAccMode::FinalTasks,
            base_seed: 17,
            base_init_scale: 0.05,
            train_seed: 1,
            eval_subsample_k: Some(16),
        }
    }
}

/// Wall-clock profile of a run, split by stage.
#[derive(Debug, Clone, Serialize)]
pub struct Timings {
    pub finetune_s: f64,
    pub finetune_avg_per_task_s: f64,
    pub merge_s: f64,
    pub merge_avg_per_task_s: f64,
    pub eval_s: f64,
    pub eval_slides_per_s: f64,
    pub total_s: f64,
}

#[derive(Debug)]
pub struct RunResult {
    pub method: Method,
    pub class_il_overall: AccuracyMatrix,
    pub class_il_balanced: AccuracyMatrix,
    pub task_il_balanced: AccuracyMatrix,
    pub report: MetricReport,
    pub timings: Timings,
    pub checkpoint_paths: Vec<PathBuf>,
}

struct EvalOutcome {
    overall: f64,
    balanced: f64,
    masked_balanced: f64,
}

/// Slide embedding of a test bag under the evaluation patch budget. The
/// sample depends only on (task, bag index), so every method and stage sees
/// the same sub-bags.
fn eval_embedding(
    bag: &crate::aggregator::Bag,
    params: &AggregatorParams,
    t: usize,
    bag_idx: usize,
    eval_k: Option<usize>,
) -> Result<Matrix> {
    match eval_k {
        Some(k) => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(child_seed(0x45564131, &[t as u64, bag_idx as u64]));
            let sub = crate::aggregator::subsample(bag, k, &mut rng)?;
            forward(&sub.patches, params)
        }
        None => forward(&bag.patches, params),
    }
}

/// Evaluate `params` on task `t`'s test bags under both settings.
fn eval_task(
    stream: &Stream,
    bank: &PromptBank,
    params: &AggregatorParams,
    t: usize,
    use_tcp: bool,
    eval_k: Option<usize>,
) -> Result<EvalOutcome> {
    let bags = stream.test_bags(t);
    let classes = bank.task(t)?.class_count();
    // wrong-task predictions map to a sentinel class that never occurs in
    // y_true, so balanced accuracy counts them as misses without widening
    // any real class's denominator
    let sentinel = classes;
    let mut y_true = Vec::with_capacity(bags.len());
    let mut y_class_il = Vec::with_capacity(bags.len());
    let mut y_task_il = Vec::with_capacity(bags.len());
    for (i, bag) in bags.iter().enumerate() {
        let z = eval_embedding(bag, params, t, i, eval_k)?;
        let pred = if use_tcp {
            tcp_infer(&z, bank)?
        } else {
            naive_infer(&z, bank)?
        };
        y_true.push(bag.label);
        y_class_il.push(if pred.task_id == t { pred.class_id } else { sentinel });
        y_task_il.push(masked_infer(&z, bank, t)?.class_id);
    }
    Ok(EvalOutcome {
        overall: overall_accuracy(&y_true, &y_class_il)?,
        balanced: balanced_accuracy(&y_true, &y_class_il, classes + 1)?,
        masked_balanced: balanced_accuracy(&y_true, &y_task_il, classes)?,
    })
}

/// Pooled predictions over the union of all test sets with the final
/// weights; classes are flattened to global ids across tasks.
fn pooled_bacc(
    stream: &Stream,
    bank: &PromptBank,
    params: &AggregatorParams,
    use_tcp: bool,
    eval_k: Option<usize>,
) -> Result<(f64, f64)> {
    let offsets: Vec<usize> = {
        let mut acc = 0;
        (0..bank.num_tasks())
            .map(|t| {
                let o = acc;
                acc += bank.task(t).unwrap().class_count();
                o
            })
            .collect()
    };
    let total_classes: usize = offsets.last().unwrap() + bank.task(bank.num_tasks() - 1)?.class_count();

    let mut y_true = Vec::new();
    let mut y_class_il = Vec::new();
    let mut y_task_il = Vec::new();
    for t in 0..stream.num_tasks() {
        for (i, bag) in stream.test_bags(t).iter().enumerate() {
            let z = eval_embedding(bag, params, t, i, eval_k)?;
            let pred = if use_tcp {
                tcp_infer(&z, bank)?
            } else {
                naive_infer(&z, bank)?
            };
            y_true.push(offsets[t] + bag.label);
            y_class_il.push(offsets[pred.task_id] + pred.class_id);
            y_task_il.push(offsets[t] + masked_infer(&z, bank, t)?.class_id);
        }
    }
    Ok((
        balanced_accuracy(&y_true, &y_class_il, total_classes)?,
        balanced_accuracy(&y_true, &y_task_il, total_classes)?,
    ))
}

/// Run one method over the whole stream. Tasks are processed strictly in
/// order; after each task the method's current weights are evaluated on all
/// seen test sets. Trained per-task checkpoints are saved under
/// `checkpoint_dir` when given.
pub fn run_stream(
    stream: &Stream,
    method: Method,
    hyper: &RunHyper,
    checkpoint_dir: Option<&Path>,
) -> Result<RunResult> {
    let start = Instant::now();
    let t_count = stream.num_tasks();
    if t_count == 0 {
        return Err(Error::InvalidConfig("stream has no tasks".into()));
    }
    let bank = stream.bank().clone();
    let d = bank.dim();
    let base = AggregatorParams::base_init(d, hyper.base_seed, hyper.base_init_scale);

    let mut class_il_overall = AccuracyMatrix::new(t_count, Averaging::Overall, Setting::ClassIl);
    let mut class_il_balanced = AccuracyMatrix::new(t_count, Averaging::Balanced, Setting::ClassIl);
    let mut task_il_balanced = AccuracyMatrix::new(t_count, Averaging::Balanced, Setting::TaskIl);
    let sizes: Vec<usize> = (0..t_count).map(|t| stream.test_bags(t).len()).collect();
    class_il_overall.set_test_sizes(sizes.clone());
    class_il_balanced.set_test_sizes(sizes.clone());
    task_il_balanced.set_test_sizes(sizes);

    let mut merge_state = MergeState::init(base.to_checkpoint(), hyper.lambda_mode);
    let mut seq_params = base.clone();
    let mut trained: Vec<Checkpoint> = Vec::new();
    let mut per_task_params: Vec<AggregatorParams> = Vec::new();
    let mut checkpoint_paths = Vec::new();

    let mut finetune_s = 0.0;
    let mut merge_s = 0.0;
    let mut eval_s = 0.0;
    let mut eval_count = 0usize;

    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("base.msld");
        base.to_checkpoint().save(&path)?;
        checkpoint_paths.push(path);
    }

    for k in 0..t_count {
        stream.begin_task_phase(k);

        // fine-tune for this task, if the method trains at all
        let tick = Instant::now();
        if method != Method::ZeroShot {
            let init = match method {
                Method::SeqFinetune => seq_params.clone(),
                _ => base.clone(),
            };
            let class_embeddings = bank.task(k)?.class_embeddings().clone();
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(hyper.train_seed, &[k as u64]));
            let (params, _history) =
                train_task(stream.train_bags(k), &init, &class_embeddings, &hyper.train, &mut rng)?;
            if let Some(dir) = checkpoint_dir {
                let mut c = params.to_checkpoint();
                c.set_meta("task_id", k.to_string());
                c.set_meta("task_name", stream.task_name(k).to_string());
                let path = dir.join(format!("{}_task_{k}.msld", method.name()));
                c.save(&path)?;
                checkpoint_paths.push(path);
            }
            match method {
                Method::SeqFinetune => seq_params = params,
                Method::PerTaskOracle => per_task_params.push(params),
                Method::AvgMerge => trained.push(params.to_checkpoint()),
                Method::MergeTcp | Method::MergeNaive => trained.push(params.to_checkpoint()),
                Method::ZeroShot => unreachable!(),
            }
        }
        finetune_s += tick.elapsed().as_secs_f64();

        // fold the new weights into the running merge
        let tick = Instant::now();
        let eval_params: AggregatorParams = match method {
            Method::MergeTcp | Method::MergeNaive => {
                merge_state.merge_step(trained.last().unwrap())?;
                AggregatorParams::from_checkpoint(&merge_state.finalize()?)?
            }
            Method::AvgMerge => AggregatorParams::from_checkpoint(&average_merge(
                &base.to_checkpoint(),
                &trained,
            )?)?,
            Method::SeqFinetune => seq_params.clone(),
            Method::ZeroShot => base.clone(),
            Method::PerTaskOracle => base.clone(), // unused; see below
        };
        merge_s += tick.elapsed().as_secs_f64();

        // evaluate on every seen test set
        let tick = Instant::now();
        for t in 0..=k {
            let params = if method == Method::PerTaskOracle {
                &per_task_params[t]
            } else {
                &eval_params
            };
            let out = eval_task(stream, &bank, params, t, method.uses_tcp(), hyper.eval_subsample_k)?;
            class_il_overall.set(k, t, out.overall)?;
            class_il_balanced.set(k, t, out.balanced)?;
            task_il_balanced.set(k, t, out.masked_balanced)?;
            eval_count += stream.test_bags(t).len();
        }
        eval_s += tick.elapsed().as_secs_f64();

        stream.end_task_phase();
    }

    // end-of-stream pooled metrics with the final weights
    let tick = Instant::now();
    let final_params = match method {
        Method::MergeTcp | Method::MergeNaive => {
            AggregatorParams::from_checkpoint(&merge_state.finalize()?)?
        }
        Method::AvgMerge => {
            AggregatorParams::from_checkpoint(&average_merge(&base.to_checkpoint(), &trained)?)?
        }
        Method::SeqFinetune => seq_params,
        Method::ZeroShot => base.clone(),
        Method::PerTaskOracle => base.clone(),
    };
    let (bacc, masked_bacc) = if method == Method::PerTaskOracle {
        pooled_bacc_per_task(stream, &bank, &per_task_params, hyper.eval_subsample_k)?
    } else {
        pooled_bacc(stream, &bank, &final_params, method.uses_tcp(), hyper.eval_subsample_k)?
    };
    eval_s += tick.elapsed().as_secs_f64();

    if let Some(dir) = checkpoint_dir {
        if matches!(method, Method::MergeTcp | Method::MergeNaive | Method::AvgMerge) {
            let path = dir.join(format!("{}_merged.msld", method.name()));
            final_params.to_checkpoint().save(&path)?;
            checkpoint_paths.push(path);
        }
    }

    // single-task streams have no earlier tasks to forget or transfer to
    let (fgt, bwt) = if t_count >= 2 {
        (forgetting(&class_il_overall)?, backward_transfer(&class_il_overall)?)
    } else {
        (0.0, 0.0)
    };
    let report = MetricReport {
        bacc,
        masked_bacc,
        mean_acc: mean_acc(&class_il_overall, hyper.mean_acc_mode)?,
        fgt,
        bwt,
    };
    if !report.is_finite() {
        return Err(Error::NonFiniteMetric(format!(
            "{} report {report:?}",
            method.name()
        )));
    }

    let total_s = start.elapsed().as_secs_f64();
    let timings = Timings {
        finetune_s,
        finetune_avg_per_task_s: finetune_s / t_count as f64,
        merge_s,
        merge_avg_per_task_s: merge_s / t_count as f64,
        eval_s,
        eval_slides_per_s: if eval_s > 0.0 { eval_count as f64 / eval_s } else { 0.0 },
        total_s,
    };

    Ok(RunResult {
        method,
        class_il_overall,
        class_il_balanced,
        task_il_balanced,
        report,
        timings,
        checkpoint_paths,
    })
}

/// Upper-reference pooling: each test bag is scored by its own task's
/// fine-tuned weights.
fn pooled_bacc_per_task(
    stream: &Stream,
    bank: &PromptBank,
    per_task: &[AggregatorParams],
    eval_k: Option<usize>,
) -> Result<(f64, f64)> {
    let offsets: Vec<usize> = {
        let mut acc = 0;
        (0..bank.num_tasks())
            .map(|t| {
                let o = acc;
                acc += bank.task(t).unwrap().class_count();
                o
            })
            .collect()
    };
    let total_classes: usize =
        offsets.last().unwrap() + bank.task(bank.num_tasks() - 1)?.class_count();
    let mut y_true = Vec::new();
    let mut y_class_il = Vec::new();
    let mut y_task_il = Vec::new();
    for t in 0..stream.num_tasks() {
        for (i, bag) in stream.test_bags(t).iter().enumerate() {
            let z = eval_embedding(bag, &per_task[t], t, i, eval_k)?;
            let pred = naive_infer(&z, bank)?;
            y_true.push(offsets[t] + bag.label);
            y_class_il.push(offsets[pred.task_id] + pred.class_id);
            y_task_il.push(offsets[t] + masked_infer(&z, bank, t)?.class_id);
        }
    }
    Ok((
        balanced_accuracy(&y_true, &y_class_il, total_classes)?,
        balanced_accuracy(&y_true, &y_task_il, total_classes)?,
    ))
}

/// Accuracy matrix as CSV: one row per stage, empty cells for entries not
/// yet defined at that stage.
pub fn matrix_to_csv(m: &AccuracyMatrix) -> String {
    let mut out = String::from("after_task");
    for t in 0..m.tasks() {
        out.push_str(&format!(",task_{t}"));
    }
    out.push('\n');
    for k in 0..m.tasks() {
        out.push_str(&k.to_string());
        for t in 0..m.tasks() {
            out.push(',');
            if let Some(v) = m.get(k, t) {
                out.push_str(&format!("{v:?}"));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{gen_stream, ClassSpec, StreamConfig, TaskSpec};

    fn small_config(tasks: usize) -> StreamConfig {
        StreamConfig {
            tasks: (0..tasks)
                .map(|t| TaskSpec {
                    name: format!("task{t}"),
                    classes: (0..2)
                        .map(|c| ClassSpec {
                            name: format!("c{t}{c}"),
                            train_bags: 4,
                            test_bags: 3,
                        })
                        .collect(),
                })
                .collect(),
            d: 12,
            patches_min: 6,
            patches_max: 12,
            signal_fraction: 0.7,
            noise_std: 0.25,
            rho_in: 0.2,
            rho_out: 0.0,
            rho_shared: None,
            normalize: false,
            sites: 0,
            shift_std: 0.0,
            stream_seed: 3,
            fold: 0,
        }
    }

    fn fast_hyper() -> RunHyper {
        RunHyper {
            train: TrainConfig {
                epochs: 3,
                subsample_k: 16,
                ..TrainConfig::default()
            },
            ..RunHyper::default()
        }
    }

    #[test]
    fn single_task_merge_equals_seq_finetune() {
        let stream = gen_stream(&small_config(1)).unwrap();
        let hyper = fast_hyper();
        let a = run_stream(&stream, Method::MergeTcp, &hyper, None).unwrap();
        let b = run_stream(&stream, Method::SeqFinetune, &hyper, None).unwrap();
        for (x, y) in [
            (&a.class_il_overall, &b.class_il_overall),
            (&a.class_il_balanced, &b.class_il_balanced),
            (&a.task_il_balanced, &b.task_il_balanced),
        ] {
            assert_eq!(x.get(0, 0), y.get(0, 0));
        }
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn zero_shot_columns_are_constant() {
        let stream = gen_stream(&small_config(3)).unwrap();
        let result = run_stream(&stream, Method::ZeroShot, &fast_hyper(), None).unwrap();
        for t in 0..3 {
            let vals: Vec<f64> = (t..3).map(|k| result.class_il_overall.get(k, t).unwrap()).collect();
            for v in &vals {
                assert_eq!(*v, vals[0]);
            }
        }
    }

    #[test]
    fn matrices_are_lower_triangular() {
        let stream = gen_stream(&small_config(3)).unwrap();
        let result = run_stream(&stream, Method::MergeNaive, &fast_hyper(), None).unwrap();
        for k in 0..3 {
            for t in 0..3 {
                assert_eq!(result.class_il_overall.get(k, t).is_some(), t <= k, "({k},{t})");
            }
        }
        assert!(result.report.is_finite());
    }

    #[test]
    fn no_rehearsal_for_merge_methods() {
        for method in [Method::MergeTcp, Method::MergeNaive, Method::AvgMerge] {
            let stream = gen_stream(&small_config(3)).unwrap();
            run_stream(&stream, method, &fast_hyper(), None).unwrap();
            assert_eq!(stream.rehearsal_violations(), 0, "{}", method.name());
            // each task's own training bags were read at least once
            assert!(stream.access_log().len() >= 3);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let stream = gen_stream(&small_config(2)).unwrap();
        let hyper = fast_hyper();
        let a = run_stream(&stream, Method::MergeTcp, &hyper, None).unwrap();
        let b = run_stream(&stream, Method::MergeTcp, &hyper, None).unwrap();
        assert_eq!(a.report, b.report);
        for k in 0..2 {
            for t in 0..=k {
                assert_eq!(
                    a.class_il_overall.get(k, t).unwrap().to_bits(),
                    b.class_il_overall.get(k, t).unwrap().to_bits()
                );
            }
        }
    }

    #[test]
    fn checkpoints_written_when_dir_given() {
        let dir = tempfile::tempdir().unwrap();
        let stream = gen_stream(&small_config(2)).unwrap();
        let result = run_stream(&stream, Method::MergeTcp, &fast_hyper(), Some(dir.path())).unwrap();
        assert!(!result.checkpoint_paths.is_empty());
        for path in &result.checkpoint_paths {
            assert!(path.exists(), "{path:?}");
            assert!(path.starts_with(dir.path()));
        }
        // merged weights round-trip as a valid checkpoint
        let merged = Checkpoint::load(dir.path().join("merge_tcp_merged.msld")).unwrap();
        assert!(AggregatorParams::from_checkpoint(&merged).is_ok());
    }

    #[test]
    fn method_parsing_round_trips() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("nope").is_err());
    }

    #[test]
    fn csv_has_empty_upper_triangle() {
        let stream = gen_stream(&small_config(2)).unwrap();
        let result = run_stream(&stream, Method::ZeroShot, &fast_hyper(), None).unwrap();
        let csv = matrix_to_csv(&result.class_il_overall);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "after_task,task_0,task_1");
        assert!(lines[1].ends_with(','), "row 0 has undefined trailing cell: {}", lines[1]);
    }
}
