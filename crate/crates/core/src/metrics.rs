//! Continual-learning metrics over lower-triangular accuracy matrices.

use serde::Serialize;

use crate::error::{Error, Result};

/// How per-sample correctness is aggregated into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Averaging {
    Overall,
    Balanced,
}

/// Whether the evaluated predictions knew the task identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Setting {
    ClassIl,
    TaskIl,
}

/// `R[k][t]` = accuracy on task t's test set after learning task k, defined
/// for t <= k only. Undefined entries stay `None` rather than zero.
#[derive(Debug, Clone, Serialize)]
pub struct AccuracyMatrix {
    pub averaging: Averaging,
    pub setting: Setting,
    tasks: usize,
    values: Vec<Option<f64>>,
    /// Per-task test-set sizes, used by the running-union mean.
    test_sizes: Vec<usize>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize, averaging: Averaging, setting: Setting) -> AccuracyMatrix {
        AccuracyMatrix {
            averaging,
            setting,
            tasks,
            values: vec![None; tasks * tasks],
            test_sizes: vec![1; tasks],
        }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn set_test_sizes(&mut self, sizes: Vec<usize>) {
        assert_eq!(sizes.len(), self.tasks);
        self.test_sizes = sizes;
    }

    pub fn test_sizes(&self) -> &[usize] {
        &self.test_sizes
    }

    pub fn set(&mut self, after_task: usize, on_task: usize, value: f64) -> Result<()> {
        if on_task > after_task || after_task >= self.tasks {
            return Err(Error::InvalidConfig(format!(
                "entry ({after_task},{on_task}) outside the lower triangle of a {} task matrix",
                self.tasks
            )));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::NonFiniteMetric(format!(
                "accuracy {value} outside [0,1]"
            )));
        }
        self.values[after_task * self.tasks + on_task] = Some(value);
        Ok(())
    }

    pub fn get(&self, after_task: usize, on_task: usize) -> Option<f64> {
        self.values.get(after_task * self.tasks + on_task).copied().flatten()
    }

    fn require(&self, after_task: usize, on_task: usize) -> Result<f64> {
        self.get(after_task, on_task).ok_or_else(|| {
            Error::InvalidConfig(format!("entry ({after_task},{on_task}) is undefined"))
        })
    }

    /// Short name for files: e.g. `class_il_overall`.
    pub fn slug(&self) -> &'static str {
        match (self.setting, self.averaging) {
            (Setting::ClassIl, Averaging::Overall) => "class_il_overall",
            (Setting::ClassIl, Averaging::Balanced) => "class_il_balanced",
            (Setting::TaskIl, Averaging::Overall) => "task_il_overall",
            (Setting::TaskIl, Averaging::Balanced) => "task_il_balanced",
        }
    }
}

/// Mean per-class recall. Classes absent from `y_true` are excluded from the
/// mean instead of counting as zero recall.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<f64> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::EmptyLabels);
    }
    if n_classes == 0 {
        return Err(Error::NoClassesPresent);
    }
    for (&t, &p) in y_true.iter().zip(y_pred) {
        let bad = t.max(p);
        if bad >= n_classes {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: n_classes,
            });
        }
    }
    let mut total = vec![0usize; n_classes];
    let mut hit = vec![0usize; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        total[t] += 1;
        if t == p {
            hit[t] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..n_classes {
        if total[c] > 0 {
            sum += hit[c] as f64 / total[c] as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::NoClassesPresent);
    }
    Ok(sum / present as f64)
}

/// Fraction of correct predictions.
pub fn overall_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::EmptyLabels);
    }
    let correct = y_true.iter().zip(y_pred).filter(|(t, p)| t == p).count();
    Ok(correct as f64 / y_true.len() as f64)
}

/// Mean drop of each earlier task's accuracy from its peak to its value
/// after the final task. Non-negative by construction.
pub fn forgetting(r: &AccuracyMatrix) -> Result<f64> {
    if r.setting != Setting::ClassIl || r.averaging != Averaging::Overall {
        return Err(Error::InvalidConfig(
            "forgetting is defined on the class-incremental overall matrix".into(),
        ));
    }
    let t_count = r.tasks;
    if t_count < 2 {
        return Err(Error::TooFewTasks {
            needed: 2,
            got: t_count,
        });
    }
    let last = t_count - 1;
    let mut sum = 0.0;
    for task in 0..last {
        let mut peak = f64::NEG_INFINITY;
        for k in task..t_count {
            peak = peak.max(r.require(k, task)?);
        }
        sum += peak - r.require(last, task)?;
    }
    Ok(sum / last as f64)
}

/// Mean end-of-stream accuracy change on earlier tasks relative to when they
/// were first learned. Positive values mean later tasks helped earlier ones.
pub fn backward_transfer(r: &AccuracyMatrix) -> Result<f64> {
    let t_count = r.tasks;
    if t_count < 2 {
        return Err(Error::TooFewTasks {
            needed: 2,
            got: t_count,
        });
    }
    let last = t_count - 1;
    let mut sum = 0.0;
    for task in 0..last {
        sum += r.require(last, task)? - r.require(task, task)?;
    }
    Ok(sum / last as f64)
}

/// Which average the stream-level mean accuracy takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanAccMode {
    /// Final model's per-task accuracies, averaged.
    #[default]
    FinalTasks,
    /// Accuracy on the union of seen test sets after each task (weighted by
    /// test-set size), averaged over the stream.
    RunningUnion,
}

pub fn mean_acc(r: &AccuracyMatrix, mode: MeanAccMode) -> Result<f64> {
    let t_count = r.tasks;
    if t_count == 0 {
        return Err(Error::TooFewTasks { needed: 1, got: 0 });
    }
    match mode {
        MeanAccMode::FinalTasks => {
            let last = t_count - 1;
            let mut sum = 0.0;
            for task in 0..t_count {
                sum += r.require(last, task)?;
            }
            Ok(sum / t_count as f64)
        }
        MeanAccMode::RunningUnion => {
            let mut stage_sum = 0.0;
            for k in 0..t_count {
                let mut weighted = 0.0;
                let mut weight = 0.0;
                for task in 0..=k {
                    let w = r.test_sizes[task] as f64;
                    weighted += w * r.require(k, task)?;
                    weight += w;
                }
                stage_sum += weighted / weight;
            }
            Ok(stage_sum / t_count as f64)
        }
    }
}

/// End-of-stream summary; serialized with exactly these field names.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricReport {
    pub bacc: f64,
    pub masked_bacc: f64,
    pub mean_acc: f64,
    pub fgt: f64,
    pub bwt: f64,
}

impl MetricReport {
    pub fn is_finite(&self) -> bool {
        [self.bacc, self.masked_bacc, self.mean_acc, self.fgt, self.bwt]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix_from(rows: &[&[f64]]) -> AccuracyMatrix {
        let t = rows.len();
        let mut r = AccuracyMatrix::new(t, Averaging::Overall, Setting::ClassIl);
        for (k, row) in rows.iter().enumerate() {
            for (task, &v) in row.iter().enumerate() {
                r.set(k, task, v).unwrap();
            }
        }
        r
    }

    #[test]
    fn balanced_accuracy_hand_cases() {
        assert_eq!(balanced_accuracy(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        let got = balanced_accuracy(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert!((got - 0.75).abs() <= 1e-15);
        assert_eq!(balanced_accuracy(&[0, 1], &[1, 0], 2).unwrap(), 0.0);
    }

    #[test]
    fn balanced_accuracy_excludes_absent_classes() {
        // class 2 never appears in y_true and must not drag the mean down
        let got = balanced_accuracy(&[0, 0, 1, 1], &[0, 0, 1, 0], 3).unwrap();
        assert!((got - 0.75).abs() <= 1e-15);
    }

    #[test]
    fn balanced_accuracy_relabeling_invariance() {
        let y_true = [0usize, 1, 2, 0, 1, 2, 2, 0];
        let y_pred = [0usize, 2, 2, 1, 1, 0, 2, 0];
        let base = balanced_accuracy(&y_true, &y_pred, 3).unwrap();
        let perm = [2usize, 0, 1];
        let t2: Vec<usize> = y_true.iter().map(|&c| perm[c]).collect();
        let p2: Vec<usize> = y_pred.iter().map(|&c| perm[c]).collect();
        assert_eq!(balanced_accuracy(&t2, &p2, 3).unwrap(), base);
    }

    #[test]
    fn balanced_accuracy_errors() {
        assert!(matches!(balanced_accuracy(&[], &[], 2), Err(Error::EmptyLabels)));
        assert!(matches!(
            balanced_accuracy(&[0], &[5], 2),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(matches!(balanced_accuracy(&[0], &[0], 0), Err(Error::NoClassesPresent)));
    }

    #[test]
    fn overall_accuracy_cases() {
        assert_eq!(overall_accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(overall_accuracy(&[1, 1], &[1, 1]).unwrap(), 1.0);
        assert!(matches!(overall_accuracy(&[], &[]), Err(Error::EmptyLabels)));
    }

    #[test]
    fn overall_accuracy_matches_counting_oracle() {
        let mut s = 77u64;
        let mut next = move |m: usize| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 33) as usize % m
        };
        let y_true: Vec<usize> = (0..200).map(|_| next(4)).collect();
        let y_pred: Vec<usize> = (0..200).map(|_| next(4)).collect();
        let mut count = 0;
        for i in 0..200 {
            if y_true[i] == y_pred[i] {
                count += 1;
            }
        }
        assert_eq!(
            overall_accuracy(&y_true, &y_pred).unwrap(),
            count as f64 / 200.0
        );
    }

    #[test]
    fn forgetting_hand_matrix() {
        let r = matrix_from(&[&[0.9], &[0.8, 0.85], &[0.7, 0.8, 0.9]]);
        let got = forgetting(&r).unwrap();
        assert!((got - 0.125).abs() <= 1e-15, "fgt = {got}");
    }

    #[test]
    fn forgetting_zero_for_nondecreasing_columns() {
        let r = matrix_from(&[&[0.5], &[0.6, 0.7], &[0.7, 0.8, 0.9]]);
        assert_eq!(forgetting(&r).unwrap(), 0.0);
    }

    #[test]
    fn forgetting_final_peak_contributes_zero() {
        // column 0 peaks at the final row
        let r = matrix_from(&[&[0.5], &[0.4, 0.9], &[0.95, 0.6, 0.9]]);
        let got = forgetting(&r).unwrap();
        assert!((got - (0.9 - 0.6) / 2.0).abs() <= 1e-15);
    }

    #[test]
    fn forgetting_needs_two_tasks_and_overall_mode() {
        let r = matrix_from(&[&[0.9]]);
        assert!(matches!(forgetting(&r), Err(Error::TooFewTasks { .. })));
        let mut bal = AccuracyMatrix::new(2, Averaging::Balanced, Setting::ClassIl);
        bal.set(0, 0, 0.5).unwrap();
        bal.set(1, 0, 0.5).unwrap();
        bal.set(1, 1, 0.5).unwrap();
        assert!(forgetting(&bal).is_err());
    }

    #[test]
    fn backward_transfer_hand_matrix() {
        let r = matrix_from(&[&[0.9], &[0.8, 0.85], &[0.7, 0.8, 0.9]]);
        let got = backward_transfer(&r).unwrap();
        assert!((got + 0.125).abs() <= 1e-15, "bwt = {got}");
    }

    #[test]
    fn backward_transfer_zero_for_constant_columns() {
        let r = matrix_from(&[&[0.6], &[0.6, 0.7], &[0.6, 0.7, 0.8]]);
        assert_eq!(backward_transfer(&r).unwrap(), 0.0);
    }

    #[test]
    fn mean_acc_cases() {
        let r = matrix_from(&[&[0.8]]);
        assert_eq!(mean_acc(&r, MeanAccMode::FinalTasks).unwrap(), 0.8);

        let r = matrix_from(&[&[0.5], &[0.7, 0.8], &[0.7, 0.8, 0.9]]);
        let got = mean_acc(&r, MeanAccMode::FinalTasks).unwrap();
        assert!((got - 0.8).abs() <= 1e-15);
    }

    #[test]
    fn mean_acc_modes_agree_on_constant_matrices_with_equal_sizes() {
        for &v in &[0.0, 0.3, 1.0] {
            let r = matrix_from(&[&[v], &[v, v], &[v, v, v]]);
            let a = mean_acc(&r, MeanAccMode::FinalTasks).unwrap();
            let b = mean_acc(&r, MeanAccMode::RunningUnion).unwrap();
            assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn mean_acc_running_union_weights_by_test_size() {
        let mut r = matrix_from(&[&[1.0], &[1.0, 0.0]]);
        r.set_test_sizes(vec![3, 1]);
        // stage 0: 1.0; stage 1: (3*1 + 1*0)/4 = 0.75; mean = 0.875
        let got = mean_acc(&r, MeanAccMode::RunningUnion).unwrap();
        assert!((got - 0.875).abs() <= 1e-15, "{got}");
    }

    #[test]
    fn undefined_entries_are_flagged_not_zero() {
        let mut r = AccuracyMatrix::new(3, Averaging::Overall, Setting::ClassIl);
        r.set(2, 0, 0.5).unwrap();
        assert_eq!(r.get(1, 0), None);
        assert!(forgetting(&r).is_err());
        assert!(r.set(0, 2, 0.5).is_err(), "upper triangle must be rejected");
        assert!(r.set(0, 0, 1.5).is_err(), "accuracies outside [0,1] rejected");
    }

    /// Brute-force recomputation with independent loops.
    fn oracle_fgt_bwt_mean(values: &[Vec<f64>]) -> (f64, f64, f64) {
        let t = values.len();
        let last = &values[t - 1];
        let mut fgt = 0.0;
        let mut bwt = 0.0;
        for task in 0..t - 1 {
            let peak = (task..t).map(|k| values[k][task]).fold(f64::MIN, f64::max);
            fgt += peak - last[task];
            bwt += last[task] - values[task][task];
        }
        let mean = last.iter().sum::<f64>() / t as f64;
        (fgt / (t - 1) as f64, bwt / (t - 1) as f64, mean)
    }

    #[test]
    fn metrics_match_brute_force_on_random_matrices() {
        let mut s = 5u64;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64)
        };
        for trial in 0..300 {
            let t = 2 + trial % 6;
            let values: Vec<Vec<f64>> = (0..t).map(|k| (0..=k).map(|_| next()).collect()).collect();
            let rows: Vec<&[f64]> = values.iter().map(|r| r.as_slice()).collect();
            let r = matrix_from(&rows);
            let (fgt, bwt, mean) = oracle_fgt_bwt_mean(&values);
            assert!((forgetting(&r).unwrap() - fgt).abs() <= 1e-12);
            assert!((backward_transfer(&r).unwrap() - bwt).abs() <= 1e-12);
            assert!((mean_acc(&r, MeanAccMode::FinalTasks).unwrap() - mean).abs() <= 1e-12);
            assert!(forgetting(&r).unwrap() >= 0.0);
        }
    }
}
