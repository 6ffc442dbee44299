//! Orthogonal continual model merging.
//!
//! Each incoming task vector is projected onto the orthogonal complement of
//! the accumulated merge (SVD basis, zeroed diagonal) and added to a running
//! numerator; a scale factor keeps the merged model's distance from the base
//! equal to the mean task-vector norm regardless of how many tasks have been
//! merged.

use indexmap::IndexMap;
use serde::Serialize;

use crate::checkpoint::{apply_delta, task_vector, Checkpoint, TaskVector};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::svd::svd_full;

/// Floor applied to the merge scale when the numerator vanishes but earlier
/// tasks had signal; keeps the division in finalize finite.
pub const LAMBDA_FLOOR: f64 = 1e-12;

/// Scope of the scale/norm bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaMode {
    /// One scale shared by all parameters; norms taken over the
    /// concatenation of every parameter matrix.
    #[default]
    Global,
    /// Independent scale and norm ledger per parameter matrix.
    PerParam,
}

/// Per-parameter scale bookkeeping for [`LambdaMode::PerParam`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ParamSchedule {
    pub lambda: f64,
    pub norm_sum: f64,
    pub floored: bool,
}

/// Diagnostics for one projection: how much of the incoming task vector
/// survived as novel signal, and how orthogonal it is to the accumulated
/// merge.
#[derive(Debug, Clone, Serialize)]
pub struct ParamProjection {
    pub name: String,
    pub g_norm: f64,
    pub delta_norm: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProjectionReport {
    /// Task count after the step that produced this report.
    pub t: usize,
    pub params: Vec<ParamProjection>,
}

/// Result of a scale update: the new value plus whether the floor kicked in.
#[derive(Debug, Clone, Copy)]
pub struct LambdaUpdate {
    pub lambda: f64,
    pub floored: bool,
}

/// Running state of a continual merge.
///
/// `acc_delta` holds the running sum of projected task vectors (the
/// numerator of the update rule); the materialized merged delta is
/// `acc_delta / lambda` and is only formed by [`MergeState::finalize`].
#[derive(Debug, Clone)]
pub struct MergeState {
    base: Checkpoint,
    acc_delta: TaskVector,
    lambda: f64,
    t: usize,
    norm_sum: f64,
    mode: LambdaMode,
    per_param: IndexMap<String, ParamSchedule>,
    lambda_floored: bool,
}

impl MergeState {
    /// Fresh state around a base checkpoint: zero accumulated delta,
    /// lambda = 1, no tasks merged.
    pub fn init(base: Checkpoint, mode: LambdaMode) -> MergeState {
        let mut acc = TaskVector::default();
        let mut per_param = IndexMap::new();
        for (name, m) in base.iter() {
            acc.insert(name, Matrix::zeros(m.rows(), m.cols()));
            per_param.insert(
                name.to_string(),
                ParamSchedule {
                    lambda: 1.0,
                    norm_sum: 0.0,
                    floored: false,
                },
            );
        }
        MergeState {
            base,
            acc_delta: acc,
            lambda: 1.0,
            t: 0,
            norm_sum: 0.0,
            mode,
            per_param,
            lambda_floored: false,
        }
    }

    pub fn base(&self) -> &Checkpoint {
        &self.base
    }

    pub fn acc_delta(&self) -> &TaskVector {
        &self.acc_delta
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn norm_sum(&self) -> f64 {
        self.norm_sum
    }

    pub fn mode(&self) -> LambdaMode {
        self.mode
    }

    pub fn lambda_floored(&self) -> bool {
        self.lambda_floored
    }

    pub fn per_param(&self) -> &IndexMap<String, ParamSchedule> {
        &self.per_param
    }

    /// Merge one fine-tuned checkpoint into the state.
    pub fn merge_step(&mut self, theta: &Checkpoint) -> Result<ProjectionReport> {
        let delta = task_vector(theta, &self.base)?;

        if self.t == 0 {
            let mut params = Vec::new();
            for (name, d) in delta.iter() {
                let n = d.frobenius_norm();
                params.push(ParamProjection {
                    name: name.to_string(),
                    g_norm: n,
                    delta_norm: n,
                    residual: 0.0,
                });
                self.per_param.insert(
                    name.to_string(),
                    ParamSchedule {
                        lambda: 1.0,
                        norm_sum: n,
                        floored: false,
                    },
                );
            }
            self.norm_sum = delta.global_norm();
            self.lambda = 1.0;
            self.acc_delta = delta;
            self.t = 1;
            return Ok(ProjectionReport { t: 1, params });
        }

        // Project every parameter, build the new numerator.
        let mut numerator = TaskVector::default();
        let mut params = Vec::new();
        for (name, d) in delta.iter() {
            let acc = self.acc_delta.get(name).expect("compatible by check");
            let g = project_orthogonal(d, acc)?;
            let residual = g.frobenius_inner(acc)?;
            params.push(ParamProjection {
                name: name.to_string(),
                g_norm: g.frobenius_norm(),
                delta_norm: d.frobenius_norm(),
                residual,
            });
            numerator.insert(name, acc.add(&g)?);
        }

        let t_new = self.t + 1;
        match self.mode {
            LambdaMode::Global => {
                let delta_norm = delta.global_norm();
                let update = update_lambda(self, &numerator, delta_norm)?;
                self.norm_sum += delta_norm;
                self.lambda = update.lambda;
                self.lambda_floored |= update.floored;
            }
            LambdaMode::PerParam => {
                let mut any_active = false;
                let mut schedules = IndexMap::new();
                for (name, n) in numerator.iter() {
                    let sched = self.per_param[name];
                    let d_norm = delta.get(name).unwrap().frobenius_norm();
                    let norm_sum = sched.norm_sum + d_norm;
                    let (lambda, floored) = if norm_sum == 0.0 {
                        // Parameter untouched by every task so far; its
                        // accumulated delta is zero and any positive scale
                        // reproduces the base. Stay neutral.
                        (1.0, false)
                    } else {
                        let num = n.frobenius_norm();
                        lambda_value(t_new, num, norm_sum)
                    };
                    any_active |= norm_sum > 0.0;
                    schedules.insert(
                        name.to_string(),
                        ParamSchedule {
                            lambda,
                            norm_sum,
                            floored: sched.floored || floored,
                        },
                    );
                }
                if !any_active {
                    return Err(Error::DegenerateMerge);
                }
                self.per_param = schedules;
            }
        }

        self.acc_delta = numerator;
        self.t = t_new;
        Ok(ProjectionReport { t: t_new, params })
    }

    /// Materialize the merged weights: `base + acc_delta / lambda`.
    pub fn finalize(&self) -> Result<Checkpoint> {
        if self.t == 0 {
            return Err(Error::EmptyMerge);
        }
        let mut out = match self.mode {
            LambdaMode::Global => apply_delta(&self.base, &self.acc_delta, 1.0 / self.lambda)?,
            LambdaMode::PerParam => {
                let mut out = Checkpoint::new();
                for (name, b) in self.base.iter() {
                    let acc = self.acc_delta.get(name).unwrap();
                    let lambda = self.per_param[name].lambda;
                    out.insert(name, b.add_scaled(acc, 1.0 / lambda)?);
                }
                out
            }
        };
        out.set_meta("merged_tasks", self.t.to_string());
        match self.mode {
            LambdaMode::Global => out.set_meta("lambda", format!("{:?}", self.lambda)),
            LambdaMode::PerParam => {
                out.set_meta("lambda_mode", "per_param");
                for (name, sched) in &self.per_param {
                    out.set_meta(format!("lambda.{name}"), format!("{:?}", sched.lambda));
                }
            }
        }
        Ok(out)
    }

    /// Serialize to the checkpoint container: base and accumulated delta as
    /// prefixed entries, scalars in the metadata table.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut c = Checkpoint::new();
        c.set_meta("state", "merge");
        c.set_meta(
            "mode",
            match self.mode {
                LambdaMode::Global => "global",
                LambdaMode::PerParam => "per_param",
            },
        );
        c.set_meta("t", self.t.to_string());
        c.set_meta("lambda", format!("{:?}", self.lambda));
        c.set_meta("norm_sum", format!("{:?}", self.norm_sum));
        c.set_meta("lambda_floored", self.lambda_floored.to_string());
        for (name, sched) in &self.per_param {
            c.set_meta(
                format!("sched.{name}"),
                format!("{:?},{:?},{}", sched.lambda, sched.norm_sum, sched.floored),
            );
        }
        for (name, m) in self.base.iter() {
            c.insert(format!("base.{name}"), m.clone());
        }
        for (name, m) in self.acc_delta.iter() {
            c.insert(format!("acc.{name}"), m.clone());
        }
        c.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<MergeState> {
        let c = Checkpoint::load(path)?;
        let bad = |what: &'static str| Error::Truncated(what);

        let mode = match c.meta("mode") {
            Some("global") => LambdaMode::Global,
            Some("per_param") => LambdaMode::PerParam,
            _ => return Err(bad("merge state mode")),
        };
        let t: usize = c.meta("t").and_then(|s| s.parse().ok()).ok_or(bad("merge state t"))?;
        let lambda: f64 = c
            .meta("lambda")
            .and_then(|s| s.parse().ok())
            .ok_or(bad("merge state lambda"))?;
        let norm_sum: f64 = c
            .meta("norm_sum")
            .and_then(|s| s.parse().ok())
            .ok_or(bad("merge state norm_sum"))?;
        let lambda_floored = c.meta("lambda_floored") == Some("true");

        let mut base = Checkpoint::new();
        let mut acc = TaskVector::default();
        for (name, m) in c.iter() {
            if let Some(p) = name.strip_prefix("base.") {
                base.insert(p, m.clone());
            } else if let Some(p) = name.strip_prefix("acc.") {
                acc.insert(p, m.clone());
            }
        }
        let mut per_param = IndexMap::new();
        for (key, value) in c.meta_iter() {
            if let Some(name) = key.strip_prefix("sched.") {
                let mut it = value.split(',');
                let lambda: f64 = it.next().and_then(|s| s.parse().ok()).ok_or(bad("sched"))?;
                let norm_sum: f64 = it.next().and_then(|s| s.parse().ok()).ok_or(bad("sched"))?;
                let floored = it.next() == Some("true");
                per_param.insert(
                    name.to_string(),
                    ParamSchedule {
                        lambda,
                        norm_sum,
                        floored,
                    },
                );
            }
        }
        Ok(MergeState {
            base,
            acc_delta: acc,
            lambda,
            t,
            norm_sum,
            mode,
            per_param,
            lambda_floored,
        })
    }
}

/// Project `delta_t` onto the orthogonal complement of `acc_delta`:
/// decompose `acc_delta = U S V^T`, express `delta_t` in that basis, zero
/// the diagonal positions, and map back. The result has zero Frobenius
/// inner product with `acc_delta`.
pub fn project_orthogonal(delta_t: &Matrix, acc_delta: &Matrix) -> Result<Matrix> {
    if delta_t.shape() != acc_delta.shape() {
        return Err(Error::DimMismatch {
            op: "project_orthogonal",
            a_rows: delta_t.rows(),
            a_cols: delta_t.cols(),
            b_rows: acc_delta.rows(),
            b_cols: acc_delta.cols(),
        });
    }
    let svd = svd_full(acc_delta)?;
    let mut core = svd.u.transpose().matmul(delta_t)?.matmul(&svd.v)?;
    let k = core.rows().min(core.cols());
    for i in 0..k {
        core.set(i, i, 0.0);
    }
    svd.u.matmul(&core)?.matmul(&svd.v.transpose())
}

/// New scale after appending `projected_sum` (the updated numerator) for a
/// task of norm `delta_norm`. Global-mode norms: all parameters concatenated.
pub fn update_lambda(
    state: &MergeState,
    projected_sum: &TaskVector,
    delta_norm: f64,
) -> Result<LambdaUpdate> {
    let t_new = state.t + 1;
    let norm_sum = state.norm_sum + delta_norm;
    let numerator = projected_sum.global_norm();
    if norm_sum == 0.0 {
        // Every task so far equals the base; no scale can be defined.
        return Err(Error::DegenerateMerge);
    }
    let (lambda, floored) = lambda_value(t_new, numerator, norm_sum);
    Ok(LambdaUpdate { lambda, floored })
}

fn lambda_value(t_new: usize, numerator: f64, norm_sum: f64) -> (f64, bool) {
    let lambda = t_new as f64 * numerator / norm_sum;
    if lambda < LAMBDA_FLOOR {
        (LAMBDA_FLOOR, true)
    } else {
        (lambda, false)
    }
}

/// Plain task-arithmetic baseline: `base + mean of task vectors`.
pub fn average_merge(base: &Checkpoint, thetas: &[Checkpoint]) -> Result<Checkpoint> {
    if thetas.is_empty() {
        return Err(Error::EmptyCheckpointList);
    }
    let mut sum: Option<TaskVector> = None;
    for theta in thetas {
        let d = task_vector(theta, base)?;
        sum = Some(match sum {
            None => d,
            Some(acc) => {
                let mut out = TaskVector::default();
                for (name, m) in acc.iter() {
                    out.insert(name, m.add(d.get(name).unwrap())?);
                }
                out
            }
        });
    }
    let mut merged = apply_delta(base, &sum.unwrap(), 1.0 / thetas.len() as f64)?;
    merged.set_meta("merged_tasks", thetas.len().to_string());
    merged.set_meta("merge", "average");
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(17);
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn random_checkpoint(next: &mut impl FnMut() -> f64, shapes: &[(&str, usize, usize)]) -> Checkpoint {
        let mut c = Checkpoint::new();
        for &(name, r, cdim) in shapes {
            c.insert(name, crate::matrix::Matrix::from_vec(r, cdim, (0..r * cdim).map(|_| next()).collect()));
        }
        c
    }

    const SHAPES: &[(&str, usize, usize)] = &[("w", 4, 3), ("b", 5, 1)];

    fn checkpoint_distance(a: &Checkpoint, b: &Checkpoint) -> f64 {
        let mut acc = 0.0;
        for (name, m) in a.iter() {
            let d = m.sub(b.get(name).unwrap()).unwrap();
            acc += d.frobenius_norm().powi(2);
        }
        acc.sqrt()
    }

    #[test]
    fn project_self_vanishes() {
        let mut next = lcg(1);
        let x = Matrix::from_vec(4, 4, (0..16).map(|_| next()).collect());
        let g = project_orthogonal(&x, &x).unwrap();
        assert!(g.frobenius_norm() <= 1e-12 * x.frobenius_norm());
    }

    #[test]
    fn project_zero_is_zero() {
        let mut next = lcg(2);
        let x = Matrix::from_vec(3, 5, (0..15).map(|_| next()).collect());
        let z = Matrix::zeros(3, 5);
        let g = project_orthogonal(&z, &x).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn project_rank_one_oracle() {
        // acc = [[1,0],[0,0]] has an explicit SVD with U = V = I, so the
        // projection must zero exactly the diagonal of delta.
        let acc = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let mut next = lcg(3);
        let (a, b, c, d) = (next(), next(), next(), next());
        let delta = Matrix::from_rows(&[vec![a, b], vec![c, d]]);
        let g = project_orthogonal(&delta, &acc).unwrap();
        let want = Matrix::from_rows(&[vec![0.0, b], vec![c, 0.0]]);
        assert!(g.sub(&want).unwrap().max_abs() <= 1e-12, "g = {g:?}");
    }

    #[test]
    fn projection_orthogonal_to_accumulator() {
        let mut next = lcg(4);
        for _ in 0..20 {
            let acc = Matrix::from_vec(6, 4, (0..24).map(|_| next()).collect());
            let d = Matrix::from_vec(6, 4, (0..24).map(|_| next()).collect());
            let g = project_orthogonal(&d, &acc).unwrap();
            let resid = g.frobenius_inner(&acc).unwrap().abs();
            let bound = 1e-9 * (1.0 + g.frobenius_norm() * acc.frobenius_norm());
            assert!(resid <= bound, "residual {resid} > {bound}");
        }
    }

    #[test]
    fn first_merge_is_identity() {
        let mut next = lcg(5);
        let base = random_checkpoint(&mut next, SHAPES);
        let theta = random_checkpoint(&mut next, SHAPES);
        let mut state = MergeState::init(base, LambdaMode::Global);
        state.merge_step(&theta).unwrap();
        assert_eq!(state.t(), 1);
        assert_eq!(state.lambda(), 1.0);
        let merged = state.finalize().unwrap();
        for (name, m) in merged.iter() {
            let diff = m.sub(theta.get(name).unwrap()).unwrap().max_abs();
            assert!(diff <= 1e-12, "param {name} differs by {diff}");
        }
    }

    #[test]
    fn duplicate_task_keeps_lambda_one() {
        let mut next = lcg(6);
        let base = random_checkpoint(&mut next, SHAPES);
        let theta = random_checkpoint(&mut next, SHAPES);
        let mut state = MergeState::init(base, LambdaMode::Global);
        state.merge_step(&theta).unwrap();
        state.merge_step(&theta).unwrap();
        assert!((state.lambda() - 1.0).abs() <= 1e-12, "lambda = {}", state.lambda());
        let merged = state.finalize().unwrap();
        assert!(checkpoint_distance(&merged, &theta) <= 1e-10);
    }

    #[test]
    fn scalar_like_lambda_hand_value() {
        // Single 2x2 parameter, zero base. First task [[1,0],[0,0]], second
        // task [[0,2],[0,0]]: numerator [[1,2],[0,0]] with norm sqrt(5),
        // norm_sum 3, so lambda = 2*sqrt(5)/3.
        let mut base = Checkpoint::new();
        base.insert("w", Matrix::zeros(2, 2));
        let mut t1 = Checkpoint::new();
        t1.insert("w", Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
        let mut t2 = Checkpoint::new();
        t2.insert("w", Matrix::from_rows(&[vec![0.0, 2.0], vec![0.0, 0.0]]));

        let mut state = MergeState::init(base, LambdaMode::Global);
        state.merge_step(&t1).unwrap();
        state.merge_step(&t2).unwrap();
        let want = 2.0 * 5.0_f64.sqrt() / 3.0;
        assert!((state.lambda() - want).abs() <= 1e-12, "lambda = {}", state.lambda());
        assert!((state.norm_sum() - 3.0).abs() <= 1e-12);
    }

    #[test]
    fn norm_identity_over_random_streams() {
        let mut next = lcg(7);
        for tasks in 2..=6 {
            let base = random_checkpoint(&mut next, SHAPES);
            let mut state = MergeState::init(base.clone(), LambdaMode::Global);
            let mut max_delta_norm: f64 = 0.0;
            for _ in 0..tasks {
                let theta = random_checkpoint(&mut next, SHAPES);
                let d = task_vector(&theta, &base).unwrap();
                max_delta_norm = max_delta_norm.max(d.global_norm());
                state.merge_step(&theta).unwrap();
            }
            let merged = state.finalize().unwrap();
            let drift = checkpoint_distance(&merged, &base);
            let want = state.norm_sum() / state.t() as f64;
            assert!(
                (drift - want).abs() <= 1e-9 * want.max(1.0),
                "tasks {tasks}: drift {drift} vs {want}"
            );
            assert!(drift <= max_delta_norm + 1e-9, "drift bound violated");
        }
    }

    #[test]
    fn reference_recomputation_three_tasks() {
        // Independent re-derivation that materializes the merged weights at
        // every step and rebuilds the numerator from them.
        let mut next = lcg(8);
        let base = random_checkpoint(&mut next, SHAPES);
        let thetas: Vec<Checkpoint> = (0..3).map(|_| random_checkpoint(&mut next, SHAPES)).collect();

        let mut state = MergeState::init(base.clone(), LambdaMode::Global);
        for theta in &thetas {
            state.merge_step(theta).unwrap();
        }
        let merged = state.finalize().unwrap();

        // Reference: track materialized merged weights theta_tilde and
        // lambda; rebuild everything from scratch each step.
        let mut theta_tilde = thetas[0].clone();
        let mut lambda_prev = 1.0;
        let mut norm_sum = task_vector(&thetas[0], &base).unwrap().global_norm();
        for (i, theta) in thetas.iter().enumerate().skip(1) {
            let t_new = (i + 1) as f64;
            let acc_materialized = task_vector(&theta_tilde, &base).unwrap();
            let dt = task_vector(theta, &base).unwrap();
            let mut numerator = TaskVector::default();
            for (name, d) in dt.iter() {
                let acc_m = acc_materialized.get(name).unwrap();
                let g = project_orthogonal(d, acc_m).unwrap();
                numerator.insert(name, acc_m.scale(lambda_prev).add(&g).unwrap());
            }
            norm_sum += dt.global_norm();
            let lambda = t_new * numerator.global_norm() / norm_sum;
            theta_tilde = apply_delta(&base, &numerator, 1.0 / lambda).unwrap();
            lambda_prev = lambda;
        }

        let diff = checkpoint_distance(&merged, &theta_tilde);
        assert!(diff <= 1e-9, "implementation vs reference differ by {diff}");
    }

    #[test]
    fn idempotent_remerge_of_current_merge() {
        let mut next = lcg(9);
        let base = random_checkpoint(&mut next, SHAPES);
        let mut state = MergeState::init(base.clone(), LambdaMode::Global);
        for _ in 0..3 {
            state.merge_step(&random_checkpoint(&mut next, SHAPES)).unwrap();
        }
        let before = state.finalize().unwrap();
        state.merge_step(&before).unwrap();
        let after = state.finalize().unwrap();
        assert!(checkpoint_distance(&before, &after) <= 1e-10);
    }

    #[test]
    fn aligned_task_contributes_nothing() {
        let mut next = lcg(10);
        let base = random_checkpoint(&mut next, SHAPES);
        let theta = random_checkpoint(&mut next, SHAPES);
        let mut state = MergeState::init(base.clone(), LambdaMode::Global);
        state.merge_step(&theta).unwrap();
        // new task vector = 0.7 * accumulated delta
        let scaled = apply_delta(&base, &state.acc_delta().scale(0.7), 1.0).unwrap();
        let dt = task_vector(&scaled, &base).unwrap();
        for (name, d) in dt.iter() {
            let g = project_orthogonal(d, state.acc_delta().get(name).unwrap()).unwrap();
            assert!(g.frobenius_norm() <= 1e-9 * d.frobenius_norm().max(1e-30));
        }
    }

    #[test]
    fn finalize_empty_state_errors() {
        let mut next = lcg(11);
        let base = random_checkpoint(&mut next, SHAPES);
        let state = MergeState::init(base, LambdaMode::Global);
        assert!(matches!(state.finalize(), Err(Error::EmptyMerge)));
    }

    #[test]
    fn degenerate_merge_detected() {
        let mut base = Checkpoint::new();
        base.insert("w", Matrix::zeros(2, 2));
        let mut state = MergeState::init(base.clone(), LambdaMode::Global);
        state.merge_step(&base).unwrap(); // zero first task is allowed
        let err = state.merge_step(&base).unwrap_err();
        assert!(matches!(err, Error::DegenerateMerge), "{err}");
    }

    #[test]
    fn lambda_floor_on_vanishing_numerator() {
        // First task zero, second task purely diagonal: projecting onto a
        // zero accumulator masks the diagonal, so the numerator vanishes
        // while norm_sum stays positive.
        let mut base = Checkpoint::new();
        base.insert("w", Matrix::zeros(2, 2));
        let mut t2 = Checkpoint::new();
        t2.insert("w", Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]));
        let mut state = MergeState::init(base.clone(), LambdaMode::Global);
        state.merge_step(&base).unwrap();
        state.merge_step(&t2).unwrap();
        assert!(state.lambda_floored());
        assert_eq!(state.lambda(), LAMBDA_FLOOR);
        let merged = state.finalize().unwrap();
        assert!(checkpoint_distance(&merged, &base) <= 1e-12);
    }

    #[test]
    fn per_param_mode_norm_identity_per_parameter() {
        let mut next = lcg(12);
        let base = random_checkpoint(&mut next, SHAPES);
        let mut state = MergeState::init(base.clone(), LambdaMode::PerParam);
        for _ in 0..4 {
            state.merge_step(&random_checkpoint(&mut next, SHAPES)).unwrap();
        }
        let merged = state.finalize().unwrap();
        for (name, sched) in state.per_param() {
            let drift = merged
                .get(name)
                .unwrap()
                .sub(base.get(name).unwrap())
                .unwrap()
                .frobenius_norm();
            let want = sched.norm_sum / state.t() as f64;
            assert!((drift - want).abs() <= 1e-9 * want.max(1.0), "{name}: {drift} vs {want}");
        }
    }

    #[test]
    fn average_merge_cases() {
        let mut next = lcg(13);
        let base = random_checkpoint(&mut next, SHAPES);
        let theta = random_checkpoint(&mut next, SHAPES);

        let single = average_merge(&base, std::slice::from_ref(&theta)).unwrap();
        assert!(checkpoint_distance(&single, &theta) <= 1e-12);

        // symmetric pair about the base cancels
        let d = task_vector(&theta, &base).unwrap();
        let mirrored = apply_delta(&base, &d, -1.0).unwrap();
        let pair = average_merge(&base, &[theta.clone(), mirrored]).unwrap();
        assert!(checkpoint_distance(&pair, &base) <= 1e-12);

        // elementwise mean oracle on three checkpoints
        let thetas: Vec<Checkpoint> = (0..3).map(|_| random_checkpoint(&mut next, SHAPES)).collect();
        let merged = average_merge(&base, &thetas).unwrap();
        for (name, m) in merged.iter() {
            for idx in 0..m.data().len() {
                let want = base.get(name).unwrap().data()[idx]
                    + (thetas.iter().map(|t| t.get(name).unwrap().data()[idx] - base.get(name).unwrap().data()[idx]).sum::<f64>())
                        / 3.0;
                assert!((m.data()[idx] - want).abs() <= 1e-12);
            }
        }

        assert!(matches!(average_merge(&base, &[]), Err(Error::EmptyCheckpointList)));
    }

    #[test]
    fn state_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.msld");
        let mut next = lcg(14);
        let base = random_checkpoint(&mut next, SHAPES);
        let mut state = MergeState::init(base, LambdaMode::Global);
        for _ in 0..2 {
            state.merge_step(&random_checkpoint(&mut next, SHAPES)).unwrap();
        }
        state.save(&path).unwrap();
        let back = MergeState::load(&path).unwrap();
        assert_eq!(back.t(), state.t());
        assert_eq!(back.lambda().to_bits(), state.lambda().to_bits());
        assert_eq!(back.norm_sum().to_bits(), state.norm_sum().to_bits());
        let merged_a = state.finalize().unwrap();
        let merged_b = back.finalize().unwrap();
        assert_eq!(checkpoint_distance(&merged_a, &merged_b), 0.0);
    }
}
