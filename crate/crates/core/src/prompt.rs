//! Class-aware and task-level prompt embedding banks, and the inference
//! modes over them: two-stage task-then-class prediction, flat argmax over
//! all classes, and task-conditioned (masked) prediction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rand_util::gaussian;

/// Prompt embeddings for one task: one row per class plus the derived
/// task-level embedding (exact arithmetic mean of the class rows).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrompts {
    pub name: String,
    pub class_names: Vec<String>,
    class_embeddings: Matrix,
    task_embedding: Matrix,
}

impl TaskPrompts {
    pub fn new(name: impl Into<String>, class_names: Vec<String>, class_embeddings: Matrix) -> Result<TaskPrompts> {
        if class_embeddings.rows() < 2 {
            return Err(Error::InvalidConfig(format!(
                "task needs at least 2 classes, got {}",
                class_embeddings.rows()
            )));
        }
        if class_names.len() != class_embeddings.rows() {
            return Err(Error::InvalidConfig(format!(
                "{} class names for {} embedding rows",
                class_names.len(),
                class_embeddings.rows()
            )));
        }
        let task_embedding = row_mean(&class_embeddings);
        Ok(TaskPrompts {
            name: name.into(),
            class_names,
            class_embeddings,
            task_embedding,
        })
    }

    pub fn class_embeddings(&self) -> &Matrix {
        &self.class_embeddings
    }

    pub fn task_embedding(&self) -> &Matrix {
        &self.task_embedding
    }

    pub fn class_count(&self) -> usize {
        self.class_embeddings.rows()
    }
}

/// Ordered collection of per-task prompts sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    tasks: Vec<TaskPrompts>,
    d: usize,
    normalize: bool,
}

/// Prediction carrying both stages' scores. For masked inference the task
/// scores are an indicator of the given task.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub task_id: usize,
    pub class_id: usize,
    pub task_scores: Vec<f64>,
    pub class_scores: Vec<f64>,
}

impl PromptBank {
    pub fn new(tasks: Vec<TaskPrompts>, normalize: bool) -> Result<PromptBank> {
        if tasks.is_empty() {
            return Err(Error::EmptyBank);
        }
        let d = tasks[0].class_embeddings.cols();
        for t in &tasks {
            if t.class_embeddings.cols() != d {
                return Err(Error::InvalidConfig(format!(
                    "task {:?} has dimension {} but the bank uses {}",
                    t.name,
                    t.class_embeddings.cols(),
                    d
                )));
            }
        }
        Ok(PromptBank { tasks, d, normalize })
    }

    pub fn tasks(&self) -> &[TaskPrompts] {
        &self.tasks
    }

    pub fn task(&self, t: usize) -> Result<&TaskPrompts> {
        self.tasks.get(t).ok_or(Error::UnknownTask(t))
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn set_normalize(&mut self, on: bool) {
        self.normalize = on;
    }

    /// Reorder tasks; `order[i]` names the old index that moves to slot `i`.
    pub fn permuted(&self, order: &[usize]) -> Result<PromptBank> {
        check_permutation(order, self.tasks.len())?;
        Ok(PromptBank {
            tasks: order.iter().map(|&i| self.tasks[i].clone()).collect(),
            d: self.d,
            normalize: self.normalize,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut c = Checkpoint::new();
        c.set_meta("bank", "prompts");
        c.set_meta("d", self.d.to_string());
        c.set_meta("normalize", self.normalize.to_string());
        c.set_meta("num_tasks", self.tasks.len().to_string());
        for (i, t) in self.tasks.iter().enumerate() {
            c.set_meta(format!("task.{i}.name"), t.name.clone());
            c.set_meta(format!("task.{i}.classes"), t.class_names.join(","));
            c.insert(format!("task.{i}.class_embeddings"), t.class_embeddings.clone());
        }
        c.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<PromptBank> {
        let c = Checkpoint::load(path)?;
        let bad = |what: &'static str| Error::Truncated(what);
        let num_tasks: usize = c
            .meta("num_tasks")
            .and_then(|s| s.parse().ok())
            .ok_or(bad("prompt bank task count"))?;
        let normalize = c.meta("normalize") == Some("true");
        let mut tasks = Vec::with_capacity(num_tasks);
        for i in 0..num_tasks {
            let name = c.meta(&format!("task.{i}.name")).ok_or(bad("task name"))?;
            let classes: Vec<String> = c
                .meta(&format!("task.{i}.classes"))
                .ok_or(bad("task classes"))?
                .split(',')
                .map(|s| s.to_string())
                .collect();
            let emb = c
                .get(&format!("task.{i}.class_embeddings"))
                .ok_or(bad("task embeddings"))?;
            tasks.push(TaskPrompts::new(name, classes, emb.clone())?);
        }
        PromptBank::new(tasks, normalize)
    }
}

/// Exact row mean: per column, rows summed in order then divided once.
fn row_mean(m: &Matrix) -> Matrix {
    let inv = 1.0 / m.rows() as f64;
    let mut out = Matrix::zeros(1, m.cols());
    for j in 0..m.cols() {
        let mut acc = 0.0;
        for i in 0..m.rows() {
            acc += m.get(i, j);
        }
        out.set(0, j, acc * inv);
    }
    out
}

fn l2_normalized(row: &[f64]) -> Vec<f64> {
    let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return row.to_vec();
    }
    row.iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn scored_dot(z: &[f64], e: &[f64], normalize: bool) -> f64 {
    if normalize {
        dot(&l2_normalized(z), &l2_normalized(e))
    } else {
        dot(z, e)
    }
}

/// First index of the maximum; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn check_z(z: &Matrix, d: usize) -> Result<()> {
    if z.rows() != 1 || z.cols() != d {
        return Err(Error::DimMismatch {
            op: "prompt_inference",
            a_rows: z.rows(),
            a_cols: z.cols(),
            b_rows: 1,
            b_cols: d,
        });
    }
    Ok(())
}

/// Dot product of `z` against each class embedding of task `t`.
pub fn class_logits(z: &Matrix, bank: &PromptBank, t: usize) -> Result<Vec<f64>> {
    check_z(z, bank.d)?;
    let task = bank.task(t)?;
    let zrow = z.row(0);
    Ok((0..task.class_count())
        .map(|j| scored_dot(zrow, task.class_embeddings.row(j), bank.normalize))
        .collect())
}

/// Row mean of the task's class embeddings.
pub fn task_embedding(bank: &PromptBank, t: usize) -> Result<Matrix> {
    Ok(row_mean(bank.task(t)?.class_embeddings()))
}

/// Two-stage prediction: most similar task by task-level embedding, then the
/// best class within it.
pub fn tcp_infer(z: &Matrix, bank: &PromptBank) -> Result<Prediction> {
    check_z(z, bank.d)?;
    let zrow = z.row(0);
    let task_scores: Vec<f64> = bank
        .tasks
        .iter()
        .map(|t| scored_dot(zrow, t.task_embedding.row(0), bank.normalize))
        .collect();
    let task_id = argmax(&task_scores);
    let class_scores = class_logits(z, bank, task_id)?;
    Ok(Prediction {
        task_id,
        class_id: argmax(&class_scores),
        task_scores,
        class_scores,
    })
}

/// Flat argmax over every class of every task; the winning class's owning
/// task becomes the task prediction. Ties go to the lowest (task, class).
pub fn naive_infer(z: &Matrix, bank: &PromptBank) -> Result<Prediction> {
    check_z(z, bank.d)?;
    let mut task_scores = Vec::with_capacity(bank.tasks.len());
    let mut best: Option<(usize, Vec<f64>)> = None;
    for t in 0..bank.tasks.len() {
        let logits = class_logits(z, bank, t)?;
        let top = logits[argmax(&logits)];
        task_scores.push(top);
        match &best {
            Some((_, cur)) if cur[argmax(cur)] >= top => {}
            _ => best = Some((t, logits)),
        }
    }
    let (task_id, class_scores) = best.expect("bank is non-empty");
    Ok(Prediction {
        task_id,
        class_id: argmax(&class_scores),
        task_scores,
        class_scores,
    })
}

/// Prediction restricted to the given task's classes.
pub fn masked_infer(z: &Matrix, bank: &PromptBank, true_task: usize) -> Result<Prediction> {
    let class_scores = class_logits(z, bank, true_task)?;
    let task_scores = (0..bank.tasks.len())
        .map(|t| if t == true_task { 1.0 } else { 0.0 })
        .collect();
    Ok(Prediction {
        task_id: true_task,
        class_id: argmax(&class_scores),
        task_scores,
        class_scores,
    })
}

pub(crate) fn check_permutation(order: &[usize], len: usize) -> Result<()> {
    if order.len() != len {
        return Err(Error::InvalidPermutation(format!(
            "length {} for {} tasks",
            order.len(),
            len
        )));
    }
    let mut seen = vec![false; len];
    for &i in order {
        if i >= len || seen[i] {
            return Err(Error::InvalidPermutation(format!("bad index {i}")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Shape of a synthetic bank: task and class names fix the class counts.
#[derive(Debug, Clone)]
pub struct PromptBankConfig {
    pub tasks: Vec<(String, Vec<String>)>,
    pub d: usize,
    /// Target cosine similarity between classes of the same task.
    pub rho_in: f64,
    /// Target cosine similarity between classes of different tasks.
    pub rho_out: f64,
    /// Target similarity for same-named classes of different tasks (the
    /// same subtype recurring across organs); defaults to `rho_out`.
    pub rho_shared: Option<f64>,
    pub normalize: bool,
}

/// Deterministic unit-norm class embeddings whose pairwise dot products hit
/// the configured within-task and cross-task targets: Cholesky of the target
/// Gram matrix, embedded in d dimensions and rotated by a seeded orthonormal
/// basis.
pub fn synth_prompt_bank(config: &PromptBankConfig, seed: u64) -> Result<PromptBank> {
    let class_counts: Vec<usize> = config.tasks.iter().map(|(_, c)| c.len()).collect();
    let total: usize = class_counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyBank);
    }
    if config.d < total {
        return Err(Error::InfeasibleGram(format!(
            "{total} classes with prescribed similarities need dimension >= {total}, got {}",
            config.d
        )));
    }

    // Target Gram matrix over all classes of all tasks.
    let rho_shared = config.rho_shared.unwrap_or(config.rho_out);
    let mut owner = Vec::with_capacity(total);
    let mut labels: Vec<&str> = Vec::with_capacity(total);
    for (t, (_, classes)) in config.tasks.iter().enumerate() {
        for name in classes {
            owner.push(t);
            labels.push(name.as_str());
        }
    }
    let mut gram = Matrix::zeros(total, total);
    for i in 0..total {
        for j in 0..total {
            let g = if i == j {
                1.0
            } else if owner[i] == owner[j] {
                config.rho_in
            } else if labels[i] == labels[j] {
                rho_shared
            } else {
                config.rho_out
            };
            gram.set(i, j, g);
        }
    }

    let l = cholesky(&gram)?;

    // Seeded orthonormal rotation spreads the embeddings over all of R^d.
    let q = random_orthonormal(config.d, seed);
    let mut all = Matrix::zeros(total, config.d);
    for i in 0..total {
        for j in 0..config.d {
            let mut acc = 0.0;
            for k in 0..total.min(config.d) {
                acc += l.get(i, k) * q.get(k, j);
            }
            all.set(i, j, acc);
        }
    }

    let mut tasks = Vec::new();
    let mut row = 0;
    for (name, classes) in &config.tasks {
        let c = classes.len();
        let mut emb = Matrix::zeros(c, config.d);
        for i in 0..c {
            for j in 0..config.d {
                emb.set(i, j, all.get(row + i, j));
            }
        }
        row += c;
        tasks.push(TaskPrompts::new(name.clone(), classes.clone(), emb)?);
    }
    PromptBank::new(tasks, config.normalize)
}

/// Lower-triangular Cholesky factor; fails when the matrix is not (strictly)
/// positive definite.
fn cholesky(g: &Matrix) -> Result<Matrix> {
    let n = g.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = g.get(i, j);
            for k in 0..j {
                acc -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if acc <= 1e-12 {
                    return Err(Error::InfeasibleGram(format!(
                        "target Gram matrix is not positive definite (pivot {acc:.3e} at {i})"
                    )));
                }
                l.set(i, j, acc.sqrt());
            } else {
                l.set(i, j, acc / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Orthonormal basis from Gram-Schmidt over seeded Gaussian vectors.
fn random_orthonormal(d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut cand: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
        for _ in 0..2 {
            for prev in &rows {
                let proj = dot(&cand, prev);
                for (c, p) in cand.iter_mut().zip(prev) {
                    *c -= proj * p;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > 1e-8 {
            cand.iter_mut().for_each(|x| *x /= norm);
            rows.push(cand);
        }
    }
    Matrix::from_rows(&rows)
}
