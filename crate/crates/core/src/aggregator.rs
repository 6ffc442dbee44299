//! Attention-pooling bag aggregator with exact hand-derived gradients.
//!
//! One patch projection with tanh, softmax attention pooling, and an output
//! projection. Logits come from dot products against frozen class embeddings
//! and training minimizes the cross-entropy of those logits, so the model
//! itself carries no classification head.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rand_util::gaussian;

pub const PARAM_NAMES: [&str; 5] = ["w_in", "b_in", "w_a", "w_out", "b_out"];

/// One synthetic slide: a bag of patch embedding rows with a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub patches: Matrix,
    pub label: usize,
    pub task_id: usize,
    pub site_id: Option<usize>,
}

/// The five aggregator parameters. `w_in`/`w_out` are d x d, the rest d x 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams {
    pub w_in: Matrix,
    pub b_in: Matrix,
    pub w_a: Matrix,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

impl AggregatorParams {
    pub fn dim(&self) -> usize {
        self.w_in.rows()
    }

    pub fn zeros(d: usize) -> AggregatorParams {
        AggregatorParams {
            w_in: Matrix::zeros(d, d),
            b_in: Matrix::zeros(d, 1),
            w_a: Matrix::zeros(d, 1),
            w_out: Matrix::zeros(d, d),
            b_out: Matrix::zeros(d, 1),
        }
    }

    /// Base weights standing in for a pretrained encoder: near-identity
    /// projections with seeded Gaussian perturbations and a small random
    /// attention vector, so the untrained model approximately mean-pools
    /// its input and keeps embedding directions intact.
    pub fn base_init(d: usize, seed: u64, scale: f64) -> AggregatorParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noisy_identity = |rng: &mut ChaCha8Rng| {
            let mut m = Matrix::identity(d);
            for i in 0..d {
                for j in 0..d {
                    m.set(i, j, m.get(i, j) + scale * gaussian(rng));
                }
            }
            m
        };
        let w_in = noisy_identity(&mut rng);
        let w_out = noisy_identity(&mut rng);
        let w_a = Matrix::col_vector((0..d).map(|_| scale * gaussian(&mut rng)).collect());
        AggregatorParams {
            w_in,
            b_in: Matrix::zeros(d, 1),
            w_a,
            w_out,
            b_out: Matrix::zeros(d, 1),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("w_in", self.w_in.clone());
        c.insert("b_in", self.b_in.clone());
        c.insert("w_a", self.w_a.clone());
        c.insert("w_out", self.w_out.clone());
        c.insert("b_out", self.b_out.clone());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<AggregatorParams> {
        let get = |name: &str| {
            c.get(name).cloned().ok_or_else(|| Error::Incompatible {
                name: name.to_string(),
                detail: "missing aggregator parameter".into(),
            })
        };
        let params = AggregatorParams {
            w_in: get("w_in")?,
            b_in: get("b_in")?,
            w_a: get("w_a")?,
            w_out: get("w_out")?,
            b_out: get("b_out")?,
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        let d = self.w_in.rows();
        let checks = [
            ("w_in", self.w_in.shape(), (d, d)),
            ("b_in", self.b_in.shape(), (d, 1)),
            ("w_a", self.w_a.shape(), (d, 1)),
            ("w_out", self.w_out.shape(), (d, d)),
            ("b_out", self.b_out.shape(), (d, 1)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Incompatible {
                    name: name.into(),
                    detail: format!("shape {}x{}, expected {}x{}", got.0, got.1, want.0, want.1),
                });
            }
        }
        Ok(())
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut Matrix)) {
        f(&mut self.w_in);
        f(&mut self.b_in);
        f(&mut self.w_a);
        f(&mut self.w_out);
        f(&mut self.b_out);
    }
}

/// Stable softmax over a slice.
fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

struct ForwardTrace {
    h: Matrix,        // n x d, tanh activations
    att: Vec<f64>,    // n, attention weights
    pooled: Vec<f64>, // d
    z: Matrix,        // 1 x d
}

fn forward_trace(patches: &Matrix, params: &AggregatorParams) -> Result<ForwardTrace> {
    let d = params.dim();
    if patches.cols() != d {
        return Err(Error::DimMismatch {
            op: "aggregator_forward",
            a_rows: patches.rows(),
            a_cols: patches.cols(),
            b_rows: d,
            b_cols: d,
        });
    }
    params.validate()?;
    let n = patches.rows();

    let mut h = Matrix::zeros(n, d);
    for i in 0..n {
        for k in 0..d {
            let mut acc = params.b_in.get(k, 0);
            for j in 0..d {
                acc += patches.get(i, j) * params.w_in.get(j, k);
            }
            h.set(i, k, acc.tanh());
        }
    }

    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for k in 0..d {
                acc += h.get(i, k) * params.w_a.get(k, 0);
            }
            acc
        })
        .collect();
    let att = softmax(&scores);

    let mut pooled = vec![0.0; d];
    for i in 0..n {
        for (k, p) in pooled.iter_mut().enumerate() {
            *p += att[i] * h.get(i, k);
        }
    }

    let mut z = Matrix::zeros(1, d);
    for k in 0..d {
        let mut acc = params.b_out.get(k, 0);
        for j in 0..d {
            acc += pooled[j] * params.w_out.get(j, k);
        }
        z.set(0, k, acc);
    }

    Ok(ForwardTrace { h, att, pooled, z })
}

/// Slide-level embedding of a bag of patches: 1 x d.
pub fn forward(patches: &Matrix, params: &AggregatorParams) -> Result<Matrix> {
    Ok(forward_trace(patches, params)?.z)
}

/// Cross-entropy of the bag's logits against its label, plus exact gradients
/// for all five parameters. The class embeddings are frozen and receive no
/// gradient.
pub fn loss_and_grads(
    bag: &Bag,
    params: &AggregatorParams,
    class_embeddings: &Matrix,
) -> Result<(f64, AggregatorParams)> {
    let c = class_embeddings.rows();
    if bag.label >= c {
        return Err(Error::LabelOutOfRange {
            label: bag.label,
            classes: c,
        });
    }
    let d = params.dim();
    if class_embeddings.cols() != d {
        return Err(Error::DimMismatch {
            op: "loss_and_grads",
            a_rows: c,
            a_cols: class_embeddings.cols(),
            b_rows: c,
            b_cols: d,
        });
    }

    let trace = forward_trace(&bag.patches, params)?;
    let n = bag.patches.rows();

    let logits: Vec<f64> = (0..c)
        .map(|j| {
            let mut acc = 0.0;
            for k in 0..d {
                acc += trace.z.get(0, k) * class_embeddings.get(j, k);
            }
            acc
        })
        .collect();
    let probs = softmax(&logits);
    let loss = -probs[bag.label].max(f64::MIN_POSITIVE).ln();

    // d loss / d logits
    let mut dp = probs;
    dp[bag.label] -= 1.0;

    // d loss / d z
    let mut dz = vec![0.0; d];
    for (j, &g) in dp.iter().enumerate() {
        for (k, dzk) in dz.iter_mut().enumerate() {
            *dzk += g * class_embeddings.get(j, k);
        }
    }

    let mut grads = AggregatorParams::zeros(d);

    // output projection
    for k in 0..d {
        grads.b_out.set(k, 0, dz[k]);
        for j in 0..d {
            grads.w_out.set(j, k, trace.pooled[j] * dz[k]);
        }
    }

    // d loss / d pooled
    let mut dm = vec![0.0; d];
    for (j, dmj) in dm.iter_mut().enumerate() {
        for (k, dzk) in dz.iter().enumerate() {
            *dmj += dzk * params.w_out.get(j, k);
        }
    }

    // attention weights and scores
    let datt: Vec<f64> = (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (k, dmk) in dm.iter().enumerate() {
                acc += dmk * trace.h.get(i, k);
            }
            acc
        })
        .collect();
    let att_dot: f64 = trace.att.iter().zip(&datt).map(|(a, g)| a * g).sum();
    let ds: Vec<f64> = (0..n).map(|i| trace.att[i] * (datt[i] - att_dot)).collect();

    for k in 0..d {
        let mut acc = 0.0;
        for i in 0..n {
            acc += trace.h.get(i, k) * ds[i];
        }
        grads.w_a.set(k, 0, acc);
    }

    // back through tanh into the input projection
    for i in 0..n {
        for k in 0..d {
            let hik = trace.h.get(i, k);
            let dh = trace.att[i] * dm[k] + ds[i] * params.w_a.get(k, 0);
            let da = dh * (1.0 - hik * hik);
            grads.b_in.set(k, 0, grads.b_in.get(k, 0) + da);
            for j in 0..d {
                grads
                    .w_in
                    .set(j, k, grads.w_in.get(j, k) + bag.patches.get(i, j) * da);
            }
        }
    }

    Ok((loss, grads))
}

/// Keep at most `k` patch rows, sampled without replacement with the row
/// order preserved. Bags at or under the budget pass through unchanged.
pub fn subsample(bag: &Bag, k: usize, rng: &mut ChaCha8Rng) -> Result<Bag> {
    if k == 0 {
        return Err(Error::ZeroSubsample);
    }
    let n = bag.patches.rows();
    if n <= k {
        return Ok(bag.clone());
    }
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        indices.swap(i, j);
    }
    let mut chosen = indices[..k].to_vec();
    chosen.sort_unstable();

    let d = bag.patches.cols();
    let mut patches = Matrix::zeros(k, d);
    for (row, &src) in chosen.iter().enumerate() {
        for j in 0..d {
            patches.set(row, j, bag.patches.get(src, j));
        }
    }
    Ok(Bag {
        patches,
        label: bag.label,
        task_id: bag.task_id,
        site_id: bag.site_id,
    })
}

/// Training hyperparameters; the defaults are the artifact-wide ones.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub subsample_k: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            subsample_k: 64,
        }
    }
}

/// Fine-tune on one task: per-bag updates with decoupled weight decay and
/// adaptive moments, bag order shuffled each epoch. Returns the final
/// parameters and the mean loss per epoch.
pub fn train_task(
    train_bags: &[Bag],
    params_init: &AggregatorParams,
    class_embeddings: &Matrix,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(AggregatorParams, Vec<f64>)> {
    if train_bags.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut params = params_init.clone();
    if config.epochs == 0 {
        return Ok((params, Vec::new()));
    }

    let d = params.dim();
    let mut m1 = AggregatorParams::zeros(d);
    let mut m2 = AggregatorParams::zeros(d);
    let mut step = 0u32;
    let mut history = Vec::with_capacity(config.epochs);

    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for (pos, &bag_idx) in order.iter().enumerate() {
            let bag = subsample(&train_bags[bag_idx], config.subsample_k, rng)?;
            let (loss, grads) = loss_and_grads(&bag, &params, class_embeddings)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    bag: pos,
                    loss,
                });
            }
            epoch_loss += loss;
            step += 1;
            adamw_update(&mut params, &grads, &mut m1, &mut m2, step, config);
        }
        history.push(epoch_loss / train_bags.len() as f64);
    }
    Ok((params, history))
}

fn adamw_update(
    params: &mut AggregatorParams,
    grads: &AggregatorParams,
    m1: &mut AggregatorParams,
    m2: &mut AggregatorParams,
    step: u32,
    config: &TrainConfig,
) {
    adamw_field(&mut params.w_in, &grads.w_in, &mut m1.w_in, &mut m2.w_in, step, config);
    adamw_field(&mut params.b_in, &grads.b_in, &mut m1.b_in, &mut m2.b_in, step, config);
    adamw_field(&mut params.w_a, &grads.w_a, &mut m1.w_a, &mut m2.w_a, step, config);
    adamw_field(&mut params.w_out, &grads.w_out, &mut m1.w_out, &mut m2.w_out, step, config);
    adamw_field(&mut params.b_out, &grads.b_out, &mut m1.b_out, &mut m2.b_out, step, config);
}

fn adamw_field(p: &mut Matrix, g: &Matrix, m: &mut Matrix, v: &mut Matrix, step: u32, config: &TrainConfig) {
    let bc1 = 1.0 - config.beta1.powi(step as i32);
    let bc2 = 1.0 - config.beta2.powi(step as i32);
    for idx in 0..g.data().len() {
        let gi = g.data()[idx];
        let mi = config.beta1 * m.data()[idx] + (1.0 - config.beta1) * gi;
        let vi = config.beta2 * v.data()[idx] + (1.0 - config.beta2) * gi * gi;
        m.data_mut()[idx] = mi;
        v.data_mut()[idx] = vi;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        let p_old = p.data()[idx];
        p.data_mut()[idx] = p_old
            - config.learning_rate * (m_hat / (v_hat.sqrt() + config.epsilon))
            - config.learning_rate * config.weight_decay * p_old;
    }
}
