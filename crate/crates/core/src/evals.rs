//! Evaluation protocols: similarity-weighted k-NN, a softmax linear probe on
//! frozen embeddings, and the five-variable toy optimisation that contrasts
//! how GroCo and InfoNCE move negatives far from the decision border.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::dataio::Dataset;
use crate::diffgrad::{dot_slices, Tape, Tensor};
use crate::error::{GrocoError, Result};
use crate::losses::{self, GroCoParams, InfoNceParams, LossConfig, LossKind};
use crate::model::ModelParams;
use crate::par::{self, Execution};

/// Vote temperature for weighted k-NN.
pub const DEFAULT_KNN_TAU: f64 = 0.07;

/// Which embedding the evaluation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Space {
    /// Encoder output `g(x)`.
    #[default]
    Representation,
    /// Projection head output `h(g(x))`.
    Projection,
}

impl FromStr for Space {
    type Err = GrocoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "representation" => Ok(Space::Representation),
            "projection" => Ok(Space::Projection),
            other => Err(GrocoError::invalid(format!(
                "unknown space '{other}' (expected representation or projection)"
            ))),
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Representation => "representation",
            Space::Projection => "projection",
        })
    }
}

/// Embed every vector of a dataset with a model.
pub fn embed(params: &ModelParams, data: &Dataset, space: Space) -> Result<Tensor> {
    let x = Tensor::matrix(
        data.count(),
        data.dim(),
        data.vectors().iter().map(|&v| v as f64).collect(),
    )?;
    let (rep, proj) = params.forward_batch(&x)?;
    Ok(match space {
        Space::Representation => rep,
        Space::Projection => proj,
    })
}

/// Training embeddings with precomputed norms for repeated queries.
pub struct KnnIndex<'a> {
    embeds: &'a Tensor,
    labels: &'a [u32],
    norms: Vec<f64>,
    classes: usize,
}

fn norm(x: &[f64]) -> f64 {
    dot_slices(x, x).sqrt()
}

impl<'a> KnnIndex<'a> {
    pub fn new(embeds: &'a Tensor, labels: &'a [u32]) -> Result<Self> {
        if embeds.shape().len() != 2 || embeds.rows() == 0 {
            return Err(GrocoError::invalid(
                "k-NN needs a non-empty [count, dim] training set",
            ));
        }
        if labels.len() != embeds.rows() {
            return Err(GrocoError::invalid(format!(
                "{} labels for {} training embeddings",
                labels.len(),
                embeds.rows()
            )));
        }
        let norms: Vec<f64> = (0..embeds.rows()).map(|i| norm(embeds.row(i))).collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(GrocoError::invalid(format!(
                "training embedding {i} has zero norm"
            )));
        }
        let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
        Ok(KnnIndex {
            embeds,
            labels,
            norms,
            classes,
        })
    }

    /// `(similarity, index)` of the `k` nearest, most similar first, ties by index.
    fn neighbours(&self, query: &[f64], k: usize) -> Result<Vec<(f64, usize)>> {
        if k == 0 || k > self.embeds.rows() {
            return Err(GrocoError::invalid(format!(
                "k must be in 1..={}, got {k}",
                self.embeds.rows()
            )));
        }
        if query.len() != self.embeds.row_len() {
            return Err(GrocoError::invalid(format!(
                "query dimension {} differs from training dimension {}",
                query.len(),
                self.embeds.row_len()
            )));
        }
        let qn = norm(query);
        if qn == 0.0 {
            return Err(GrocoError::invalid("query embedding has zero norm"));
        }
        let mut sims: Vec<(f64, usize)> = (0..self.embeds.rows())
            .map(|i| {
                (
                    dot_slices(query, self.embeds.row(i)) / (qn * self.norms[i]),
                    i,
                )
            })
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < sims.len() {
            sims.select_nth_unstable_by(k - 1, order);
            sims.truncate(k);
        }
        sims.sort_by(order);
        Ok(sims)
    }

    fn vote(&self, neighbours: &[(f64, usize)], tau: f64) -> u32 {
        let mut weight = vec![0.0; self.classes];
        for &(sim, i) in neighbours {
            weight[self.labels[i] as usize] += (sim / tau).exp();
        }
        let mut best = 0;
        for (c, &w) in weight.iter().enumerate() {
            if w > weight[best] {
                best = c;
            }
        }
        best as u32
    }

    pub fn predict(&self, query: &[f64], k: usize, tau: f64) -> Result<u32> {
        check_tau(tau)?;
        Ok(self.vote(&self.neighbours(query, k)?, tau))
    }

    /// Predictions for several `k` from one neighbour search.
    pub fn predict_many(&self, query: &[f64], ks: &[usize], tau: f64) -> Result<Vec<u32>> {
        check_tau(tau)?;
        let kmax = ks.iter().copied().max().unwrap_or(1);
        let nb = self.neighbours(query, kmax)?;
        for &k in ks {
            if k == 0 {
                return Err(GrocoError::invalid("k must be positive"));
            }
        }
        Ok(ks.iter().map(|&k| self.vote(&nb[..k], tau)).collect())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(GrocoError::invalid(format!(
            "vote temperature must be positive, got {tau}"
        )))
    }
}

/// Similarity-weighted k-NN label for one query.
pub fn knn_predict(
    train: &Tensor,
    labels: &[u32],
    query: &[f64],
    k: usize,
    tau: f64,
) -> Result<u32> {
    KnnIndex::new(train, labels)?.predict(query, k, tau)
}

/// Accuracy for each `k` in `ks`; queries run in parallel.
pub fn knn_accuracies(
    train: &Tensor,
    train_labels: &[u32],
    test: &Tensor,
    test_labels: &[u32],
    ks: &[usize],
    tau: f64,
    exec: Execution,
) -> Result<Vec<f64>> {
    if ks.is_empty() {
        return Err(GrocoError::invalid("no k values given"));
    }
    if test.rows() == 0 || test_labels.len() != test.rows() {
        return Err(GrocoError::invalid(format!(
            "{} labels for {} test embeddings",
            test_labels.len(),
            test.rows()
        )));
    }
    let index = KnnIndex::new(train, train_labels)?;
    let preds = par::map_range(exec, test.rows(), |i| {
        index.predict_many(test.row(i), ks, tau)
    });
    let mut correct = vec![0usize; ks.len()];
    for (p, &truth) in preds.into_iter().zip(test_labels) {
        for (c, label) in correct.iter_mut().zip(p?) {
            *c += (label == truth) as usize;
        }
    }
    Ok(correct
        .into_iter()
        .map(|c| c as f64 / test.rows() as f64)
        .collect())
}

pub fn knn_accuracy(
    train: &Tensor,
    train_labels: &[u32],
    test: &Tensor,
    test_labels: &[u32],
    k: usize,
    tau: f64,
    exec: Execution,
) -> Result<f64> {
    Ok(knn_accuracies(train, train_labels, test, test_labels, &[k], tau, exec)?[0])
}

/// Softmax regression on frozen embeddings, trained from zero by full-batch
/// gradient descent on the mean cross-entropy. Features are standardised
/// with training-set statistics first. Returns test accuracy.
pub fn linear_probe(
    train: &Tensor,
    train_labels: &[u32],
    test: &Tensor,
    test_labels: &[u32],
    steps: usize,
    lr: f64,
) -> Result<f64> {
    if train.rows() == 0 || train.rows() != train_labels.len() || test.rows() != test_labels.len() {
        return Err(GrocoError::invalid(
            "embedding and label counts must match and be non-zero",
        ));
    }
    if test.rows() == 0 || test.row_len() != train.row_len() {
        return Err(GrocoError::invalid(
            "test set empty or of different dimension",
        ));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(GrocoError::invalid(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    let first = train_labels[0];
    if train_labels.iter().all(|&l| l == first) {
        return Err(GrocoError::invalid(
            "linear probe needs at least two classes in the training labels",
        ));
    }
    let classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(0, |&m| m as usize + 1);
    let (n, d) = (train.rows(), train.row_len());

    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut std = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in std.iter_mut().zip(train.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    let scale: Vec<f64> = std
        .iter()
        .map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })
        .collect();
    let standardise = |t: &Tensor| -> Vec<Vec<f64>> {
        (0..t.rows())
            .map(|i| {
                t.row(i)
                    .iter()
                    .zip(&mean)
                    .zip(&scale)
                    .map(|((v, m), s)| (v - m) * s)
                    .collect()
            })
            .collect()
    };
    let xs = standardise(train);

    let mut w = vec![0.0; d * classes];
    let mut b = vec![0.0; classes];
    let logits = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
        let mut z = b.to_vec();
        for (j, xv) in x.iter().enumerate() {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += xv * w[j * classes + c];
            }
        }
        z
    };
    for _ in 0..steps {
        let mut gw = vec![0.0; d * classes];
        let mut gb = vec![0.0; classes];
        for (x, &y) in xs.iter().zip(train_labels) {
            let z = logits(x, &w, &b);
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
            let total: f64 = e.iter().sum();
            for c in 0..classes {
                let g = (e[c] / total - (c == y as usize) as u8 as f64) / n as f64;
                gb[c] += g;
                for (j, xv) in x.iter().enumerate() {
                    gw[j * classes + c] += g * xv;
                }
            }
        }
        for (p, g) in w.iter_mut().zip(&gw).chain(b.iter_mut().zip(&gb)) {
            *p -= lr * g;
        }
    }

    let correct = standardise(test)
        .iter()
        .zip(test_labels)
        .filter(|(x, &y)| {
            let z = logits(x, &w, &b);
            let mut best = 0;
            for c in 1..classes {
                if z[c] > z[best] {
                    best = c;
                }
            }
            best == y as usize
        })
        .count();
    Ok(correct as f64 / test.rows() as f64)
}

/// Accuracies of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub space: Space,
    pub seed: u64,
    /// `(k, accuracy)` pairs.
    pub knn: Vec<(usize, f64)>,
    pub linear_probe: Option<f64>,
    /// Free-form `key=value` description of the configuration.
    pub config: String,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "space={} seed={} {}", self.space, self.seed, self.config)?;
        for (k, acc) in &self.knn {
            writeln!(f, "knn k={k} accuracy={acc:.6}")?;
        }
        if let Some(acc) = self.linear_probe {
            writeln!(f, "linear accuracy={acc:.6}")?;
        }
        Ok(())
    }
}

/// Hyperparameters of the toy experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub init: [f64; 5],
    pub steps: usize,
    pub lr: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            init: [0.0, 0.6, 0.3, 0.0, -0.3],
            steps: 300,
            lr: 0.05,
            beta: 2.0,
            tau: 0.5,
        }
    }
}

/// Similarities `[s_pos, s_neg1..s_neg4]` after each step; row 0 is the start.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTrajectory {
    pub kind: LossKind,
    pub rows: Vec<[f64; 5]>,
}

impl ToyTrajectory {
    pub fn first(&self) -> &[f64; 5] {
        &self.rows[0]
    }

    pub fn last(&self) -> &[f64; 5] {
        self.rows.last().unwrap()
    }

    /// `|final - initial|` of variable `i`.
    pub fn displacement(&self, i: usize) -> f64 {
        (self.last()[i] - self.first()[i]).abs()
    }

    /// Index of the negative with the smallest initial similarity.
    pub fn farthest_negative(&self) -> usize {
        let s = self.first();
        (1..5).fold(1, |best, i| if s[i] < s[best] { i } else { best })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,s_pos,s_neg1,s_neg2,s_neg3,s_neg4\n");
        for (step, r) in self.rows.iter().enumerate() {
            out.push_str(&format!(
                "{step},{},{},{},{},{}\n",
                r[0], r[1], r[2], r[3], r[4]
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e| GrocoError::io(path, e);
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(self.to_csv().as_bytes()).map_err(io)
    }
}

/// Gradient descent on five raw similarities, the first positive and the
/// rest negatives, with distances `d = -s` fed to the chosen loss.
pub fn toy_dynamics(kind: LossKind, config: &ToyConfig) -> Result<ToyTrajectory> {
    let loss = match kind {
        LossKind::GroCo => LossConfig {
            kind,
            groco: GroCoParams::new(config.beta, 4)?,
            ..LossConfig::default()
        },
        LossKind::InfoNce => LossConfig {
            kind,
            infonce: InfoNceParams::new(config.tau)?,
            ..LossConfig::default()
        },
        LossKind::Triplet => {
            return Err(GrocoError::invalid(
                "toy dynamics supports groco and infonce only",
            ));
        }
    };
    if !(config.lr.is_finite() && config.lr >= 0.0) {
        return Err(GrocoError::invalid(format!(
            "learning rate must be non-negative, got {}",
            config.lr
        )));
    }
    if config.init.iter().any(|v| !v.is_finite()) {
        return Err(GrocoError::invalid("initial similarities must be finite"));
    }
    let mut s = config.init;
    let mut rows = Vec::with_capacity(config.steps + 1);
    rows.push(s);
    for step in 0..config.steps {
        let mut tape = Tape::new();
        let sv = tape.leaf(Tensor::vector(s.to_vec()));
        let d = tape.scale(sv, -1.0)?;
        // negatives pre-ordered by distance, ascending
        let mut neg: Vec<usize> = (1..5).collect();
        neg.sort_by(|&a, &b| (-s[a]).total_cmp(&-s[b]).then(a.cmp(&b)));
        let pos = tape.index_select(d, &[0])?;
        let negs = tape.index_select(d, &neg)?;
        let l = losses::anchor_loss_tape(&mut tape, pos, negs, &loss)?;
        let g = tape.backward(l)?.get(sv);
        for (v, gv) in s.iter_mut().zip(g.data()) {
            *v -= config.lr * gv;
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(GrocoError::numeric(
                None,
                format!("toy trajectory diverged at step {}", step + 1),
            ));
        }
        rows.push(s);
    }
    Ok(ToyTrajectory { kind, rows })
}
