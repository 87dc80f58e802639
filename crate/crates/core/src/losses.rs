//! Group ordering constraint loss, full sorting supervision, and the
//! InfoNCE and triplet baselines.
//!
//! Every loss exists twice: a plain `f64` evaluation used for reporting and
//! as a reference, and a `*_tape` recording on a [`Tape`] for training and
//! gradient checking. Both follow the same arithmetic.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::diffgrad::{Tape, Tensor, Var};
use crate::error::{GrocoError, Result};
use crate::sortcore::{self, check_beta, step_pairs, RelaxedPermutation};

/// Clamp applied to probabilities inside binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroCoParams {
    pub beta: f64,
    /// Strongest negatives kept per anchor.
    pub negatives: usize,
}

impl GroCoParams {
    pub fn new(beta: f64, negatives: usize) -> Result<Self> {
        check_beta(beta)?;
        if negatives == 0 {
            return Err(GrocoError::invalid(
                "number of negatives must be at least 1",
            ));
        }
        Ok(GroCoParams { beta, negatives })
    }
}

impl Default for GroCoParams {
    fn default() -> Self {
        GroCoParams {
            beta: 1.0,
            negatives: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoNceParams {
    pub tau: f64,
}

impl InfoNceParams {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(GrocoError::invalid(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        Ok(InfoNceParams { tau })
    }
}

impl Default for InfoNceParams {
    fn default() -> Self {
        InfoNceParams { tau: 0.1 }
    }
}

/// Triplet hinge margin; `Unbounded` never clips.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Margin {
    Finite(f64),
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletParams {
    pub margin: Margin,
}

impl TripletParams {
    pub fn new(margin: Margin) -> Result<Self> {
        if let Margin::Finite(r) = margin {
            if !(r.is_finite() && r > 0.0) {
                return Err(GrocoError::invalid(format!(
                    "margin must be positive, got {r}"
                )));
            }
        }
        Ok(TripletParams { margin })
    }
}

impl Default for TripletParams {
    fn default() -> Self {
        TripletParams {
            margin: Margin::Finite(0.8),
        }
    }
}

impl FromStr for Margin {
    type Err = GrocoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inf" | "+inf" | "unbounded" => Ok(Margin::Unbounded),
            _ => s
                .parse::<f64>()
                .map(Margin::Finite)
                .map_err(|_| GrocoError::invalid(format!("bad margin '{s}'"))),
        }
    }
}

impl fmt::Display for Margin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Margin::Finite(r) => write!(f, "{r}"),
            Margin::Unbounded => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    GroCo,
    InfoNce,
    Triplet,
}

impl FromStr for LossKind {
    type Err = GrocoError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "groco" => Ok(LossKind::GroCo),
            "infonce" => Ok(LossKind::InfoNce),
            "triplet" => Ok(LossKind::Triplet),
            _ => Err(GrocoError::invalid(format!("unknown loss kind '{s}'"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::GroCo => "groco",
            LossKind::InfoNce => "infonce",
            LossKind::Triplet => "triplet",
        })
    }
}

/// Which loss to apply per anchor, with every hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub groco: GroCoParams,
    pub infonce: InfoNceParams,
    pub triplet: TripletParams,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Binary cross-entropy with the probability clamped to `[eps, 1 - eps]`.
pub fn bce(p: f64, q: f64) -> Result<f64> {
    if !p.is_finite() {
        return Err(GrocoError::invalid(format!(
            "probability {p} is not finite"
        )));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(GrocoError::invalid(format!("target {q} outside [0, 1]")));
    }
    Ok(bce_unchecked(p, q))
}

fn bce_unchecked(p: f64, q: f64) -> f64 {
    let p = clamp_prob(p);
    -(q * p.ln() + (1.0 - q) * (1.0 - p).ln())
}

fn check_group(name: &str, d: &[f64]) -> Result<()> {
    if d.is_empty() {
        return Err(GrocoError::invalid(format!("{name} group is empty")));
    }
    if let Some(v) = d.iter().find(|v| !v.is_finite()) {
        return Err(GrocoError::invalid(format!(
            "{name} group holds non-finite distance {v}"
        )));
    }
    Ok(())
}

fn check_ascending(name: &str, d: &[f64]) -> Result<()> {
    if let Some(w) = d.windows(2).position(|w| w[0] > w[1]) {
        return Err(GrocoError::invalid(format!(
            "{name} distances must be ascending, found {} > {} at position {w}",
            d[w],
            d[w + 1]
        )));
    }
    Ok(())
}

/// GroCo loss over pre-ordered positive and negative distances.
///
/// Both groups must already be non-descending; ordering them (and deciding
/// which elements receive gradient) is the caller's job.
pub fn groco_loss(d_pos: &[f64], d_neg: &[f64], params: &GroCoParams) -> Result<f64> {
    check_group("positive", d_pos)?;
    check_group("negative", d_neg)?;
    check_ascending("positive", d_pos)?;
    check_ascending("negative", d_neg)?;
    let list: Vec<f64> = d_pos.iter().chain(d_neg).copied().collect();
    groco_loss_from_list(&list, d_pos.len(), params.beta)
}

/// GroCo loss over an arbitrary concatenated list whose first `k` entries
/// are positives. No ordering is required.
pub fn groco_loss_from_list(list: &[f64], k: usize, beta: f64) -> Result<f64> {
    if k == 0 || k >= list.len() {
        return Err(GrocoError::invalid(format!(
            "need at least one positive and one negative, got k = {k} of {}",
            list.len()
        )));
    }
    let sort = sortcore::diff_sort(list, beta)?;
    Ok(group_bce(&sort.permutation, k))
}

/// Mean of both BCE terms over the columns of `p`.
fn group_bce(p: &RelaxedPermutation, k: usize) -> f64 {
    let n = p.size();
    let mut total = 0.0;
    for i in 0..n {
        let pos_mass: f64 = (0..k).map(|r| p.get(r, i)).sum();
        let neg_mass: f64 = (k..n).map(|r| p.get(r, i)).sum();
        let is_pos = if i < k { 1.0 } else { 0.0 };
        total += bce_unchecked(pos_mass, is_pos) + bce_unchecked(neg_mass, 1.0 - is_pos);
    }
    total / (2.0 * n as f64)
}

/// Closed form for one positive and one negative:
/// `-ln(atan(beta * (d_n - d_p)) / pi + 0.5)`.
pub fn groco_closed_form_1v1(d_p: f64, d_n: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    if !d_p.is_finite() || !d_n.is_finite() {
        return Err(GrocoError::invalid("non-finite distance"));
    }
    Ok(-((beta * (d_n - d_p)).atan() / PI + 0.5).ln())
}

/// Mean elementwise BCE between a relaxed permutation and a hard one.
pub fn sorting_supervision_loss(p: &RelaxedPermutation, q: &RelaxedPermutation) -> Result<f64> {
    let n = p.size();
    if q.size() != n {
        return Err(GrocoError::invalid(format!(
            "shape mismatch: P is {n}x{n}, Q is {}x{}",
            q.size(),
            q.size()
        )));
    }
    let binary = q.entries().iter().all(|&v| v == 0.0 || v == 1.0);
    if !binary || !q.is_doubly_stochastic(0.0) {
        return Err(GrocoError::invalid("Q is not a 0/1 permutation matrix"));
    }
    let total: f64 = p
        .entries()
        .iter()
        .zip(q.entries())
        .map(|(&pv, &qv)| bce_unchecked(pv, qv))
        .sum();
    Ok(total / (n * n) as f64)
}

/// Multi-positive InfoNCE: mean over positives of
/// `-ln(exp(-d_p/tau) / (exp(-d_p/tau) + sum_z exp(-d_z/tau)))`.
pub fn infonce_loss(d_pos: &[f64], d_neg: &[f64], params: &InfoNceParams) -> Result<f64> {
    check_group("positive", d_pos)?;
    check_group("negative", d_neg)?;
    let inv = 1.0 / params.tau;
    let neg_logits: Vec<f64> = d_neg.iter().map(|d| -d * inv).collect();
    let neg_max = neg_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for &dp in d_pos {
        let lp = -dp * inv;
        let m = lp.max(neg_max);
        let s = (lp - m).exp() + neg_logits.iter().map(|l| (l - m).exp()).sum::<f64>();
        total += s.ln() + m - lp;
    }
    Ok(total / d_pos.len() as f64)
}

/// Mean hinge `max(d_p - d_n + r, 0)` over all positive/negative pairs.
pub fn triplet_loss(d_pos: &[f64], d_neg: &[f64], params: &TripletParams) -> Result<f64> {
    check_group("positive", d_pos)?;
    check_group("negative", d_neg)?;
    let mut total = 0.0;
    for &dp in d_pos {
        for &dn in d_neg {
            total += match params.margin {
                Margin::Finite(r) => (dp - dn + r).max(0.0),
                Margin::Unbounded => dp - dn,
            };
        }
    }
    Ok(total / (d_pos.len() * d_neg.len()) as f64)
}

/// Sum of elementwise clamped BCE of `p` against constant `targets`.
pub fn bce_sum_tape(tape: &mut Tape, p: Var, targets: &[f64]) -> Result<Var> {
    let n = tape.value(p).numel();
    if targets.len() != n {
        return Err(GrocoError::invalid(
            "target length differs from probabilities",
        ));
    }
    let q = tape.constant(Tensor::vector(targets.to_vec()));
    let one_minus_q = tape.constant(Tensor::vector(targets.iter().map(|t| 1.0 - t).collect()));
    let one = tape.scalar(1.0);
    let pc = tape.clamp(p, BCE_EPS, 1.0 - BCE_EPS)?;
    let log_p = tape.log(pc)?;
    let comp = tape.sub(one, pc)?;
    let log_comp = tape.log(comp)?;
    let a = tape.mul(q, log_p)?;
    let b = tape.mul(one_minus_q, log_comp)?;
    let ab = tape.add(a, b)?;
    let s = tape.sum(ab)?;
    tape.scale(s, -1.0)
}

/// Rows of the relaxed permutation recorded on a tape.
pub struct TapePermutation {
    pub rows: Vec<Var>,
    pub sorted: Vec<Var>,
}

/// Record the relaxed odd-even network over a length-`n` vector.
pub fn diff_sort_tape(tape: &mut Tape, values: Var, beta: f64) -> Result<TapePermutation> {
    check_beta(beta)?;
    let n = tape.value(values).numel();
    if n == 0 {
        return Err(GrocoError::invalid("cannot sort an empty list"));
    }
    let mut running = (0..n)
        .map(|i| tape.index_select(values, &[i]))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = (0..n)
        .map(|r| {
            let mut e = vec![0.0; n];
            e[r] = 1.0;
            tape.constant(Tensor::vector(e))
        })
        .collect::<Vec<_>>();
    let half = tape.scalar(0.5);
    for step in 1..=n {
        for (i, j) in step_pairs(n, step) {
            let (a, b) = (running[i], running[j]);
            let diff = tape.sub(b, a)?;
            let x = tape.scale(diff, beta)?;
            let at = tape.arctan(x)?;
            let s = tape.scale(at, 1.0 / PI)?;
            let stay = tape.add(s, half)?;
            let cross = tape.sub(half, s)?;

            let a_stay = tape.mul(a, stay)?;
            let b_cross = tape.mul(b, cross)?;
            let a_cross = tape.mul(a, cross)?;
            let b_stay = tape.mul(b, stay)?;
            running[i] = tape.add(a_stay, b_cross)?;
            running[j] = tape.add(a_cross, b_stay)?;

            let (ri, rj) = (rows[i], rows[j]);
            let ri_stay = tape.mul(ri, stay)?;
            let rj_cross = tape.mul(rj, cross)?;
            let ri_cross = tape.mul(ri, cross)?;
            let rj_stay = tape.mul(rj, stay)?;
            rows[i] = tape.add(ri_stay, rj_cross)?;
            rows[j] = tape.add(ri_cross, rj_stay)?;
        }
    }
    Ok(TapePermutation {
        rows,
        sorted: running,
    })
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// GroCo loss recorded on a tape over a concatenated list whose first `k`
/// entries are positives.
pub fn groco_loss_tape(tape: &mut Tape, list: Var, k: usize, beta: f64) -> Result<Var> {
    let n = tape.value(list).numel();
    if k == 0 || k >= n {
        return Err(GrocoError::invalid(format!(
            "need at least one positive and one negative, got k = {k} of {n}"
        )));
    }
    let perm = diff_sort_tape(tape, list, beta)?;
    let pos_mass = sum_vars(tape, &perm.rows[..k])?;
    let neg_mass = sum_vars(tape, &perm.rows[k..])?;
    let pos_target: Vec<f64> = (0..n).map(|i| if i < k { 1.0 } else { 0.0 }).collect();
    let neg_target: Vec<f64> = pos_target.iter().map(|t| 1.0 - t).collect();
    let a = bce_sum_tape(tape, pos_mass, &pos_target)?;
    let b = bce_sum_tape(tape, neg_mass, &neg_target)?;
    let total = tape.add(a, b)?;
    tape.scale(total, 1.0 / (2.0 * n as f64))
}

/// InfoNCE recorded on a tape. The max-logit shift is a constant.
pub fn infonce_loss_tape(
    tape: &mut Tape,
    d_pos: Var,
    d_neg: Var,
    params: &InfoNceParams,
) -> Result<Var> {
    let k = tape.value(d_pos).numel();
    if k == 0 || tape.value(d_neg).numel() == 0 {
        return Err(GrocoError::invalid("InfoNCE needs non-empty groups"));
    }
    let inv = 1.0 / params.tau;
    let neg_logits = tape.scale(d_neg, -inv)?;
    let neg_max = tape
        .value(neg_logits)
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut terms = Vec::with_capacity(k);
    for i in 0..k {
        let dp = tape.index_select(d_pos, &[i])?;
        let lp = tape.scale(dp, -inv)?;
        let m = tape.value(lp).item().max(neg_max);
        let shift = tape.scalar(m);
        let all = tape.concat(&[lp, neg_logits])?;
        let centered = tape.sub(all, shift)?;
        let e = tape.exp(centered)?;
        let s = tape.sum(e)?;
        let ls = tape.log(s)?;
        let lse = tape.add(ls, shift)?;
        terms.push(tape.sub(lse, lp)?);
    }
    let total = sum_vars(tape, &terms)?;
    let total = tape.sum(total)?;
    tape.scale(total, 1.0 / k as f64)
}

/// Triplet hinge recorded on a tape.
pub fn triplet_loss_tape(
    tape: &mut Tape,
    d_pos: Var,
    d_neg: Var,
    params: &TripletParams,
) -> Result<Var> {
    let k = tape.value(d_pos).numel();
    let m = tape.value(d_neg).numel();
    if k == 0 || m == 0 {
        return Err(GrocoError::invalid("triplet loss needs non-empty groups"));
    }
    let mut terms = Vec::with_capacity(k);
    for i in 0..k {
        let dp = tape.index_select(d_pos, &[i])?;
        let diff = tape.sub(dp, d_neg)?;
        let hinge = match params.margin {
            Margin::Finite(r) => {
                let r = tape.scalar(r);
                let shifted = tape.add(diff, r)?;
                tape.relu(shifted)?
            }
            Margin::Unbounded => diff,
        };
        terms.push(tape.sum(hinge)?);
    }
    let total = sum_vars(tape, &terms)?;
    tape.scale(total, 1.0 / (k * m) as f64)
}

/// Per-anchor loss of the configured kind on a tape.
///
/// `positives` and `negatives` are distance vectors; for GroCo they are
/// concatenated in the given order.
pub fn anchor_loss_tape(
    tape: &mut Tape,
    positives: Var,
    negatives: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    match cfg.kind {
        LossKind::GroCo => {
            let k = tape.value(positives).numel();
            let list = tape.concat(&[positives, negatives])?;
            groco_loss_tape(tape, list, k, cfg.groco.beta)
        }
        LossKind::InfoNce => infonce_loss_tape(tape, positives, negatives, &cfg.infonce),
        LossKind::Triplet => triplet_loss_tape(tape, positives, negatives, &cfg.triplet),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sortcore::{diff_sort, hard_sort};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    /// Dense-matrix oracle for the GroCo loss: explicit step matrices,
    /// naive products, direct evaluation of the column BCE sums.
    fn groco_oracle(list: &[f64], k: usize, beta: f64) -> f64 {
        let n = list.len();
        let f = |x: f64| (beta * x).atan() / PI + 0.5;
        let eye = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|r| (0..n).map(|c| (r == c) as u8 as f64).collect())
                .collect()
        };
        let mut p = eye(n);
        let mut v = list.to_vec();
        for s in 1..=n {
            let mut st = eye(n);
            let mut i = if s % 2 == 1 { 0 } else { 1 };
            while i + 1 < n {
                st[i][i] = f(v[i + 1] - v[i]);
                st[i + 1][i + 1] = st[i][i];
                st[i][i + 1] = f(v[i] - v[i + 1]);
                st[i + 1][i] = st[i][i + 1];
                i += 2;
            }
            v = (0..n)
                .map(|r| (0..n).map(|c| st[r][c] * v[c]).sum())
                .collect();
            p = (0..n)
                .map(|r| {
                    (0..n)
                        .map(|c| (0..n).map(|q| st[r][q] * p[q][c]).sum())
                        .collect()
                })
                .collect();
        }
        let b = |p: f64, q: f64| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            -(q * p.ln() + (1.0 - q) * (1.0 - p).ln())
        };
        let mut total = 0.0;
        for i in 0..n {
            let top: f64 = (0..k).map(|r| p[r][i]).sum();
            let bottom: f64 = (k..n).map(|r| p[r][i]).sum();
            let ind = (i < k) as u8 as f64;
            total += b(top, ind) + b(bottom, 1.0 - ind);
        }
        total / (2 * n) as f64
    }

    fn infonce_oracle(d_pos: &[f64], d_neg: &[f64], tau: f64) -> f64 {
        let mut total = 0.0;
        for &dp in d_pos {
            let num = (-dp / tau).exp();
            let den = num + d_neg.iter().map(|d| (-d / tau).exp()).sum::<f64>();
            total += -(num / den).ln();
        }
        total / d_pos.len() as f64
    }

    fn sorted(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    fn params(beta: f64) -> GroCoParams {
        GroCoParams::new(beta, 10).unwrap()
    }

    #[test]
    fn bce_examples() {
        assert!((bce(0.5, 1.0).unwrap() - LN2).abs() < 1e-15);
        assert!((bce(0.25, 0.0).unwrap() + 0.75f64.ln()).abs() < 1e-15);
        assert!((bce(1.0, 1.0).unwrap() + (1.0 - 1e-7f64).ln()).abs() < 1e-20);
        assert!(bce(0.5, 1.5).is_err());
        assert!(bce(0.5, -0.1).is_err());
    }

    #[test]
    fn groco_examples() {
        for x in [-0.7, 0.0, 0.4] {
            assert!((groco_loss(&[x], &[x], &params(2.0)).unwrap() - LN2).abs() < 1e-12);
        }
        let l = groco_loss(&[0.0], &[1.0], &params(1.0)).unwrap();
        assert!((l + 0.75f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pos = sorted((0..2).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let neg = sorted((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let list: Vec<f64> = pos.iter().chain(&neg).copied().collect();
        let l = groco_loss(&pos, &neg, &params(1.0)).unwrap();
        assert!((l - groco_oracle(&list, 2, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn groco_rejects_unsorted_and_empty() {
        assert!(groco_loss(&[0.2, 0.1], &[0.5], &params(1.0)).is_err());
        assert!(groco_loss(&[0.1], &[0.5, 0.4], &params(1.0)).is_err());
        assert!(groco_loss(&[], &[0.5], &params(1.0)).is_err());
        assert!(groco_loss(&[0.1], &[], &params(1.0)).is_err());
    }

    #[test]
    fn closed_form_examples() {
        assert!((groco_closed_form_1v1(0.0, 0.0, 5.0).unwrap() - LN2).abs() < 1e-15);
        assert!((groco_closed_form_1v1(0.0, 1.0, 1.0).unwrap() - 0.287682072451781).abs() < 1e-12);
        assert!((groco_closed_form_1v1(1.0, 0.0, 1.0).unwrap() - 1.386294361119891).abs() < 1e-12);
    }

    #[test]
    fn sorting_supervision_examples() {
        let eye = RelaxedPermutation::identity(3);
        let l = sorting_supervision_loss(&eye, &eye).unwrap();
        assert!(l > 0.0 && l < 2e-7);

        let half = RelaxedPermutation::from_rows(2, vec![0.5; 4]).unwrap();
        let (_, hard) = hard_sort(&[2.0, 1.0]).unwrap();
        assert!((sorting_supervision_loss(&half, &hard.to_matrix()).unwrap() - LN2).abs() < 1e-15);

        let p = diff_sort(&[2.0, 1.0], 1.0).unwrap().permutation;
        let l = sorting_supervision_loss(&p, &hard.to_matrix()).unwrap();
        assert!((l + 0.75f64.ln()).abs() < 1e-12);

        assert!(sorting_supervision_loss(&p, &half).is_err());
        assert!(sorting_supervision_loss(&p, &eye).is_err());
    }

    #[test]
    fn infonce_examples() {
        let p = InfoNceParams::new(1.0).unwrap();
        assert!((infonce_loss(&[0.3], &[0.3], &p).unwrap() - LN2).abs() < 1e-15);
        let l = infonce_loss(&[0.0], &[1.0], &p).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.313261687518223).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pos: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let neg: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = InfoNceParams::new(0.3).unwrap();
        assert!(
            (infonce_loss(&pos, &neg, &p).unwrap() - infonce_oracle(&pos, &neg, 0.3)).abs() < 1e-12
        );
        assert!(infonce_loss(&[], &[1.0], &p).is_err());
        assert!(InfoNceParams::new(0.0).is_err());
    }

    #[test]
    fn triplet_examples() {
        let t = |r| TripletParams::new(r).unwrap();
        assert_eq!(
            triplet_loss(&[0.2], &[0.5], &t(Margin::Finite(0.3))).unwrap(),
            0.0
        );
        assert!(
            (triplet_loss(&[0.2], &[0.5], &t(Margin::Finite(0.4))).unwrap() - 0.1).abs() < 1e-12
        );
        assert!((triplet_loss(&[0.2], &[0.5], &t(Margin::Unbounded)).unwrap() + 0.3).abs() < 1e-12);
        assert!(triplet_loss(&[0.2], &[], &t(Margin::Unbounded)).is_err());
        assert!(TripletParams::new(Margin::Finite(-1.0)).is_err());
    }

    #[test]
    fn large_beta_separated_groups_vanish() {
        assert!(groco_loss(&[0.0], &[1.0], &params(1e4)).unwrap() < 1e-3);
    }

    #[test]
    fn tape_versions_match_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for (k, m) in [(1, 1), (2, 3), (3, 5), (4, 10)] {
            let pos = sorted((0..k).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let neg = sorted((0..m).map(|_| rng.gen_range(-1.0..1.0)).collect());
            for kind in [LossKind::GroCo, LossKind::InfoNce, LossKind::Triplet] {
                let cfg = LossConfig {
                    kind,
                    ..Default::default()
                };
                let mut t = Tape::new();
                let p = t.leaf(Tensor::vector(pos.clone()));
                let n = t.leaf(Tensor::vector(neg.clone()));
                let l = anchor_loss_tape(&mut t, p, n, &cfg).unwrap();
                let plain = match kind {
                    LossKind::GroCo => groco_loss(&pos, &neg, &cfg.groco).unwrap(),
                    LossKind::InfoNce => infonce_loss(&pos, &neg, &cfg.infonce).unwrap(),
                    LossKind::Triplet => triplet_loss(&pos, &neg, &cfg.triplet).unwrap(),
                };
                assert!(
                    (t.value(l).item() - plain).abs() < 1e-12,
                    "{kind} k={k} m={m}"
                );
            }
        }
    }

    #[test]
    fn groco_gradient_1v1_closed_form() {
        // d/dd_p of -ln f(d_n - d_p) = f'(d_n - d_p) / f(d_n - d_p)
        let beta = 1.0;
        let (dp, dn) = (0.0, 1.0);
        let x: f64 = dn - dp;
        let f = (beta * x).atan() / PI + 0.5;
        let fprime = beta / (PI * (1.0 + beta * beta * x * x));
        let mut t = Tape::new();
        let v = t.leaf(Tensor::vector(vec![dp, dn]));
        let l = groco_loss_tape(&mut t, v, 1, beta).unwrap();
        let g = t.backward(l).unwrap().get(v).into_data();
        assert!((g[0] - fprime / f).abs() < 1e-8);
        assert!((g[1] + fprime / f).abs() < 1e-8);
    }

    #[test]
    fn parsing() {
        assert_eq!("GroCo".parse::<LossKind>().unwrap(), LossKind::GroCo);
        assert!("hinge".parse::<LossKind>().is_err());
        assert_eq!("inf".parse::<Margin>().unwrap(), Margin::Unbounded);
        assert_eq!("0.8".parse::<Margin>().unwrap(), Margin::Finite(0.8));
    }

    proptest! {
        #[test]
        fn groco_non_negative_and_shift_invariant(
            pos in proptest::collection::vec(-1f64..1.0, 1..4),
            neg in proptest::collection::vec(-1f64..1.0, 1..8),
            c in -5f64..5.0,
            beta in prop::sample::select(vec![0.5, 1.0, 2.0, 10.0]),
        ) {
            let (pos, neg) = (sorted(pos), sorted(neg));
            let l = groco_loss(&pos, &neg, &params(beta)).unwrap();
            prop_assert!(l >= 0.0);
            let ps: Vec<f64> = pos.iter().map(|d| d + c).collect();
            let ns: Vec<f64> = neg.iter().map(|d| d + c).collect();
            prop_assert!((groco_loss(&ps, &ns, &params(beta)).unwrap() - l).abs() < 1e-10);
            let ip = InfoNceParams::new(0.5).unwrap();
            let li = infonce_loss(&pos, &neg, &ip).unwrap();
            prop_assert!((infonce_loss(&ps, &ns, &ip).unwrap() - li).abs() < 1e-10);
        }

        #[test]
        fn groco_scale_beta_duality(
            pos in proptest::collection::vec(-1f64..1.0, 1..4),
            neg in proptest::collection::vec(-1f64..1.0, 1..8),
            c in 0.1f64..5.0,
            beta in prop::sample::select(vec![0.5, 1.0, 2.0, 10.0]),
        ) {
            let (pos, neg) = (sorted(pos), sorted(neg));
            let ps: Vec<f64> = pos.iter().map(|d| d * c).collect();
            let ns: Vec<f64> = neg.iter().map(|d| d * c).collect();
            let a = groco_loss(&ps, &ns, &params(beta)).unwrap();
            let b = groco_loss(&pos, &neg, &params(c * beta)).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn closed_form_equivalence(dp in -2f64..2.0, dn in -2f64..2.0, beta in 0.1f64..10.0) {
            let a = groco_loss(&[dp], &[dn], &params(beta)).unwrap();
            let b = groco_closed_form_1v1(dp, dn, beta).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn closed_form_monotone(dp in -1f64..1.0, dn in -1f64..1.0, step in 1e-3f64..0.5) {
            let base = groco_closed_form_1v1(dp, dn, 1.0).unwrap();
            prop_assert!(groco_closed_form_1v1(dp, dn + step, 1.0).unwrap() < base);
            prop_assert!(groco_closed_form_1v1(dp + step, dn, 1.0).unwrap() > base);
        }

        #[test]
        fn losses_match_oracles(
            pos in proptest::collection::vec(-1f64..1.0, 1..=3),
            neg in proptest::collection::vec(-1f64..1.0, 1..=5),
            beta in prop::sample::select(vec![0.5, 1.0, 2.0]),
            tau in 0.1f64..2.0,
            r in 0.1f64..1.0,
        ) {
            let (pos, neg) = (sorted(pos), sorted(neg));
            let list: Vec<f64> = pos.iter().chain(&neg).copied().collect();
            let g = groco_loss(&pos, &neg, &params(beta)).unwrap();
            prop_assert!((g - groco_oracle(&list, pos.len(), beta)).abs() < 1e-12);
            let i = infonce_loss(&pos, &neg, &InfoNceParams::new(tau).unwrap()).unwrap();
            prop_assert!((i - infonce_oracle(&pos, &neg, tau)).abs() < 1e-12);
            let t = triplet_loss(&pos, &neg, &TripletParams::new(Margin::Finite(r)).unwrap()).unwrap();
            let mut naive = 0.0;
            for &p in &pos { for &n in &neg { naive += f64::max(p - n + r, 0.0); } }
            prop_assert!((t - naive / (pos.len() * neg.len()) as f64).abs() < 1e-12);
        }
    }
}
