//! Per-anchor positive/negative grouping over a batch of projected views.
//!
//! For each anchor view the other views of the same image are positives and
//! views of other images are negatives. Distances are negative cosine
//! similarities. Negatives are cut to the `N` closest (strongest) ones and
//! both groups are hard-sorted ascending before they reach the loss; those
//! selections are index maps, so gradient reaches exactly the selected rows.
//! With stop-gradient on, only the anchor's own projection receives
//! gradient from its term.
//!
//! Per-anchor losses are averaged over all `m * B` anchors.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffgrad::{dot_slices, grad_check_tape, GradCheckReport, OpKind, Tape, Tensor, Var};
use crate::error::{GrocoError, Result};
use crate::losses::{self, LossConfig, LossKind};
use crate::par::{self, Execution};

/// Projection-head outputs for `m` views of each of `B` images.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    projections: Tensor,
    image_id: Vec<usize>,
    views: usize,
    images: usize,
}

impl ViewBatch {
    pub fn new(projections: Tensor, image_id: Vec<usize>) -> Result<Self> {
        if projections.shape().len() != 2 {
            return Err(GrocoError::invalid("projections must be a matrix"));
        }
        let rows = projections.rows();
        if image_id.len() != rows {
            return Err(GrocoError::invalid(format!(
                "{} image ids for {rows} views",
                image_id.len()
            )));
        }
        let images = image_id.iter().max().map_or(0, |&m| m + 1);
        let mut counts = vec![0usize; images];
        for &id in &image_id {
            counts[id] += 1;
        }
        let views = counts.first().copied().unwrap_or(0);
        if counts.iter().any(|&c| c != views) {
            return Err(GrocoError::invalid(
                "every image needs the same number of views",
            ));
        }
        if views < 2 {
            return Err(GrocoError::invalid(format!(
                "at least 2 views per image are needed for positives, got {views}"
            )));
        }
        if images < 2 {
            return Err(GrocoError::invalid(
                "at least 2 images are needed for negatives",
            ));
        }
        Ok(ViewBatch {
            projections,
            image_id,
            views,
            images,
        })
    }

    pub fn projections(&self) -> &Tensor {
        &self.projections
    }

    pub fn image_id(&self) -> &[usize] {
        &self.image_id
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn len(&self) -> usize {
        self.image_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_id.is_empty()
    }
}

/// Distances and source rows for one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGroup {
    pub anchor: usize,
    pub d_pos: Vec<f64>,
    pub d_neg: Vec<f64>,
    pub pos_idx: Vec<usize>,
    pub neg_idx: Vec<usize>,
}

/// How groups are formed from a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupConfig {
    /// Negatives kept per anchor; `None` keeps all `m (B - 1)`.
    pub top_n: Option<usize>,
    pub stop_grad: bool,
    pub preorder: bool,
    /// Draw negatives uniformly instead of taking the strongest.
    pub random_negatives: bool,
    /// Seed for random negative draws.
    pub seed: u64,
}

impl Default for GroupConfig {
    fn default() -> Self {
        GroupConfig {
            top_n: Some(10),
            stop_grad: true,
            preorder: true,
            random_negatives: false,
            seed: 0,
        }
    }
}

/// Negative cosine similarity `-x.y / (|x| |y|)`.
pub fn cosine_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(GrocoError::invalid(format!(
            "dimension mismatch {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let nx = dot_slices(x, x).sqrt();
    let ny = dot_slices(y, y).sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(GrocoError::numeric(
            None,
            "zero-norm vector in cosine distance",
        ));
    }
    Ok(-(dot_slices(x, y) / (nx * ny)))
}

fn view_distance(batch: &ViewBatch, a: usize, b: usize) -> Result<f64> {
    let p = &batch.projections;
    cosine_distance(p.row(a), p.row(b)).map_err(|e| match e {
        GrocoError::Numeric { .. } => GrocoError::numeric(
            None,
            format!(
                "zero-norm projection for view {}",
                if dot_slices(p.row(a), p.row(a)) == 0.0 {
                    a
                } else {
                    b
                }
            ),
        ),
        other => other,
    })
}

/// Indices of the `min(n, d.len())` smallest distances, ascending, ties by index.
pub fn select_top_negatives(d: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    let take = n.min(d.len());
    let cmp = |a: &usize, b: &usize| d[*a].total_cmp(&d[*b]).then(a.cmp(b));
    if take < idx.len() && take > 0 {
        idx.select_nth_unstable_by(take - 1, cmp);
    }
    idx.truncate(take);
    idx.sort_by(cmp);
    idx
}

/// Stable ascending order of `d` as a permutation of positions.
fn ascending_order(d: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|a, b| d[*a].total_cmp(&d[*b]).then(a.cmp(b)));
    idx
}

fn anchor_seed(seed: u64, anchor: usize) -> u64 {
    seed ^ (anchor as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Group distances for one anchor.
pub fn build_anchor_group(
    batch: &ViewBatch,
    anchor: usize,
    cfg: &GroupConfig,
) -> Result<AnchorGroup> {
    if anchor >= batch.len() {
        return Err(GrocoError::invalid(format!(
            "anchor {anchor} out of range for {} views",
            batch.len()
        )));
    }
    let own = batch.image_id[anchor];
    let mut pos_idx = Vec::with_capacity(batch.views - 1);
    let mut neg_all = Vec::with_capacity(batch.len() - batch.views);
    for j in 0..batch.len() {
        if j == anchor {
            continue;
        }
        if batch.image_id[j] == own {
            pos_idx.push(j);
        } else {
            neg_all.push(j);
        }
    }
    let d_pos_all = pos_idx
        .iter()
        .map(|&j| view_distance(batch, anchor, j))
        .collect::<Result<Vec<_>>>()?;
    let d_neg_all = neg_all
        .iter()
        .map(|&j| view_distance(batch, anchor, j))
        .collect::<Result<Vec<_>>>()?;

    let keep = cfg.top_n.unwrap_or(usize::MAX).min(neg_all.len());
    let mut chosen: Vec<usize> = if cfg.random_negatives {
        let mut rng = ChaCha8Rng::seed_from_u64(anchor_seed(cfg.seed, anchor));
        let mut v = sample(&mut rng, neg_all.len(), keep).into_vec();
        v.sort_unstable();
        v
    } else {
        let mut v = select_top_negatives(&d_neg_all, keep);
        v.sort_unstable();
        v
    };

    let mut pos_order: Vec<usize> = (0..pos_idx.len()).collect();
    if cfg.preorder {
        pos_order = ascending_order(&d_pos_all);
        let sub: Vec<f64> = chosen.iter().map(|&c| d_neg_all[c]).collect();
        chosen = ascending_order(&sub)
            .into_iter()
            .map(|i| chosen[i])
            .collect();
    }

    Ok(AnchorGroup {
        anchor,
        d_pos: pos_order.iter().map(|&i| d_pos_all[i]).collect(),
        pos_idx: pos_order.iter().map(|&i| pos_idx[i]).collect(),
        d_neg: chosen.iter().map(|&i| d_neg_all[i]).collect(),
        neg_idx: chosen.iter().map(|&i| neg_all[i]).collect(),
    })
}

/// Options for [`batch_loss`] and [`batch_loss_and_grad`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLossConfig {
    pub loss: LossConfig,
    pub group: GroupConfig,
    /// Restrict InfoNCE to the top-N negatives as well.
    pub infonce_top_n: bool,
}

impl Default for BatchLossConfig {
    fn default() -> Self {
        BatchLossConfig {
            loss: LossConfig::default(),
            group: GroupConfig::default(),
            infonce_top_n: false,
        }
    }
}

impl BatchLossConfig {
    fn group_for_kind(&self) -> GroupConfig {
        let mut g = self.group;
        if self.loss.kind == LossKind::InfoNce && !self.infonce_top_n {
            g.top_n = None;
            g.random_negatives = false;
        }
        g
    }
}

/// Loss value and projection-row gradients of one anchor term.
#[derive(Debug, Clone)]
pub struct AnchorTerm {
    pub loss: f64,
    /// `(row, gradient)` pairs; rows may repeat.
    pub grads: Vec<(usize, Vec<f64>)>,
}

/// Record one anchor term on a fresh tape and differentiate it.
pub fn anchor_term(
    batch: &ViewBatch,
    group: &AnchorGroup,
    cfg: &BatchLossConfig,
    want_grad: bool,
) -> Result<AnchorTerm> {
    let stop_grad = cfg.group.stop_grad;
    let mut tape = Tape::new();
    let anchor = tape.leaf(Tensor::vector(batch.projections.row(group.anchor).to_vec()));
    let others: Vec<usize> = group
        .pos_idx
        .iter()
        .chain(&group.neg_idx)
        .copied()
        .collect();
    let rows = tape.leaf(batch.projections.select_rows(&others));
    let rows_in = if stop_grad {
        tape.stop_grad(rows)?
    } else {
        rows
    };

    let anchor_norm = tape.l2norm(anchor)?;
    let mut dists: Vec<Var> = Vec::with_capacity(others.len());
    for r in 0..others.len() {
        let other = tape.index_select(rows_in, &[r])?;
        let dot = tape.dot(anchor, other)?;
        let on = tape.l2norm(other)?;
        let denom = tape.mul(anchor_norm, on)?;
        let cos = tape.div(dot, denom).map_err(|e| match e {
            GrocoError::Numeric { .. } => GrocoError::numeric(
                None,
                format!(
                    "zero-norm projection among views {} / {}",
                    group.anchor, others[r]
                ),
            ),
            other => other,
        })?;
        dists.push(tape.scale(cos, -1.0)?);
    }
    let k = group.pos_idx.len();
    let pos = tape.concat(&dists[..k])?;
    let neg = tape.concat(&dists[k..])?;
    let loss = if cfg.loss.kind == LossKind::GroCo && !cfg.group.preorder {
        let list = tape.concat(&[pos, neg])?;
        losses::groco_loss_tape(&mut tape, list, k, cfg.loss.groco.beta)?
    } else {
        losses::anchor_loss_tape(&mut tape, pos, neg, &cfg.loss)?
    };
    let value = tape.value(loss).item();
    if !want_grad {
        return Ok(AnchorTerm {
            loss: value,
            grads: Vec::new(),
        });
    }
    let gm = tape.backward(loss)?;
    let mut grads = vec![(group.anchor, gm.get(anchor).into_data())];
    if !stop_grad {
        let g = gm.get(rows);
        for (r, &src) in others.iter().enumerate() {
            grads.push((src, g.row(r).to_vec()));
        }
    }
    Ok(AnchorTerm { loss: value, grads })
}

/// Average per-anchor loss over the whole batch.
pub fn batch_loss(batch: &ViewBatch, cfg: &BatchLossConfig, exec: Execution) -> Result<f64> {
    let terms = collect_terms(batch, cfg, exec, false)?;
    Ok(terms.iter().map(|t| t.loss).sum::<f64>() / terms.len() as f64)
}

/// Average loss and its gradient with respect to every projection row.
pub fn batch_loss_and_grad(
    batch: &ViewBatch,
    cfg: &BatchLossConfig,
    exec: Execution,
) -> Result<(f64, Tensor)> {
    let terms = collect_terms(batch, cfg, exec, true)?;
    let scale = 1.0 / terms.len() as f64;
    let mut grad = Tensor::zeros(batch.projections.shape());
    let w = batch.projections.row_len();
    // reduced in anchor order for determinism
    for t in &terms {
        for (row, g) in &t.grads {
            let dst = &mut grad.data_mut()[row * w..(row + 1) * w];
            for (d, v) in dst.iter_mut().zip(g) {
                *d += scale * v;
            }
        }
    }
    let loss = terms.iter().map(|t| t.loss).sum::<f64>() * scale;
    Ok((loss, grad))
}

fn collect_terms(
    batch: &ViewBatch,
    cfg: &BatchLossConfig,
    exec: Execution,
    want_grad: bool,
) -> Result<Vec<AnchorTerm>> {
    let group_cfg = cfg.group_for_kind();
    par::map_range(exec, batch.len(), |a| {
        let group = build_anchor_group(batch, a, &group_cfg)?;
        anchor_term(batch, &group, cfg, want_grad)
    })
    .into_iter()
    .collect()
}

/// Shape and numerics of one [`path_grad_check`] case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathCheck {
    pub positives: usize,
    pub negatives: usize,
    pub beta: f64,
    pub dim: usize,
    pub seed: u64,
    pub h: f64,
    pub tol: f64,
    /// Scale the backward pass of one op kind (negative control).
    pub fault: Option<(OpKind, f64)>,
}

/// Central-difference check of the complete anchor path, raw vectors ->
/// cosine distances -> pre-ordered groups -> relaxed sort -> GroCo loss,
/// against every coordinate of the anchor, positive and negative vectors.
pub fn path_grad_check(c: &PathCheck) -> Result<GradCheckReport> {
    if c.positives == 0 || c.negatives == 0 || c.dim == 0 {
        return Err(GrocoError::invalid(
            "positives, negatives and dim must be positive",
        ));
    }
    let (k, n, dim) = (c.positives, c.negatives, c.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ ((k as u64) << 32) ^ ((n as u64) << 16));
    let point: Vec<f64> = (0..(1 + k + n) * dim)
        .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
        .collect();
    let build = |tape: &mut Tape, x: Var| -> Result<Var> {
        let mut rows = Vec::with_capacity(1 + k + n);
        for r in 0..1 + k + n {
            rows.push(tape.index_select(x, &(r * dim..(r + 1) * dim).collect::<Vec<_>>())?);
        }
        let anchor_norm = tape.l2norm(rows[0])?;
        let mut d = Vec::with_capacity(k + n);
        for &other in &rows[1..] {
            let dot = tape.dot(rows[0], other)?;
            let on = tape.l2norm(other)?;
            let denom = tape.mul(anchor_norm, on)?;
            let cos = tape.div(dot, denom)?;
            d.push(tape.scale(cos, -1.0)?);
        }
        let value = |v: &Var| tape.value(*v).item();
        let pos: Vec<f64> = d[..k].iter().map(value).collect();
        let neg: Vec<f64> = d[k..].iter().map(value).collect();
        let mut list: Vec<Var> = ascending_order(&pos).into_iter().map(|i| d[i]).collect();
        list.extend(ascending_order(&neg).into_iter().map(|i| d[k + i]));
        let list = tape.concat(&list)?;
        losses::groco_loss_tape(tape, list, k, c.beta)
    };
    let configure = |tape: &mut Tape| {
        if let Some((kind, factor)) = c.fault {
            tape.inject_fault(kind, factor);
        }
    };
    grad_check_tape(build, configure, &point, c.h, c.tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(images: usize, views: usize, dim: usize, seed: u64) -> ViewBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = images * views;
        let data = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ids = (0..n).map(|i| i / views).collect();
        ViewBatch::new(Tensor::matrix(n, dim, data).unwrap(), ids).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_distance(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn zero_norm_error_names_view() {
        let p = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.5, 1.0, 1.0]).unwrap();
        let b = ViewBatch::new(p, vec![0, 0, 1, 1]).unwrap();
        let err = build_anchor_group(&b, 0, &GroupConfig::default()).unwrap_err();
        assert!(err.to_string().contains("view 1"), "{err}");
    }

    #[test]
    fn top_negatives_examples() {
        assert_eq!(select_top_negatives(&[0.5, -0.2, 0.9], 2), vec![1, 0]);
        assert_eq!(select_top_negatives(&[0.5, -0.2, 0.9], 10), vec![1, 0, 2]);
        assert_eq!(select_top_negatives(&[0.1, 0.1, 0.0], 2), vec![2, 0]);
    }

    #[test]
    fn top_negatives_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let m = rng.gen_range(1..40);
            let n = rng.gen_range(1..15);
            let d: Vec<f64> = (0..m)
                .map(|_| (rng.gen_range(-5..5) as f64) / 4.0)
                .collect();
            let mut idx: Vec<usize> = (0..m).collect();
            idx.sort_by(|a, b| d[*a].partial_cmp(&d[*b]).unwrap().then(a.cmp(b)));
            idx.truncate(n);
            assert_eq!(select_top_negatives(&d, n), idx);
        }
    }

    #[test]
    fn batch_validation() {
        let p = Tensor::matrix(3, 2, vec![1.0; 6]).unwrap();
        assert!(ViewBatch::new(p.clone(), vec![0, 1, 2]).is_err(), "m = 1");
        assert!(
            ViewBatch::new(p.clone(), vec![0, 0, 1]).is_err(),
            "uneven views"
        );
        assert!(ViewBatch::new(p, vec![0, 0, 0]).is_err(), "B = 1");
    }

    #[test]
    fn group_counts_and_roles() {
        let b = random_batch(2, 2, 4, 5);
        let g = build_anchor_group(&b, 0, &GroupConfig::default()).unwrap();
        assert_eq!(g.d_pos.len(), 1);
        assert_eq!(g.d_neg.len(), 2);
        assert_eq!(g.pos_idx, vec![1]);

        let b = random_batch(6, 3, 4, 6);
        for a in 0..b.len() {
            let g = build_anchor_group(
                &b,
                a,
                &GroupConfig {
                    top_n: Some(4),
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(g.d_pos.len(), 2);
            assert_eq!(g.d_neg.len(), 4);
            assert!(g.d_pos.windows(2).all(|w| w[0] <= w[1]));
            assert!(g.d_neg.windows(2).all(|w| w[0] <= w[1]));
            assert!(!g.pos_idx.contains(&a) && !g.neg_idx.contains(&a));
            assert!(g
                .neg_idx
                .iter()
                .all(|&j| b.image_id()[j] != b.image_id()[a]));
            assert!(g
                .pos_idx
                .iter()
                .all(|&j| b.image_id()[j] == b.image_id()[a]));
        }
    }

    #[test]
    fn random_negatives_are_reproducible_and_valid() {
        let b = random_batch(8, 2, 3, 2);
        let cfg = GroupConfig {
            random_negatives: true,
            seed: 17,
            ..Default::default()
        };
        let g1 = build_anchor_group(&b, 3, &cfg).unwrap();
        let g2 = build_anchor_group(&b, 3, &cfg).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(g1.d_neg.len(), 10);
        assert!(g1
            .neg_idx
            .iter()
            .all(|&j| b.image_id()[j] != b.image_id()[3]));
    }

    #[test]
    fn identical_projections_give_equal_distance_loss() {
        let p = Tensor::matrix(4, 3, [0.2, -0.4, 0.9].repeat(4)).unwrap();
        let b = ViewBatch::new(p, vec![0, 0, 1, 1]).unwrap();
        let l = batch_loss(&b, &BatchLossConfig::default(), Execution::Sequential).unwrap();
        let expect = losses::groco_loss(&[-1.0], &[-1.0, -1.0], &Default::default()).unwrap();
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_single_anchor() {
        // views 0,1 of image 0 and 2,3 of image 1 in 2-D
        let p = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.6, 0.8, 0.0, 1.0, -1.0, 0.0]).unwrap();
        let b = ViewBatch::new(p, vec![0, 0, 1, 1]).unwrap();
        let g = build_anchor_group(&b, 0, &GroupConfig::default()).unwrap();
        // d(0,1) = -0.6; d(0,2) = 0; d(0,3) = 1
        assert_eq!(g.pos_idx, vec![1]);
        assert_eq!(g.neg_idx, vec![2, 3]);
        assert!((g.d_pos[0] + 0.6).abs() < 1e-15);
        assert_eq!(g.d_neg, vec![0.0, 1.0]);
        let term = anchor_term(&b, &g, &BatchLossConfig::default(), false).unwrap();
        // manual chain: list (-0.6, 0, 1), three steps
        let f = |x: f64| x.atan() / std::f64::consts::PI + 0.5;
        let v = [-0.6f64, 0.0, 1.0];
        let mut p = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut v = v;
        for (i, j) in [(0, 1), (1, 2), (0, 1)] {
            let (s, c) = (f(v[j] - v[i]), f(v[i] - v[j]));
            let (a, bb) = (v[i], v[j]);
            v[i] = a * s + bb * c;
            v[j] = a * c + bb * s;
            for col in 0..3 {
                let (x, y) = (p[i][col], p[j][col]);
                p[i][col] = s * x + c * y;
                p[j][col] = c * x + s * y;
            }
        }
        let bce = |p: f64, q: f64| -(q * p.ln() + (1.0 - q) * (1.0 - p).ln());
        let mut manual = 0.0;
        for col in 0..3 {
            let t = if col == 0 { 1.0 } else { 0.0 };
            manual += bce(p[0][col], t) + bce(p[1][col] + p[2][col], 1.0 - t);
        }
        manual /= 6.0;
        assert!((term.loss - manual).abs() < 1e-12);
    }

    #[test]
    fn averaging_matches_independent_anchors() {
        let b = random_batch(5, 3, 6, 11);
        for kind in [LossKind::GroCo, LossKind::InfoNce, LossKind::Triplet] {
            let cfg = BatchLossConfig {
                loss: LossConfig {
                    kind,
                    ..Default::default()
                },
                group: GroupConfig {
                    top_n: Some(4),
                    ..Default::default()
                },
                ..Default::default()
            };
            let total = batch_loss(&b, &cfg, Execution::Sequential).unwrap();
            let gcfg = cfg.group_for_kind();
            let mut manual = 0.0;
            for a in 0..b.len() {
                let g = build_anchor_group(&b, a, &gcfg).unwrap();
                manual += match kind {
                    LossKind::GroCo => losses::groco_loss(&g.d_pos, &g.d_neg, &cfg.loss.groco),
                    LossKind::InfoNce => {
                        losses::infonce_loss(&g.d_pos, &g.d_neg, &cfg.loss.infonce)
                    }
                    LossKind::Triplet => {
                        losses::triplet_loss(&g.d_pos, &g.d_neg, &cfg.loss.triplet)
                    }
                }
                .unwrap();
            }
            manual /= b.len() as f64;
            assert!((total - manual).abs() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn infonce_uses_all_negatives_unless_flagged() {
        let b = random_batch(8, 2, 4, 3);
        let cfg = BatchLossConfig {
            loss: LossConfig {
                kind: LossKind::InfoNce,
                ..Default::default()
            },
            ..Default::default()
        };
        assert_eq!(cfg.group_for_kind().top_n, None);
        let g = build_anchor_group(&b, 0, &cfg.group_for_kind()).unwrap();
        assert_eq!(g.d_neg.len(), 14);
        let flagged = BatchLossConfig {
            infonce_top_n: true,
            ..cfg
        };
        assert_eq!(flagged.group_for_kind().top_n, Some(10));
    }

    #[test]
    fn stop_grad_routes_only_to_anchor() {
        let b = random_batch(4, 2, 5, 8);
        let cfg = BatchLossConfig::default();
        for a in 0..b.len() {
            let g = build_anchor_group(&b, a, &cfg.group).unwrap();
            let term = anchor_term(&b, &g, &cfg, true).unwrap();
            assert_eq!(term.grads.len(), 1);
            assert_eq!(term.grads[0].0, a);
        }
        let off = BatchLossConfig {
            group: GroupConfig {
                stop_grad: false,
                ..Default::default()
            },
            ..Default::default()
        };
        let g = build_anchor_group(&b, 0, &off.group).unwrap();
        let term = anchor_term(&b, &g, &off, true).unwrap();
        assert!(term.grads.len() > 1);
        assert!(term.grads[1..]
            .iter()
            .any(|(_, g)| g.iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let b = random_batch(16, 2, 8, 4);
        let cfg = BatchLossConfig::default();
        let (l1, g1) = batch_loss_and_grad(&b, &cfg, Execution::Sequential).unwrap();
        let (l2, g2) = batch_loss_and_grad(&b, &cfg, Execution::Parallel).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn full_path_gradients() {
        for (k, n, beta) in [(1, 1, 1.0), (2, 5, 0.5), (4, 10, 2.0)] {
            let c = PathCheck {
                positives: k,
                negatives: n,
                beta,
                dim: 4,
                seed: 3,
                h: 1e-6,
                tol: 1e-5,
                fault: None,
            };
            let r = path_grad_check(&c).unwrap();
            assert!(r.passed, "K={k} N={n} beta={beta}: {}", r.max_error);
            let faulty = path_grad_check(&PathCheck {
                fault: Some((OpKind::Arctan, 1.5)),
                ..c
            })
            .unwrap();
            assert!(!faulty.passed);
        }
    }
}
