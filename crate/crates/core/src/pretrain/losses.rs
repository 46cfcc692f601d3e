//! The four pre-training objectives and hard-negative mining.

use rand::Rng;
use spmm_nn::{Graph, Tensor, Var};

use crate::error::SpmmError;

/// Row-stochastic target matrices for the four similarity directions.
/// Each is `batch x (batch + queue)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveTargets {
    pub s2p: Tensor,
    pub p2s: Tensor,
    pub s2s: Tensor,
    pub p2p: Tensor,
}

impl ContrastiveTargets {
    /// One-hot on the in-batch diagonal; queue columns are zero.
    pub fn one_hot(batch: usize, queue: usize) -> Self {
        let mut t = Tensor::zeros(batch, batch + queue);
        for i in 0..batch {
            t.row_mut(i)[i] = 1.0;
        }
        ContrastiveTargets {
            s2p: t.clone(),
            p2s: t.clone(),
            s2s: t.clone(),
            p2p: t,
        }
    }

    /// Teacher similarity distributions: row softmax of
    /// `features @ [batch; queue]^T / temp`.
    pub fn from_teacher(zs: &Tensor, zp: &Tensor, queue_s: &Tensor, queue_p: &Tensor, temp: f64) -> Self {
        let cand_s = stack(zs, queue_s);
        let cand_p = stack(zp, queue_p);
        let sm = |a: &Tensor, b: &Tensor| {
            let mut s = Tensor::zeros(a.rows(), b.rows());
            spmm_nn::tensor::gemm(false, true, a.rows(), b.rows(), a.cols(), 1.0 / temp, a.data(), b.data(), 0.0, s.data_mut());
            softmax_rows(&mut s);
            s
        };
        ContrastiveTargets {
            s2p: sm(zs, &cand_p),
            p2s: sm(zp, &cand_s),
            s2s: sm(zs, &cand_s),
            p2p: sm(zp, &cand_p),
        }
    }

    /// `(1 - alpha) * self + alpha * soft`.
    pub fn mix(&self, soft: &ContrastiveTargets, alpha: f64) -> Self {
        let m = |a: &Tensor, b: &Tensor| mix(a, b, alpha);
        ContrastiveTargets {
            s2p: m(&self.s2p, &soft.s2p),
            p2s: m(&self.p2s, &soft.p2s),
            s2s: m(&self.s2s, &soft.s2s),
            p2p: m(&self.p2p, &soft.p2p),
        }
    }
}

pub fn mix(hard: &Tensor, soft: &Tensor, alpha: f64) -> Tensor {
    assert_eq!(hard.shape(), soft.shape(), "label mixing shapes");
    let data = hard
        .data()
        .iter()
        .zip(soft.data())
        .map(|(h, s)| (1.0 - alpha) * h + alpha * s)
        .collect();
    Tensor::from_vec(hard.rows(), hard.cols(), data)
}

pub fn softmax_rows(t: &mut Tensor) {
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

fn stack(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_vec(a.rows() + b.rows(), a.cols(), data)
}

#[derive(Debug, Clone, Copy)]
pub struct ContrastiveOutput {
    pub loss: Var,
    /// `batch x (batch + queue)` scaled similarities, SMILES to PV.
    pub sim_s2p: Var,
    pub sim_p2s: Var,
}

/// Half the sum of the four row-averaged cross-entropies between the
/// similarity softmaxes and `targets`. Queue rows are negatives only.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss(
    g: &mut Graph,
    zs: Var,
    zp: Var,
    temp: Var,
    queue_s: &Tensor,
    queue_p: &Tensor,
    targets: &ContrastiveTargets,
) -> Result<ContrastiveOutput, SpmmError> {
    let b = g.shape(zs).0;
    if b < 2 {
        return Err(SpmmError::BatchTooSmall(b));
    }
    let cand = |g: &mut Graph, z: Var, q: &Tensor| {
        if q.rows() == 0 {
            z
        } else {
            let qv = g.input(q.clone());
            g.concat_rows(&[z, qv])
        }
    };
    let cand_s = cand(g, zs, queue_s);
    let cand_p = cand(g, zp, queue_p);
    let sim = |g: &mut Graph, a: Var, c: Var| {
        let s = g.matmul(a, c, false, true);
        g.div_scalar(s, temp)
    };
    let s2p = sim(g, zs, cand_p);
    let p2s = sim(g, zp, cand_s);
    let s2s = sim(g, zs, cand_s);
    let p2p = sim(g, zp, cand_p);
    let w = vec![1.0 / b as f64; b];
    let terms = [
        g.soft_cross_entropy(s2p, targets.s2p.clone(), w.clone()),
        g.soft_cross_entropy(p2s, targets.p2s.clone(), w.clone()),
        g.soft_cross_entropy(s2s, targets.s2s.clone(), w.clone()),
        g.soft_cross_entropy(p2p, targets.p2p.clone(), w),
    ];
    let sum = g.sum(&terms);
    Ok(ContrastiveOutput {
        loss: g.scale(sum, 0.5),
        sim_s2p: s2p,
        sim_p2s: p2s,
    })
}

/// `(row, next token)` pairs for next-word prediction: position `p` of item
/// `b` predicts token `p + 1`. Positions past the sequence end are padding
/// and excluded.
pub fn nwp_positions(ids: &[&[u32]], padded_len: usize) -> Vec<(usize, u32)> {
    let mut out = Vec::new();
    for (b, seq) in ids.iter().enumerate() {
        for p in 0..seq.len().saturating_sub(1) {
            out.push((b * padded_len + p, seq[p + 1]));
        }
    }
    out
}

/// `(1 - alpha) * one_hot + alpha * teacher` per prediction row.
pub fn nwp_targets(targets: &[u32], vocab: usize, teacher: Option<&Tensor>, alpha: f64) -> Tensor {
    let mut t = Tensor::zeros(targets.len(), vocab);
    for (r, &tok) in targets.iter().enumerate() {
        t.row_mut(r)[tok as usize] = 1.0;
    }
    match teacher {
        Some(soft) if alpha > 0.0 => mix(&t, soft, alpha),
        _ => t,
    }
}

/// Cross-entropy summed over predicted positions, averaged over the batch.
pub fn nwp_loss(g: &mut Graph, logits: Var, targets: Tensor, batch: usize) -> Var {
    let n = g.shape(logits).0;
    g.soft_cross_entropy(logits, targets, vec![1.0 / batch as f64; n])
}

/// Next-property targets over `batch * (P + 1)` fused PV rows. Row `n`
/// predicts property `n` (the cell at position `n + 1`); unknown slots and
/// the final row have no target.
pub fn npp_targets(known: &[Vec<bool>], normalized: &[Vec<f64>]) -> Vec<Option<f64>> {
    let mut out = Vec::new();
    for (k, v) in known.iter().zip(normalized) {
        for i in 0..k.len() {
            out.push(k[i].then_some(v[i]));
        }
        out.push(None);
    }
    out
}

/// Mean squared error over rows that carry a target.
pub fn npp_loss(g: &mut Graph, preds: Var, targets: &[Option<f64>]) -> Var {
    let count = targets.iter().filter(|t| t.is_some()).count();
    let w = if count == 0 { 0.0 } else { 1.0 / count as f64 };
    let weights = targets.iter().map(|t| if t.is_some() { w } else { 0.0 }).collect();
    let values = targets.iter().map(|t| t.unwrap_or(0.0)).collect();
    g.weighted_squared_error(preds, values, weights)
}

/// Two-class cross-entropy averaged over pairs; label 1 means matched.
pub fn spm_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
    let mut t = Tensor::zeros(labels.len(), 2);
    for (r, &l) in labels.iter().enumerate() {
        t.row_mut(r)[l] = 1.0;
    }
    g.soft_cross_entropy(logits, t, vec![1.0 / labels.len() as f64; labels.len()])
}

/// Sampling distribution for negatives: per row, softmax of the in-batch
/// similarities with the matching column excluded.
pub fn negative_weights(sim: &Tensor) -> Result<Tensor, SpmmError> {
    let b = sim.rows();
    if b < 2 {
        return Err(SpmmError::BatchTooSmall(b));
    }
    let mut w = Tensor::zeros(b, b);
    for i in 0..b {
        let row = &sim.row(i)[..b];
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let out = w.row_mut(i);
        let mut sum = 0.0;
        for j in 0..b {
            if j != i {
                out[j] = (row[j] - max).exp();
                sum += out[j];
            }
        }
        out.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(w)
}

/// One sampled non-matching index per row of `sim`.
pub fn mine_hard_negatives<R: Rng + ?Sized>(sim: &Tensor, rng: &mut R) -> Result<Vec<usize>, SpmmError> {
    let w = negative_weights(sim)?;
    Ok((0..w.rows())
        .map(|i| {
            let u: f64 = rng.random();
            let row = w.row(i);
            let mut acc = 0.0;
            let mut pick = if i == 0 { 1 } else { 0 };
            for (j, &p) in row.iter().enumerate() {
                if j == i {
                    continue;
                }
                pick = j;
                acc += p;
                if u < acc {
                    break;
                }
            }
            pick
        })
        .collect())
}
