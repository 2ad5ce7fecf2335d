//! Tape-level losses and their per-sample reference forms.

use super::{ElrBank, FeatureBank};
use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, Tape, Tensor, Var};

const UNIT_NORM_TOL: f64 = 1e-6;

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    for i in 0..t.rows() {
        let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid_argument(format!(
                "{what} row {i} has norm {norm}; expected unit rows"
            )));
        }
    }
    Ok(())
}

/// Confidence-weighted InfoNCE of anchors against one contrastive prototype
/// per class: the positive is the prototype at each anchor's pseudo label,
/// the other K-1 prototypes are the negatives. Both inputs must already be
/// row-normalized (the projector output is).
pub fn weighted_infonce(
    tape: &mut Tape,
    anchors: Var,
    prototypes: Var,
    labels: &[usize],
    weights: &[f64],
    temperature: f64,
) -> Result<Var> {
    let b = tape.value(anchors).rows();
    let k = tape.value(prototypes).rows();
    if labels.len() != b || weights.len() != b {
        return Err(Error::invalid_argument(format!(
            "{b} anchors but {} labels / {} weights",
            labels.len(),
            weights.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid_argument(format!(
            "label {bad} out of range for {k} prototypes"
        )));
    }
    check_unit_rows(tape.value(anchors), "anchor")?;
    check_unit_rows(tape.value(prototypes), "prototype")?;

    let sims = tape.matmul_nt(anchors, prototypes);
    let lp = tape.log_softmax_rows(sims, temperature);
    let pos = tape.gather_cols(lp, labels);
    let w = tape.constant(&Tensor::from_vec(&[b], weights.to_vec())?);
    let weighted = tape.mul(pos, w);
    let mean = tape.mean_all(weighted);
    Ok(tape.neg(mean))
}

/// Early-learning regularizer over a batch.
///
/// The non-parametric prediction of each anchor is the temperature softmax of
/// its similarities to the per-batch prototypes. Bank rows are updated with
/// those predictions first (outside the gradient path); the loss is then the
/// mean of `log(1 - o . h)` against the freshly updated rows, with gradient
/// flowing through `o` only.
pub fn elr_batch(
    tape: &mut Tape,
    anchors: Var,
    prototypes: Var,
    bank: &mut ElrBank,
    sample_indices: &[usize],
    temperature: f64,
) -> Result<Var> {
    let b = tape.value(anchors).rows();
    if sample_indices.len() != b {
        return Err(Error::invalid_argument(format!(
            "{b} anchors but {} sample indices",
            sample_indices.len()
        )));
    }
    let sims = tape.matmul_nt(anchors, prototypes);
    let o = tape.softmax_rows(sims, temperature);

    let k = tape.value(o).cols();
    let mut h_rows = Vec::with_capacity(b * k);
    {
        let o_val = tape.value(o).clone();
        for (row, &i) in (0..b).zip(sample_indices) {
            h_rows.extend_from_slice(bank.update_row(i, o_val.row(row)));
        }
    }
    let h = tape.constant(&Tensor::from_vec(&[b, k], h_rows)?);
    let agreement = tape.mul(o, h);
    let inner = tape.row_sum(agreement);
    let gap = tape.one_minus(inner);
    let gap = tape.clamp_min(gap, 1e-12);
    let lg = tape.log(gap);
    Ok(tape.mean_all(lg))
}

/// Per-sample reference form of the regularizer: computes the non-parametric
/// prediction of one anchor, folds it into the bank, and returns the
/// prediction together with the loss contribution `log(1 - o . h)`.
pub fn elr_step(
    anchor: &[f64],
    prototypes: &Tensor,
    bank: &mut ElrBank,
    sample_index: usize,
    temperature: f64,
) -> Result<(Vec<f64>, f64)> {
    let k = prototypes.rows();
    let logits: Vec<f64> = (0..k)
        .map(|c| {
            anchor.iter().zip(prototypes.row(c)).map(|(a, b)| a * b).sum::<f64>() / temperature
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let o: Vec<f64> = exps.into_iter().map(|v| v / sum).collect();
    let h = bank.update_row(sample_index, &o);
    let inner: f64 = o.iter().zip(h).map(|(a, b)| a * b).sum();
    let loss = (1.0 - inner).max(1e-12).ln();
    Ok((o, loss))
}

/// Neighborhood-clustering entropy over a batch: for each anchor, the
/// entropy of its normalized similarity row against the full feature bank,
/// excluding the anchor's own bank row. Bank entries are constants; the
/// gradient reaches only the batch features.
pub fn nc_batch(
    tape: &mut Tape,
    batch_features: Var,
    bank: &FeatureBank,
    sample_indices: &[usize],
    temperature: f64,
) -> Result<Var> {
    let n = bank.len();
    if n < 2 {
        return Err(Error::invalid_argument(
            "feature bank needs at least 2 entries for neighborhood clustering",
        ));
    }
    let b = tape.value(batch_features).rows();
    if sample_indices.len() != b {
        return Err(Error::invalid_argument(format!(
            "{b} features but {} sample indices",
            sample_indices.len()
        )));
    }

    let unit = tape.normalize_rows(batch_features)?;
    let bank_unit = tape.constant(&bank.unit);
    let sims = tape.matmul_nt(unit, bank_unit);

    let width = n - 1;
    let mut cols = Vec::with_capacity(b * width);
    for &i in sample_indices {
        for j in 0..n {
            if j != i {
                cols.push(j);
            }
        }
    }
    let picked = tape.select_cols(sims, &cols, width);
    let lp = tape.log_softmax_rows(picked, temperature);
    let p = tape.exp(lp);
    let plogp = tape.mul(p, lp);
    let rows = tape.row_sum(plogp);
    let mean = tape.mean_all(rows);
    Ok(tape.neg(mean))
}

/// Per-sample reference form of the clustering entropy for a single feature
/// vector; `exclude` is the bank row held out of the normalization.
pub fn loss_nc(
    feature: &[f64],
    bank: &FeatureBank,
    exclude: usize,
    temperature: f64,
) -> Result<f64> {
    let n = bank.len();
    if n < 2 {
        return Err(Error::invalid_argument(
            "feature bank needs at least 2 entries for neighborhood clustering",
        ));
    }
    let mut logits = Vec::with_capacity(n - 1);
    for j in 0..n {
        if j == exclude {
            continue;
        }
        logits.push(cosine_similarity(feature, bank.features.row(j))? / temperature);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(-exps
        .iter()
        .map(|&e| {
            let s = e / sum;
            s * s.ln()
        })
        .sum::<f64>())
}
