use crate::error::{Error, Result};

fn check(id_scores: &[f64], ood_scores: &[f64]) -> Result<()> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::Evaluation(format!(
            "need at least one ID and one OOD score (got {} and {})",
            id_scores.len(),
            ood_scores.len()
        )));
    }
    if id_scores.iter().chain(ood_scores).any(|v| v.is_nan()) {
        return Err(Error::Evaluation("score list contains NaN".into()));
    }
    Ok(())
}

/// `(fpr, τ*)` where `τ*` is the largest threshold that still keeps at least
/// 95% of the ID scores (`score ≥ τ*`), and `fpr` is the fraction of OOD
/// scores at or above it.
pub fn fpr_at_95_tpr(id_scores: &[f64], ood_scores: &[f64]) -> Result<(f64, f64)> {
    check(id_scores, ood_scores)?;
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    // ceil(0.95 n) in exact integer arithmetic.
    let k = (95 * n).div_ceil(100);
    let threshold = sorted[k - 1];
    let passed = ood_scores.iter().filter(|&&s| s >= threshold).count();
    Ok((passed as f64 / ood_scores.len() as f64, threshold))
}

/// Mann-Whitney estimate of `P(id > ood) + ½ P(id = ood)`.
///
/// Ranks are kept doubled so tied mid-ranks stay integers and the result is
/// the same rational as the pairwise count.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check(id_scores, ood_scores)?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < all.len() {
        let mut end = start;
        while end < all.len() && all[end].0 == all[start].0 {
            end += 1;
        }
        // Positions start+1 ..= end share the mid-rank (start + 1 + end) / 2.
        let doubled = (start + 1 + end) as u128;
        let ids = all[start..end].iter().filter(|e| e.1).count() as u128;
        doubled_rank_sum += doubled * ids;
        start = end;
    }
    let n = id_scores.len() as u128;
    let m = ood_scores.len() as u128;
    let doubled_u = doubled_rank_sum - n * (n + 1);
    Ok(doubled_u as f64 / (2 * n * m) as f64)
}
