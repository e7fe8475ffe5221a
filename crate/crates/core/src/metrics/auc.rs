use std::cmp::Ordering;

use crate::cascade::ScoreDistribution;
use crate::data::MsasssScore;

/// Rank-statistic ROC AUC: the probability that a random positive scores
/// above a random negative, ties counted as one half. `None` when either
/// group is empty.
///
/// Computed from mid-ranks in `O(n log n)`; the rank sum is a sum of
/// half-integers and therefore exact.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "scores and labels must align");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mid_rank = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| positive[k]).count();
        pos_rank_sum += mid_rank * tied_pos as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    let u = pos_rank_sum - np * (np + 1.0) / 2.0;
    Some(u / (np * nn))
}

/// One-vs-rest AUC of `p[cls]` for grade `cls` against all other grades.
pub fn roc_auc_ovr(
    y_true: &[MsasssScore],
    dists: &[ScoreDistribution],
    cls: MsasssScore,
) -> Option<f64> {
    let scores: Vec<f64> = dists.iter().map(|d| d.p()[cls.index()]).collect();
    let positive: Vec<bool> = y_true.iter().map(|&t| t == cls).collect();
    roc_auc(&scores, &positive)
}
