//! Discounted cumulative gain.

/// `Σ_i (2^{f_i} − 1) / log₂(i + 1)` with 1-based positions.
pub fn dcg(feedback_in_rank_order: &[f64]) -> f64 {
    feedback_in_rank_order
        .iter()
        .enumerate()
        .map(|(i, &f)| (f.exp2() - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// DCG over the first `k` positions.
pub fn dcg_at(feedback_in_rank_order: &[f64], k: usize) -> f64 {
    dcg(&feedback_in_rank_order[..k.min(feedback_in_rank_order.len())])
}

/// `dcg(ranked) / dcg(ideal)` where the ideal sorts the same values
/// descending; 0/0 is taken as 1.
pub fn ndcg(feedback_in_rank_order: &[f64]) -> f64 {
    ndcg_at(feedback_in_rank_order, feedback_in_rank_order.len())
}

pub fn ndcg_at(feedback_in_rank_order: &[f64], k: usize) -> f64 {
    let mut ideal = feedback_in_rank_order.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    ratio(dcg_at(feedback_in_rank_order, k), dcg_at(&ideal, k))
}

/// `num / den` with 0/0 = 1.
pub fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        if num == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let expected = 7.0 + 1.0 / 3f64.log2();
        assert!((dcg(&[3.0, 1.0, 0.0]) - expected).abs() < 1e-12);
        assert!((dcg(&[3.0, 1.0, 0.0]) - 7.63093).abs() < 1e-5);
    }

    #[test]
    fn zero_and_single() {
        assert_eq!(dcg(&[0.0, 0.0]), 0.0);
        assert_eq!(ndcg(&[0.0, 0.0]), 1.0);
        assert_eq!(dcg(&[0.75]), 0.75f64.exp2() - 1.0);
        assert_eq!(ndcg(&[]), 1.0);
    }

    #[test]
    fn reversed_list_is_imperfect() {
        assert!(ndcg(&[0.0, 1.0]) < 1.0);
        assert_eq!(ndcg(&[1.0, 0.5, 0.0]), 1.0);
    }
}
