//! Text-to-image retrieval metrics: Rank@K and mean average precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// K → fraction of queries with a correct match in the top K.
    pub rank_at: BTreeMap<usize, f64>,
    pub mean_ap: f64,
    pub num_queries: usize,
}

impl RetrievalResult {
    pub fn rank(&self, k: usize) -> f64 {
        self.rank_at.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub const CSV_HEADER: &'static str = "R@1,R@5,R@10,mAP";

    /// Percentages with two decimals, in the order of [`Self::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        format!(
            "{:.2},{:.2},{:.2},{:.2}",
            100.0 * self.rank(1),
            100.0 * self.rank(5),
            100.0 * self.rank(10),
            100.0 * self.mean_ap
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Gallery indices of one query ordered by descending score, ties by index.
/// Scores must not be NaN; `-0.0` and `0.0` tie.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Scores `sim` (`Q` rows of `G` scores) against the identities of queries
/// and gallery items.
pub fn evaluate(
    sim: &[Vec<f64>],
    query_ids: &[usize],
    gallery_ids: &[usize],
    ks: &[usize],
) -> Result<RetrievalResult> {
    if sim.len() != query_ids.len() {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: vec![sim.len()],
            rhs: vec![query_ids.len()],
        });
    }
    if sim.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    let mut hits = vec![0usize; ks.len()];
    let mut ap_sum = 0.0;
    for (row, &qid) in sim.iter().zip(query_ids) {
        if row.len() != gallery_ids.len() {
            return Err(Error::ShapeMismatch {
                op: "evaluate",
                lhs: vec![row.len()],
                rhs: vec![gallery_ids.len()],
            });
        }
        if row.iter().any(|s| s.is_nan()) {
            return Err(Error::NonFinite("similarity scores".into()));
        }
        if !gallery_ids.contains(&qid) {
            return Err(Error::MissingIdentity(qid));
        }
        let order = ranking(row);
        let first = order
            .iter()
            .position(|&j| gallery_ids[j] == qid)
            .expect("identity present");
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first < k {
                *h += 1;
            }
        }
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &j) in order.iter().enumerate() {
            if gallery_ids[j] == qid {
                found += 1;
                precision_sum += found as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += precision_sum / found as f64;
    }
    let q = sim.len() as f64;
    Ok(RetrievalResult {
        rank_at: ks.iter().zip(&hits).map(|(&k, &h)| (k, h as f64 / q)).collect(),
        mean_ap: ap_sum / q,
        num_queries: sim.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking() {
        let sim = vec![vec![0.9, 0.1, 0.2], vec![0.0, 0.8, 0.3], vec![0.1, 0.2, 0.5]];
        let r = evaluate(&sim, &[0, 1, 2], &[0, 1, 2], &DEFAULT_KS).unwrap();
        assert_eq!(r.rank(1), 1.0);
        assert_eq!(r.mean_ap, 1.0);
    }

    #[test]
    fn signed_zeros_tie() {
        assert_eq!(ranking(&[-0.0, 0.0, -0.0]), [0, 1, 2]);
    }

    #[test]
    fn match_in_second_place() {
        let r = evaluate(&[vec![0.9, 0.4]], &[7], &[3, 7], &DEFAULT_KS).unwrap();
        assert_eq!(r.rank(1), 0.0);
        assert_eq!(r.rank(5), 1.0);
        assert_eq!(r.mean_ap, 0.5);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let r = evaluate(&[vec![0.5, 0.5]], &[1], &[1, 2], &[1]).unwrap();
        assert_eq!(r.rank(1), 1.0);
        let r = evaluate(&[vec![0.5, 0.5]], &[2], &[1, 2], &[1]).unwrap();
        assert_eq!(r.rank(1), 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            evaluate(&[vec![0.1]], &[4], &[3], &[1]),
            Err(Error::MissingIdentity(4))
        ));
        assert!(evaluate(&[vec![f64::NAN]], &[3], &[3], &[1]).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = evaluate(&[vec![0.9, 0.4]], &[7], &[3, 7], &DEFAULT_KS).unwrap();
        assert_eq!(r.csv_row(), "0.00,100.00,100.00,50.00");
    }
}
