//! Chronological splitting, Hit@K / NDCG@K, and the ranking protocols.

use std::collections::BTreeSet;

use crate::data::InteractionRecord;
use crate::error::{Error, Result};
use crate::parallel::ordered_map;

/// Chronological split fractions; ordering key is `(timestamp, input order)`.
#[derive(Clone, Copy, Debug)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.70,
            valid: 0.15,
            test: 0.15,
        }
    }
}

/// Sort by `(timestamp, input order)` and cut: earliest `train` fraction,
/// next `valid`, remainder (including floor leftovers) to test.
pub fn chronological_split<'a>(
    records: &'a [InteractionRecord],
    spec: &SplitSpec,
) -> Result<(
    Vec<&'a InteractionRecord>,
    Vec<&'a InteractionRecord>,
    Vec<&'a InteractionRecord>,
)> {
    if records.is_empty() {
        return Err(Error::invalid("cannot split an empty record list"));
    }
    if (spec.train + spec.valid + spec.test - 1.0).abs() > 1e-9 {
        return Err(Error::config("split fractions must sum to 1"));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| (records[i].timestamp, i));
    let n = records.len();
    let n_train = (n as f64 * spec.train).floor() as usize;
    let n_valid = (n as f64 * spec.valid).floor() as usize;
    let train = order[..n_train].iter().map(|&i| &records[i]).collect();
    let valid = order[n_train..n_train + n_valid].iter().map(|&i| &records[i]).collect();
    let test = order[n_train + n_valid..].iter().map(|&i| &records[i]).collect();
    Ok((train, valid, test))
}

/// One ranking case: a positive item scored against a candidate set.
#[derive(Clone, Debug)]
pub struct RankingCase {
    pub user: u32,
    pub positive: u32,
    /// Unique candidate ids; must contain `positive`.
    pub candidates: Vec<u32>,
    /// Score per candidate, aligned with `candidates`.
    pub scores: Vec<f64>,
}

impl RankingCase {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() != self.scores.len() {
            return Err(Error::invalid("candidate/score length mismatch"));
        }
        if !self.candidates.contains(&self.positive) {
            return Err(Error::invalid("positive must be among the candidates"));
        }
        let unique: BTreeSet<u32> = self.candidates.iter().copied().collect();
        if unique.len() != self.candidates.len() {
            return Err(Error::invalid("candidate ids must be unique"));
        }
        Ok(())
    }

    /// 1-based rank of the positive under descending score; ties break
    /// toward the lower item id.
    pub fn positive_rank(&self) -> usize {
        let pos_idx = self
            .candidates
            .iter()
            .position(|&c| c == self.positive)
            .expect("validated case");
        let ps = self.scores[pos_idx];
        let mut ahead = 0usize;
        for (i, (&c, &s)) in self.candidates.iter().zip(&self.scores).enumerate() {
            if i == pos_idx {
                continue;
            }
            if s > ps || (s == ps && c < self.positive) {
                ahead += 1;
            }
        }
        ahead + 1
    }
}

/// 1 iff the positive ranks within the top k.
pub fn hit_at_k(case: &RankingCase, k: usize) -> f64 {
    if case.positive_rank() <= k {
        1.0
    } else {
        0.0
    }
}

/// Binary-relevance NDCG with a single positive: `1 / log2(rank + 1)` within
/// the cutoff, else 0 (the ideal DCG is 1).
pub fn ndcg_at_k(case: &RankingCase, k: usize) -> f64 {
    let rank = case.positive_rank();
    if rank <= k {
        1.0 / ((rank as f64) + 1.0).log2()
    } else {
        0.0
    }
}

/// Metric table row: mean Hit@5/10 and NDCG@5/10 over a case set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub hit5: f64,
    pub hit10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub cases: usize,
}

impl MetricRow {
    /// `domain<TAB>protocol<TAB>Hit@5<TAB>Hit@10<TAB>NDCG@5<TAB>NDCG@10`.
    pub fn line(&self, domain: u32, protocol: &str) -> String {
        format!(
            "{domain}\t{protocol}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            self.hit5, self.hit10, self.ndcg5, self.ndcg10
        )
    }
}

/// Score-and-average over ranking cases; cases are independent, so the map
/// is data-parallel with a deterministic ordered reduction.
pub fn evaluate_cases(cases: &[RankingCase]) -> Result<MetricRow> {
    if cases.is_empty() {
        return Err(Error::invalid("empty test set: no ranking cases"));
    }
    for c in cases {
        c.validate()?;
    }
    let per_case: Vec<[f64; 4]> = ordered_map(cases, |c| {
        [
            hit_at_k(c, 5),
            hit_at_k(c, 10),
            ndcg_at_k(c, 5),
            ndcg_at_k(c, 10),
        ]
    });
    let n = cases.len() as f64;
    let mut sums = [0.0; 4];
    for row in &per_case {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    Ok(MetricRow {
        hit5: sums[0] / n,
        hit10: sums[1] / n,
        ndcg5: sums[2] / n,
        ndcg10: sums[3] / n,
        cases: cases.len(),
    })
}

/// Candidate set for one positive interaction: the full catalog minus the
/// user's other known positives (the positive itself stays in).
pub fn candidate_set(catalog: &[u32], user_positives: &BTreeSet<u32>, positive: u32) -> Vec<u32> {
    catalog
        .iter()
        .copied()
        .filter(|c| *c == positive || !user_positives.contains(c))
        .collect()
}

use std::collections::BTreeMap;

/// Build cases for every `(user, positive)` pair — candidates are the full
/// catalog minus the user's other known positives — score them with
/// `score_case` (parallel over cases), and average the metrics.
pub fn evaluate_ranking<F>(
    positives: &[(u32, u32)],
    catalog: &[u32],
    known_positives: &BTreeMap<u32, BTreeSet<u32>>,
    score_case: F,
) -> Result<MetricRow>
where
    F: Fn(u32, &[u32]) -> Vec<f64> + Sync + Send,
{
    if positives.is_empty() {
        return Err(Error::invalid("empty test set: no positive interactions"));
    }
    let empty = BTreeSet::new();
    let cases: Vec<RankingCase> = ordered_map(positives, |&(user, item)| {
        let known = known_positives.get(&user).unwrap_or(&empty);
        let candidates = candidate_set(catalog, known, item);
        let scores = score_case(user, &candidates);
        RankingCase {
            user,
            positive: item,
            candidates,
            scores,
        }
    });
    evaluate_cases(&cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{seeded, Stream};
    use rand::Rng;

    fn rec(ts: u64) -> InteractionRecord {
        InteractionRecord {
            domain: 0,
            user: 1,
            item: ts as u32,
            behaviors: vec![],
            label: 1,
            timestamp: ts,
        }
    }

    #[test]
    fn split_100_records_is_70_15_15() {
        let recs: Vec<InteractionRecord> = (0..100).map(rec).collect();
        let (tr, va, te) = chronological_split(&recs, &SplitSpec::default()).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (70, 15, 15));
        let max_train = tr.iter().map(|r| r.timestamp).max().unwrap();
        let min_test = te.iter().map(|r| r.timestamp).min().unwrap();
        assert!(max_train <= min_test);
    }

    #[test]
    fn split_single_record_goes_to_test() {
        let recs = vec![rec(5)];
        let (tr, va, te) = chronological_split(&recs, &SplitSpec::default()).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (0, 0, 1));
    }

    #[test]
    fn split_breaks_timestamp_ties_by_input_order() {
        let mut recs: Vec<InteractionRecord> = (0..10).map(|_| rec(7)).collect();
        for (i, r) in recs.iter_mut().enumerate() {
            r.item = i as u32;
        }
        let (tr, _, te) = chronological_split(&recs, &SplitSpec::default()).unwrap();
        assert_eq!(tr.iter().map(|r| r.item).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(te.iter().map(|r| r.item).collect::<Vec<_>>(), vec![8, 9]);
    }

    #[test]
    fn split_rejects_empty_input() {
        assert!(chronological_split(&[], &SplitSpec::default()).is_err());
    }

    fn case_with_rank(rank: usize, total: usize) -> RankingCase {
        // Distinct descending scores; the positive (item 500) sits at `rank`.
        let mut candidates = Vec::with_capacity(total);
        let mut scores = Vec::with_capacity(total);
        let mut next = 0u32;
        for r in 1..=total {
            if r == rank {
                candidates.push(500);
            } else {
                candidates.push(next);
                next += 1;
            }
            scores.push(-(r as f64));
        }
        RankingCase {
            user: 0,
            positive: 500,
            candidates,
            scores,
        }
    }

    #[test]
    fn hit_matches_stated_examples() {
        let c = case_with_rank(3, 20);
        assert_eq!(c.positive_rank(), 3);
        assert_eq!(hit_at_k(&c, 5), 1.0);
        let c = case_with_rank(7, 20);
        assert_eq!(hit_at_k(&c, 5), 0.0);
        assert_eq!(hit_at_k(&c, 10), 1.0);
    }

    #[test]
    fn ndcg_matches_stated_examples() {
        let c = case_with_rank(1, 10);
        assert_eq!(ndcg_at_k(&c, 5), 1.0);
        let c = case_with_rank(3, 10);
        assert!((ndcg_at_k(&c, 5) - 0.5).abs() <= 1e-12, "1/log2(4) = 0.5");
    }

    /// Brute-force oracle: sort candidates by (-score, id), find the
    /// positive's index, apply the general DCG formula.
    fn oracle_metrics(case: &RankingCase, k: usize) -> (f64, f64) {
        let mut order: Vec<usize> = (0..case.candidates.len()).collect();
        order.sort_by(|&a, &b| {
            case.scores[b]
                .partial_cmp(&case.scores[a])
                .unwrap()
                .then(case.candidates[a].cmp(&case.candidates[b]))
        });
        let mut dcg = 0.0;
        let mut hit = 0.0;
        let mut ideal = 0.0;
        for (pos, &idx) in order.iter().enumerate().take(k) {
            let rel = if case.candidates[idx] == case.positive { 1.0 } else { 0.0 };
            dcg += rel / ((pos as f64) + 2.0).log2();
            if rel > 0.0 {
                hit = 1.0;
            }
            if pos == 0 {
                ideal = 1.0 / 2.0f64.log2();
            }
        }
        (hit, if ideal > 0.0 { dcg / ideal } else { 0.0 })
    }

    #[test]
    fn metrics_agree_with_sort_oracle_on_random_cases() {
        let mut rng = seeded(71, Stream::Probe);
        for _ in 0..1000 {
            let n = rng.random_range(2..40);
            let candidates: Vec<u32> = (0..n as u32).collect();
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    // Coarse grid makes score ties common.
                    (rng.random_range(0..8) as f64) * 0.5
                })
                .collect();
            let case = RankingCase {
                user: 0,
                positive: rng.random_range(0..n as u32),
                candidates,
                scores,
            };
            for k in [5usize, 10] {
                let (oh, on) = oracle_metrics(&case, k);
                assert_eq!(hit_at_k(&case, k), oh, "hit mismatch at k={k}");
                assert!((ndcg_at_k(&case, k) - on).abs() <= 1e-12, "ndcg mismatch at k={k}");
            }
        }
    }

    #[test]
    fn metrics_invariant_under_strictly_increasing_transforms_and_monotone_in_k() {
        let mut rng = seeded(72, Stream::Probe);
        for _ in 0..100 {
            let n = rng.random_range(2..30);
            let candidates: Vec<u32> = (0..n as u32).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let case = RankingCase {
                user: 0,
                positive: rng.random_range(0..n as u32),
                candidates: candidates.clone(),
                scores: scores.clone(),
            };
            let transformed = RankingCase {
                scores: scores.iter().map(|s| (2.0 * s).exp() + 1.0).collect(),
                candidates,
                ..case.clone()
            };
            for k in [1usize, 5, 10] {
                assert_eq!(hit_at_k(&case, k), hit_at_k(&transformed, k));
                assert!((ndcg_at_k(&case, k) - ndcg_at_k(&transformed, k)).abs() <= 1e-12);
            }
            assert!(hit_at_k(&case, 10) >= hit_at_k(&case, 5));
            assert!(ndcg_at_k(&case, 10) >= ndcg_at_k(&case, 5) - 1e-12);
        }
    }

    #[test]
    fn random_scores_hit_five_over_c_expectation() {
        // E[Hit@5] = 5/C under random scoring; check within 3 sigma over
        // 2000 cases.
        let mut rng = seeded(73, Stream::Probe);
        let c = 40usize;
        let cases: Vec<RankingCase> = (0..2000)
            .map(|_| RankingCase {
                user: 0,
                positive: rng.random_range(0..c as u32),
                candidates: (0..c as u32).collect(),
                scores: (0..c).map(|_| rng.random::<f64>()).collect(),
            })
            .collect();
        let row = evaluate_cases(&cases).unwrap();
        let p = 5.0 / c as f64;
        let sigma = (p * (1.0 - p) / 2000.0).sqrt();
        assert!(
            (row.hit5 - p).abs() <= 3.0 * sigma,
            "hit5 {} vs {} +- {}",
            row.hit5,
            p,
            3.0 * sigma
        );
    }

    #[test]
    fn perfect_scorer_gets_all_ones() {
        let cases: Vec<RankingCase> = (0..50)
            .map(|i| {
                let candidates: Vec<u32> = (0..20).collect();
                let positive = i % 20;
                let scores = candidates
                    .iter()
                    .map(|&c| if c == positive { 1.0 } else { 0.0 })
                    .collect();
                RankingCase {
                    user: i,
                    positive,
                    candidates,
                    scores,
                }
            })
            .collect();
        let row = evaluate_cases(&cases).unwrap();
        assert_eq!((row.hit5, row.hit10, row.ndcg5, row.ndcg10), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn metric_line_format_is_six_columns_four_decimals() {
        let row = MetricRow {
            hit5: 0.5,
            hit10: 0.75,
            ndcg5: 0.333333,
            ndcg10: 0.6,
            cases: 4,
        };
        assert_eq!(row.line(2, "zeroshot"), "2\tzeroshot\t0.5000\t0.7500\t0.3333\t0.6000");
    }

    #[test]
    fn candidate_set_drops_other_positives_but_keeps_own() {
        let catalog: Vec<u32> = (0..10).collect();
        let positives: BTreeSet<u32> = [2, 5, 7].into_iter().collect();
        let c = candidate_set(&catalog, &positives, 5);
        assert!(c.contains(&5));
        assert!(!c.contains(&2) && !c.contains(&7));
        assert_eq!(c.len(), 8);
    }
}
