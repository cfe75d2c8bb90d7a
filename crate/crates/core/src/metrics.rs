//! Top-k accuracy, MRR, confusion matrices and length statistics.
//!
//! All functions are order-insensitive: rank metrics are computed from rank
//! histograms and length ratios are summed in sorted order, so permuting the
//! input leaves every output bit-identical.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::evaluate::RankingRecord;
use crate::expand::ExpansionRecord;
use crate::relations::{RelationCatalog, RelationId};

/// Average length increase of generated turns reported for live runs; shown
/// next to measured ratios as a reference point only.
pub const REFERENCE_LENGTH_RATIO: f64 = 1.35;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no records to score")]
    EmptyInput,
    #[error("k must be >= 1, got {0}")]
    InvalidK(usize),
    #[error("rank must be >= 1, got {0}")]
    InvalidRank(usize),
    #[error("original turn has zero length ({dialogue_id} turn {turn_index}, {relation})")]
    ZeroLengthOriginal {
        dialogue_id: String,
        turn_index: usize,
        relation: RelationId,
    },
}

fn histogram(ranks: &[usize]) -> Result<BTreeMap<usize, u64>, MetricsError> {
    if ranks.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut h = BTreeMap::new();
    for &r in ranks {
        if r == 0 {
            return Err(MetricsError::InvalidRank(r));
        }
        *h.entry(r).or_insert(0u64) += 1;
    }
    Ok(h)
}

/// Fraction of ranks `<= k`.
pub fn top_k_accuracy(ranks: &[usize], k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK(k));
    }
    let h = histogram(ranks)?;
    let hits: u64 = h.range(..=k).map(|(_, c)| c).sum();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Mean of `1 / rank`.
///
/// Computed as one division of integers over the lcm of the ranks present,
/// so the result is correctly rounded (all-rank-12 gives exactly `1.0 / 12.0`).
/// Falls back to a float sum when the integers exceed 2^53.
pub fn mrr(ranks: &[usize]) -> Result<f64, MetricsError> {
    let h = histogram(ranks)?;
    if let Some((num, den)) = exact_mrr_fraction(&h, ranks.len() as u128) {
        return Ok(num as f64 / den as f64);
    }
    let sum: f64 = h.iter().map(|(r, c)| *c as f64 / *r as f64).sum();
    Ok(sum / ranks.len() as f64)
}

const EXACT_LIMIT: u128 = 1 << 53;

fn exact_mrr_fraction(h: &BTreeMap<usize, u64>, n: u128) -> Option<(u128, u128)> {
    fn gcd(a: u128, b: u128) -> u128 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let mut lcm: u128 = 1;
    for &r in h.keys() {
        let r = r as u128;
        lcm = lcm.checked_mul(r / gcd(lcm, r))?;
        if lcm > EXACT_LIMIT {
            return None;
        }
    }
    let mut num: u128 = 0;
    for (&r, &c) in h {
        num = num.checked_add((c as u128).checked_mul(lcm / r as u128)?)?;
    }
    let den = n.checked_mul(lcm)?;
    (num <= EXACT_LIMIT && den <= EXACT_LIMIT).then_some((num, den))
}

/// Counts of (true relation, top-1 predicted relation), both axes in catalog
/// order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<RelationId>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(labels: Vec<RelationId>) -> Self {
        let n = labels.len();
        Self {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Each row divided by its sum; all-zero rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|c| if s == 0 { 0.0 } else { *c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }
}

pub fn confusion_matrix(records: &[RankingRecord], catalog: &RelationCatalog) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::zeros(catalog.ids().collect());
    for r in records {
        let (Some(i), Some(j)) = (
            catalog.position(r.true_relation),
            r.ranking.first().and_then(|p| catalog.position(*p)),
        ) else {
            continue;
        };
        m.counts[i][j] += 1;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthStats {
    pub mean_ratio: f64,
    pub per_relation: BTreeMap<RelationId, f64>,
}

fn sorted_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean of `char_len / original_char_len`, overall and per relation.
pub fn length_stats(expansions: &[ExpansionRecord]) -> Result<LengthStats, MetricsError> {
    if expansions.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut all = Vec::with_capacity(expansions.len());
    let mut by_rel: BTreeMap<RelationId, Vec<f64>> = BTreeMap::new();
    for e in expansions {
        if e.original_char_len == 0 {
            return Err(MetricsError::ZeroLengthOriginal {
                dialogue_id: e.dialogue_id.clone(),
                turn_index: e.turn_index,
                relation: e.relation,
            });
        }
        let ratio = e.char_len as f64 / e.original_char_len as f64;
        all.push(ratio);
        by_rel.entry(e.relation).or_default().push(ratio);
    }
    Ok(LengthStats {
        mean_ratio: sorted_mean(all),
        per_relation: by_rel.into_iter().map(|(k, v)| (k, sorted_mean(v))).collect(),
    })
}

fn round_to(x: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    (x * f).round() / f
}

fn ser_topk<S: Serializer>(v: &BTreeMap<usize, f64>, s: S) -> Result<S::Ok, S::Error> {
    s.collect_map(v.iter().map(|(k, x)| (k, round_to(*x, 2))))
}

fn ser_mrr<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round_to(*v, 3))
}

fn ser_opt3<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_some(&round_to(*x, 3)),
        None => s.serialize_none(),
    }
}

fn ser_map3<S: Serializer>(v: &BTreeMap<RelationId, f64>, s: S) -> Result<S::Ok, S::Error> {
    s.collect_map(v.iter().map(|(k, x)| (k, round_to(*x, 3))))
}

/// Scores for one (generator, judge) pair. Values are kept at full precision
/// and rounded when serialized: 2 decimals for Top-k, 3 for MRR and ratios.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub generator_label: String,
    pub judge_label: String,
    /// Expansions that should have been judged.
    pub n_records: usize,
    /// Expansions without a usable judgment.
    pub n_excluded: usize,
    /// Scored rankings that needed the completion policy.
    pub n_completed: usize,
    #[serde(serialize_with = "ser_topk")]
    pub top_k: BTreeMap<usize, f64>,
    #[serde(serialize_with = "ser_mrr")]
    pub mrr: f64,
    pub confusion: ConfusionMatrix,
    #[serde(serialize_with = "ser_opt3")]
    pub mean_length_ratio: Option<f64>,
    #[serde(serialize_with = "ser_map3")]
    pub per_relation_length_ratio: BTreeMap<RelationId, f64>,
    pub reference_length_ratio: f64,
}

impl MetricsReport {
    pub fn n_scored(&self) -> usize {
        self.n_records - self.n_excluded
    }
}

#[derive(Debug, Clone)]
pub struct ReportLabels {
    pub generator: String,
    pub judge: String,
}

type Key = (String, usize, RelationId);

/// Scores `rankings` against `expansions`. Rankings are matched to
/// expansions by (dialogue, turn, relation); expansions with no ranking count
/// as excluded. With no expansions every ranking is scored.
pub fn report(
    rankings: &[RankingRecord],
    expansions: &[ExpansionRecord],
    labels: &ReportLabels,
    ks: &[usize],
    catalog: &RelationCatalog,
) -> Result<MetricsReport, MetricsError> {
    let expected: HashSet<Key> = expansions
        .iter()
        .map(|e| (e.dialogue_id.clone(), e.turn_index, e.relation))
        .collect();
    let mut seen: HashSet<Key> = HashSet::new();
    let mut scored: Vec<RankingRecord> = Vec::new();
    for r in rankings {
        let key = (r.dialogue_id.clone(), r.turn_index, r.true_relation);
        if (!expansions.is_empty() && !expected.contains(&key)) || !seen.insert(key) {
            continue;
        }
        scored.push(r.clone());
    }
    let n_records = if expansions.is_empty() { scored.len() } else { expected.len() };
    let ranks: Vec<usize> = scored.iter().map(|r| r.true_rank).collect();
    let mut top_k = BTreeMap::new();
    for &k in ks {
        top_k.insert(k, top_k_accuracy(&ranks, k)?);
    }
    let (mean_length_ratio, per_relation_length_ratio) = if expansions.is_empty() {
        (None, BTreeMap::new())
    } else {
        let stats = length_stats(expansions)?;
        (Some(stats.mean_ratio), stats.per_relation)
    };
    Ok(MetricsReport {
        generator_label: labels.generator.clone(),
        judge_label: labels.judge.clone(),
        n_records,
        n_excluded: n_records - scored.len(),
        n_completed: scored.iter().filter(|r| r.completion_applied).count(),
        top_k,
        mrr: mrr(&ranks)?,
        confusion: confusion_matrix(&scored, catalog),
        mean_length_ratio,
        per_relation_length_ratio,
        reference_length_ratio: REFERENCE_LENGTH_RATIO,
    })
}

/// Fraction of matching records per relation, useful for eyeballing bias.
pub fn per_relation_top1(records: &[RankingRecord]) -> BTreeMap<RelationId, f64> {
    let mut hits: HashMap<RelationId, (u64, u64)> = HashMap::new();
    for r in records {
        let e = hits.entry(r.true_relation).or_default();
        e.1 += 1;
        if r.true_rank == 1 {
            e.0 += 1;
        }
    }
    hits.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expand::Mode;
    use crate::relations::catalog_default;

    // Independent re-implementations used as oracles.
    fn brute_mrr(ranks: &[usize]) -> f64 {
        let mut s = 0.0;
        for r in ranks {
            s += 1.0 / *r as f64;
        }
        s / ranks.len() as f64
    }

    fn brute_topk(ranks: &[usize], k: usize) -> f64 {
        ranks.iter().filter(|r| **r <= k).count() as f64 / ranks.len() as f64
    }

    pub(crate) fn ranking(truth: RelationId, order: &[RelationId]) -> RankingRecord {
        RankingRecord {
            run_id: "r".into(),
            dialogue_id: format!("d-{truth}-{}", order[0]),
            turn_index: 1,
            true_relation: truth,
            true_rank: order.iter().position(|x| *x == truth).unwrap() + 1,
            ranking: order.to_vec(),
            judge_model: "j".into(),
            completion_applied: false,
            templates_sha: String::new(),
        }
    }

    fn expansion(rel: RelationId, len: usize, orig: usize) -> ExpansionRecord {
        ExpansionRecord {
            run_id: "r".into(),
            dialogue_id: "d".into(),
            turn_index: 1,
            relation: rel,
            text: "x".repeat(len),
            generator_model: "g".into(),
            mode: Mode::ZeroShot,
            prompt_sha: String::new(),
            templates_sha: String::new(),
            reask_of: Vec::new(),
            original_text: "y".repeat(orig),
            char_len: len,
            original_char_len: orig,
        }
    }

    #[test]
    fn topk_examples() {
        assert!((top_k_accuracy(&[1, 6, 11], 5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(top_k_accuracy(&[3, 12, 7], 12).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&[], 1), Err(MetricsError::EmptyInput));
        assert_eq!(top_k_accuracy(&[1], 0), Err(MetricsError::InvalidK(0)));
        assert_eq!(top_k_accuracy(&[0], 1), Err(MetricsError::InvalidRank(0)));
    }

    #[test]
    fn mrr_examples() {
        assert!((mrr(&[1, 2, 4]).unwrap() - 0.583_333_333_333_333_4).abs() < 1e-12);
        assert_eq!(mrr(&[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(mrr(&[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn constant_rank_is_exact() {
        for n in 1..=2000 {
            assert_eq!(mrr(&vec![12; n]).unwrap(), 1.0 / 12.0, "n = {n}");
            assert_eq!(mrr(&vec![7; n]).unwrap(), 1.0 / 7.0, "n = {n}");
        }
        let huge = mrr(&[usize::MAX, 1]).unwrap();
        assert!((huge - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_ranks_match_expectations() {
        // E[1/rank] = H_12 / 12, E[rank <= k] = k / 12.
        let h12: f64 = (1..=12).map(|r| 1.0 / r as f64).sum();
        let mut rng = crate::seeded::SeededRng::new(2024);
        let ranks: Vec<usize> = (0..10_000).map(|_| 1 + rng.below(12) as usize).collect();
        assert!((mrr(&ranks).unwrap() - h12 / 12.0).abs() < 0.01);
        assert!((top_k_accuracy(&ranks, 10).unwrap() - 10.0 / 12.0).abs() < 0.01);
    }

    #[test]
    fn confusion_fixture() {
        use RelationId::*;
        let cat = catalog_default();
        let rest: Vec<RelationId> = RelationId::ALL.to_vec();
        let ord = |first: RelationId| {
            let mut v = vec![first];
            v.extend(rest.iter().copied().filter(|r| *r != first));
            v
        };
        // Hand-counted: (xAttr->xAttr) x2, (xAttr->oReact), (IsAfter->IsAfter), (IsAfter->xNeed), (oWant->xWant).
        let recs = vec![
            ranking(XAttr, &ord(XAttr)),
            ranking(XAttr, &ord(XAttr)),
            ranking(XAttr, &ord(OReact)),
            ranking(IsAfter, &ord(IsAfter)),
            ranking(IsAfter, &ord(XNeed)),
            ranking(OWant, &ord(XWant)),
        ];
        let m = confusion_matrix(&recs, &cat);
        let mut expected = vec![vec![0u64; 12]; 12];
        expected[0][0] = 2;
        expected[0][7] = 1;
        expected[10][10] = 1;
        expected[10][2] = 1;
        expected[6][1] = 1;
        assert_eq!(m.counts, expected);
        assert_eq!(m.trace(), 3);
        assert_eq!(m.total(), 6);
        let ranks: Vec<_> = recs.iter().map(|r| r.true_rank).collect();
        assert_eq!(m.trace() as f64 / m.total() as f64, top_k_accuracy(&ranks, 1).unwrap());
        assert_eq!(m.row_sums()[0], 3);
        assert_eq!(m.row_normalized()[10][2], 0.5);
    }

    #[test]
    fn confusion_empty() {
        let m = confusion_matrix(&[], &catalog_default());
        assert_eq!(m.total(), 0);
        assert_eq!(m.counts.len(), 12);
    }

    #[test]
    fn length_examples() {
        let s = length_stats(&[expansion(RelationId::XAttr, 135, 100)]).unwrap();
        assert!((s.mean_ratio - 1.35).abs() < 1e-12);
        let s = length_stats(&[expansion(RelationId::XAttr, 10, 10), expansion(RelationId::OWant, 7, 7)]).unwrap();
        assert_eq!(s.mean_ratio, 1.0);
        let s = length_stats(&[expansion(RelationId::XAttr, 10, 10), expansion(RelationId::XAttr, 20, 10)]).unwrap();
        assert_eq!(s.mean_ratio, 1.5);
        assert_eq!(s.per_relation[&RelationId::XAttr], 1.5);
        assert!(matches!(
            length_stats(&[expansion(RelationId::XAttr, 1, 0)]),
            Err(MetricsError::ZeroLengthOriginal { .. })
        ));
    }

    #[test]
    fn report_composes_standalone_ops() {
        use RelationId::*;
        let cat = catalog_default();
        let exps = vec![expansion(XAttr, 20, 10), expansion(OWant, 10, 10), expansion(IsAfter, 30, 10)];
        let mut all = RelationId::ALL.to_vec();
        let r1 = RankingRecord { dialogue_id: "d".into(), ..ranking(XAttr, &all) };
        all.swap(0, 6);
        let r2 = RankingRecord { dialogue_id: "d".into(), ..ranking(OWant, &all) };
        let labels = ReportLabels { generator: "g".into(), judge: "j".into() };
        let rep = report(&[r1.clone(), r2.clone()], &exps, &labels, &DEFAULT_KS, &cat).unwrap();
        assert_eq!(rep.n_records, 3);
        assert_eq!(rep.n_excluded, 1);
        let ranks = [r1.true_rank, r2.true_rank];
        assert_eq!(rep.mrr, mrr(&ranks).unwrap());
        assert_eq!(rep.top_k[&1], top_k_accuracy(&ranks, 1).unwrap());
        assert_eq!(rep.confusion, confusion_matrix(&[r1, r2], &cat));
        assert_eq!(rep.mean_length_ratio, Some(length_stats(&exps).unwrap().mean_ratio));
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json["top_k"]["1"], 1.0);
        assert_eq!(json["reference_length_ratio"], 1.35);
    }

    #[test]
    fn serialization_rounds() {
        let cat = catalog_default();
        let recs = vec![
            ranking(RelationId::XAttr, &RelationId::ALL),
            ranking(RelationId::XWant, &RelationId::ALL),
            ranking(RelationId::XNeed, &RelationId::ALL),
        ];
        let labels = ReportLabels { generator: "g".into(), judge: "j".into() };
        let rep = report(&recs, &[], &labels, &DEFAULT_KS, &cat).unwrap();
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json["mrr"], 0.611);
        assert_eq!(json["top_k"]["1"], 0.33);
        assert!(json["mean_length_ratio"].is_null());
        assert!((rep.mrr - 11.0 / 18.0).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matches_brute_force(ranks in prop::collection::vec(1usize..=12, 1..200)) {
                prop_assert!((mrr(&ranks).unwrap() - brute_mrr(&ranks)).abs() < 1e-12);
                for k in 1..=12 {
                    prop_assert!((top_k_accuracy(&ranks, k).unwrap() - brute_topk(&ranks, k)).abs() < 1e-12);
                }
            }

            #[test]
            fn monotone_in_k(ranks in prop::collection::vec(1usize..=12, 1..100)) {
                for k in 1..12 {
                    prop_assert!(top_k_accuracy(&ranks, k).unwrap() <= top_k_accuracy(&ranks, k + 1).unwrap());
                }
                prop_assert_eq!(top_k_accuracy(&ranks, 12).unwrap(), 1.0);
                let m = mrr(&ranks).unwrap();
                prop_assert!((1.0 / 12.0..=1.0).contains(&m));
            }

            #[test]
            fn order_insensitive(
                ranks in prop::collection::vec(1usize..=12, 1..100),
                lens in prop::collection::vec((1usize..300, 1usize..300), 1..50),
                seed in any::<u64>(),
            ) {
                let mut shuffled = ranks.clone();
                crate::seeded::SeededRng::new(seed).shuffle(&mut shuffled);
                prop_assert_eq!(mrr(&ranks).unwrap().to_bits(), mrr(&shuffled).unwrap().to_bits());
                prop_assert_eq!(top_k_accuracy(&ranks, 5).unwrap(), top_k_accuracy(&shuffled, 5).unwrap());

                let exps: Vec<_> = lens.iter().enumerate()
                    .map(|(i, (a, b))| expansion(RelationId::ALL[i % 12], *a, *b)).collect();
                let mut exps2 = exps.clone();
                crate::seeded::SeededRng::new(seed).shuffle(&mut exps2);
                prop_assert_eq!(length_stats(&exps).unwrap(), length_stats(&exps2).unwrap());
            }
        }
    }
}
