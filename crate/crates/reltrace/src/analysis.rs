//! Aggregate analytics: classification reports, Spearman rank correlation,
//! episode-local lexical profiles, TokenScore/lexical alignment, and
//! relation-statistics ingestion and correlation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Episode;
use crate::error::{Error, Result};

/// Per-class precision/recall/F1 with support counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// Classes with zero gold and zero predicted occurrences, excluded
    /// from the macro averages.
    pub dropped: Vec<String>,
}

pub fn classification_report(
    predictions: &[usize],
    golds: &[usize],
    class_names: &[String],
) -> Result<ClassificationReport> {
    if predictions.len() != golds.len() || golds.is_empty() {
        return Err(Error::Data(format!(
            "need equal non-empty prediction/gold lengths, got {} and {}",
            predictions.len(),
            golds.len()
        )));
    }
    let c = class_names.len();
    for &v in predictions.iter().chain(golds) {
        if v >= c {
            return Err(Error::Index(format!("class id {v} >= {c}")));
        }
    }
    let mut tp = vec![0usize; c];
    let mut fp = vec![0usize; c];
    let mut fneg = vec![0usize; c];
    for (&p, &g) in predictions.iter().zip(golds) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[g] += 1;
        }
    }
    let mut per_class = Vec::new();
    let mut dropped = Vec::new();
    for k in 0..c {
        if tp[k] + fp[k] + fneg[k] == 0 {
            dropped.push(class_names[k].clone());
            continue;
        }
        let precision = if tp[k] + fp[k] == 0 { 0.0 } else { tp[k] as f64 / (tp[k] + fp[k]) as f64 };
        let recall = if tp[k] + fneg[k] == 0 { 0.0 } else { tp[k] as f64 / (tp[k] + fneg[k]) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            name: class_names[k].clone(),
            precision,
            recall,
            f1,
            support: tp[k] + fneg[k],
        });
    }
    let n = per_class.len() as f64;
    let correct = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(ClassificationReport {
        macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / n,
        macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / n,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / n,
        accuracy: correct as f64 / golds.len() as f64,
        per_class,
        dropped,
    })
}

/// Average ranks (ties get the mean of their rank range), 1-based.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson on average ranks. Returns `None`
/// when either input is constant (correlation undefined).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Data(format!(
            "spearman needs two equal-length sequences of ≥ 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some(sxy / (sxx * syy).sqrt()))
}

/// Episode-local lexical scores: per relation, how characteristic each
/// token is of that relation's support prompts relative to the others.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexicalProfile {
    /// `per_relation[class][token] = tfidf(token, class) − mean over other
    /// classes`.
    pub per_relation: Vec<BTreeMap<u32, f64>>,
}

impl LexicalProfile {
    pub fn score(&self, class: usize, token: u32) -> f64 {
        self.per_relation[class].get(&token).copied().unwrap_or(0.0)
    }
}

/// TF-IDF over per-relation pseudo-documents built from support prompts
/// only: raw tf, idf = ln(n / df), contrast score = own tf-idf minus the
/// mean of the other relations' tf-idf.
pub fn tfidf_profiles(episode: &Episode) -> Result<LexicalProfile> {
    let n = episode.n_way();
    if n < 2 {
        return Err(Error::Data("lexical profiles need at least 2 relations".into()));
    }
    let mut tf: Vec<BTreeMap<u32, f64>> = vec![BTreeMap::new(); n];
    for (class, inst) in episode.support_instances() {
        for &tok in &inst.tokens {
            *tf[class].entry(tok).or_insert(0.0) += 1.0;
        }
    }
    if tf.iter().any(BTreeMap::is_empty) {
        return Err(Error::Data("every relation needs non-empty support".into()));
    }
    let mut df: BTreeMap<u32, usize> = BTreeMap::new();
    for doc in &tf {
        for &tok in doc.keys() {
            *df.entry(tok).or_insert(0) += 1;
        }
    }
    let tfidf = |class: usize, tok: u32| -> f64 {
        let t = tf[class].get(&tok).copied().unwrap_or(0.0);
        t * (n as f64 / df[&tok] as f64).ln()
    };
    let mut per_relation = vec![BTreeMap::new(); n];
    for &tok in df.keys() {
        for (r, out) in per_relation.iter_mut().enumerate() {
            let own = tfidf(r, tok);
            let others: f64 =
                (0..n).filter(|&o| o != r).map(|o| tfidf(o, tok)).sum::<f64>() / (n - 1) as f64;
            out.insert(tok, own - others);
        }
    }
    Ok(LexicalProfile { per_relation })
}

/// Query-level alignment between aggregated TokenScores and the predicted
/// relation's lexical profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentStats {
    /// Spearman of (TokenScore(j), lexical score of token j); `None` when
    /// either sequence is constant.
    pub rho: Option<f64>,
    /// Fraction of positive TokenScore mass on positively scored tokens.
    pub mass: f64,
    pub strong_align: bool,
    pub prediction_correct: bool,
}

pub const STRONG_ALIGN_RHO: f64 = 0.30;
pub const STRONG_ALIGN_MASS: f64 = 0.50;

pub fn lexical_alignment(
    token_scores: &[f64],
    tokens: &[u32],
    profile: &LexicalProfile,
    predicted: usize,
    prediction_correct: bool,
) -> Result<AlignmentStats> {
    if tokens.len() < token_scores.len() {
        return Err(Error::Shape(format!(
            "{} token scores but only {} tokens",
            token_scores.len(),
            tokens.len()
        )));
    }
    if predicted >= profile.per_relation.len() {
        return Err(Error::Index(format!("class {predicted} outside profile")));
    }
    let lex: Vec<f64> =
        tokens[..token_scores.len()].iter().map(|&t| profile.score(predicted, t)).collect();
    let rho = if token_scores.len() < 2 { None } else { spearman(token_scores, &lex)? };
    let pos_total: f64 = token_scores.iter().filter(|&&s| s > 0.0).sum();
    let mass = if pos_total > 0.0 {
        token_scores
            .iter()
            .zip(&lex)
            .filter(|&(&s, &l)| s > 0.0 && l > 0.0)
            .map(|(&s, _)| s)
            .sum::<f64>()
            / pos_total
    } else {
        0.0
    };
    let strong_align = rho.is_some_and(|r| r >= STRONG_ALIGN_RHO) && mass >= STRONG_ALIGN_MASS;
    Ok(AlignmentStats { rho, mass, strong_align, prediction_correct })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateAlignment {
    /// Mean ρ over queries with a defined correlation.
    pub mean_rho: Option<f64>,
    pub mean_mass: f64,
    /// Fraction of INCORRECT predictions that are strongly aligned;
    /// `None` when every prediction was correct.
    pub strong_align_incorrect: Option<f64>,
    pub n_queries: usize,
    pub n_incorrect: usize,
}

pub fn aggregate_alignment(stats: &[AlignmentStats]) -> Result<AggregateAlignment> {
    if stats.is_empty() {
        return Err(Error::Data("no alignment stats to aggregate".into()));
    }
    let rhos: Vec<f64> = stats.iter().filter_map(|s| s.rho).collect();
    let mean_rho =
        if rhos.is_empty() { None } else { Some(rhos.iter().sum::<f64>() / rhos.len() as f64) };
    let mean_mass = stats.iter().map(|s| s.mass).sum::<f64>() / stats.len() as f64;
    let incorrect: Vec<&AlignmentStats> =
        stats.iter().filter(|s| !s.prediction_correct).collect();
    let strong_align_incorrect = if incorrect.is_empty() {
        None
    } else {
        Some(incorrect.iter().filter(|s| s.strong_align).count() as f64 / incorrect.len() as f64)
    };
    Ok(AggregateAlignment {
        mean_rho,
        mean_mass,
        strong_align_incorrect,
        n_queries: stats.len(),
        n_incorrect: incorrect.len(),
    })
}

/// External per-relation statistics (knowledge-graph derived).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationStats {
    pub property_id: String,
    /// Count of distinct objects the relation takes.
    pub output_range: u64,
    /// Mean number of direct properties linking subject-object pairs.
    pub mean_connection_count: f64,
    /// Median pairwise TF-IDF cosine similarity (absolute units, parsed
    /// from a column given in 10⁻³).
    pub tfidf_similarity: f64,
}

/// Reads relation statistics from TSV (`property_id output_range
/// mean_connection_count tfidf_similarity_e-3`, optional header) or from a
/// JSON array of records.
pub fn ingest_stats(path: &Path) -> Result<Vec<RelationStats>> {
    let text = std::fs::read_to_string(path)?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return serde_json::from_str(trimmed).map_err(Error::from);
    }
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if lineno == 0 && cols[0] == "property_id" {
            continue;
        }
        if cols.len() != 4 {
            return Err(Error::Data(format!("stats line {}: expected 4 columns", lineno + 1)));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Data(format!("stats line {}: bad {what} {s:?}", lineno + 1)))
        };
        let output_range = cols[1].parse::<u64>().map_err(|_| {
            Error::Data(format!("stats line {}: bad output_range {:?}", lineno + 1, cols[1]))
        })?;
        let mean_connection_count = parse_f(cols[2], "mean_connection_count")?;
        let tfidf_similarity = parse_f(cols[3], "tfidf_similarity")? * 1e-3;
        if output_range < 1 || mean_connection_count < 1.0 || tfidf_similarity < 0.0 {
            return Err(Error::Data(format!("stats line {}: out-of-range value", lineno + 1)));
        }
        out.push(RelationStats {
            property_id: cols[0].to_string(),
            output_range,
            mean_connection_count,
            tfidf_similarity,
        });
    }
    Ok(out)
}

/// Spearman correlations between a per-relation metric and each stats
/// column, over the overlapping relation set.
pub fn correlate(
    metric: &BTreeMap<String, f64>,
    stats: &[RelationStats],
) -> Result<BTreeMap<String, Option<f64>>> {
    let overlap: Vec<&RelationStats> =
        stats.iter().filter(|s| metric.contains_key(&s.property_id)).collect();
    if overlap.len() < 3 {
        return Err(Error::Data(format!(
            "only {} overlapping relations, need ≥ 3",
            overlap.len()
        )));
    }
    let m: Vec<f64> = overlap.iter().map(|s| metric[&s.property_id]).collect();
    let mut out = BTreeMap::new();
    let log_range: Vec<f64> = overlap.iter().map(|s| (s.output_range as f64).ln()).collect();
    let conn: Vec<f64> = overlap.iter().map(|s| s.mean_connection_count).collect();
    let sim: Vec<f64> = overlap.iter().map(|s| s.tfidf_similarity).collect();
    out.insert("log_output_range".to_string(), spearman(&m, &log_range)?);
    out.insert("mean_connection_count".to_string(), spearman(&m, &conn)?);
    out.insert("tfidf_similarity".to_string(), spearman(&m, &sim)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, sample_episode, PromptInstance, SyntheticSpec, TemplateKind};
    use crate::numerics::Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("R{i}")).collect()
    }

    #[test]
    fn report_all_correct() {
        let r = classification_report(&[0, 1, 2], &[0, 1, 2], &names(3)).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.macro_precision, 1.0);
        assert_eq!(r.macro_recall, 1.0);
        for m in &r.per_class {
            assert_eq!(m.f1, 1.0);
            assert_eq!(m.support, 1);
        }
    }

    #[test]
    fn report_matches_hand_confusion_matrix() {
        // golds:  0 0 0 1 1 2 2 2 2
        // preds:  0 0 1 1 0 2 2 1 0
        // class 0: TP 2, FP 2, FN 1 → P 0.5, R 2/3, F1 4/7
        // class 1: TP 1, FP 2, FN 1 → P 1/3, R 0.5, F1 0.4
        // class 2: TP 2, FP 0, FN 2 → P 1.0, R 0.5, F1 2/3
        let golds = [0, 0, 0, 1, 1, 2, 2, 2, 2];
        let preds = [0, 0, 1, 1, 0, 2, 2, 1, 0];
        let r = classification_report(&preds, &golds, &names(3)).unwrap();
        let c0 = &r.per_class[0];
        assert!((c0.precision - 0.5).abs() < 1e-15);
        assert!((c0.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((c0.f1 - 4.0 / 7.0).abs() < 1e-15);
        let c1 = &r.per_class[1];
        assert!((c1.precision - 1.0 / 3.0).abs() < 1e-15);
        assert!((c1.f1 - 0.4).abs() < 1e-15);
        let c2 = &r.per_class[2];
        assert_eq!(c2.precision, 1.0);
        assert!((c2.f1 - 2.0 / 3.0).abs() < 1e-15);
        let macro_f1 = (4.0 / 7.0 + 0.4 + 2.0 / 3.0) / 3.0;
        assert!((r.macro_f1 - macro_f1).abs() < 1e-15);
        assert!((r.accuracy - 5.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn unused_class_dropped_from_macro() {
        let r = classification_report(&[0, 1], &[0, 1], &names(3)).unwrap();
        assert_eq!(r.per_class.len(), 2);
        assert_eq!(r.dropped, vec!["R2"]);
        assert_eq!(r.macro_f1, 1.0);
        assert!(classification_report(&[0], &[0, 1], &names(2)).is_err());
    }

    #[test]
    fn spearman_basic_directions() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &x).unwrap(), Some(1.0));
        let rev = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(spearman(&x, &rev).unwrap(), Some(-1.0));
        assert_eq!(spearman(&x, &[5.0; 4]).unwrap(), None);
        assert!(spearman(&x, &[1.0]).is_err());
    }

    // Independent rank-then-Pearson oracle used by several tests.
    pub(crate) fn spearman_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&a| {
                    let below = v.iter().filter(|&&b| b < a).count() as f64;
                    let equal = v.iter().filter(|&&b| b == a).count() as f64;
                    below + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let rx = rank(x);
        let ry = rank(y);
        let n = x.len() as f64;
        let mx = rx.iter().sum::<f64>() / n;
        let my = ry.iter().sum::<f64>() / n;
        let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
        let syy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
        if sxx == 0.0 || syy == 0.0 {
            None
        } else {
            Some(sxy / (sxx * syy).sqrt())
        }
    }

    #[test]
    fn spearman_ties_match_rank_table_oracle() {
        let x = [1.0, 2.0, 2.0, 3.0];
        let y = [1.0, 3.0, 2.0, 4.0];
        let got = spearman(&x, &y).unwrap().unwrap();
        let want = spearman_oracle(&x, &y).unwrap();
        assert!((got - want).abs() < 1e-12);
        // Random instances with heavy ties.
        let mut rng = Rng::new(42);
        for _ in 0..200 {
            let n = 2 + rng.below(20);
            let a: Vec<f64> = (0..n).map(|_| rng.below(5) as f64).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.below(5) as f64).collect();
            match (spearman(&a, &b).unwrap(), spearman_oracle(&a, &b)) {
                (Some(g), Some(w)) => assert!((g - w).abs() < 1e-12),
                (None, None) => {}
                other => panic!("disagreement: {other:?}"),
            }
        }
    }

    #[test]
    fn spearman_invariant_under_monotone_transform() {
        let mut rng = Rng::new(9);
        let x: Vec<f64> = (0..15).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let y: Vec<f64> = (0..15).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let base = spearman(&x, &y).unwrap().unwrap();
        let fx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let gy: Vec<f64> = y.iter().map(|v| 3.0 * v + 7.0).collect();
        assert!((spearman(&fx, &gy).unwrap().unwrap() - base).abs() < 1e-12);
    }

    fn toy_episode(docs: Vec<Vec<Vec<u32>>>) -> Episode {
        let n = docs.len();
        let support = docs
            .into_iter()
            .map(|insts| {
                insts
                    .into_iter()
                    .map(|tokens| {
                        let recall_pos = tokens.len() - 1;
                        PromptInstance {
                            tokens,
                            recall_pos,
                            j_e1: 0,
                            template: TemplateKind::TwoBlank,
                            relation: 0,
                        }
                    })
                    .collect()
            })
            .collect();
        Episode {
            relation_ids: (0..n).collect(),
            relation_names: names(n),
            support,
            query: vec![Vec::new(); n],
        }
    }

    #[test]
    fn tfidf_shared_token_scores_zero() {
        let ep = toy_episode(vec![vec![vec![1, 2, 3]], vec![vec![1, 4, 5]], vec![vec![1, 6, 7]]]);
        let p = tfidf_profiles(&ep).unwrap();
        for r in 0..3 {
            assert_eq!(p.score(r, 1), 0.0);
        }
    }

    #[test]
    fn tfidf_matches_hand_computation_two_relations() {
        // Docs: r0 = [9, 9, 1], r1 = [8, 1].
        // Token 9: tf(r0)=2, df=1, idf=ln2 → tfidf(r0)=2ln2, tfidf(r1)=0.
        // score(9, r0) = 2ln2, score(9, r1) = −2ln2.
        let ep = toy_episode(vec![vec![vec![9, 9, 1]], vec![vec![8, 1]]]);
        let p = tfidf_profiles(&ep).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((p.score(0, 9) - 2.0 * ln2).abs() < 1e-15);
        assert!((p.score(1, 9) + 2.0 * ln2).abs() < 1e-15);
        assert!((p.score(1, 8) - ln2).abs() < 1e-15);
        assert!((p.score(0, 8) + ln2).abs() < 1e-15);
        // n=2 antisymmetry for tokens not shared.
        assert_eq!(p.score(0, 9), -p.score(1, 9));
        // Shared token 1: idf = 0.
        assert_eq!(p.score(0, 1), 0.0);
    }

    #[test]
    fn tfidf_permutation_invariant_over_support_order() {
        let a = toy_episode(vec![vec![vec![9, 1], vec![2, 3]], vec![vec![8, 1]]]);
        let b = toy_episode(vec![vec![vec![2, 3], vec![9, 1]], vec![vec![8, 1]]]);
        let pa = tfidf_profiles(&a).unwrap();
        let pb = tfidf_profiles(&b).unwrap();
        assert_eq!(pa.per_relation, pb.per_relation);
    }

    #[test]
    fn tfidf_on_generated_episode_flags_cue_tokens() {
        use crate::corpus::{Slot, Template};
        let spec = SyntheticSpec {
            n_relations: 4,
            entities_per_relation: 6,
            cues_per_relation: 2,
            n_fillers: 8,
            examples_per_relation: 10,
            templates: vec![Template {
                slots: vec![Slot::Filler, Slot::E1, Slot::Cue, Slot::Filler, Slot::E2, Slot::Filler],
            }],
            seed: 5,
        };
        let corpus = generate_corpus(&spec).unwrap();
        let mut rng = Rng::new(1);
        let ep = sample_episode(&corpus, 4, 5, 2, true, &mut rng).unwrap();
        let p = tfidf_profiles(&ep).unwrap();
        for (class, &rel) in ep.relation_ids.iter().enumerate() {
            for i in 0..spec.cues_per_relation {
                let cue = spec.cue_token(rel, i);
                if p.per_relation[class].contains_key(&cue) {
                    assert!(p.score(class, cue) > 0.0, "cue {cue} not positive for {class}");
                }
            }
        }
    }

    fn profile_from_scores(scores: Vec<(u32, f64)>) -> LexicalProfile {
        LexicalProfile { per_relation: vec![scores.into_iter().collect()] }
    }

    #[test]
    fn alignment_perfect_correlation_and_mass() {
        let profile =
            profile_from_scores(vec![(0, 0.1), (1, 0.4), (2, 0.9), (3, 1.6)]);
        let scores = [0.01, 0.04, 0.09, 0.16];
        let s = lexical_alignment(&scores, &[0, 1, 2, 3], &profile, 0, true).unwrap();
        assert_eq!(s.rho, Some(1.0));
        assert_eq!(s.mass, 1.0);
        assert!(s.strong_align);
    }

    #[test]
    fn alignment_quadrants_match_hand_evaluation() {
        // Four cases spanning (ρ ≷ 0.30) × (mass ≷ 0.50).
        let profile = profile_from_scores(vec![(0, 1.0), (1, 2.0), (2, -1.0), (3, -2.0)]);
        // High ρ, high mass.
        let s = lexical_alignment(&[0.5, 1.0, -0.3, -0.6], &[0, 1, 2, 3], &profile, 0, false).unwrap();
        assert!(s.rho.unwrap() >= 0.30 && s.mass >= 0.50 && s.strong_align);
        // High ρ, low mass: ranks align perfectly but most positive score
        // mass sits on negatively scored tokens (mass = 0.5/1.5).
        let skew = LexicalProfile {
            per_relation: vec![[(0u32, -4.0), (1, -3.0), (2, -2.0), (3, -1.0), (4, 1.0)]
                .into_iter()
                .collect()],
        };
        let s = lexical_alignment(&[0.1, 0.2, 0.3, 0.4, 0.5], &[0, 1, 2, 3, 4], &skew, 0, false)
            .unwrap();
        assert_eq!(s.rho, Some(1.0));
        assert!((s.mass - 1.0 / 3.0).abs() < 1e-12);
        assert!(!s.strong_align);
        // Low ρ, high mass: hand rank tables give ρ = 0.5/17.5 ≈ 0.029 and
        // positive mass 0.6/1.0.
        let wide = LexicalProfile {
            per_relation: vec![[(0u32, 3.0), (1, -3.0), (2, 2.0), (3, -2.0), (4, 1.0), (5, -1.0)]
                .into_iter()
                .collect()],
        };
        let s = lexical_alignment(
            &[0.6, 0.4, -0.5, -0.3, -0.2, -0.1],
            &[0, 1, 2, 3, 4, 5],
            &wide,
            0,
            false,
        )
        .unwrap();
        assert!((s.rho.unwrap() - 0.5 / 17.5).abs() < 1e-12);
        assert!((s.mass - 0.6).abs() < 1e-12);
        assert!(!s.strong_align);
        // Low ρ, low mass.
        let s = lexical_alignment(&[0.4, 0.5, -0.1, -0.2], &[3, 2, 1, 0], &profile, 0, false).unwrap();
        assert!(s.rho.unwrap() < 0.30 && s.mass < 0.50 && !s.strong_align);
    }

    #[test]
    fn alignment_mass_edge_cases() {
        let profile = profile_from_scores(vec![(0, 1.0), (1, -1.0)]);
        // No positive TokenScore mass at all.
        let s = lexical_alignment(&[-1.0, -2.0], &[0, 1], &profile, 0, true).unwrap();
        assert_eq!(s.mass, 0.0);
        // Tokens shorter than scores is an error.
        assert!(lexical_alignment(&[1.0, 2.0], &[0], &profile, 0, true).is_err());
    }

    #[test]
    fn aggregate_matches_hand_arithmetic() {
        let stats = vec![
            AlignmentStats { rho: Some(0.4), mass: 0.6, strong_align: true, prediction_correct: false },
            AlignmentStats { rho: Some(0.2), mass: 0.4, strong_align: false, prediction_correct: false },
            AlignmentStats { rho: None, mass: 1.0, strong_align: false, prediction_correct: true },
            AlignmentStats { rho: Some(-0.3), mass: 0.0, strong_align: false, prediction_correct: true },
        ];
        let agg = aggregate_alignment(&stats).unwrap();
        assert!((agg.mean_rho.unwrap() - 0.1).abs() < 1e-15);
        assert!((agg.mean_mass - 0.5).abs() < 1e-15);
        assert_eq!(agg.strong_align_incorrect, Some(0.5));
        assert_eq!(agg.n_incorrect, 2);
        // All correct → StrongAlign fraction undefined.
        let all_ok = vec![AlignmentStats {
            rho: Some(0.1),
            mass: 0.48,
            strong_align: false,
            prediction_correct: true,
        }];
        assert_eq!(aggregate_alignment(&all_ok).unwrap().strong_align_incorrect, None);
    }

    #[test]
    fn ingest_stats_parses_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.tsv");
        std::fs::write(
            &path,
            "property_id\toutput_range\tmean_connection_count\ttfidf_similarity_e-3\n\
             P59\t88\t1.000\t31.8\nP26\t826642\t2.030\t0.0\n",
        )
        .unwrap();
        let rows = ingest_stats(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].property_id, "P59");
        assert_eq!(rows[0].output_range, 88);
        assert!((rows[0].tfidf_similarity - 0.0318).abs() < 1e-12);
        assert_eq!(rows[1].output_range, 826642);
        // Empty file → empty sequence.
        let empty = dir.path().join("empty.tsv");
        std::fs::write(&empty, "").unwrap();
        assert!(ingest_stats(&empty).unwrap().is_empty());
        // Malformed row.
        let bad = dir.path().join("bad.tsv");
        std::fs::write(&bad, "P1\t-3\t1.0\t0.0\n").unwrap();
        assert!(ingest_stats(&bad).is_err());
        // JSON form.
        let json = dir.path().join("stats.json");
        std::fs::write(
            &json,
            serde_json::to_string(&rows).unwrap(),
        )
        .unwrap();
        assert_eq!(ingest_stats(&json).unwrap(), rows);
    }

    #[test]
    fn correlate_identity_and_overlap() {
        let stats: Vec<RelationStats> = (0..5)
            .map(|i| RelationStats {
                property_id: format!("P{i}"),
                output_range: 10u64.pow(i + 1),
                mean_connection_count: 1.0 + i as f64 * 0.2,
                tfidf_similarity: 0.01 * (5 - i) as f64,
            })
            .collect();
        let metric: BTreeMap<String, f64> =
            stats.iter().map(|s| (s.property_id.clone(), (s.output_range as f64).ln())).collect();
        let c = correlate(&metric, &stats).unwrap();
        assert_eq!(c["log_output_range"], Some(1.0));
        assert_eq!(c["mean_connection_count"], Some(1.0));
        assert_eq!(c["tfidf_similarity"], Some(-1.0));
        let two: BTreeMap<String, f64> =
            metric.iter().take(2).map(|(k, v)| (k.clone(), *v)).collect();
        assert!(correlate(&two, &stats).is_err());
    }

    #[test]
    fn fixture_correlations_are_strongly_negative() {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("fixtures/llama8b_properties.tsv");
        let stats = ingest_stats(&path).unwrap();
        assert_eq!(stats.len(), 16);
        let f1: BTreeMap<String, f64> = [
            ("P59", 99.24), ("P2094", 93.53), ("P412", 90.74), ("P364", 90.34),
            ("P177", 89.60), ("P413", 84.55), ("P410", 80.91), ("P206", 78.70),
            ("P641", 76.14), ("P155", 69.82), ("P463", 64.08), ("P921", 61.82),
            ("P40", 47.60), ("P25", 46.54), ("P26", 40.67), ("P361", 39.76),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let c = correlate(&f1, &stats).unwrap();
        assert!(c["log_output_range"].unwrap() < -0.7, "{:?}", c);
        assert!(c["mean_connection_count"].unwrap() < -0.6, "{:?}", c);
    }
}
