//! Command implementations behind the `reltrace` binary: corpus
//! generation, planted-model construction, episode evaluation, per-query
//! attribution, and aggregate analysis. Every output carries a provenance
//! header (config hash, seeds, artifact version) and is byte-identical
//! across reruns with the same inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    aggregate_alignment, classification_report, correlate, ingest_stats, lexical_alignment,
    tfidf_profiles, AggregateAlignment, ClassificationReport,
};
use crate::attribution::{
    build_report, concentration, contrast_direction, head_score, render_heatmap_svg,
};
use crate::corpus::{
    generate_corpus, load_corpus, plant_model, sample_episode, save_corpus, Corpus, Episode,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::model::{forward, load_weights, save_weights, ModelConfig, ModelWeights};
use crate::numerics::Rng;
use crate::probing::{run_episode, EpisodeOptions, EpisodeResult, TrainOptions};
use crate::tracing::FeatureKind;

/// Run parameters shared by `eval`, `attribute`, and `analyze`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub weights: PathBuf,
    pub out_dir: PathBuf,
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub feature_kind: String,
    pub m: usize,
    pub dedup: bool,
    pub order_fix: bool,
    pub epochs: usize,
    pub lr: f64,
    pub workers: usize,
    pub stats: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: PathBuf::from("corpus.jsonl"),
            weights: PathBuf::from("weights.rtrc"),
            out_dir: PathBuf::from("out"),
            n: 5,
            k: 5,
            q: 15,
            episodes: 500,
            seeds: vec![0, 1, 2, 3, 4],
            feature_kind: "attn-head".into(),
            m: 3000,
            dedup: true,
            order_fix: true,
            epochs: 200,
            lr: 1e-3,
            workers: 1,
            stats: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.k < 1 || self.q < 1 || self.m < 1 || self.episodes < 1 {
            return Err(Error::Config(
                "require n ≥ 2, k ≥ 1, q ≥ 1, m ≥ 1, episodes ≥ 1".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        parse_feature_kind(&self.feature_kind)?;
        Ok(())
    }

    pub fn episode_options(&self) -> Result<EpisodeOptions> {
        Ok(EpisodeOptions {
            kind: parse_feature_kind(&self.feature_kind)?,
            m: self.m,
            dedup: self.dedup,
            train: TrainOptions { epochs: self.epochs, lr: self.lr, ..TrainOptions::default() },
        })
    }
}

pub fn parse_feature_kind(s: &str) -> Result<FeatureKind> {
    match s {
        "attn-head" => Ok(FeatureKind::AttnHead),
        "attn-token-head" => Ok(FeatureKind::AttnTokenHead),
        "attn-token-total" => Ok(FeatureKind::AttnTokenTotal),
        "mlp-head" => Ok(FeatureKind::MlpHead),
        "mlp-token-head" => Ok(FeatureKind::MlpTokenHead),
        "mlp-token-total" => Ok(FeatureKind::MlpTokenTotal),
        "full-attn" => Ok(FeatureKind::FullAttention),
        "full-mlp" => Ok(FeatureKind::FullMlp),
        other => Err(Error::Config(format!("unknown feature kind {other:?}"))),
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Provenance header attached to every emitted artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub artifact_version: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
}

pub fn provenance(config: &RunConfig) -> Provenance {
    let canonical = serde_json::to_string(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    Provenance {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: format!("{:x}", hasher.finalize()),
        seeds: config.seeds.clone(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn load_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", path.display())))?;
    let spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad spec: {e}")))?;
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_gen(spec_path: &Path, out: &Path) -> Result<()> {
    let spec = load_spec(spec_path)?;
    let corpus = generate_corpus(&spec)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_corpus(&corpus, out)?;
    Ok(())
}

pub fn cmd_plant(spec_path: &Path, config: &ModelConfig, out: &Path) -> Result<()> {
    let spec = load_spec(spec_path)?;
    let mut config = *config;
    if config.vocab_size == 0 {
        config.vocab_size = spec.vocab_size();
    }
    let weights = plant_model(&spec, &config)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_weights(&weights, out)?;
    Ok(())
}

/// One evaluated episode together with its sampling coordinates.
pub struct EpisodeRun {
    pub seed: u64,
    pub index: usize,
    pub episode: Episode,
    pub result: EpisodeResult,
}

/// Deterministic episode stream: episode `i` under seed `s` always uses
/// the same substream regardless of worker count; results are returned in
/// (seed, index) order.
pub fn run_episodes(
    cfg: &RunConfig,
    corpus: &Corpus,
    weights: &ModelWeights,
) -> Result<Vec<EpisodeRun>> {
    cfg.validate()?;
    let options = cfg.episode_options()?;
    let jobs: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| (0..cfg.episodes).map(move |i| (s, i)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut runs: Vec<EpisodeRun> = pool.install(|| {
        jobs.par_iter()
            .map(|&(seed, index)| {
                let mut rng = Rng::new(seed).substream(index as u64);
                let episode =
                    sample_episode(corpus, cfg.n, cfg.k, cfg.q, cfg.order_fix, &mut rng)?;
                let result = run_episode(weights, &episode, &options)?;
                Ok(EpisodeRun { seed, index, episode, result })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    runs.sort_by_key(|r| (r.seed, r.index));
    Ok(runs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub accuracy: f64,
    pub episode_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutput {
    pub provenance: Provenance,
    pub per_seed: Vec<SeedSummary>,
    pub mean_accuracy: f64,
    pub report: ClassificationReport,
}

/// Global-relation-id classification pairs pooled over all runs.
fn pooled_pairs(runs: &[EpisodeRun]) -> (Vec<usize>, Vec<usize>) {
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for run in runs {
        for (p, g) in run.result.predictions.iter().zip(&run.result.golds) {
            preds.push(run.episode.relation_ids[*p]);
            golds.push(run.episode.relation_ids[*g]);
        }
    }
    (preds, golds)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalOutput> {
    let corpus = load_corpus(&cfg.corpus)?;
    let weights = load_weights(&cfg.weights)?;
    if cfg.n > corpus.relation_names.len() {
        return Err(Error::Config(format!(
            "n = {} exceeds {} relations in the corpus",
            cfg.n,
            corpus.relation_names.len()
        )));
    }
    let runs = run_episodes(cfg, &corpus, &weights)?;
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let eps: Vec<f64> =
            runs.iter().filter(|r| r.seed == seed).map(|r| r.result.accuracy).collect();
        let accuracy = eps.iter().sum::<f64>() / eps.len() as f64;
        per_seed.push(SeedSummary { seed, accuracy, episode_accuracies: eps });
    }
    let mean_accuracy =
        per_seed.iter().map(|s| s.accuracy).sum::<f64>() / per_seed.len() as f64;
    let (preds, golds) = pooled_pairs(&runs);
    let report = classification_report(&preds, &golds, &corpus.relation_names)?;
    let out = EvalOutput { provenance: provenance(cfg), per_seed, mean_accuracy, report };
    write_json(&cfg.out_dir.join("eval.json"), &out)?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeOutput {
    pub provenance: Provenance,
    pub seed: u64,
    pub episode: usize,
    pub query: usize,
    pub report: crate::attribution::AttributionReport,
}

/// Attribution for one query of one episode; emits JSON plus per-query and
/// per-layer SVG heatmaps.
pub fn cmd_attribute(
    cfg: &RunConfig,
    seed: u64,
    episode_index: usize,
    query_index: usize,
) -> Result<AttributeOutput> {
    let corpus = load_corpus(&cfg.corpus)?;
    let weights = load_weights(&cfg.weights)?;
    let options = cfg.episode_options()?;
    if options.kind != FeatureKind::AttnHead {
        return Err(Error::Config(
            "attribution requires feature_kind = \"attn-head\"".into(),
        ));
    }
    let mut rng = Rng::new(seed).substream(episode_index as u64);
    let episode = sample_episode(&corpus, cfg.n, cfg.k, cfg.q, cfg.order_fix, &mut rng)?;
    let result = run_episode(&weights, &episode, &options)?;
    let queries: Vec<_> = episode.query_instances().collect();
    let (gold, inst) = *queries
        .get(query_index)
        .ok_or_else(|| Error::Config(format!("query index {query_index} out of range")))?;
    let trace = forward(&weights, &inst.tokens)?;
    let displays = inst.tokens.iter().map(|&t| corpus.vocab.display(t)).collect();
    let report = build_report(
        &result.probe,
        &result.query_features[query_index],
        &trace,
        &weights,
        inst.recall_pos,
        Some(gold),
        displays,
        1.0,
    )?;
    let out = AttributeOutput {
        provenance: provenance(cfg),
        seed,
        episode: episode_index,
        query: query_index,
        report,
    };
    let stem = format!("attr_s{seed}_e{episode_index}_q{query_index}");
    write_json(&cfg.out_dir.join(format!("{stem}.json")), &out)?;
    std::fs::write(
        cfg.out_dir.join(format!("{stem}.svg")),
        render_heatmap_svg(&out.report, false),
    )?;
    std::fs::write(
        cfg.out_dir.join(format!("{stem}_layers.svg")),
        render_heatmap_svg(&out.report, true),
    )?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyzeOutput {
    pub provenance: Provenance,
    pub alignment: AggregateAlignment,
    pub report: ClassificationReport,
    /// Median heads-for-95% concentration per relation name, over correct
    /// query predictions.
    pub concentration_median: BTreeMap<String, f64>,
    pub correlations: Option<BTreeMap<String, Option<f64>>>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<AnalyzeOutput> {
    let corpus = load_corpus(&cfg.corpus)?;
    let weights = load_weights(&cfg.weights)?;
    let options = cfg.episode_options()?;
    if options.kind != FeatureKind::AttnHead {
        return Err(Error::Config("analysis requires feature_kind = \"attn-head\"".into()));
    }
    let stats = match &cfg.stats {
        Some(p) => Some(ingest_stats(p)?),
        None => None,
    };
    let runs = run_episodes(cfg, &corpus, &weights)?;
    let mut alignment_stats = Vec::new();
    let mut concentrations: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in &runs {
        let profile = tfidf_profiles(&run.episode)?;
        for (qi, (gold, inst)) in run.episode.query_instances().enumerate() {
            let x = &run.result.query_features[qi];
            let direction = contrast_direction(&run.result.probe, x, 1.0)?;
            let predicted = direction.predicted;
            let correct = predicted == gold;
            let trace = forward(&weights, &inst.tokens)?;
            let token_map = crate::attribution::token_score(
                &run.result.probe,
                &trace,
                &weights,
                inst.recall_pos,
                &direction,
            )?;
            alignment_stats.push(lexical_alignment(
                &token_map.aggregated,
                &inst.tokens,
                &profile,
                predicted,
                correct,
            )?);
            if correct {
                let grid = head_score(&run.result.probe, x, &direction)?;
                if let Ok(c) = concentration(&grid, 0.95) {
                    concentrations
                        .entry(run.episode.relation_names[gold].clone())
                        .or_default()
                        .push(c as f64);
                }
            }
        }
    }
    let alignment = aggregate_alignment(&alignment_stats)?;
    let (preds, golds) = pooled_pairs(&runs);
    let report = classification_report(&preds, &golds, &corpus.relation_names)?;
    let concentration_median: BTreeMap<String, f64> =
        concentrations.into_iter().map(|(k, v)| (k, median(v))).collect();
    let correlations = match stats {
        Some(stats) => {
            let metric: BTreeMap<String, f64> =
                report.per_class.iter().map(|m| (m.name.clone(), m.f1)).collect();
            Some(correlate(&metric, &stats)?)
        }
        None => None,
    };
    let out = AnalyzeOutput {
        provenance: provenance(cfg),
        alignment,
        report,
        concentration_median,
        correlations,
    };
    write_json(&cfg.out_dir.join("analyze.json"), &out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Slot, Template};

    fn test_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_relations: 4,
            entities_per_relation: 6,
            cues_per_relation: 2,
            n_fillers: 8,
            examples_per_relation: 10,
            templates: vec![
                Template {
                    slots: vec![Slot::Filler, Slot::E1, Slot::Cue, Slot::Filler, Slot::E2],
                },
                Template {
                    slots: vec![Slot::Filler, Slot::E1, Slot::Filler, Slot::E2, Slot::Cue],
                },
            ],
            seed: 11,
        }
    }

    fn setup(dir: &Path) -> RunConfig {
        let spec = test_spec();
        let spec_path = dir.join("spec.json");
        std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
        let corpus_path = dir.join("corpus.jsonl");
        cmd_gen(&spec_path, &corpus_path).unwrap();
        let config = ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_ff: 96,
            vocab_size: 0,
            use_rope: false,
            norm_eps: 1e-6,
            max_seq_len: 128,
        };
        let weights_path = dir.join("weights.rtrc");
        cmd_plant(&spec_path, &config, &weights_path).unwrap();
        RunConfig {
            corpus: corpus_path,
            weights: weights_path,
            out_dir: dir.join("out"),
            n: 3,
            k: 3,
            q: 2,
            episodes: 2,
            seeds: vec![0, 1],
            m: 50,
            epochs: 120,
            ..RunConfig::default()
        }
    }

    #[test]
    fn gen_is_byte_identical_across_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let spec_path = dir.path().join("spec.json");
        std::fs::write(&spec_path, serde_json::to_string(&test_spec()).unwrap()).unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        cmd_gen(&spec_path, &a).unwrap();
        cmd_gen(&spec_path, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert!(cmd_gen(&dir.path().join("missing.json"), &a).is_err());
    }

    #[test]
    fn plant_writes_loadable_container() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        let bytes = std::fs::read(&cfg.weights).unwrap();
        assert_eq!(&bytes[..4], b"RTRC");
        let w = load_weights(&cfg.weights).unwrap();
        assert_eq!(w.config.n_layers, 2);
    }

    #[test]
    fn eval_runs_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        let out1 = cmd_eval(&cfg).unwrap();
        let bytes1 = std::fs::read(cfg.out_dir.join("eval.json")).unwrap();
        let out2 = cmd_eval(&cfg).unwrap();
        let bytes2 = std::fs::read(cfg.out_dir.join("eval.json")).unwrap();
        assert_eq!(bytes1, bytes2);
        assert_eq!(out1.mean_accuracy, out2.mean_accuracy);
        // Planted model plus cue-bearing corpus should classify well even
        // at this tiny scale.
        assert!(out1.mean_accuracy > 0.8, "accuracy {}", out1.mean_accuracy);
        // Worker count must not change results.
        let par = RunConfig { workers: 4, out_dir: dir.path().join("out_par"), ..cfg.clone() };
        let out3 = cmd_eval(&par).unwrap();
        assert_eq!(out1.per_seed[0].episode_accuracies, out3.per_seed[0].episode_accuracies);
        assert_eq!(out1.report.macro_f1, out3.report.macro_f1);
    }

    #[test]
    fn eval_rejects_oversized_n() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { n: 10, ..setup(dir.path()) };
        let err = cmd_eval(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn attribute_emits_json_and_svgs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        let out = cmd_attribute(&cfg, 0, 1, 2).unwrap();
        assert!(out.report.completeness.head_ok && out.report.completeness.token_ok);
        let stem = "attr_s0_e1_q2";
        let json1 = std::fs::read(cfg.out_dir.join(format!("{stem}.json"))).unwrap();
        let svg = std::fs::read_to_string(cfg.out_dir.join(format!("{stem}.svg"))).unwrap();
        let layers =
            std::fs::read_to_string(cfg.out_dir.join(format!("{stem}_layers.svg"))).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(layers.matches("<text x=\"4\"").count(), 2);
        cmd_attribute(&cfg, 0, 1, 2).unwrap();
        let json2 = std::fs::read(cfg.out_dir.join(format!("{stem}.json"))).unwrap();
        assert_eq!(json1, json2);
        assert!(cmd_attribute(&cfg, 0, 1, 99).is_err());
    }

    #[test]
    fn analyze_aggregates_and_handles_stats() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = setup(dir.path());
        let out = cmd_analyze(&cfg).unwrap();
        assert!(out.alignment.n_queries > 0);
        assert!(out.correlations.is_none());
        assert!(!out.concentration_median.is_empty());
        // Missing stats file is an explicit error.
        cfg.stats = Some(dir.path().join("nope.tsv"));
        assert!(cmd_analyze(&cfg).is_err());
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        let back = load_run_config(&path).unwrap();
        assert_eq!(back.n, 5);
        assert_eq!(back.seeds, vec![0, 1, 2, 3, 4]);
        let bad = RunConfig { n: 1, ..RunConfig::default() };
        assert!(bad.validate().is_err());
        let bad = RunConfig { feature_kind: "bogus".into(), ..RunConfig::default() };
        assert!(bad.validate().is_err());
        // Same config → same hash; different config → different hash.
        let p1 = provenance(&cfg);
        let p2 = provenance(&RunConfig::default());
        assert_eq!(p1.config_sha256, p2.config_sha256);
        let p3 = provenance(&RunConfig { n: 7, ..RunConfig::default() });
        assert_ne!(p1.config_sha256, p3.config_sha256);
    }
}
