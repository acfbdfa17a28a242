//! Synthetic relation corpus, fill-in-the-blanks prompt construction,
//! planted-circuit model weights, and episode sampling.
//!
//! The synthetic corpus makes every relation identifiable from disjoint
//! relation-specific cue tokens, and the planted model routes exactly that
//! cue signal through one designated attention head into a dedicated
//! residual subspace. Together they provide ground truth against which the
//! probing and attribution machinery can be checked.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{quantize_to_f32, LayerWeights, ModelConfig, ModelWeights};
use crate::numerics::{Rng, Tensor};

// Reserved role-marker and structural tokens.
pub const TOK_SYSTEM: u32 = 0;
pub const TOK_USER: u32 = 1;
pub const TOK_ASSISTANT: u32 = 2;
pub const TOK_BLANK: u32 = 3;
pub const TOK_INSTR: u32 = 4;
pub const TOK_SEP: u32 = 5;
pub const N_RESERVED: usize = 6;

/// One slot of a corpus text template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Filler,
    E1,
    Cue,
    E2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub slots: Vec<Slot>,
}

fn default_templates() -> Vec<Template> {
    use Slot::*;
    vec![
        Template { slots: vec![Filler, Filler, E1, Filler, Cue, Filler, E2, Filler] },
        Template { slots: vec![Filler, E1, Cue, Filler, E2, Filler, Cue] },
        Template { slots: vec![Filler, Filler, E1, Filler, Filler, E2, Filler, Cue, Filler] },
        Template { slots: vec![Filler, E1, Filler, Cue, Cue, E2, Filler] },
    ]
}

/// Generation parameters for the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_relations: usize,
    pub entities_per_relation: usize,
    pub cues_per_relation: usize,
    pub n_fillers: usize,
    pub examples_per_relation: usize,
    #[serde(default = "default_templates")]
    pub templates: Vec<Template>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_relations == 0
            || self.entities_per_relation < 2
            || self.cues_per_relation == 0
            || self.n_fillers == 0
            || self.examples_per_relation == 0
        {
            return Err(Error::Config(
                "synthetic spec requires n_relations ≥ 1, entities_per_relation ≥ 2, \
                 cues_per_relation ≥ 1, n_fillers ≥ 1, examples_per_relation ≥ 1"
                    .into(),
            ));
        }
        if self.templates.is_empty() {
            return Err(Error::Config("at least one template required".into()));
        }
        for t in &self.templates {
            let e1 = t.slots.iter().position(|&s| s == Slot::E1);
            let e2 = t.slots.iter().position(|&s| s == Slot::E2);
            match (e1, e2) {
                (Some(a), Some(b)) if a < b => {}
                _ => {
                    return Err(Error::Config(
                        "every template needs an E1 slot before an E2 slot".into(),
                    ))
                }
            }
            if !t.slots.contains(&Slot::Cue) {
                return Err(Error::Config("every template needs a cue slot".into()));
            }
        }
        if self.vocab_size() > u32::MAX as usize {
            return Err(Error::Config("vocabulary overflow".into()));
        }
        Ok(())
    }

    /// Entity spans alternate between 1 and 2 tokens, so each relation's
    /// entity pool holds two tokens per entity.
    pub fn entity_tokens_per_relation(&self) -> usize {
        self.entities_per_relation * 2
    }

    pub fn vocab_size(&self) -> usize {
        N_RESERVED
            + self.n_fillers
            + self.n_relations * (self.cues_per_relation + self.entity_tokens_per_relation())
    }

    fn filler_base(&self) -> usize {
        N_RESERVED
    }

    fn relation_base(&self, r: usize) -> usize {
        N_RESERVED
            + self.n_fillers
            + r * (self.cues_per_relation + self.entity_tokens_per_relation())
    }

    pub fn cue_token(&self, r: usize, i: usize) -> u32 {
        (self.relation_base(r) + i) as u32
    }

    pub fn is_cue_token(&self, tok: u32, r: usize) -> bool {
        let base = self.relation_base(r);
        (tok as usize) >= base && (tok as usize) < base + self.cues_per_relation
    }

    /// Relation whose cue set contains `tok`, if any.
    pub fn cue_relation(&self, tok: u32) -> Option<usize> {
        (0..self.n_relations).find(|&r| self.is_cue_token(tok, r))
    }

    fn entity_tokens(&self, r: usize, entity: usize) -> (u32, u32) {
        let base = self.relation_base(r) + self.cues_per_relation + entity * 2;
        (base as u32, (base + 1) as u32)
    }

    /// Display strings for every token id.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut displays =
            vec!["<sys>".to_string(), "<user>".into(), "<asst>".into(), "[_]".into(), "<fill-instr>".into(), "<sep>".into()];
        for i in 0..self.n_fillers {
            displays.push(format!("w{i}"));
        }
        for r in 0..self.n_relations {
            for i in 0..self.cues_per_relation {
                displays.push(format!("cue{r}_{i}"));
            }
            for e in 0..self.entity_tokens_per_relation() {
                displays.push(format!("ent{r}_{e}"));
            }
        }
        Vocabulary { displays }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    pub displays: Vec<String>,
}

impl Vocabulary {
    pub fn display(&self, tok: u32) -> String {
        self.displays
            .get(tok as usize)
            .cloned()
            .unwrap_or_else(|| format!("tok{tok}"))
    }
}

/// One annotated relation mention: raw text tokens with inclusive entity
/// spans. `e1` is the first-mentioned entity by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationExample {
    pub tokens: Vec<u32>,
    pub e1_span: (usize, usize),
    pub e2_span: (usize, usize),
    pub relation: usize,
    pub subject_is_e1: bool,
}

impl RelationExample {
    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.e1_span;
        let (b0, b1) = self.e2_span;
        if a0 > a1 || b0 > b1 || b1 >= self.tokens.len() || a1 >= self.tokens.len() {
            return Err(Error::Data("malformed entity spans".into()));
        }
        if a1 >= b0 {
            return Err(Error::Data("e1 span must precede e2 span".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateKind {
    TwoBlank,
    SingleBlank,
}

/// A fully built prompt with its recall position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptInstance {
    pub tokens: Vec<u32>,
    /// Recall position: last prompt position, immediately before where the
    /// recalled entity's first token would be generated.
    pub recall_pos: usize,
    /// Final token position of the e1 span available before `recall_pos`
    /// (revealed e1 in the continuation for two-blank prompts; the blank
    /// masking e1 in the quoted text for single-blank prompts).
    pub j_e1: usize,
    pub template: TemplateKind,
    pub relation: usize,
}

/// Builds the fill-in-the-blanks prompt for an example. With `order_fix`,
/// object-first examples get the single-blank variant (full text visible,
/// only the object masked); otherwise both entities are masked and the
/// continuation reveals e1, stopping right before e2.
pub fn build_prompt(example: &RelationExample, order_fix: bool) -> Result<PromptInstance> {
    example.validate()?;
    let text = &example.tokens;
    let (e1s, e1e) = example.e1_span;
    let (e2s, _) = example.e2_span;
    let two_blank = example.subject_is_e1 || !order_fix;

    let mut tokens = vec![TOK_SYSTEM, TOK_USER, TOK_INSTR];
    let quoted_base = tokens.len();
    let (j_e1, continuation_cut) = if two_blank {
        // Quoted text with both spans masked by single blanks.
        let mut i = 0;
        while i < text.len() {
            if i == example.e1_span.0 {
                tokens.push(TOK_BLANK);
                i = example.e1_span.1 + 1;
            } else if i == example.e2_span.0 {
                tokens.push(TOK_BLANK);
                i = example.e2_span.1 + 1;
            } else {
                tokens.push(text[i]);
                i += 1;
            }
        }
        tokens.push(TOK_SEP);
        tokens.push(TOK_ASSISTANT);
        // Continuation: original text up to (excluding) e2, e1 revealed.
        let base = tokens.len();
        (base + e1e, e2s)
    } else {
        // Quoted text with only the object (= e1, first-mentioned) masked.
        let mut i = 0;
        let mut blank_pos = 0;
        while i < text.len() {
            if i == example.e1_span.0 {
                blank_pos = tokens.len();
                tokens.push(TOK_BLANK);
                i = example.e1_span.1 + 1;
            } else {
                tokens.push(text[i]);
                i += 1;
            }
        }
        tokens.push(TOK_SEP);
        tokens.push(TOK_ASSISTANT);
        // Continuation: original text up to (excluding) the masked object.
        (blank_pos, e1s)
    };
    debug_assert!(quoted_base < tokens.len());
    tokens.extend_from_slice(&text[..continuation_cut]);
    let recall_pos = tokens.len() - 1;
    if j_e1 >= recall_pos {
        return Err(Error::Invariant("j_e1 must precede the recall position".into()));
    }
    Ok(PromptInstance {
        tokens,
        recall_pos,
        j_e1,
        template: if two_blank { TemplateKind::TwoBlank } else { TemplateKind::SingleBlank },
        relation: example.relation,
    })
}

/// A generated corpus with its relation names and token display table.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub examples: Vec<RelationExample>,
    pub relation_names: Vec<String>,
    pub vocab: Vocabulary,
}

/// Deterministic synthetic corpus: balanced labels, both entity orders at
/// equal rate, every relation identifiable from its cue tokens alone.
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut examples = Vec::with_capacity(spec.n_relations * spec.examples_per_relation);
    for r in 0..spec.n_relations {
        for i in 0..spec.examples_per_relation {
            let template = &spec.templates[rng.below(spec.templates.len())];
            let subject_is_e1 = i % 2 == 0;
            // Distinct subject/object entities from this relation's pool.
            let picks = rng.sample_indices(spec.entities_per_relation, 2);
            let first_entity = picks[0];
            let second_entity = picks[1];
            let mut tokens = Vec::new();
            let mut e1_span = (0, 0);
            let mut e2_span = (0, 0);
            for &slot in &template.slots {
                match slot {
                    Slot::Filler => {
                        tokens.push((spec.filler_base() + rng.below(spec.n_fillers)) as u32)
                    }
                    Slot::Cue => tokens.push(spec.cue_token(r, rng.below(spec.cues_per_relation))),
                    Slot::E1 | Slot::E2 => {
                        let entity = if slot == Slot::E1 { first_entity } else { second_entity };
                        let len = 1 + entity % 2;
                        let (t0, t1) = spec.entity_tokens(r, entity);
                        let start = tokens.len();
                        tokens.push(t0);
                        if len == 2 {
                            tokens.push(t1);
                        }
                        let span = (start, tokens.len() - 1);
                        if slot == Slot::E1 {
                            e1_span = span;
                        } else {
                            e2_span = span;
                        }
                    }
                }
            }
            examples.push(RelationExample { tokens, e1_span, e2_span, relation: r, subject_is_e1 });
        }
    }
    Ok(Corpus {
        examples,
        relation_names: (0..spec.n_relations).map(|r| format!("R{r}")).collect(),
        vocab: spec.vocabulary(),
    })
}

/// Layer and head index of the planted copy head for a config.
pub fn planted_head(config: &ModelConfig) -> (usize, usize) {
    (config.n_layers / 2, config.n_heads / 2)
}

/// Handcrafted weights in which cue tokens carry relation directions in a
/// dedicated residual subspace and one designated head copies that signal
/// to the recall position. All other heads write (near-)zero into the
/// relation subspace; every other pathway is small random noise.
pub fn plant_model(spec: &SyntheticSpec, config: &ModelConfig) -> Result<ModelWeights> {
    spec.validate()?;
    config.validate()?;
    if config.vocab_size < spec.vocab_size() {
        return Err(Error::Config(format!(
            "config vocab {} smaller than spec vocabulary {}",
            config.vocab_size,
            spec.vocab_size()
        )));
    }
    let r_count = spec.n_relations;
    // Coordinate layout: 0 = bias, 1 = cue marker, 2..2+R = relation
    // directions, remainder = token identity noise.
    if 2 + r_count > config.d_model || r_count > config.d_head {
        return Err(Error::Config(format!(
            "relation subspace needs {} residual coords and {} head dims",
            2 + r_count,
            r_count
        )));
    }
    let mut rng = Rng::new(spec.seed).substream(0xACE);
    let d = config.d_model;
    let noise_from = 2 + r_count;

    let mut embed = Tensor::zeros(vec![config.vocab_size, d]);
    for tok in 0..config.vocab_size {
        let row = embed.row_mut(tok);
        row[0] = 1.0;
        for v in row[noise_from..].iter_mut() {
            *v = rng.uniform(-0.05, 0.05);
        }
        if let Some(rel) = spec.cue_relation(tok as u32) {
            row[1] = 1.0;
            row[2 + rel] = 1.0;
        }
    }
    quantize_to_f32(&mut embed);

    let (l_star, h_star) = planted_head(config);
    let beta = 8.0;
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let mut wq = Tensor::zeros(vec![d, d]);
        let mut wk = Tensor::zeros(vec![d, d]);
        let mut wv = Tensor::zeros(vec![d, d]);
        let mut wo = Tensor::zeros(vec![d, d]);
        for h in 0..config.n_heads {
            let col = h * config.d_head;
            if l == l_star && h == h_star {
                // Query reads the bias coord, key reads the cue marker:
                // every position attends to cue tokens with a large margin.
                wq.set(0, col, beta);
                wk.set(1, col, beta);
                // Value/output path copies relation directions.
                for r in 0..r_count {
                    wv.set(2 + r, col + r, 1.0);
                    wo.set(col + r, 2 + r, 1.0);
                }
            } else {
                for i in 0..d {
                    for dd in 0..config.d_head {
                        wq.set(i, col + dd, rng.uniform(-0.05, 0.05));
                        wk.set(i, col + dd, rng.uniform(-0.05, 0.05));
                        wv.set(i, col + dd, rng.uniform(-0.02, 0.02));
                    }
                }
                for dd in 0..config.d_head {
                    for o in 0..d {
                        // Keep bystander value paths out of the relation subspace.
                        let v = if (2..noise_from).contains(&o) {
                            0.0
                        } else {
                            rng.uniform(-0.02, 0.02)
                        };
                        wo.set(col + dd, o, v);
                    }
                }
            }
        }
        let mut w_gate = Tensor::random(vec![d, config.d_ff], 0.02, &mut rng);
        let mut w_up = Tensor::random(vec![d, config.d_ff], 0.02, &mut rng);
        let mut w_down = Tensor::random(vec![config.d_ff, d], 0.02, &mut rng);
        for t in [&mut wq, &mut wk, &mut wv, &mut wo, &mut w_gate, &mut w_up, &mut w_down] {
            quantize_to_f32(t);
        }
        layers.push(LayerWeights {
            attn_norm: Tensor::new(vec![d], vec![1.0; d])?,
            wq,
            wk,
            wv,
            wo,
            mlp_norm: Tensor::new(vec![d], vec![1.0; d])?,
            w_gate,
            w_up,
            w_down,
        });
    }
    let mut unembed = Tensor::random(vec![d, config.vocab_size], 0.02, &mut rng);
    quantize_to_f32(&mut unembed);
    let weights = ModelWeights {
        config: *config,
        embed,
        layers,
        final_norm: Tensor::new(vec![d], vec![1.0; d])?,
        unembed,
    };
    weights.validate()?;
    Ok(weights)
}

/// n-way k-shot episode with disjoint support and query prompt sets.
#[derive(Debug, Clone)]
pub struct Episode {
    /// Global relation ids of the sampled classes (class id = index here).
    pub relation_ids: Vec<usize>,
    pub relation_names: Vec<String>,
    /// `support[class][0..k]`.
    pub support: Vec<Vec<PromptInstance>>,
    /// `query[class][0..q]`.
    pub query: Vec<Vec<PromptInstance>>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.relation_ids.len()
    }

    pub fn support_instances(&self) -> impl Iterator<Item = (usize, &PromptInstance)> {
        self.support
            .iter()
            .enumerate()
            .flat_map(|(c, v)| v.iter().map(move |p| (c, p)))
    }

    pub fn query_instances(&self) -> impl Iterator<Item = (usize, &PromptInstance)> {
        self.query
            .iter()
            .enumerate()
            .flat_map(|(c, v)| v.iter().map(move |p| (c, p)))
    }
}

/// Samples `n` relations and `k+q` examples per relation, both uniformly
/// without replacement, and builds prompts for all of them.
pub fn sample_episode(
    corpus: &Corpus,
    n: usize,
    k: usize,
    q: usize,
    order_fix: bool,
    rng: &mut Rng,
) -> Result<Episode> {
    let n_relations = corpus.relation_names.len();
    if n < 2 || n > n_relations {
        return Err(Error::Config(format!("n={n} outside 2..={n_relations}")));
    }
    let mut by_relation: Vec<Vec<usize>> = vec![Vec::new(); n_relations];
    for (i, ex) in corpus.examples.iter().enumerate() {
        by_relation[ex.relation].push(i);
    }
    let mut picked = rng.sample_indices(n_relations, n);
    picked.sort_unstable();
    let mut support = Vec::with_capacity(n);
    let mut query = Vec::with_capacity(n);
    for &rel in &picked {
        let pool = &by_relation[rel];
        if pool.len() < k + q {
            return Err(Error::Data(format!(
                "relation {rel} has {} examples, needs {}",
                pool.len(),
                k + q
            )));
        }
        let chosen = rng.sample_indices(pool.len(), k + q);
        let mut sup = Vec::with_capacity(k);
        let mut qry = Vec::with_capacity(q);
        for (i, &ci) in chosen.iter().enumerate() {
            let inst = build_prompt(&corpus.examples[pool[ci]], order_fix)?;
            if i < k {
                sup.push(inst);
            } else {
                qry.push(inst);
            }
        }
        support.push(sup);
        query.push(qry);
    }
    Ok(Episode {
        relation_ids: picked.clone(),
        relation_names: picked.iter().map(|&r| corpus.relation_names[r].clone()).collect(),
        support,
        query,
    })
}

// --- corpus file format (JSON lines) --------------------------------------

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    tokens: Vec<u32>,
    display: Vec<String>,
    e1_span: (usize, usize),
    e2_span: (usize, usize),
    relation: usize,
    relation_name: String,
    subject_is_e1: bool,
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in &corpus.examples {
        let line = CorpusLine {
            tokens: ex.tokens.clone(),
            display: ex.tokens.iter().map(|&t| corpus.vocab.display(t)).collect(),
            e1_span: ex.e1_span,
            e2_span: ex.e2_span,
            relation: ex.relation,
            relation_name: corpus.relation_names[ex.relation].clone(),
            subject_is_e1: ex.subject_is_e1,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut examples = Vec::new();
    let mut relation_names: Vec<String> = Vec::new();
    // Reserved structural tokens never appear in raw text lines, so seed
    // their display names up front.
    let mut displays: Vec<String> = vec![
        "<sys>".to_string(),
        "<user>".into(),
        "<asst>".into(),
        "[_]".into(),
        "<fill-instr>".into(),
        "<sep>".into(),
    ];
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("corpus line {}: {e}", lineno + 1)))?;
        if parsed.relation >= relation_names.len() {
            relation_names.resize(parsed.relation + 1, String::new());
        }
        relation_names[parsed.relation] = parsed.relation_name.clone();
        for (&tok, name) in parsed.tokens.iter().zip(&parsed.display) {
            let idx = tok as usize;
            if idx >= displays.len() {
                displays.resize(idx + 1, String::new());
            }
            displays[idx] = name.clone();
        }
        let ex = RelationExample {
            tokens: parsed.tokens,
            e1_span: parsed.e1_span,
            e2_span: parsed.e2_span,
            relation: parsed.relation,
            subject_is_e1: parsed.subject_is_e1,
        };
        ex.validate()?;
        examples.push(ex);
    }
    for (i, name) in displays.iter_mut().enumerate() {
        if name.is_empty() {
            *name = format!("tok{i}");
        }
    }
    Ok(Corpus { examples, relation_names, vocab: Vocabulary { displays } })
}
