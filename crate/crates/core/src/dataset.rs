//! Fact records: synthetic generation and ingestion of ZsRE / COUNTERFACT
//! shaped JSON.
//!
//! Records carry token ids rather than text. Synthetic prompts place a
//! unique subject token inside filler context; ingested prompts map words to
//! ids with a seeded stable hash. Pre-edit predictions are captured with a
//! forward pass of the unedited network when a record is built.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::network::{forward, HookSet, NetworkError, ToyNetwork};

/// Shortest prompt the generators produce. Population z-scores of `n` values
/// are bounded by `sqrt(n − 1)`, so short prompts cannot clear the routing
/// threshold.
pub const MIN_PROMPT_LEN: usize = 8;

/// Locality subjects must stay below this cosine similarity to every edit
/// subject's embedding.
pub const LOCALITY_MAX_COSINE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("record {index}: missing field `{field}`")]
    SchemaError { index: usize, field: String },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    pub id: String,
    pub prompt_tokens: Vec<u32>,
    /// Position of the last subject token in the prompt.
    pub subject_token_index: usize,
    pub target_label: u32,
    /// Pre-edit prediction on the prompt.
    pub original_label: u32,
    pub rephrase_tokens: Vec<u32>,
    pub rephrase_subject_index: usize,
    pub locality_tokens: Vec<u32>,
    pub locality_subject_index: usize,
    /// Pre-edit prediction on the locality prompt.
    pub locality_reference_label: u32,
}

impl FactRecord {
    pub fn subject_token(&self) -> u32 {
        self.prompt_tokens[self.subject_token_index]
    }

    pub fn validate(&self) -> Result<(), String> {
        let checks = [
            ("prompt", &self.prompt_tokens, self.subject_token_index),
            ("rephrase", &self.rephrase_tokens, self.rephrase_subject_index),
            ("locality", &self.locality_tokens, self.locality_subject_index),
        ];
        for (name, toks, idx) in checks {
            if toks.len() < MIN_PROMPT_LEN {
                return Err(format!("{name} has {} tokens, need {MIN_PROMPT_LEN}", toks.len()));
            }
            if idx >= toks.len() {
                return Err(format!("{name} subject index {idx} out of bounds"));
            }
        }
        if self.target_label == self.original_label {
            return Err("target label equals the pre-edit prediction".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Token ids used; must not exceed the network's vocabulary.
    pub vocab_size: usize,
    pub prompt_len: usize,
    /// Fraction of context tokens resampled in the paraphrase, which is also
    /// the probability the subject span moves. 0 makes the paraphrase equal
    /// to the prompt.
    pub rephrase_noise: f64,
    pub seed: u64,
    /// Ids `[0, filler_tokens)` form the context pool; subjects come from the
    /// rest, so context never contains an edited subject.
    pub filler_tokens: usize,
    /// Subject span length; only its last token is unique.
    pub subject_span: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            prompt_len: 10,
            rephrase_noise: 0.5,
            seed: 0,
            filler_tokens: 1024,
            subject_span: 2,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self, n: usize, net: &ToyNetwork) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidConfig(m));
        if n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.vocab_size > net.config.vocab_size {
            return bad(format!(
                "vocab_size {} exceeds the network vocabulary {}",
                self.vocab_size, net.config.vocab_size
            ));
        }
        if self.vocab_size < self.prompt_len {
            return bad("vocab_size must be at least prompt_len".into());
        }
        if self.prompt_len < MIN_PROMPT_LEN {
            return bad(format!("prompt_len must be at least {MIN_PROMPT_LEN}"));
        }
        if self.subject_span == 0 || self.subject_span >= self.prompt_len {
            return bad("subject_span must be in [1, prompt_len)".into());
        }
        if !(0.0..=1.0).contains(&self.rephrase_noise) {
            return bad("rephrase_noise must lie in [0, 1]".into());
        }
        if self.filler_tokens == 0 || self.filler_tokens >= self.vocab_size {
            return bad("filler_tokens must be in [1, vocab_size)".into());
        }
        let pool = self.vocab_size - self.filler_tokens;
        if pool < 2 * n {
            return bad(format!(
                "{n} records need {} unique subject ids but only {pool} are available; raise vocab_size",
                2 * n
            ));
        }
        Ok(())
    }
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Builds a prompt of `len` tokens with `span` ending in `subject` at a random
/// position; returns the tokens and the subject index.
fn place_subject(
    rng: &mut ChaCha8Rng,
    context: &[u32],
    span: &[u32],
    start: usize,
) -> (Vec<u32>, usize) {
    let mut tokens = Vec::with_capacity(context.len() + span.len());
    tokens.extend_from_slice(&context[..start]);
    tokens.extend_from_slice(span);
    tokens.extend_from_slice(&context[start..]);
    let _ = rng;
    (tokens, start + span.len() - 1)
}

struct Draft {
    prompt: Vec<u32>,
    subject_index: usize,
    rephrase: Vec<u32>,
    rephrase_subject_index: usize,
    locality: Vec<u32>,
    locality_subject_index: usize,
    target_seed: u64,
}

fn cosine(a: &nalgebra::DVectorView<f64>, b: &nalgebra::DVectorView<f64>) -> f64 {
    a.dot(b) / (a.norm() * b.norm())
}

/// Generates `n` synthetic edit records for `net`.
pub fn generate_synthetic(net: &ToyNetwork, n: usize, cfg: &SyntheticConfig) -> Result<Vec<FactRecord>, DatasetError> {
    cfg.validate(n, net)?;
    let filler = cfg.filler_tokens as u32;
    let mut pool: Vec<u32> = (filler..cfg.vocab_size as u32).collect();
    pool.shuffle(&mut record_rng(cfg.seed, usize::MAX - 1));
    let (edit_subjects, rest) = pool.split_at(n);
    let mut spare = rest.iter().copied();

    // Locality subjects: next pool ids whose embeddings are far from every
    // edit subject.
    let emb = &net.embedding;
    let mut locality_subjects = Vec::with_capacity(n);
    let mut regenerated = 0usize;
    while locality_subjects.len() < n {
        let cand = spare.next().ok_or_else(|| {
            DatasetError::InvalidConfig("ran out of subject ids while avoiding locality collisions".into())
        })?;
        let c = emb.column(cand as usize);
        let collides = edit_subjects
            .par_iter()
            .any(|&s| cosine(&emb.column(s as usize), &c) >= LOCALITY_MAX_COSINE);
        if collides {
            regenerated += 1;
        } else {
            locality_subjects.push(cand);
        }
    }
    if regenerated > 0 {
        info!("regenerated {regenerated} locality subject(s) that collided with edit subjects");
    }

    let span_prefix = cfg.subject_span - 1;
    let ctx_len = cfg.prompt_len - cfg.subject_span;
    let drafts: Vec<Draft> = (0..n)
        .map(|i| {
            let mut rng = record_rng(cfg.seed, i);
            let mut span: Vec<u32> = (0..span_prefix).map(|_| rng.random_range(0..filler)).collect();
            span.push(edit_subjects[i]);
            let context: Vec<u32> = (0..ctx_len).map(|_| rng.random_range(0..filler)).collect();
            let start = rng.random_range(0..=ctx_len);
            let (prompt, subject_index) = place_subject(&mut rng, &context, &span, start);

            let re_context: Vec<u32> = context
                .iter()
                .map(|&t| {
                    if rng.random::<f64>() < cfg.rephrase_noise {
                        rng.random_range(0..filler)
                    } else {
                        t
                    }
                })
                .collect();
            let re_start = if rng.random::<f64>() < cfg.rephrase_noise {
                rng.random_range(0..=ctx_len)
            } else {
                start
            };
            let (rephrase, rephrase_subject_index) = place_subject(&mut rng, &re_context, &span, re_start);

            let mut loc_span: Vec<u32> = (0..span_prefix).map(|_| rng.random_range(0..filler)).collect();
            loc_span.push(locality_subjects[i]);
            let loc_context: Vec<u32> = (0..ctx_len).map(|_| rng.random_range(0..filler)).collect();
            let loc_start = rng.random_range(0..=ctx_len);
            let (locality, locality_subject_index) = place_subject(&mut rng, &loc_context, &loc_span, loc_start);
            Draft {
                prompt,
                subject_index,
                rephrase,
                rephrase_subject_index,
                locality,
                locality_subject_index,
                target_seed: rng.random(),
            }
        })
        .collect();

    let n_labels = net.config.n_labels as u32;
    let records: Result<Vec<FactRecord>, DatasetError> = drafts
        .into_par_iter()
        .enumerate()
        .map(|(i, d)| {
            let original = predict(net, &d.prompt)?;
            let locality_ref = predict(net, &d.locality)?;
            let mut trng = ChaCha8Rng::seed_from_u64(d.target_seed);
            // uniform over labels other than the original prediction
            let mut target = trng.random_range(0..n_labels - 1);
            if target >= original {
                target += 1;
            }
            Ok(FactRecord {
                id: format!("syn-{i:06}"),
                prompt_tokens: d.prompt,
                subject_token_index: d.subject_index,
                target_label: target,
                original_label: original,
                rephrase_tokens: d.rephrase,
                rephrase_subject_index: d.rephrase_subject_index,
                locality_tokens: d.locality,
                locality_subject_index: d.locality_subject_index,
                locality_reference_label: locality_ref,
            })
        })
        .collect();
    records
}

fn predict(net: &ToyNetwork, tokens: &[u32]) -> Result<u32, NetworkError> {
    Ok(forward(net, &HookSet::new(), tokens)?
        .prediction()
        .expect("full forward has logits"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemaKind {
    Zsre,
    Counterfact,
}

/// JSON field paths (dot-separated for nested objects) read from each record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaMapping {
    pub subject: String,
    pub prompt: String,
    pub rephrase: String,
    pub locality: String,
    pub target: String,
}

impl SchemaMapping {
    /// Field names of the EasyEdit splits.
    pub fn defaults(kind: SchemaKind) -> Self {
        let s = |x: &str| x.to_string();
        match kind {
            SchemaKind::Zsre => Self {
                subject: s("subject"),
                prompt: s("src"),
                rephrase: s("rephrase"),
                locality: s("loc"),
                target: s("alt"),
            },
            SchemaKind::Counterfact => Self {
                subject: s("subject"),
                prompt: s("prompt"),
                rephrase: s("rephrase_prompt"),
                locality: s("locality_prompt"),
                target: s("target_new"),
            },
        }
    }
}

/// Ingestion outcome; `records.len() + rejects.len()` equals the number of
/// input records.
#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub records: Vec<FactRecord>,
    pub rejects: Vec<(usize, String)>,
}

/// Seeded stable word hashing into a token range.
#[derive(Debug, Clone, Copy)]
pub struct WordHasher {
    pub seed: u64,
    pub vocab_size: usize,
}

impl WordHasher {
    fn hash(&self, salt: &str, text: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(salt.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn token(&self, word: &str) -> u32 {
        (self.hash("tok", word) % self.vocab_size as u64) as u32
    }

    pub fn label(&self, text: &str, n_labels: usize) -> u32 {
        (self.hash("label", text.trim()) % n_labels as u64) as u32
    }
}

/// Lowercased alphanumeric words.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

fn lookup<'a>(record: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(record, |v, key| v.get(key))
}

fn as_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Array(items) => items.first().and_then(as_text),
        Value::Object(map) => map.get("str").and_then(as_text),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn field(record: &Value, index: usize, path: &str) -> Result<String, DatasetError> {
    lookup(record, path)
        .and_then(as_text)
        .ok_or_else(|| DatasetError::SchemaError {
            index,
            field: path.to_string(),
        })
}

/// Last position of `subject` (as a word sequence) in `prompt`, falling back
/// to the last occurrence of the subject's final word.
fn subject_position(prompt: &[String], subject: &[String]) -> Option<usize> {
    let last = subject.last()?;
    if subject.len() <= prompt.len() {
        for start in (0..=prompt.len() - subject.len()).rev() {
            if prompt[start..start + subject.len()] == *subject {
                return Some(start + subject.len() - 1);
            }
        }
    }
    prompt.iter().rposition(|w| w == last)
}

/// Hashes words to ids and left-pads to [`MIN_PROMPT_LEN`] with distinct pad
/// tokens; returns ids and the shifted subject position.
fn tokenize(hasher: &WordHasher, ws: &[String], subject: Option<usize>) -> (Vec<u32>, Option<usize>) {
    let pad = MIN_PROMPT_LEN.saturating_sub(ws.len());
    let mut ids: Vec<u32> = (0..pad).map(|i| hasher.token(&format!("<pad{i}>"))).collect();
    ids.extend(ws.iter().map(|w| hasher.token(w)));
    (ids, subject.map(|s| s + pad))
}

fn parse_records(text: &str) -> Result<Vec<Value>, DatasetError> {
    let trimmed = text.trim_start();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    if trimmed.starts_with('[') {
        return Ok(serde_json::from_str(trimmed)?);
    }
    // JSON lines, or any whitespace-separated sequence of values
    serde_json::Deserializer::from_str(text)
        .into_iter::<Value>()
        .map(|v| v.map_err(DatasetError::from))
        .collect()
}

/// Reads a JSON array (or JSON-lines) file of ZsRE / COUNTERFACT records.
pub fn ingest_json(
    path: &Path,
    schema: &SchemaMapping,
    seed: u64,
    net: &ToyNetwork,
) -> Result<Ingested, DatasetError> {
    let text = fs::read_to_string(path)?;
    ingest_str(&text, schema, seed, net)
}

pub fn ingest_str(text: &str, schema: &SchemaMapping, seed: u64, net: &ToyNetwork) -> Result<Ingested, DatasetError> {
    let raw = parse_records(text)?;
    if raw.is_empty() {
        warn!("dataset is empty");
        return Ok(Ingested::default());
    }
    let hasher = WordHasher {
        seed,
        vocab_size: net.config.vocab_size,
    };
    let mut out = Ingested::default();
    for (index, rec) in raw.iter().enumerate() {
        let subject = field(rec, index, &schema.subject)?;
        let prompt = field(rec, index, &schema.prompt)?.replace("{}", &subject);
        let rephrase = field(rec, index, &schema.rephrase)?.replace("{}", &subject);
        let locality = field(rec, index, &schema.locality)?;
        let target = field(rec, index, &schema.target)?;

        let subj_w = words(&subject);
        let prompt_w = words(&prompt);
        let rephrase_w = words(&rephrase);
        let loc_w = words(&locality);
        if subj_w.is_empty() || loc_w.is_empty() {
            out.rejects.push((index, "empty subject or locality prompt".into()));
            continue;
        }
        let Some(p_idx) = subject_position(&prompt_w, &subj_w) else {
            out.rejects.push((index, "subject not found in prompt".into()));
            continue;
        };
        let Some(r_idx) = subject_position(&rephrase_w, &subj_w) else {
            out.rejects.push((index, "subject not found in rephrase".into()));
            continue;
        };
        let (prompt_tokens, p_idx) = tokenize(&hasher, &prompt_w, Some(p_idx));
        let (rephrase_tokens, r_idx) = tokenize(&hasher, &rephrase_w, Some(r_idx));
        let (locality_tokens, _) = tokenize(&hasher, &loc_w, None);
        let original_label = predict(net, &prompt_tokens)?;
        let target_label = hasher.label(&target, net.config.n_labels);
        if target_label == original_label {
            out.rejects.push((index, "target label equals the pre-edit prediction".into()));
            continue;
        }
        let locality_reference_label = predict(net, &locality_tokens)?;
        let id = lookup(rec, "case_id")
            .map(|v| v.to_string())
            .unwrap_or_else(|| index.to_string());
        out.records.push(FactRecord {
            id,
            subject_token_index: p_idx.expect("subject position present"),
            prompt_tokens,
            target_label,
            original_label,
            rephrase_subject_index: r_idx.expect("subject position present"),
            rephrase_tokens,
            locality_subject_index: locality_tokens.len() - 1,
            locality_tokens,
            locality_reference_label,
        });
    }
    info!(
        "ingested {} record(s), rejected {} of {}",
        out.records.len(),
        out.rejects.len(),
        raw.len()
    );
    for (i, why) in &out.rejects {
        warn!("record {i} rejected: {why}");
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[FactRecord]) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<FactRecord>, DatasetError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Subject token ids that occur more than once.
pub fn duplicate_subjects(records: &[FactRecord]) -> Vec<u32> {
    let mut seen = HashSet::new();
    let mut dups = Vec::new();
    for r in records {
        if !seen.insert(r.subject_token()) {
            dups.push(r.subject_token());
        }
    }
    dups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    fn net() -> ToyNetwork {
        ToyNetwork::new(NetworkConfig {
            d_model: 32,
            d_ffn: 64,
            n_blocks: 3,
            n_labels: 16,
            vocab_size: 600,
            seed: 1,
            ..NetworkConfig::default()
        })
        .unwrap()
    }

    fn cfg() -> SyntheticConfig {
        SyntheticConfig {
            vocab_size: 600,
            prompt_len: 10,
            rephrase_noise: 0.5,
            seed: 42,
            filler_tokens: 200,
            subject_span: 2,
        }
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let net = net();
        let a = generate_synthetic(&net, 50, &cfg()).unwrap();
        let b = generate_synthetic(&net, 50, &cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        for r in &a {
            r.validate().unwrap();
            assert_eq!(r.prompt_tokens.len(), 10);
            assert_eq!(r.rephrase_tokens[r.rephrase_subject_index], r.subject_token());
            assert!(r.subject_token() >= 200);
        }
        assert!(duplicate_subjects(&a).is_empty());
        let other = generate_synthetic(&net, 50, &SyntheticConfig { seed: 43, ..cfg() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn zero_noise_rephrase_equals_prompt() {
        let net = net();
        let recs = generate_synthetic(&net, 10, &SyntheticConfig { rephrase_noise: 0.0, ..cfg() }).unwrap();
        for r in recs {
            assert_eq!(r.rephrase_tokens, r.prompt_tokens);
            assert_eq!(r.rephrase_subject_index, r.subject_token_index);
            let key_a = net.token_key(r.prompt_tokens[r.subject_token_index], 1).unwrap();
            let key_b = net.token_key(r.rephrase_tokens[r.rephrase_subject_index], 1).unwrap();
            assert_eq!(key_a, key_b);
        }
    }

    #[test]
    fn locality_subjects_are_disjoint_and_dissimilar() {
        let net = net();
        let recs = generate_synthetic(&net, 100, &cfg()).unwrap();
        let edit: HashSet<u32> = recs.iter().map(|r| r.subject_token()).collect();
        for r in &recs {
            let loc = r.locality_tokens[r.locality_subject_index];
            assert!(!edit.contains(&loc));
            for &e in &edit {
                let c = cosine(&net.embedding.column(loc as usize), &net.embedding.column(e as usize));
                assert!(c < LOCALITY_MAX_COSINE);
            }
            let pred = predict(&net, &r.locality_tokens).unwrap();
            assert_eq!(pred, r.locality_reference_label);
        }
    }

    #[test]
    fn rejects_impossible_configs() {
        let net = net();
        assert!(matches!(
            generate_synthetic(&net, 0, &cfg()),
            Err(DatasetError::InvalidConfig(_))
        ));
        assert!(matches!(
            generate_synthetic(&net, 300, &cfg()),
            Err(DatasetError::InvalidConfig(_))
        ));
        assert!(matches!(
            generate_synthetic(&net, 5, &SyntheticConfig { prompt_len: 4, ..cfg() }),
            Err(DatasetError::InvalidConfig(_))
        ));
    }

    const ZSRE: &str = r#"[
      {"subject": "Watts Humphrey", "src": "What university did Watts Humphrey attend?",
       "rephrase": "What university did Watts Humphrey take part in?",
       "alt": "University of Michigan", "loc": "nq question: who played desmond doss father in hacksaw ridge",
       "loc_ans": "Hugo Weaving"}
    ]"#;

    #[test]
    fn ingests_zsre_record() {
        let net = net();
        let out = ingest_str(ZSRE, &SchemaMapping::defaults(SchemaKind::Zsre), 9, &net).unwrap();
        assert_eq!(out.records.len() + out.rejects.len(), 1);
        let r = out.records.first().expect("record accepted");
        assert_eq!(r.prompt_tokens.len(), 7.max(MIN_PROMPT_LEN));
        let h = WordHasher { seed: 9, vocab_size: 600 };
        assert_eq!(r.subject_token(), h.token("humphrey"));
        assert_eq!(r.rephrase_tokens[r.rephrase_subject_index], h.token("humphrey"));
        assert!(!r.locality_tokens.is_empty());
        // hash determinism
        let again = ingest_str(ZSRE, &SchemaMapping::defaults(SchemaKind::Zsre), 9, &net).unwrap();
        assert_eq!(out.records, again.records);
    }

    #[test]
    fn ingests_counterfact_record_and_reports_missing_fields() {
        let net = net();
        let cf = r#"{"case_id": 7, "subject": "Danielle Darrieux", "prompt": "The mother tongue of {} is",
                     "target_new": {"str": "English"}, "rephrase_prompt": "Danielle Darrieux spoke the language",
                     "locality_prompt": "Michel Rocard is a native speaker of"}"#;
        let out = ingest_str(cf, &SchemaMapping::defaults(SchemaKind::Counterfact), 1, &net).unwrap();
        assert_eq!(out.records.len() + out.rejects.len(), 1);
        if let Some(r) = out.records.first() {
            assert_eq!(r.id, "7");
        }
        let missing = r#"[{"subject": "x", "prompt": "x is"}]"#;
        match ingest_str(missing, &SchemaMapping::defaults(SchemaKind::Counterfact), 1, &net) {
            Err(DatasetError::SchemaError { index: 0, field }) => assert_eq!(field, "rephrase_prompt"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn empty_input_gives_empty_list() {
        let net = net();
        let out = ingest_str("  \n", &SchemaMapping::defaults(SchemaKind::Zsre), 0, &net).unwrap();
        assert!(out.records.is_empty() && out.rejects.is_empty());
    }

    #[test]
    fn missing_subject_is_rejected_not_dropped() {
        let net = net();
        let text = r#"[{"subject": "Nobody", "src": "Where is Paris located today?", "rephrase": "Paris is where?",
                        "alt": "France", "loc": "some other question here"}]"#;
        let out = ingest_str(text, &SchemaMapping::defaults(SchemaKind::Zsre), 0, &net).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.rejects.len(), 1);
    }

    #[test]
    fn jsonl_round_trip() {
        let net = net();
        let recs = generate_synthetic(&net, 5, &cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_jsonl(&p, &recs).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), recs);
    }
}
