//! Planted-rationale corpora with a controllable spurious marker, and the
//! "skew k" predictor pre-training that induces degeneration.
//!
//! Vocabulary layout, for `c` classes and a rationale pool of `p` tokens per
//! class:
//!
//! ```text
//! [0, F)                    filler
//! [F + y·p, F + (y+1)·p)    rationale tokens of class y
//! [F + c·p + y]             spurious marker of class y
//! ```
//!
//! Every sequence reserves its first `lead_len(l)` positions for filler (and
//! possibly the marker); the rationale span is placed uniformly at random in
//! the remaining positions. Those leading positions are the degenerate view
//! the skewed predictor is pre-trained on.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rationalization::{argmax, Batch, ModelParams, Rationalizer, TokenSequence};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    /// Rationale tokens per class.
    pub rationale_pool: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Rationale span length r.
    pub rationale_len: usize,
    pub classes: usize,
    /// Probability b that an example carries the label-matching marker.
    pub bias: f64,
    /// Fraction of leading positions kept free of rationale tokens.
    pub lead_fraction: f64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub annotated_size: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            vocab_size: 40,
            rationale_pool: 4,
            min_len: 10,
            max_len: 10,
            rationale_len: 2,
            classes: 2,
            bias: 0.0,
            lead_fraction: 0.2,
            train_size: 500,
            dev_size: 100,
            test_size: 100,
            annotated_size: 100,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn filler_count(&self) -> usize {
        self.vocab_size
            .saturating_sub(self.classes * self.rationale_pool + self.classes)
    }

    pub fn rationale_token(&self, class: usize, k: usize) -> usize {
        self.filler_count() + class * self.rationale_pool + k
    }

    pub fn marker_token(&self, class: usize) -> usize {
        self.filler_count() + self.classes * self.rationale_pool + class
    }

    /// Class keyed by a rationale token, if it is one.
    pub fn rationale_class(&self, token: usize) -> Option<usize> {
        let f = self.filler_count();
        (token >= f && token < f + self.classes * self.rationale_pool)
            .then(|| (token - f) / self.rationale_pool)
    }

    pub fn marker_class(&self, token: usize) -> Option<usize> {
        let base = self.filler_count() + self.classes * self.rationale_pool;
        (token >= base && token < base + self.classes).then(|| token - base)
    }

    /// Number of leading positions reserved for the degenerate view.
    pub fn lead_len(&self, l: usize) -> usize {
        ((self.lead_fraction * l as f64).ceil() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.rationale_pool == 0 {
            return Err(Error::Config("rationale pool must be non-empty".into()));
        }
        if self.filler_count() < 2 {
            return Err(Error::Config(format!(
                "vocabulary of {} cannot hold filler, {} rationale and {} marker tokens",
                self.vocab_size,
                self.classes * self.rationale_pool,
                self.classes
            )));
        }
        if !(0.0..=1.0).contains(&self.bias) {
            return Err(Error::Config(format!(
                "bias must lie in [0, 1], got {}",
                self.bias
            )));
        }
        if !(self.lead_fraction > 0.0 && self.lead_fraction < 1.0) {
            return Err(Error::Config("lead fraction must lie in (0, 1)".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("need 0 < min_len <= max_len".into()));
        }
        if self.rationale_len == 0 || self.rationale_len >= self.min_len {
            return Err(Error::Config(
                "rationale span must be shorter than every sequence".into(),
            ));
        }
        for l in self.min_len..=self.max_len {
            if self.lead_len(l) + self.rationale_len > l {
                return Err(Error::Config(format!(
                    "length {l} cannot fit a lead window of {} plus a span of {}",
                    self.lead_len(l),
                    self.rationale_len
                )));
            }
        }
        Ok(())
    }

    fn sample_example(&self, rng: &mut ChaCha8Rng) -> TokenSequence {
        let l = rng.gen_range(self.min_len..=self.max_len);
        let label = rng.gen_range(0..self.classes);
        let filler = self.filler_count();
        let mut tokens: Vec<usize> = (0..l).map(|_| rng.gen_range(0..filler)).collect();
        let lead = self.lead_len(l);
        let start = rng.gen_range(lead..=l - self.rationale_len);
        let mut gold_mask = vec![0u8; l];
        for t in start..start + self.rationale_len {
            tokens[t] = self.rationale_token(label, rng.gen_range(0..self.rationale_pool));
            gold_mask[t] = 1;
        }
        if rng.gen_bool(self.bias) {
            tokens[rng.gen_range(0..lead)] = self.marker_token(label);
        }
        TokenSequence {
            tokens,
            label,
            gold_mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<TokenSequence>,
    pub dev: Vec<TokenSequence>,
    pub test: Vec<TokenSequence>,
    pub annotated: Vec<TokenSequence>,
}

pub const SPLITS: [&str; 4] = ["train", "dev", "test", "annotated"];

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&[TokenSequence]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            "annotated" => Some(&self.annotated),
            _ => None,
        }
    }

    /// SHA-256 over the JSONL encoding of every split, in split order.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for name in SPLITS {
            h.update(name.as_bytes());
            for e in self.split(name).unwrap_or_default() {
                h.update(serde_json::to_vec(e)?);
                h.update(b"\n");
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Write `<split>.jsonl` files plus `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for name in SPLITS {
            write_jsonl(
                &dir.join(format!("{name}.jsonl")),
                self.split(name).unwrap_or_default(),
            )?;
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            content_hash: self.content_hash()?,
            files: SPLITS.iter().map(|s| format!("{s}.jsonl")).collect(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Load a directory written by [`Corpus::write`], verifying the hash.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let load = |s: &str| read_jsonl(&dir.join(format!("{s}.jsonl")));
        let corpus = Corpus {
            spec: manifest.spec,
            train: load("train")?,
            dev: load("dev")?,
            test: load("test")?,
            annotated: load("annotated")?,
        };
        let actual = corpus.content_hash()?;
        if actual != manifest.content_hash {
            return Err(Error::InvalidInput(format!(
                "corpus hash mismatch: manifest {} vs content {actual}",
                manifest.content_hash
            )));
        }
        Ok(corpus)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: CorpusSpec,
    pub content_hash: String,
    pub files: Vec<String>,
}

pub fn write_jsonl(path: &Path, examples: &[TokenSequence]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TokenSequence>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Build all four splits. No token sequence appears twice anywhere.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut draw = |n: usize| -> Result<Vec<TokenSequence>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * n + 1000 {
                return Err(Error::Config(
                    "corpus space too small for the requested split sizes".into(),
                ));
            }
            let e = spec.sample_example(&mut rng);
            if seen.insert(e.tokens.clone()) {
                out.push(e);
            }
        }
        Ok(out)
    };
    Ok(Corpus {
        spec: spec.clone(),
        train: draw(spec.train_size)?,
        dev: draw(spec.dev_size)?,
        test: draw(spec.test_size)?,
        annotated: draw(spec.annotated_size)?,
    })
}

/// Held-out accuracy of single-feature decision stumps, used as a
/// generation-time self-check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StumpCheck {
    /// Best stump over span-relative token positions.
    pub span_accuracy: f64,
    /// Best stump over filler-relative token positions.
    pub filler_accuracy: f64,
}

/// Fit categorical stumps (token value → majority label) on `fit`, pick the
/// feature with the best fit accuracy, and score it on `held_out`.
pub fn stump_check(
    spec: &CorpusSpec,
    fit: &[TokenSequence],
    held_out: &[TokenSequence],
) -> StumpCheck {
    let span_feature = |e: &TokenSequence, k: usize| -> Option<usize> {
        e.gold_mask
            .iter()
            .position(|&g| g == 1)
            .map(|s| e.tokens[s + k])
    };
    let filler_feature = |e: &TokenSequence, k: usize| -> Option<usize> {
        e.tokens
            .iter()
            .zip(&e.gold_mask)
            .filter(|(t, g)| **g == 0 && spec.marker_class(**t).is_none())
            .map(|(t, _)| *t)
            .nth(k)
    };
    let min_filler = spec.min_len - spec.rationale_len - 1;
    StumpCheck {
        span_accuracy: best_stump(spec, fit, held_out, spec.rationale_len, span_feature),
        filler_accuracy: best_stump(spec, fit, held_out, min_filler.max(1), filler_feature),
    }
}

fn best_stump(
    spec: &CorpusSpec,
    fit: &[TokenSequence],
    held_out: &[TokenSequence],
    features: usize,
    feature: impl Fn(&TokenSequence, usize) -> Option<usize>,
) -> f64 {
    let c = spec.classes;
    let v = spec.vocab_size;
    let mut best = (-1.0, 0.0);
    for k in 0..features {
        let mut counts = vec![vec![0usize; c]; v];
        let mut prior = vec![0usize; c];
        for e in fit {
            prior[e.label] += 1;
            if let Some(tok) = feature(e, k) {
                counts[tok][e.label] += 1;
            }
        }
        let fallback = argmax_usize(&prior);
        let rule: Vec<usize> = counts
            .iter()
            .map(|row| {
                if row.iter().sum::<usize>() == 0 {
                    fallback
                } else {
                    argmax_usize(row)
                }
            })
            .collect();
        let score = |data: &[TokenSequence]| {
            let hits = data
                .iter()
                .filter(|e| feature(e, k).map_or(fallback, |t| rule[t]) == e.label)
                .count();
            hits as f64 / data.len().max(1) as f64
        };
        let fit_acc = score(fit);
        if fit_acc > best.0 {
            best = (fit_acc, score(held_out));
        }
    }
    best.1
}

fn argmax_usize(row: &[usize]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewSpec {
    /// Predictor pre-training epochs k; 0 disables skewing.
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for SkewSpec {
    fn default() -> Self {
        SkewSpec {
            epochs: 0,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Mask showing only the leading positions of `e`.
pub fn degenerate_view(spec: &CorpusSpec, e: &TokenSequence) -> Vec<u8> {
    let lead = spec.lead_len(e.len());
    (0..e.len()).map(|t| u8::from(t < lead)).collect()
}

/// Predictor accuracy when each example is shown through `view(e)`.
pub fn view_accuracy(
    model: &Rationalizer,
    params: &ModelParams,
    examples: &[TokenSequence],
    view: impl Fn(&TokenSequence) -> Vec<u8>,
) -> Result<f64> {
    let mut frozen = params.clone();
    frozen.generator.set_frozen(true);
    frozen.predictor.set_frozen(true);
    let mut hits = 0;
    for chunk in examples.chunks(128) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let batch = Batch::new(&refs)?;
        let mut tape = Tape::new();
        let bindings = model.bind(&mut tape, &frozen)?;
        let masks = view_steps(&mut tape, &batch, chunk, &view)?;
        let z = model.mask_input(&mut tape, &bindings, &batch, &masks)?;
        let lp = model.predict(&mut tape, &bindings, &z)?;
        let c = model.config.classes;
        let data = tape.data(lp);
        hits += chunk
            .iter()
            .enumerate()
            .filter(|(b, e)| argmax(&data[b * c..(b + 1) * c]) == e.label)
            .count();
    }
    Ok(hits as f64 / examples.len().max(1) as f64)
}

fn view_steps(
    tape: &mut Tape,
    batch: &Batch,
    chunk: &[TokenSequence],
    view: &impl Fn(&TokenSequence) -> Vec<u8>,
) -> Result<Vec<crate::tensor::Var>> {
    let views: Vec<Vec<u8>> = chunk.iter().map(view).collect();
    (0..batch.max_len())
        .map(|t| {
            let col = views
                .iter()
                .map(|v| v.get(t).copied().unwrap_or(0) as f64)
                .collect();
            Ok(tape.constant(Tensor::matrix(chunk.len(), 1, col)?))
        })
        .collect()
}

/// Pre-train the predictor alone for `skew.epochs` epochs on the degenerate
/// view of `train`. The generator is never touched.
pub fn skew_pretrain(
    model: &Rationalizer,
    params: &mut ModelParams,
    corpus_spec: &CorpusSpec,
    train: &[TokenSequence],
    skew: &SkewSpec,
) -> Result<()> {
    if skew.epochs == 0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(skew.seed);
    let mut opt = Adam::new(&params.predictor, skew.optimizer);
    let gen_frozen = params.generator.is_frozen();
    params.generator.set_frozen(true);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let result = (|| {
        for _ in 0..skew.epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks(skew.batch_size.max(1)) {
                let chunk: Vec<TokenSequence> = idx.iter().map(|&i| train[i].clone()).collect();
                let refs: Vec<&TokenSequence> = chunk.iter().collect();
                let batch = Batch::new(&refs)?;
                let mut tape = Tape::new();
                let bindings = model.bind(&mut tape, params)?;
                let masks = view_steps(&mut tape, &batch, &chunk, &|e| {
                    degenerate_view(corpus_spec, e)
                })?;
                let z = model.mask_input(&mut tape, &bindings, &batch, &masks)?;
                let lp = model.predict(&mut tape, &bindings, &z)?;
                let ce = model.cross_entropy(&mut tape, lp, &batch.labels)?;
                tape.backward(ce)?;
                let grads = tape.grads_of(&bindings.predictor);
                opt.step(&mut params.predictor, &grads)?;
            }
        }
        Ok(())
    })();
    params.generator.set_frozen(gen_frozen);
    result
}
