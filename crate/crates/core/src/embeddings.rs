//! Subword-augmented CBOW word embeddings over a UAS corpus.
//!
//! Tokens in user agent strings ("Macintosh", "537.36", "FBAV") are not
//! natural-language words, so off-the-shelf embedding models do not apply.
//! Instead each word is represented by the mean of its character n-gram
//! bucket vectors (plus a whole-word vector when the word is frequent
//! enough), trained with a continuous-bag-of-words objective and negative
//! sampling. Subword sharing is what makes "Mac" land near "Macintosh".

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::binfmt;
use crate::preprocess::TokenizedUas;

pub const EMBEDDING_MAGIC: &[u8] = b"UASEMB1";

/// Word vector dimensionality used by the parser models.
pub const DEFAULT_DIM: usize = 40;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("no word in the corpus reaches min_word_count={0}")]
    EmptyCorpus(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an embedding model file (bad magic)")]
    BadMagic,
    #[error("malformed embedding model file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub window: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub negative_samples: usize,
    pub bucket_count: usize,
    pub min_word_count: usize,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            ngram_min: 3,
            ngram_max: 6,
            window: 5,
            epochs: 5,
            learning_rate: 0.05,
            negative_samples: 5,
            bucket_count: 1 << 20,
            min_word_count: 2,
            seed: 0,
        }
    }
}

impl EmbeddingConfig {
    fn validate(&self) {
        assert!(self.dim >= 1);
        assert!(self.ngram_min <= self.ngram_max && self.ngram_min >= 1);
        assert!(self.window >= 1);
        assert!(self.bucket_count >= 1);
        assert!(self.min_word_count >= 1);
    }
}

/// Trained embedding model: the frequent-word vocabulary, one vector per
/// vocabulary word, and one vector per hashed n-gram bucket.
pub struct EmbeddingModel {
    pub config: EmbeddingConfig,
    vocab: Vec<String>,
    vocab_index: HashMap<String, usize>,
    /// |vocab| x dim, row-major.
    word_vectors: Vec<f32>,
    /// bucket_count x dim, row-major.
    ngram_vectors: Vec<f32>,
}

impl std::fmt::Debug for EmbeddingModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingModel")
            .field("dim", &self.config.dim)
            .field("vocab_len", &self.vocab.len())
            .field("bucket_count", &self.config.bucket_count)
            .finish()
    }
}

/// A UAS as the models consume it: a fixed seq_len x dim matrix where rows
/// beyond the token count are zero, with a mask telling them apart.
#[derive(Debug, Clone, PartialEq)]
pub struct UasMatrix {
    pub values: Vec<f32>,
    pub seq_len: usize,
    pub dim: usize,
    pub mask: Vec<bool>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over the n-gram bytes, reduced mod bucket_count. Fixed so model
/// files are bit-exact across platforms.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// The hashed bucket ids of a word's character n-grams. The word is wrapped
/// in "<" and ">" markers first, so prefix and suffix n-grams are distinct
/// from interior ones. Repeated substrings contribute once per occurrence.
pub fn subword_buckets(word: &str, config: &EmbeddingConfig) -> Vec<usize> {
    let padded: Vec<char> = std::iter::once('<')
        .chain(word.chars())
        .chain(std::iter::once('>'))
        .collect();
    let mut out = Vec::new();
    for n in config.ngram_min..=config.ngram_max {
        if n > padded.len() {
            break;
        }
        for start in 0..=(padded.len() - n) {
            let gram: String = padded[start..start + n].iter().collect();
            out.push((fnv1a64(gram.as_bytes()) % config.bucket_count as u64) as usize);
        }
    }
    out
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Trains CBOW embeddings with negative sampling. Single-threaded and fully
/// seeded: the same corpus, config and seed give a bit-identical model.
pub fn train_embeddings(
    corpus: &[TokenizedUas],
    config: &EmbeddingConfig,
) -> Result<EmbeddingModel, EmbeddingError> {
    config.validate();
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for uas in corpus {
        for tok in &uas.tokens {
            *counts.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    let mut vocab: Vec<(&str, u64)> = counts
        .iter()
        .filter(|(_, c)| **c >= config.min_word_count as u64)
        .map(|(w, c)| (*w, *c))
        .collect();
    if vocab.is_empty() {
        return Err(EmbeddingError::EmptyCorpus(config.min_word_count));
    }
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let words: Vec<String> = vocab.iter().map(|(w, _)| w.to_string()).collect();
    let vocab_index: HashMap<String, usize> = words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), i))
        .collect();
    let dim = config.dim;
    let vlen = words.len();

    let word_ngrams: Vec<Vec<usize>> = words
        .iter()
        .map(|w| subword_buckets(w, config))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bound = 1.0 / dim as f64;
    let mut uniform_init = |len: usize| -> Vec<f32> {
        (0..len)
            .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * bound) as f32)
            .collect()
    };
    let mut word_vectors = uniform_init(vlen * dim);
    let mut ngram_vectors = uniform_init(config.bucket_count * dim);
    let mut output_vectors = vec![0.0f32; vlen * dim];

    // Unigram^0.75 cumulative distribution for negative sampling.
    let mut cumulative = Vec::with_capacity(vlen);
    let mut total = 0.0f64;
    for (_, c) in &vocab {
        total += (*c as f64).powf(0.75);
        cumulative.push(total);
    }

    let lines: Vec<Vec<usize>> = corpus
        .iter()
        .map(|uas| {
            uas.tokens
                .iter()
                .filter_map(|t| vocab_index.get(t.as_str()).copied())
                .collect()
        })
        .collect();

    let lr = config.learning_rate as f32;
    let mut hidden = vec![0.0f32; dim];
    let mut grad_hidden = vec![0.0f32; dim];

    for _epoch in 0..config.epochs {
        for line in &lines {
            for (pos, &center) in line.iter().enumerate() {
                let reach = rng.random_range(1..=config.window);
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(line.len().saturating_sub(1));
                let mut row_count = 0usize;
                hidden.fill(0.0);
                for ctx_pos in lo..=hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let w = line[ctx_pos];
                    let row = &word_vectors[w * dim..(w + 1) * dim];
                    for (h, v) in hidden.iter_mut().zip(row) {
                        *h += v;
                    }
                    row_count += 1;
                    for &b in &word_ngrams[w] {
                        let row = &ngram_vectors[b * dim..(b + 1) * dim];
                        for (h, v) in hidden.iter_mut().zip(row) {
                            *h += v;
                        }
                        row_count += 1;
                    }
                }
                if row_count == 0 {
                    continue;
                }
                let inv = 1.0 / row_count as f32;
                for h in hidden.iter_mut() {
                    *h *= inv;
                }

                grad_hidden.fill(0.0);
                for k in 0..=config.negative_samples {
                    let (target, label) = if k == 0 {
                        (center, 1.0f32)
                    } else {
                        (sample_negative(&cumulative, total, center, &mut rng), 0.0)
                    };
                    let out_row = &mut output_vectors[target * dim..(target + 1) * dim];
                    let mut dot = 0.0f32;
                    for (h, o) in hidden.iter().zip(out_row.iter()) {
                        dot += h * o;
                    }
                    let err_lr = lr * (label - sigmoid(dot));
                    for ((g, o), h) in grad_hidden.iter_mut().zip(out_row.iter_mut()).zip(&hidden)
                    {
                        *g += err_lr * *o;
                        *o += err_lr * *h;
                    }
                }

                for g in grad_hidden.iter_mut() {
                    *g *= inv;
                }
                for ctx_pos in lo..=hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let w = line[ctx_pos];
                    let row = &mut word_vectors[w * dim..(w + 1) * dim];
                    for (v, g) in row.iter_mut().zip(&grad_hidden) {
                        *v += g;
                    }
                    for &b in &word_ngrams[w] {
                        let row = &mut ngram_vectors[b * dim..(b + 1) * dim];
                        for (v, g) in row.iter_mut().zip(&grad_hidden) {
                            *v += g;
                        }
                    }
                }
            }
        }
    }

    let model = EmbeddingModel {
        config: config.clone(),
        vocab: words,
        vocab_index,
        word_vectors,
        ngram_vectors,
    };
    debug_assert!(model.all_finite(), "non-finite vector after training");
    Ok(model)
}

fn sample_negative(
    cumulative: &[f64],
    total: f64,
    center: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    for _ in 0..10 {
        let u = rng.random::<f64>() * total;
        let idx = cumulative.partition_point(|c| *c < u).min(cumulative.len() - 1);
        if idx != center {
            return idx;
        }
    }
    // Degenerate vocabularies (a single dominant word) fall through here.
    center
}

impl EmbeddingModel {
    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn vocab_words(&self) -> &[String] {
        &self.vocab
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vocab_index.contains_key(word)
    }

    pub fn all_finite(&self) -> bool {
        self.word_vectors.iter().all(|v| v.is_finite())
            && self.ngram_vectors.iter().all(|v| v.is_finite())
    }

    /// The vector for one word: mean of its n-gram bucket vectors plus the
    /// whole-word vector when in vocabulary. Out-of-vocabulary words compose
    /// from n-grams alone, so lookups never fail.
    pub fn embed_word(&self, word: &str) -> Vec<f32> {
        let dim = self.config.dim;
        let mut sum = vec![0.0f32; dim];
        let mut n = 0usize;
        for b in subword_buckets(word, &self.config) {
            let row = &self.ngram_vectors[b * dim..(b + 1) * dim];
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
            n += 1;
        }
        if let Some(&idx) = self.vocab_index.get(word) {
            let row = &self.word_vectors[idx * dim..(idx + 1) * dim];
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
            n += 1;
        }
        if n > 0 {
            let inv = 1.0 / n as f32;
            for s in sum.iter_mut() {
                *s *= inv;
            }
        }
        sum
    }

    /// Embeds a tokenized UAS into the standard 50 x dim matrix.
    pub fn embed_uas(&self, uas: &TokenizedUas) -> UasMatrix {
        self.embed_uas_with_len(uas, crate::preprocess::DEFAULT_MAX_TOKENS)
    }

    /// As [`embed_uas`](Self::embed_uas) with an explicit sequence length.
    /// Rows past the token count stay zero with a false mask entry.
    pub fn embed_uas_with_len(&self, uas: &TokenizedUas, seq_len: usize) -> UasMatrix {
        let dim = self.config.dim;
        let mut values = vec![0.0f32; seq_len * dim];
        let mut mask = vec![false; seq_len];
        for (i, tok) in uas.tokens.iter().take(seq_len).enumerate() {
            let v = self.embed_word(tok);
            values[i * dim..(i + 1) * dim].copy_from_slice(&v);
            mask[i] = true;
        }
        UasMatrix {
            values,
            seq_len,
            dim,
            mask,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbeddingError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), EmbeddingError> {
        let c = &self.config;
        binfmt::write_magic(w, EMBEDDING_MAGIC)?;
        binfmt::write_u32(w, c.dim as u32)?;
        binfmt::write_u32(w, c.ngram_min as u32)?;
        binfmt::write_u32(w, c.ngram_max as u32)?;
        binfmt::write_u32(w, c.window as u32)?;
        binfmt::write_u32(w, c.epochs as u32)?;
        binfmt::write_f64(w, c.learning_rate)?;
        binfmt::write_u32(w, c.negative_samples as u32)?;
        binfmt::write_u64(w, c.bucket_count as u64)?;
        binfmt::write_u32(w, c.min_word_count as u32)?;
        binfmt::write_u64(w, c.seed)?;
        binfmt::write_u64(w, self.vocab.len() as u64)?;
        for (i, word) in self.vocab.iter().enumerate() {
            binfmt::write_string(w, word)?;
            binfmt::write_u32(w, i as u32)?;
        }
        binfmt::write_f32_slice(w, &self.word_vectors)?;
        binfmt::write_f32_slice(w, &self.ngram_vectors)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, EmbeddingError> {
        if !binfmt::check_magic(r, EMBEDDING_MAGIC)? {
            return Err(EmbeddingError::BadMagic);
        }
        let config = EmbeddingConfig {
            dim: binfmt::read_u32(r)? as usize,
            ngram_min: binfmt::read_u32(r)? as usize,
            ngram_max: binfmt::read_u32(r)? as usize,
            window: binfmt::read_u32(r)? as usize,
            epochs: binfmt::read_u32(r)? as usize,
            learning_rate: binfmt::read_f64(r)?,
            negative_samples: binfmt::read_u32(r)? as usize,
            bucket_count: binfmt::read_u64(r)? as usize,
            min_word_count: binfmt::read_u32(r)? as usize,
            seed: binfmt::read_u64(r)?,
        };
        let vlen = binfmt::read_u64(r)? as usize;
        let mut vocab = Vec::with_capacity(vlen);
        let mut vocab_index = HashMap::with_capacity(vlen);
        for expected in 0..vlen {
            let word = binfmt::read_string(r)?;
            let idx = binfmt::read_u32(r)? as usize;
            if idx != expected {
                return Err(EmbeddingError::Format(format!(
                    "vocab index {idx} out of order (expected {expected})"
                )));
            }
            vocab_index.insert(word.clone(), idx);
            vocab.push(word);
        }
        let word_vectors = binfmt::read_f32_vec(r, vlen * config.dim)?;
        let ngram_vectors = binfmt::read_f32_vec(r, config.bucket_count * config.dim)?;
        Ok(Self {
            config,
            vocab,
            vocab_index,
            word_vectors,
            ngram_vectors,
        })
    }
}

/// Cosine similarity between two equal-length vectors; 0 when either is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let mut dot = 0.0f32;
    let mut na = 0.0f32;
    let mut nb = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{tokenize, PreprocessConfig, RawUas};

    fn small_config() -> EmbeddingConfig {
        EmbeddingConfig {
            dim: 16,
            bucket_count: 1 << 12,
            epochs: 2,
            seed: 42,
            ..EmbeddingConfig::default()
        }
    }

    fn toy_corpus() -> Vec<TokenizedUas> {
        let cfg = PreprocessConfig::default();
        [
            "Mozilla 5.0 ( Macintosh Intel Mac OS X 10.15.7 )",
            "Mozilla 5.0 ( Windows NT 10.0 Win64 x64 )",
            "Mozilla 5.0 ( Macintosh Intel Mac OS X 12.6 )",
            "Mozilla 5.0 ( Linux Android 12 ) Chrome 105.0.0.0",
        ]
        .iter()
        .cycle()
        .take(40)
        .map(|s| tokenize(&RawUas::new(*s), &cfg))
        .collect()
    }

    #[test]
    fn trained_vectors_have_configured_dim_and_stay_finite() {
        let cfg = small_config();
        let model = train_embeddings(&toy_corpus(), &cfg).unwrap();
        assert!(model.all_finite());
        for word in model.vocab_words() {
            assert_eq!(model.embed_word(word).len(), cfg.dim);
        }
    }

    #[test]
    fn vocabulary_respects_min_word_count() {
        let cfg = PreprocessConfig::default();
        let corpus = vec![
            tokenize(&RawUas::new("alpha beta alpha"), &cfg),
            tokenize(&RawUas::new("alpha gamma"), &cfg),
        ];
        let model = train_embeddings(
            &corpus,
            &EmbeddingConfig {
                dim: 4,
                bucket_count: 256,
                min_word_count: 2,
                epochs: 1,
                seed: 1,
                ..EmbeddingConfig::default()
            },
        )
        .unwrap();
        assert!(model.contains("alpha"));
        assert!(!model.contains("beta"));
        assert!(!model.contains("gamma"));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let err = train_embeddings(&[], &small_config()).unwrap_err();
        assert!(matches!(err, EmbeddingError::EmptyCorpus(_)));
    }

    #[test]
    fn oov_words_compose_from_ngrams() {
        let model = train_embeddings(&toy_corpus(), &small_config()).unwrap();
        let v = model.embed_word("Mac1ntosh-like-thing");
        assert_eq!(v.len(), 16);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn mac_and_macintosh_share_ngram_buckets() {
        let cfg = small_config();
        let a = subword_buckets("Mac", &cfg);
        let b = subword_buckets("Macintosh", &cfg);
        assert!(
            a.iter().any(|x| b.contains(x)),
            "expected shared buckets (e.g. the 'Mac' trigram)"
        );
    }

    #[test]
    fn same_seed_gives_bit_identical_models() {
        let cfg = small_config();
        let corpus = toy_corpus();
        let m1 = train_embeddings(&corpus, &cfg).unwrap();
        let m2 = train_embeddings(&corpus, &cfg).unwrap();
        let mut b1 = Vec::new();
        let mut b2 = Vec::new();
        m1.write_to(&mut b1).unwrap();
        m2.write_to(&mut b2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let model = train_embeddings(&toy_corpus(), &small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        model.save(&path).unwrap();
        let loaded = EmbeddingModel::load(&path).unwrap();
        let mut original = Vec::new();
        let mut reloaded = Vec::new();
        model.write_to(&mut original).unwrap();
        loaded.write_to(&mut reloaded).unwrap();
        assert_eq!(original, reloaded);
        assert_eq!(model.embed_word("Macintosh"), loaded.embed_word("Macintosh"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTMODEL-at-all").unwrap();
        assert!(matches!(
            EmbeddingModel::load(&path),
            Err(EmbeddingError::BadMagic)
        ));
    }

    #[test]
    fn embed_uas_masks_and_padding() {
        let model = train_embeddings(&toy_corpus(), &small_config()).unwrap();
        let cfg = PreprocessConfig::default();

        let empty = model.embed_uas(&tokenize(&RawUas::new(""), &cfg));
        assert_eq!(empty.mask.iter().filter(|m| **m).count(), 0);
        assert!(empty.values.iter().all(|v| *v == 0.0));

        let three = model.embed_uas(&tokenize(&RawUas::new("a b c"), &cfg));
        assert_eq!(three.mask.iter().filter(|m| **m).count(), 3);
        assert_eq!(&three.mask[..3], &[true, true, true]);
        for row in 3..50 {
            assert!(three.values[row * 16..(row + 1) * 16].iter().all(|v| *v == 0.0));
        }

        let full_text = (0..60).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let full = model.embed_uas(&tokenize(&RawUas::new(&full_text), &cfg));
        assert!(full.mask.iter().all(|m| *m));
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[1.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-6);
        assert!(cosine(&[1.0, 0.0], &[0.0, 1.0]).abs() < 1e-6);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }
}
