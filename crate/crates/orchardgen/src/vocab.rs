//! Prompt vocabulary and the frozen condition encoder.
//!
//! Prompts are short token lists ("a sks tree"). Each registered token owns a
//! fixed embedding row drawn once from a seeded generator; a prompt's
//! condition vector is the mean of its token rows. Nothing here is ever
//! trained — the table is immutable after creation, which is what lets
//! fine-tuning bind meaning to a rare token purely through the denoiser.

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use rand_distr::{Distribution, StandardNormal};
use std::fmt;

/// Ordered token list with a fixed `|V| x dim` embedding table and a
/// reserved-rare marker per token (candidates for subject identifiers).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptVocabulary {
    tokens: Vec<String>,
    reserved: Vec<bool>,
    dim: usize,
    table: Vec<f64>,
}

impl PromptVocabulary {
    /// Build a vocabulary with embeddings drawn from a standard normal.
    /// `tokens` pairs each string with its reserved-rare flag.
    pub fn new(tokens: Vec<(String, bool)>, dim: usize, rng: &mut Rng) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("vocabulary needs at least one token"));
        }
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        for (i, (tok, _)) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::invalid(format!("bad token {tok:?}")));
            }
            if tokens[..i].iter().any(|(other, _)| other == tok) {
                return Err(Error::invalid(format!("duplicate token {tok:?}")));
            }
        }
        let table = (0..tokens.len() * dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let (tokens, reserved) = tokens.into_iter().unzip();
        Ok(Self {
            tokens,
            reserved,
            dim,
            table,
        })
    }

    /// Reassemble a vocabulary from previously stored parts (checkpoint load).
    pub fn from_parts(
        tokens: Vec<String>,
        reserved: Vec<bool>,
        dim: usize,
        table: Vec<f64>,
    ) -> Result<Self> {
        if tokens.is_empty() || dim == 0 {
            return Err(Error::invalid("empty vocabulary"));
        }
        if reserved.len() != tokens.len() || table.len() != tokens.len() * dim {
            return Err(Error::invalid("vocabulary part lengths disagree"));
        }
        if table.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite embedding table"));
        }
        Ok(Self {
            tokens,
            reserved,
            dim,
            table,
        })
    }

    /// The pipeline's stock vocabulary: articles, scene nouns, the two apple
    /// colors, and the reserved identifier "sks".
    pub fn standard(dim: usize, seed: u64) -> Self {
        let tokens = [
            ("a", false),
            ("an", false),
            ("the", false),
            ("tree", false),
            ("apple", false),
            ("orchard", false),
            ("fruit", false),
            ("green", false),
            ("red", false),
            ("sks", true),
        ]
        .into_iter()
        .map(|(t, r)| (t.to_string(), r))
        .collect();
        Self::new(tokens, dim, &mut rng::from_seed(seed)).expect("stock vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn reserved_flags(&self) -> &[bool] {
        &self.reserved
    }

    /// Raw row-major `|V| x dim` table, exposed for serialization and for
    /// asserting the table never changes across training.
    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Content hash of the table; cheap before/after immutability checks.
    pub fn table_fingerprint(&self) -> u64 {
        rng::hash_f64s(&self.table)
    }

    pub fn index_of(&self, token: &str) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.table[index * self.dim..(index + 1) * self.dim]
    }
}

/// Frozen prompt embedding: the mean of the prompt's token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector {
    values: Vec<f64>,
    source_tokens: Vec<String>,
}

impl ConditionVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn source_tokens(&self) -> &[String] {
        &self.source_tokens
    }
}

impl fmt::Display for ConditionVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "\"{}\"", self.source_tokens.join(" "))
    }
}

/// Embed a prompt as the elementwise mean of its token rows.
pub fn embed_prompt(tokens: &[impl AsRef<str>], vocab: &PromptVocabulary) -> Result<ConditionVector> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty prompt"));
    }
    let mut values = vec![0.0; vocab.dim()];
    for token in tokens {
        let row = vocab.row(vocab.index_of(token.as_ref())?);
        for (v, r) in values.iter_mut().zip(row) {
            *v += r;
        }
    }
    let inv = 1.0 / tokens.len() as f64;
    for v in &mut values {
        *v *= inv;
    }
    Ok(ConditionVector {
        values,
        source_tokens: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
    })
}

/// The first reserved-rare token: the identifier a fine-tuned subject binds to.
pub fn select_pseudo_word(vocab: &PromptVocabulary) -> Result<&str> {
    vocab
        .tokens
        .iter()
        .zip(&vocab.reserved)
        .find(|(_, &r)| r)
        .map(|(t, _)| t.as_str())
        .ok_or_else(|| Error::invalid("vocabulary has no reserved rare token"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> PromptVocabulary {
        PromptVocabulary::standard(8, 1234)
    }

    #[test]
    fn rejects_degenerate_construction() {
        let mut r = rng::from_seed(0);
        assert!(PromptVocabulary::new(vec![], 4, &mut r).is_err());
        assert!(PromptVocabulary::new(vec![("a".into(), false)], 0, &mut r).is_err());
        assert!(
            PromptVocabulary::new(vec![("a".into(), false), ("a".into(), true)], 4, &mut r)
                .is_err()
        );
        assert!(PromptVocabulary::new(vec![("two words".into(), false)], 4, &mut r).is_err());
    }

    #[test]
    fn creation_is_seed_deterministic() {
        let a = PromptVocabulary::standard(8, 7);
        let b = PromptVocabulary::standard(8, 7);
        let c = PromptVocabulary::standard(8, 8);
        assert_eq!(a, b);
        assert_ne!(a.table(), c.table());
    }

    #[test]
    fn single_token_prompt_is_its_row() {
        let v = vocab();
        let idx = v.index_of("tree").unwrap();
        let cond = embed_prompt(&["tree"], &v).unwrap();
        assert_eq!(cond.values(), v.row(idx));
    }

    #[test]
    fn two_token_prompt_is_elementwise_mean() {
        let v = vocab();
        let cond = embed_prompt(&["a", "tree"], &v).unwrap();
        let a = v.row(v.index_of("a").unwrap());
        let t = v.row(v.index_of("tree").unwrap());
        for i in 0..v.dim() {
            assert!((cond.values()[i] - (a[i] + t[i]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identifier_changes_the_embedding() {
        let v = vocab();
        let with = embed_prompt(&["a", "sks", "tree"], &v).unwrap();
        let without = embed_prompt(&["a", "tree"], &v).unwrap();
        assert_ne!(with.values(), without.values());
    }

    #[test]
    fn embedding_is_order_insensitive() {
        let v = vocab();
        let ab = embed_prompt(&["a", "tree"], &v).unwrap();
        let ba = embed_prompt(&["tree", "a"], &v).unwrap();
        assert_eq!(ab.values(), ba.values());
    }

    #[test]
    fn unknown_token_error_names_it() {
        let v = vocab();
        let err = embed_prompt(&["a", "zebra"], &v).unwrap_err();
        assert!(err.to_string().contains("zebra"), "{err}");
    }

    #[test]
    fn pseudo_word_defaults_to_sks() {
        assert_eq!(select_pseudo_word(&vocab()).unwrap(), "sks");
    }

    #[test]
    fn pseudo_word_respects_custom_reserved_token() {
        let mut r = rng::from_seed(3);
        let v = PromptVocabulary::new(
            vec![("a".into(), false), ("zxq".into(), true)],
            4,
            &mut r,
        )
        .unwrap();
        assert_eq!(select_pseudo_word(&v).unwrap(), "zxq");
    }

    #[test]
    fn pseudo_word_requires_a_reserved_token() {
        let mut r = rng::from_seed(3);
        let v = PromptVocabulary::new(vec![("a".into(), false)], 4, &mut r).unwrap();
        assert!(select_pseudo_word(&v).is_err());
    }

    #[test]
    fn parts_roundtrip() {
        let v = vocab();
        let back = PromptVocabulary::from_parts(
            v.tokens().to_vec(),
            v.reserved_flags().to_vec(),
            v.dim(),
            v.table().to_vec(),
        )
        .unwrap();
        assert_eq!(v, back);
        assert_eq!(v.table_fingerprint(), back.table_fingerprint());
    }
}
