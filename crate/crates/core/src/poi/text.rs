//! Category descriptions and the pluggable text embedder.

use mvgr_tensor::Tensor;

use crate::error::{Error, Result};
use crate::synth::CategoryVocab;

pub const DEFAULT_TEXT_DIM: usize = 64;

/// Maps text to a unit-norm vector. Equal text must give equal vectors.
pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Signed feature hashing of lowercase word unigrams and bigrams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedEmbedder {
    pub dim: usize,
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_TEXT_DIM }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl TextEmbedder for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        let tokens = tokenize(text);
        let mut add = |key: &str| {
            let h = fnv1a(key.as_bytes());
            let idx = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            acc[idx] += sign;
        };
        for t in &tokens {
            add(t);
        }
        for pair in tokens.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]));
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            acc[0] = 1.0;
            return acc;
        }
        acc.iter_mut().for_each(|v| *v /= norm);
        acc
    }
}

struct PrimaryTraits {
    demographics: &'static str,
    temporal: &'static str,
    spatial: &'static str,
}

const TRAITS: [PrimaryTraits; 6] = [
    PrimaryTraits {
        demographics: "shoppers, diners and tourists of all ages",
        temporal: "busy at lunch, in the evening and on weekends",
        spatial: "clustered along commercial streets near transit hubs",
    },
    PrimaryTraits {
        demographics: "local residents and families",
        temporal: "outbound trips in the morning and returns in the evening",
        spatial: "spread through housing blocks away from arterial roads",
    },
    PrimaryTraits {
        demographics: "shift workers, drivers and logistics staff",
        temporal: "sharp peaks at shift changes on working days",
        spatial: "located on the urban fringe near highways and rail yards",
    },
    PrimaryTraits {
        demographics: "farmers, villagers and weekend visitors",
        temporal: "low, flat activity with a midday bump and weekend leisure",
        spatial: "scattered across open land with sparse road coverage",
    },
    PrimaryTraits {
        demographics: "office workers and business visitors",
        temporal: "commuting peaks on weekday mornings and evenings",
        spatial: "concentrated in the central business district",
    },
    PrimaryTraits {
        demographics: "students, patients and staff",
        temporal: "steady daytime flows on weekdays with term-time variation",
        spatial: "campus sites embedded in residential neighborhoods",
    },
];

/// Five-part description of a secondary category: core function, hierarchy,
/// target demographics, temporal pattern and spatial context.
pub fn describe_category(vocab: &CategoryVocab, secondary: usize) -> Result<String> {
    if secondary >= vocab.n_secondary() {
        return Err(Error::Invalid(format!("unknown category {secondary}")));
    }
    let p = vocab.primary_of(secondary);
    let name = &vocab.secondary_names[secondary];
    let primary = &vocab.primary_names[p];
    let siblings: Vec<&str> = vocab
        .secondaries_of(p)
        .into_iter()
        .filter(|&s| s != secondary)
        .map(|s| vocab.secondary_names[s].as_str())
        .collect();
    let traits = &TRAITS[p % TRAITS.len()];
    let sib = if siblings.is_empty() {
        "no sibling categories".to_string()
    } else {
        format!("siblings {}", siblings.join(", "))
    };
    Ok(format!(
        "Core Function: {name} serves the urban role of {primary}.\n\
         Hierarchy: {name} is a secondary category under the primary category {primary}, with {sib}.\n\
         Target Demographics: {}.\n\
         Temporal Pattern: {}.\n\
         Spatial Context: {}.\n",
        traits.demographics, traits.temporal, traits.spatial
    ))
}

/// One embedded description row per secondary category.
pub fn category_text_features(vocab: &CategoryVocab, embedder: &dyn TextEmbedder) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = (0..vocab.n_secondary())
        .map(|s| describe_category(vocab, s).map(|t| embedder.embed(&t)))
        .collect::<Result<_>>()?;
    Ok(Tensor::from_rows(&rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
    }

    #[test]
    fn descriptions_are_deterministic_and_distinct() {
        let vocab = CategoryVocab::generate(6, 18).unwrap();
        let emb = HashedEmbedder::default();
        let feats = category_text_features(&vocab, &emb).unwrap();
        assert_eq!(describe_category(&vocab, 4).unwrap(), describe_category(&vocab, 4).unwrap());
        for s in 0..18 {
            let n: f64 = feats.row_slice(s).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            for t in (s + 1)..18 {
                assert!(cosine(feats.row_slice(s), feats.row_slice(t)) < 1.0 - 1e-9);
            }
        }
    }

    #[test]
    fn unknown_category_rejected() {
        let vocab = CategoryVocab::generate(2, 4).unwrap();
        assert!(describe_category(&vocab, 4).is_err());
    }

    #[test]
    fn template_has_five_parts() {
        let vocab = CategoryVocab::generate(6, 18).unwrap();
        let d = describe_category(&vocab, 0).unwrap();
        for key in ["Core Function", "Hierarchy", "Target Demographics", "Temporal Pattern", "Spatial Context"] {
            assert!(d.contains(key));
        }
    }

    #[test]
    fn empty_text_still_unit_norm() {
        let v = HashedEmbedder { dim: 8 }.embed("");
        assert_eq!(v.iter().map(|x| x * x).sum::<f64>(), 1.0);
    }
}
