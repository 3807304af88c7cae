//! Caption encoding: a hash-bucket tokenizer feeding a learned embedding
//! table. Captions map to a fixed-length context of `text_tokens` vectors;
//! missing positions (and the empty caption) use the learned null embedding.

use ndarray::Array2;

use crate::nn::{Graph, GraphParams, ParamStore, Var};
use crate::num::Scalar;

use super::BackboneConfig;

/// Fixed-width caption context.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    /// `(text_tokens, text_dim)` vectors.
    pub vectors: Array2<f32>,
    pub is_null: bool,
    /// Bucket ids of the tokens actually present (≤ `text_tokens`).
    pub tokens: Vec<usize>,
}

/// FNV-1a hash of a lowercased word, reduced to a bucket id.
fn bucket(word: &str, buckets: usize) -> usize {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        hash ^= b.to_ascii_lowercase() as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (hash % buckets as u64) as usize
}

/// Whitespace tokenizer over alphanumeric words, truncated to the context
/// length.
pub fn tokenize(caption: &str, cfg: &BackboneConfig) -> Vec<usize> {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .take(cfg.text_tokens)
        .map(|w| bucket(w, cfg.text_buckets))
        .collect()
}

/// Detached (value-level) caption embedding; deterministic in the caption.
pub fn embed_text(caption: &str, params: &ParamStore<f32>, cfg: &BackboneConfig) -> TextEmbedding {
    let tokens = tokenize(caption, cfg);
    let table = params.get("text.table");
    let null = params.get("text.null");
    let mut vectors = Array2::<f32>::zeros((cfg.text_tokens, cfg.text_dim));
    for slot in 0..cfg.text_tokens {
        match tokens.get(slot) {
            Some(&id) => {
                for d in 0..cfg.text_dim {
                    vectors[[slot, d]] = table[[id, d]];
                }
            }
            None => {
                for d in 0..cfg.text_dim {
                    vectors[[slot, d]] = null[[d]];
                }
            }
        }
    }
    TextEmbedding {
        vectors,
        is_null: tokens.is_empty(),
        tokens,
    }
}

/// Differentiable caption context `(text_tokens, text_dim)` built from token
/// ids; gradients flow into the embedding table and the null vector.
pub fn text_context_graph<T: Scalar>(
    g: &mut Graph<T>,
    params: &GraphParams,
    tokens: &[usize],
    cfg: &BackboneConfig,
) -> Var {
    let table = params.get("text.table");
    let null = params.get("text.null");
    let n = tokens.len().min(cfg.text_tokens);
    let pad = cfg.text_tokens - n;
    if n == 0 {
        return g.repeat_rows(null, cfg.text_tokens);
    }
    let present = g.select_rows(table, &tokens[..n]);
    if pad == 0 {
        return present;
    }
    let padding = g.repeat_rows(null, pad);
    g.concat(present, padding, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_backbone;

    fn cfg() -> BackboneConfig {
        BackboneConfig::micro()
    }

    #[test]
    fn empty_caption_is_null() {
        let params = init_backbone::<f32>(&cfg(), 1).unwrap();
        let e = embed_text("", &params.store, &cfg());
        assert!(e.is_null);
        let null = params.store.get("text.null");
        for slot in 0..cfg().text_tokens {
            for d in 0..cfg().text_dim {
                assert_eq!(e.vectors[[slot, d]], null[[d]]);
            }
        }
    }

    #[test]
    fn deterministic_embedding() {
        let params = init_backbone::<f32>(&cfg(), 1).unwrap();
        let a = embed_text("a red circle moving left", &params.store, &cfg());
        let b = embed_text("a red circle moving left", &params.store, &cfg());
        assert_eq!(a, b);
        assert!(!a.is_null);
    }

    #[test]
    fn template_captions_have_distinct_bucket_multisets() {
        use crate::synthdata::{ColorName, ShapeKind};
        let cfg = cfg();
        let mut captions = Vec::new();
        for color in ColorName::FOREGROUND {
            for shape in ShapeKind::ALL {
                for dir in ["left", "right", "up", "down", "up and left"] {
                    captions.push(format!("a {} {} moving {dir}", color.name(), shape.name()));
                }
            }
        }
        assert!(captions.len() >= 100);
        let mut seen = std::collections::HashSet::new();
        for cap in &captions {
            let mut multiset = tokenize(cap, &cfg);
            multiset.sort_unstable();
            assert!(
                seen.insert(multiset.clone()),
                "bucket multiset collision for caption {cap:?}: {multiset:?}"
            );
        }
    }

    #[test]
    fn graph_context_matches_detached_embedding() {
        let cfg = cfg();
        let params = init_backbone::<f32>(&cfg, 1).unwrap();
        let caption = "a cyan triangle moving down";
        let detached = embed_text(caption, &params.store, &cfg);
        let mut g = Graph::<f32>::new();
        let gp = crate::nn::register_store(&mut g, &params.store, false, "");
        let ctx = text_context_graph(&mut g, &gp, &detached.tokens, &cfg);
        let value = g.value(ctx);
        for slot in 0..cfg.text_tokens {
            for d in 0..cfg.text_dim {
                assert_eq!(value[[slot, d]], detached.vectors[[slot, d]]);
            }
        }
    }
}
