//! Word-level tokenizer and a small transformer text encoder with an
//! extendable embedding table. New token rows (textual-inversion
//! placeholders) are appended past the base vocabulary and never disturb
//! existing rows.

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::nn::{Attention, Graph, LayerNorm, Linear, Param, Var};
use crate::{Error, Result};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
const SPECIALS: [&str; 2] = ["<pad>", "<bos>"];

/// Whitespace tokenizer over a fixed word list plus registered
/// placeholders. Unknown words are an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    placeholders: Vec<String>,
}

impl Tokenizer {
    pub fn new(words: Vec<String>) -> Tokenizer {
        Tokenizer { words, placeholders: Vec::new() }
    }

    /// The caption grammar vocabulary: attribute words plus "and".
    pub fn caption_grammar() -> Tokenizer {
        let mut words = Vec::new();
        for s in crate::scene::Size::ALL {
            words.push(s.word().to_string());
        }
        for c in crate::scene::Color::ALL {
            words.push(c.word().to_string());
        }
        for t in crate::scene::Texture::ALL {
            words.push(t.word().to_string());
        }
        for s in crate::scene::Shape::ALL {
            words.push(s.word().to_string());
        }
        words.push("and".to_string());
        Tokenizer::new(words)
    }

    /// Base vocabulary size (specials + words), excluding placeholders.
    pub fn base_vocab(&self) -> usize {
        SPECIALS.len() + self.words.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.base_vocab() + self.placeholders.len()
    }

    /// A copy with `names` registered as placeholder tokens (ids appended
    /// after the base vocabulary).
    pub fn with_placeholders(&self, names: &[String]) -> Tokenizer {
        let mut t = self.clone();
        t.placeholders = names.to_vec();
        t
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        if let Some(i) = SPECIALS.iter().position(|w| *w == word) {
            return Some(i);
        }
        if let Some(i) = self.words.iter().position(|w| w == word) {
            return Some(SPECIALS.len() + i);
        }
        self.placeholders
            .iter()
            .position(|w| w == word)
            .map(|i| self.base_vocab() + i)
    }

    /// Tokenizes to `[BOS, words..., PAD...]` of length `max_len`. The empty
    /// prompt (the unconditioned convention) becomes `[BOS, PAD...]`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        let mut ids = vec![BOS_ID];
        for word in text.split_whitespace() {
            let id = self
                .id_of(word)
                .ok_or_else(|| Error::UnknownWord { word: word.to_string() })?;
            ids.push(id);
        }
        if ids.len() > max_len {
            return Err(Error::InvalidConfig(format!(
                "prompt needs {} tokens, max_len is {max_len}",
                ids.len()
            )));
        }
        ids.resize(max_len, PAD_ID);
        Ok(ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub width: usize,
    pub layers: usize,
    pub max_len: usize,
    pub mlp_mult: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig { width: 48, layers: 2, max_len: 20, mlp_mult: 2 }
    }
}

struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp_in: Linear,
    mlp_out: Linear,
}

impl EncoderBlock {
    fn new(name: &str, d: usize, mlp_mult: usize, rng: &mut impl rand::Rng) -> EncoderBlock {
        EncoderBlock {
            ln1: LayerNorm::new(&format!("{name}.ln1"), d),
            attn: Attention::new(&format!("{name}.attn"), d, d, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), d),
            mlp_in: Linear::new(&format!("{name}.mlp_in"), d, d * mlp_mult, rng),
            mlp_out: Linear::new(&format!("{name}.mlp_out"), d * mlp_mult, d, rng),
        }
    }

    fn params(&self) -> Vec<Param> {
        [
            self.ln1.params(),
            self.attn.params(),
            self.ln2.params(),
            self.mlp_in.params(),
            self.mlp_out.params(),
        ]
        .concat()
    }

    fn forward(&self, g: &Graph, x: &Var, mask: &ArrayD<f64>, frozen: bool) -> Var {
        let normed = self.ln1.forward(g, x, frozen);
        let attended = self.attn.forward(g, &normed, &normed, Some(mask), frozen);
        let x = x.add(&attended);
        let normed = self.ln2.forward(g, &x, frozen);
        let h = self.mlp_out.forward(g, &self.mlp_in.forward(g, &normed, frozen).silu(), frozen);
        x.add(&h)
    }
}

/// Frozen-capable sequence encoder over the caption grammar. The embedding
/// table can be extended per-call with extra rows for learned tokens.
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    pub tokenizer: Tokenizer,
    pub token_embed: Param,
    pub pos_embed: Param,
    blocks: Vec<EncoderBlock>,
    final_ln: LayerNorm,
}

impl TextEncoder {
    pub fn new(tokenizer: Tokenizer, cfg: TextEncoderConfig, seed: u64) -> TextEncoder {
        let mut rng = crate::indexed_rng(seed, 0);
        let d = cfg.width;
        let v = tokenizer.base_vocab();
        let token_embed = Param::new(
            "text.token_embed",
            crate::nn::uniform_init(&mut rng, &[v, d], -0.02, 0.02),
        );
        let pos_embed = Param::new(
            "text.pos_embed",
            crate::nn::uniform_init(&mut rng, &[cfg.max_len, d], -0.02, 0.02),
        );
        let blocks = (0..cfg.layers)
            .map(|i| EncoderBlock::new(&format!("text.block{i}"), d, cfg.mlp_mult, &mut rng))
            .collect();
        let final_ln = LayerNorm::new("text.final_ln", d);
        TextEncoder { cfg, tokenizer, token_embed, pos_embed, blocks, final_ln }
    }

    pub fn params(&self) -> Vec<Param> {
        let mut out = vec![self.token_embed.clone(), self.pos_embed.clone()];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(self.final_ln.params());
        out
    }

    /// Additive attention mask hiding PAD keys: `[B, 1, L]` of 0 / -1e9.
    pub fn key_mask(ids: &[Vec<usize>]) -> ArrayD<f64> {
        let b = ids.len();
        let l = ids.first().map_or(0, |r| r.len());
        let mut m = Array3::<f64>::zeros((b, 1, l));
        for (bi, row) in ids.iter().enumerate() {
            for (li, &id) in row.iter().enumerate() {
                if id == PAD_ID {
                    m[[bi, 0, li]] = -1e9;
                }
            }
        }
        m.into_dyn()
    }

    /// Encodes padded id rows into the conditioning sequence `[B, L, D]`.
    /// `extra_rows`, when given, extends the embedding table: ids at or past
    /// the base vocabulary index into it.
    pub fn forward(
        &self,
        g: &Graph,
        ids: &[Vec<usize>],
        extra_rows: Option<&Var>,
        frozen: bool,
    ) -> Var {
        let l = self.cfg.max_len;
        for row in ids {
            assert_eq!(row.len(), l, "ids must be padded to max_len");
        }
        let base_table = g.leaf(&self.token_embed, frozen);
        let table = match extra_rows {
            Some(rows) => Var::concat(0, &[&base_table, rows]),
            None => base_table,
        };
        let mut x = Var::embedding(&table, ids);
        x = x.add_row_broadcast(&g.leaf(&self.pos_embed, frozen));
        let mask = Self::key_mask(ids);
        for block in &self.blocks {
            x = block.forward(g, &x, &mask, frozen);
        }
        self.final_ln.forward(g, &x, frozen)
    }

    /// Embedding row for a vocabulary word (used to seed inversion tokens).
    pub fn embedding_row(&self, word: &str) -> Result<ndarray::Array1<f64>> {
        let id = self
            .tokenizer
            .id_of(word)
            .ok_or_else(|| Error::UnknownWord { word: word.to_string() })?;
        if id >= self.tokenizer.base_vocab() {
            return Err(Error::UnknownWord { word: word.to_string() });
        }
        let table = self.token_embed.value();
        Ok(table
            .index_axis(ndarray::Axis(0), id)
            .to_owned()
            .into_dimensionality()
            .unwrap())
    }
}

/// Plain-array helper: builds an `ArrayD` of embedding rows without grads.
pub fn rows_to_array(rows: &[ndarray::Array1<f64>]) -> ArrayD<f64> {
    let d = rows[0].len();
    let mut out = ndarray::Array2::<f64>::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_round_trips_caption_words() {
        let t = Tokenizer::caption_grammar();
        let ids = t.tokenize("big red full circle and small blue empty square", 20).unwrap();
        assert_eq!(ids[0], BOS_ID);
        assert_eq!(ids.len(), 20);
        assert!(ids[10..].iter().all(|&i| i == PAD_ID));
        assert!(t.tokenize("", 20).unwrap()[1..].iter().all(|&i| i == PAD_ID));
        assert!(matches!(
            t.tokenize("purple circle", 20),
            Err(Error::UnknownWord { .. })
        ));
    }

    #[test]
    fn placeholders_extend_without_moving_base_ids() {
        let t = Tokenizer::caption_grammar();
        let t2 = t.with_placeholders(&["<inv0>".into(), "<inv1>".into()]);
        assert_eq!(t.id_of("circle"), t2.id_of("circle"));
        assert_eq!(t2.id_of("<inv0>"), Some(t.base_vocab()));
        assert_eq!(t2.id_of("<inv1>"), Some(t.base_vocab() + 1));
        assert_eq!(t.id_of("<inv0>"), None);
    }

    #[test]
    fn encoder_shapes_and_extended_table() {
        let tok = Tokenizer::caption_grammar();
        let cfg = TextEncoderConfig { width: 16, layers: 1, max_len: 8, mlp_mult: 2 };
        let enc = TextEncoder::new(tok.clone(), cfg, 3);
        let g = Graph::new();
        let ids = vec![tok.tokenize("big red full circle", 8).unwrap()];
        let out = enc.forward(&g, &ids, None, true);
        assert_eq!(out.shape(), &[1, 8, 16]);

        // Extended table: a placeholder id resolves into the extra rows.
        let tok2 = tok.with_placeholders(&["<inv0>".into()]);
        let ids2 = vec![tok2.tokenize("<inv0>", 8).unwrap()];
        let extra = Var::leaf(ndarray::ArrayD::zeros(IxDyn(&[1, 16])), true);
        let out2 = enc.forward(&g, &ids2, Some(&extra), true);
        assert_eq!(out2.shape(), &[1, 8, 16]);
        out2.mean_all().backward();
        // Gradient flows into the extra rows even with the encoder frozen.
        assert!(extra.grad().is_some());
        assert!(g.grad_of(&enc.token_embed).is_none());
    }

    #[test]
    fn adding_rows_never_changes_existing_rows() {
        let tok = Tokenizer::caption_grammar();
        let enc =
            TextEncoder::new(tok.clone(), TextEncoderConfig { width: 12, layers: 1, max_len: 6, mlp_mult: 2 }, 9);
        let before = enc.token_embed.value().clone();
        let _t2 = tok.with_placeholders(&["<a>".into(), "<b>".into()]);
        let after = enc.token_embed.value().clone();
        assert_eq!(before, after);
    }
}
