//! Sectioned prompts, the template expander, tokenization and the toy text
//! embedder.

mod bundle;
mod expand;
pub mod grammar;
mod plan;
mod vocab;

pub use bundle::PromptBundle;
pub use expand::{expand_prompt, PromptExpander, TemplateExpander};
pub use plan::{sample_plan, DesignPlan, Hints, MAX_PLAN_LAYERS};
pub use vocab::{tokenize, PartSpan, TokenizedPrompt, Vocab, LAYER_MARKER, SCENE_MARKER, TYPE_MARKER};

use crate::error::Result;
use crate::numeric::{Init, NdArray, ParamId, ParamStore, Real, Tape, Var};

/// Trainable lookup table from vocabulary ids to embedding vectors.
#[derive(Debug, Clone, Copy)]
pub struct TextEmbedder {
    pub table: ParamId,
    pub dim: usize,
}

impl TextEmbedder {
    pub fn new(store: &mut ParamStore<f32>, prefix: &str, vocab_len: usize, dim: usize, init: &mut Init) -> Result<Self> {
        let table = store.add(format!("{prefix}.table"), init.normal(&[vocab_len, dim], 1.0))?;
        Ok(Self { table, dim })
    }

    /// `[tokens, dim]` embeddings on the tape.
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, table: Var, ids: &[u32]) -> Result<Var> {
        let index: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        tape.gather_rows(table, &index)
    }
}

/// Token embeddings of a bundle with their part spans and positions.
#[derive(Debug, Clone)]
pub struct EncodedPrompt {
    pub embeddings: NdArray<f32>,
    pub tokens: TokenizedPrompt,
}

pub fn encode_prompt(
    bundle: &PromptBundle,
    vocab: &Vocab,
    store: &ParamStore<f32>,
    embedder: &TextEmbedder,
) -> Result<EncodedPrompt> {
    let tokens = tokenize(bundle, vocab)?;
    let mut tape = Tape::new();
    let table = tape.constant(store.get(embedder.table).clone());
    let e = embedder.embed(&mut tape, table, &tokens.ids)?;
    Ok(EncodedPrompt {
        embeddings: tape.value(e).clone(),
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;
    use crate::rope::Position4D;

    #[test]
    fn encoded_prompt_rows_match_table() {
        let vocab = Vocab::grammar();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let emb = TextEmbedder::new(&mut store, "text", vocab.len(), 8, &mut Init { rng: &mut rng }).unwrap();
        let b = expand_prompt("navy poster with yellow stars", 3, &TemplateExpander).unwrap();
        let enc = encode_prompt(&b, &vocab, &store, &emb).unwrap();
        assert_eq!(enc.embeddings.shape(), &[enc.tokens.len(), 8]);
        let table = store.get(emb.table).data();
        for (row, &id) in enc.tokens.ids.iter().enumerate() {
            assert_eq!(&enc.embeddings.data()[row * 8..row * 8 + 8], &table[id as usize * 8..id as usize * 8 + 8]);
        }
        let parts: std::collections::BTreeSet<usize> = enc.tokens.spans.iter().map(|s| s.part).collect();
        assert_eq!(parts.into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(enc.tokens.positions[0], Position4D::ORIGIN);
    }
}
