use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rope::{text_position, Position4D};

use super::grammar::{grammar_words, words};
use super::PromptBundle;

pub const SCENE_MARKER: &str = "<scene>";
pub const LAYER_MARKER: &str = "<layer>";
pub const TYPE_MARKER: &str = "<type>";

/// Closed word list with fixed ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    pub fn new(words: impl IntoIterator<Item = impl Into<String>>) -> Result<Self> {
        let words: Vec<String> = words.into_iter().map(Into::into).collect();
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::invalid("Vocab", format!("duplicate word `{w}`")));
            }
        }
        Ok(Self { words, index })
    }

    /// Section markers followed by the caption grammar's words.
    pub fn grammar() -> Self {
        let markers = [SCENE_MARKER, LAYER_MARKER, TYPE_MARKER];
        Self::new(markers.into_iter().chain(grammar_words())).expect("grammar words are unique")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownToken { token: word.to_string() })
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }
}

/// Token span of one prompt part; `part` is 0 for the scene and type
/// sections and `i` for the caption of layer `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartSpan {
    pub start: usize,
    pub end: usize,
    pub part: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedPrompt {
    pub ids: Vec<u32>,
    pub spans: Vec<PartSpan>,
    pub positions: Vec<Position4D>,
}

impl TokenizedPrompt {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn part_of(&self, token: usize) -> usize {
        self.positions[token].f as usize
    }
}

/// Tokenize each section; every part opens with its section marker.
pub fn tokenize(bundle: &PromptBundle, vocab: &Vocab) -> Result<TokenizedPrompt> {
    bundle.validate()?;
    let mut ids = Vec::new();
    let mut spans = Vec::new();
    let mut positions = Vec::new();
    let mut push_part = |ids: &mut Vec<u32>, chunks: &[(&str, &str)], part: usize| -> Result<()> {
        let start = ids.len();
        for (marker, text) in chunks {
            ids.push(vocab.id(marker)?);
            for w in words(text) {
                ids.push(vocab.id(&w)?);
            }
        }
        spans.push(PartSpan {
            start,
            end: ids.len(),
            part,
        });
        positions.extend(std::iter::repeat_n(text_position(part), ids.len() - start));
        Ok(())
    };
    push_part(
        &mut ids,
        &[(SCENE_MARKER, &bundle.scene_description), (TYPE_MARKER, &bundle.type_section)],
        0,
    )?;
    for (i, cap) in bundle.layer_captions.iter().enumerate() {
        push_part(&mut ids, &[(LAYER_MARKER, cap)], i + 1)?;
    }
    Ok(TokenizedPrompt { ids, spans, positions })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(n: usize) -> PromptBundle {
        PromptBundle {
            scene_description: "a card with a solid white background".into(),
            layer_captions: (0..n).map(|i| format!("{} lines of red text at the top", ["two", "three", "one"][i % 3])).collect(),
            type_section: "card design".into(),
        }
    }

    #[test]
    fn spans_partition_tokens() {
        let v = Vocab::grammar();
        let t = tokenize(&bundle(3), &v).unwrap();
        let parts: Vec<usize> = t.spans.iter().map(|s| s.part).collect();
        assert_eq!(parts, vec![0, 1, 2, 3]);
        let mut cursor = 0;
        for s in &t.spans {
            assert_eq!(s.start, cursor);
            assert!(s.end > s.start);
            cursor = s.end;
            for p in &t.positions[s.start..s.end] {
                assert_eq!(*p, text_position(s.part));
            }
        }
        assert_eq!(cursor, t.len());
        assert!(t.positions[..t.spans[0].end].iter().all(|p| *p == Position4D::ORIGIN));
    }

    #[test]
    fn swapping_captions_moves_only_their_spans() {
        let v = Vocab::grammar();
        let mut b = bundle(3);
        b.layer_captions[2] = "a solid navy background".into();
        let before = tokenize(&b, &v).unwrap();
        b.layer_captions.swap(0, 2);
        let after = tokenize(&b, &v).unwrap();
        let ids = |t: &TokenizedPrompt, s: &PartSpan| t.ids[s.start..s.end].to_vec();
        // the caption of layer 1 now sits in part 3 and vice versa
        assert_eq!(ids(&before, &before.spans[1]), ids(&after, &after.spans[3]));
        assert_eq!(ids(&before, &before.spans[3]), ids(&after, &after.spans[1]));
        assert!(after.positions[after.spans[3].start..after.spans[3].end].iter().all(|p| p.f == 3));
        for k in [0, 2] {
            assert_eq!(ids(&before, &before.spans[k]), ids(&after, &after.spans[k]));
            assert_eq!(
                before.positions[before.spans[k].start..before.spans[k].end],
                after.positions[after.spans[k].start..after.spans[k].end]
            );
        }
    }

    #[test]
    fn unknown_word_reported() {
        let v = Vocab::grammar();
        let mut b = bundle(1);
        b.layer_captions[0] = "a glorious sunset".into();
        match tokenize(&b, &v) {
            Err(Error::UnknownToken { token }) => assert_eq!(token, "glorious"),
            other => panic!("{other:?}"),
        }
    }
}
