use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::Rng;

use super::grammar::GRAMMAR_VERSION;
use super::plan::{sample_plan, Hints, MAX_PLAN_LAYERS};
use super::PromptBundle;

/// Turns a short request into a sectioned prompt with `n_layers` captions.
///
/// Implementations backed by a language model can be plugged in here; they
/// must return a bundle with exactly `n_layers` non-empty captions.
pub trait PromptExpander {
    fn expand(&self, user_input: &str, n_layers: usize) -> Result<PromptBundle>;
}

/// Rule-based expander over the caption grammar. Output depends only on the
/// input text, the layer count and the grammar version.
#[derive(Debug, Clone, Default)]
pub struct TemplateExpander;

impl TemplateExpander {
    fn seed(user_input: &str, n_layers: usize) -> u64 {
        let mut h = Sha256::new();
        h.update(GRAMMAR_VERSION.as_bytes());
        h.update((n_layers as u64).to_le_bytes());
        h.update(user_input.trim().to_lowercase().as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

impl PromptExpander for TemplateExpander {
    fn expand(&self, user_input: &str, n_layers: usize) -> Result<PromptBundle> {
        if user_input.trim().is_empty() {
            return Err(Error::invalid("expand_prompt", "empty input"));
        }
        if n_layers > MAX_PLAN_LAYERS {
            return Err(Error::invalid(
                "expand_prompt",
                format!("at most {MAX_PLAN_LAYERS} layers are supported, got {n_layers}"),
            ));
        }
        let mut rng = Rng::new(Self::seed(user_input, n_layers));
        let plan = sample_plan(&mut rng, n_layers, &Hints::from_text(user_input));
        Ok(plan.bundle())
    }
}

/// Expand with any expander and check the result has the requested shape.
pub fn expand_prompt(user_input: &str, n_layers: usize, expander: &dyn PromptExpander) -> Result<PromptBundle> {
    let b = expander.expand(user_input, n_layers)?;
    b.validate()?;
    if b.n_layers() != n_layers {
        return Err(Error::Data(format!(
            "expander returned {} layer captions, expected {n_layers}",
            b.n_layers()
        )));
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{tokenize, Vocab};

    #[test]
    fn deterministic_and_shaped() {
        let e = TemplateExpander;
        let a = expand_prompt("red circle poster", 2, &e).unwrap();
        let b = expand_prompt("red circle poster", 2, &e).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_layers(), 2);
        assert!(a.layer_captions[1].contains("red circle"));
        assert!(a.type_section.contains("poster"));
        let t2i = expand_prompt("red circle poster", 0, &e).unwrap();
        assert!(t2i.layer_captions.is_empty());
        assert!(!t2i.scene_description.is_empty());
    }

    #[test]
    fn empty_input_rejected() {
        assert!(expand_prompt("   ", 2, &TemplateExpander).is_err());
    }

    #[test]
    fn output_stays_in_vocabulary() {
        let v = Vocab::grammar();
        for (i, input) in ["stars", "a blue flyer with large white squares", "summer party", "x"].iter().enumerate() {
            for n in 0..=4 {
                let b = expand_prompt(input, n, &TemplateExpander).unwrap();
                tokenize(&b, &v).unwrap_or_else(|e| panic!("{i} {n}: {e}"));
            }
        }
    }

    struct Wrong;

    impl PromptExpander for Wrong {
        fn expand(&self, _: &str, _: usize) -> Result<PromptBundle> {
            Ok(PromptBundle {
                scene_description: "x".into(),
                layer_captions: vec![],
                type_section: String::new(),
            })
        }
    }

    #[test]
    fn misshapen_expander_output_rejected() {
        assert!(expand_prompt("x", 1, &Wrong).is_err());
    }
}
