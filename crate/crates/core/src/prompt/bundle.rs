use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A prompt split into scene, per-layer and type sections.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptBundle {
    pub scene_description: String,
    pub layer_captions: Vec<String>,
    pub type_section: String,
}

const SCENE: &str = "Scene Description:";
const LAYERS: &str = "Layers Caption:";
const LAYER_ITEM: &str = "- Layer ";
const TYPE: &str = "Type:";

impl PromptBundle {
    pub fn n_layers(&self) -> usize {
        self.layer_captions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene_description.trim().is_empty() {
            return Err(Error::Data("prompt bundle has an empty scene description".into()));
        }
        if let Some(i) = self.layer_captions.iter().position(|c| c.trim().is_empty()) {
            return Err(Error::Data(format!("caption of layer {} is empty", i + 1)));
        }
        if self
            .layer_captions
            .iter()
            .chain([&self.scene_description, &self.type_section])
            .any(|s| s.contains('\n'))
        {
            return Err(Error::Data("prompt sections must be single lines".into()));
        }
        Ok(())
    }

    /// The sectioned text form:
    ///
    /// ```text
    /// Scene Description: <scene>
    /// Layers Caption:
    /// - Layer 1: <caption>
    /// Type: <type>
    /// ```
    pub fn render(&self) -> String {
        let mut s = format!("{SCENE} {}\n{LAYERS}\n", self.scene_description);
        for (i, c) in self.layer_captions.iter().enumerate() {
            s.push_str(&format!("{LAYER_ITEM}{}: {c}\n", i + 1));
        }
        s.push_str(&format!("{TYPE} {}\n", self.type_section));
        s
    }

    /// Inverse of [`Self::render`].
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Data(format!("prompt text line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (i, first) = lines.next().ok_or_else(|| bad(0, "empty prompt"))?;
        let scene = first
            .strip_prefix(SCENE)
            .ok_or_else(|| bad(i, "expected `Scene Description:`"))?
            .trim()
            .to_string();
        let (i, l) = lines.next().ok_or_else(|| bad(i + 1, "missing `Layers Caption:`"))?;
        if l.trim() != LAYERS {
            return Err(bad(i, "expected `Layers Caption:`"));
        }
        let mut captions = Vec::new();
        let mut type_section = None;
        for (i, l) in lines {
            if type_section.is_some() {
                return Err(bad(i, "text after the Type section"));
            }
            if let Some(rest) = l.strip_prefix(LAYER_ITEM) {
                let (num, cap) = rest.split_once(':').ok_or_else(|| bad(i, "expected `- Layer <n>: <caption>`"))?;
                if num.trim().parse::<usize>().ok() != Some(captions.len() + 1) {
                    return Err(bad(i, "layers must be numbered 1, 2, ... in order"));
                }
                captions.push(cap.trim().to_string());
            } else if let Some(rest) = l.strip_prefix(TYPE) {
                type_section = Some(rest.trim().to_string());
            } else {
                return Err(bad(i, "unrecognised line"));
            }
        }
        let bundle = PromptBundle {
            scene_description: scene,
            layer_captions: captions,
            type_section: type_section.ok_or_else(|| bad(text.lines().count(), "missing `Type:`"))?,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PromptBundle {
        PromptBundle {
            scene_description: "a poster with a solid navy background and a single large red circle".into(),
            layer_captions: vec!["a solid navy background".into(), "a single large red circle".into()],
            type_section: "poster design".into(),
        }
    }

    #[test]
    fn render_parse_round_trip() {
        let b = sample();
        assert_eq!(PromptBundle::parse(&b.render()).unwrap(), b);
        let empty = PromptBundle {
            layer_captions: vec![],
            ..sample()
        };
        assert_eq!(PromptBundle::parse(&empty.render()).unwrap(), empty);
    }

    #[test]
    fn malformed_text_rejected() {
        assert!(PromptBundle::parse("").is_err());
        assert!(PromptBundle::parse("Scene Description: x\nType: y\n").is_err());
        assert!(PromptBundle::parse("Scene Description: x\nLayers Caption:\n- Layer 2: a\nType: y\n").is_err());
        assert!(PromptBundle::parse("Scene Description: x\nLayers Caption:\n- Layer 1:  \nType: y\n").is_err());
    }

    #[test]
    fn json_round_trip() {
        let b = sample();
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(serde_json::from_str::<PromptBundle>(&s).unwrap(), b);
    }
}
