use crate::numeric::Rng;

use super::grammar::{
    parse_number, scene_caption, type_section, words, Color, DesignType, GradientDir, LayerDesc, Placement,
    ShapeKind, SizeClass, MAX_SHAPES, MAX_TEXT_LINES,
};
use super::PromptBundle;

/// Most layers a plan can hold: a background, one layer per shape kind and a
/// text layer.
pub const MAX_PLAN_LAYERS: usize = 2 + ShapeKind::ALL.len();

/// A design described layer by layer, back to front.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignPlan {
    pub kind: DesignType,
    /// Elements of the picture; equal to `layers` unless the plan is a
    /// single flat image.
    pub elements: Vec<LayerDesc>,
    pub layered: bool,
}

impl DesignPlan {
    pub fn layers(&self) -> &[LayerDesc] {
        if self.layered {
            &self.elements
        } else {
            &[]
        }
    }

    pub fn bundle(&self) -> PromptBundle {
        PromptBundle {
            scene_description: scene_caption(self.kind, &self.elements),
            layer_captions: self.layers().iter().map(LayerDesc::caption).collect(),
            type_section: type_section(self.kind),
        }
    }
}

/// Preferences pulled from free text; unset fields are sampled.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hints {
    pub kind: Option<DesignType>,
    pub shapes: Vec<ShapeKind>,
    pub shape_color: Option<Color>,
    pub background_color: Option<Color>,
    pub text_color: Option<Color>,
    pub loose_colors: Vec<Color>,
    pub count: Option<usize>,
    pub size: Option<SizeClass>,
    pub placement: Option<Placement>,
    pub gradient: bool,
    pub text: bool,
}

impl Hints {
    /// Scan `text` for grammar words. A colour binds to the next noun within
    /// two words (shape, background or text); otherwise it is kept loose.
    pub fn from_text(text: &str) -> Self {
        let w = words(text);
        let mut h = Hints::default();
        for (i, word) in w.iter().enumerate() {
            let word = word.as_str();
            if let Some(k) = DesignType::from_word(word) {
                h.kind.get_or_insert(k);
            }
            if let Some(k) = ShapeKind::from_word(word) {
                if !h.shapes.contains(&k) {
                    h.shapes.push(k);
                }
            }
            if let Some(n) = parse_number(word) {
                h.count.get_or_insert(n);
            }
            match word {
                "small" | "tiny" => h.size = h.size.or(Some(SizeClass::Small)),
                "medium" => h.size = h.size.or(Some(SizeClass::Medium)),
                "large" | "big" | "huge" => h.size = h.size.or(Some(SizeClass::Large)),
                "top" => h.placement = h.placement.or(Some(Placement::Top)),
                "middle" | "center" | "centered" => h.placement = h.placement.or(Some(Placement::Middle)),
                "bottom" => h.placement = h.placement.or(Some(Placement::Bottom)),
                "gradient" => h.gradient = true,
                "text" | "title" | "headline" | "words" | "caption" => h.text = true,
                _ => {}
            }
            let color = match word {
                "grey" => Color::from_name("gray"),
                _ => Color::from_name(word),
            };
            if let Some(c) = color {
                let next = w.iter().skip(i + 1).take(2).map(String::as_str);
                let mut bound = false;
                for n in next {
                    let slot = if ShapeKind::from_word(n).is_some() {
                        &mut h.shape_color
                    } else if n == "background" {
                        &mut h.background_color
                    } else if matches!(n, "text" | "title" | "headline" | "words") {
                        &mut h.text_color
                    } else {
                        continue;
                    };
                    if slot.is_none() {
                        *slot = Some(c);
                        bound = true;
                    }
                    break;
                }
                if !bound {
                    h.loose_colors.push(c);
                }
            }
        }
        h
    }
}

const MIN_CONTRAST2: u32 = 110 * 110;

fn pick_color(rng: &mut Rng, avoid: &[Color]) -> Color {
    let ok: Vec<Color> = Color::all()
        .filter(|c| avoid.iter().all(|a| a.distance2(*c) >= MIN_CONTRAST2))
        .collect();
    if ok.is_empty() {
        Color(rng.below(16) as u8)
    } else {
        ok[rng.below(ok.len())]
    }
}

fn max_count(size: SizeClass) -> usize {
    match size {
        SizeClass::Small => MAX_SHAPES,
        SizeClass::Medium => 6,
        SizeClass::Large => 3,
    }
}

/// Sample a plan with `n_layers` layers (0: a flat design) honouring `hints`.
pub fn sample_plan(rng: &mut Rng, n_layers: usize, hints: &Hints) -> DesignPlan {
    let n_layers = n_layers.min(MAX_PLAN_LAYERS);
    let kind = hints.kind.unwrap_or_else(|| DesignType::ALL[rng.below(DesignType::ALL.len())]);
    let elements = if n_layers == 0 {
        if hints.text || rng.bernoulli(0.5) {
            3
        } else {
            2
        }
    } else {
        n_layers
    };
    let mut loose = hints.loose_colors.iter().copied();

    let want_text = elements >= 3 || (elements == 2 && hints.text && hints.shapes.is_empty());
    let n_shapes = elements - 1 - usize::from(want_text);

    let mut shape_colors = Vec::new();
    let first_shape_color = if n_shapes > 0 {
        hints.shape_color.or_else(|| loose.next())
    } else {
        None
    };
    let bg_hint = hints.background_color.or_else(|| loose.next());
    let text_hint = hints.text_color.or_else(|| loose.next());

    let background = if hints.gradient || (hints.background_color.is_none() && rng.bernoulli(0.4)) {
        let from = bg_hint.unwrap_or_else(|| pick_color(rng, &[]));
        let mut avoid = vec![];
        avoid.extend(first_shape_color);
        let mut to = pick_color(rng, &avoid);
        if to == from {
            to = pick_color(rng, &[from]);
        }
        LayerDesc::GradientBackground {
            dir: if rng.bernoulli(0.5) {
                GradientDir::Vertical
            } else {
                GradientDir::Horizontal
            },
            from,
            to,
        }
    } else {
        let avoid: Vec<Color> = first_shape_color.into_iter().collect();
        LayerDesc::SolidBackground {
            color: bg_hint.unwrap_or_else(|| pick_color(rng, &avoid)),
        }
    };
    let bg_colors: Vec<Color> = match background {
        LayerDesc::SolidBackground { color } => vec![color],
        LayerDesc::GradientBackground { from, to, .. } => vec![from, to],
        _ => unreachable!(),
    };

    let mut out = vec![background];
    let mut used_kinds: Vec<ShapeKind> = Vec::new();
    for i in 0..n_shapes {
        let shape = hints
            .shapes
            .iter()
            .copied()
            .find(|k| !used_kinds.contains(k))
            .unwrap_or_else(|| {
                let free: Vec<ShapeKind> = ShapeKind::ALL.into_iter().filter(|k| !used_kinds.contains(k)).collect();
                free[rng.below(free.len())]
            });
        used_kinds.push(shape);
        let color = match (i, first_shape_color) {
            (0, Some(c)) => c,
            _ => {
                let mut avoid = bg_colors.clone();
                avoid.extend(&shape_colors);
                pick_color(rng, &avoid)
            }
        };
        shape_colors.push(color);
        let hinted_count = if i == 0 { hints.count } else { None };
        let size = match (i, hints.size) {
            (0, Some(s)) => s,
            _ => match hinted_count {
                Some(n) if n > 6 => SizeClass::Small,
                Some(n) if n > 3 => SizeClass::ALL[rng.below(2)],
                _ => SizeClass::ALL[rng.below(3)],
            },
        };
        let count = hinted_count
            .map(|n| n.clamp(1, MAX_SHAPES))
            .unwrap_or_else(|| rng.range_inclusive(1, max_count(size)));
        out.push(LayerDesc::Shapes {
            shape,
            color,
            count,
            size,
        });
    }
    if want_text {
        let color = text_hint.unwrap_or_else(|| pick_color(rng, &bg_colors));
        out.push(LayerDesc::Text {
            color,
            lines: rng.range_inclusive(1, MAX_TEXT_LINES),
            placement: hints
                .placement
                .unwrap_or_else(|| Placement::ALL[rng.below(Placement::ALL.len())]),
        });
    }
    DesignPlan {
        kind,
        elements: out,
        layered: n_layers > 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colours_bind_to_following_noun() {
        let h = Hints::from_text("A navy background with twelve yellow stars and white text");
        assert_eq!(h.background_color, Color::from_name("navy"));
        assert_eq!(h.shape_color, Color::from_name("yellow"));
        assert_eq!(h.text_color, Color::from_name("white"));
        assert_eq!(h.count, Some(12));
        assert_eq!(h.shapes, vec![ShapeKind::Star]);
        assert!(h.text);
    }

    #[test]
    fn plan_layer_counts() {
        let mut rng = Rng::new(1);
        for n in 0..=MAX_PLAN_LAYERS {
            let p = sample_plan(&mut rng, n, &Hints::default());
            assert_eq!(p.layers().len(), n);
            assert!(p.elements[0].is_background());
            assert!(p.elements.iter().skip(1).all(|e| !e.is_background()));
        }
    }

    #[test]
    fn hints_are_honoured() {
        let mut rng = Rng::new(2);
        let p = sample_plan(&mut rng, 2, &Hints::from_text("red circle poster"));
        assert_eq!(p.kind, DesignType::Poster);
        match p.elements[1] {
            LayerDesc::Shapes { shape, color, .. } => {
                assert_eq!(shape, ShapeKind::Circle);
                assert_eq!(color.name(), "red");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
