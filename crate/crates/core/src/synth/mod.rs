//! Procedural layered designs with captions.

mod corpus;
pub mod draw;

pub use corpus::{
    gen_corpus, manifest_hash, read_corpus, write_corpus, BucketReport, Corpus, CorpusConfig, CorpusEntry,
    ManifestRecord, SynthSample, MANIFEST_FILE,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Rng;
use crate::prompt::grammar::{DesignType, LayerDesc, Placement};
use crate::prompt::{sample_plan, DesignPlan, Hints, PromptBundle, MAX_PLAN_LAYERS};
use crate::rgba::{composite, LayeredDesign, RgbaImage};

use draw::{draw_gradient, draw_layer, draw_solid, Primitive};

/// Largest layer count the generator produces.
pub const MAX_SYNTH_LAYERS: usize = 4;

/// One element of a design: what it is and where it is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementRecipe {
    pub desc: LayerDesc,
    pub prims: Vec<Primitive>,
}

/// Everything needed to render a design and its captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub kind: DesignType,
    /// `false` for a flat design whose elements are not kept as layers.
    pub layered: bool,
    pub elements: Vec<ElementRecipe>,
}

impl DesignSpec {
    /// Sample a recipe with `n_layers` layers for a `width x height` canvas.
    pub fn sample(seed: u64, n_layers: usize, width: usize, height: usize) -> Result<Self> {
        if n_layers > MAX_PLAN_LAYERS {
            return Err(Error::invalid("DesignSpec", format!("{n_layers} layers exceeds {MAX_PLAN_LAYERS}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("DesignSpec", "empty canvas"));
        }
        let mut rng = Rng::new(seed);
        let plan = sample_plan(&mut rng, n_layers, &Hints::default());
        Ok(Self::from_plan(seed, &plan, width, height, &mut rng))
    }

    /// Place the elements of `plan` on a canvas.
    pub fn from_plan(seed: u64, plan: &DesignPlan, width: usize, height: usize, rng: &mut Rng) -> Self {
        let elements = plan
            .elements
            .iter()
            .map(|&desc| ElementRecipe {
                desc,
                prims: place(&desc, width as f32, height as f32, rng),
            })
            .collect();
        Self {
            seed,
            width,
            height,
            kind: plan.kind,
            layered: plan.layered,
            elements,
        }
    }

    pub fn n_layers(&self) -> usize {
        if self.layered {
            self.elements.len()
        } else {
            0
        }
    }

    pub fn plan(&self) -> DesignPlan {
        DesignPlan {
            kind: self.kind,
            elements: self.elements.iter().map(|e| e.desc).collect(),
            layered: self.layered,
        }
    }
}

fn place(desc: &LayerDesc, w: f32, h: f32, rng: &mut Rng) -> Vec<Primitive> {
    let short = w.min(h);
    match *desc {
        LayerDesc::SolidBackground { .. } | LayerDesc::GradientBackground { .. } => vec![],
        LayerDesc::Shapes {
            shape, count, size, ..
        } => {
            let r = (size.radius_fraction() * short).max(1.5);
            let mut centres: Vec<(f32, f32)> = Vec::with_capacity(count);
            for _ in 0..count {
                let mut best = (0.0, 0.0);
                let mut best_gap = f32::NEG_INFINITY;
                // a few draws, keeping the one farthest from earlier elements
                for _ in 0..8 {
                    let c = (
                        rng.uniform_range(r as f64, (w - r).max(r) as f64) as f32,
                        rng.uniform_range(r as f64, (h - r).max(r) as f64) as f32,
                    );
                    let gap = centres
                        .iter()
                        .map(|p| ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt())
                        .fold(f32::INFINITY, f32::min);
                    if gap > best_gap {
                        best = c;
                        best_gap = gap;
                    }
                    if gap >= 2.5 * r {
                        break;
                    }
                }
                centres.push(best);
            }
            centres
                .into_iter()
                .map(|(cx, cy)| Primitive::Shape { kind: shape, cx, cy, r })
                .collect()
        }
        LayerDesc::Text { lines, placement, .. } => {
            let lh = (0.07 * h).max(2.0);
            let gap = 0.6 * lh;
            let block = lines as f32 * lh + (lines as f32 - 1.0) * gap;
            let centre = match placement {
                Placement::Top => 0.2 * h,
                Placement::Middle => 0.5 * h,
                Placement::Bottom => 0.8 * h,
            };
            let mut out = Vec::new();
            let mut y = (centre - block / 2.0).max(0.0);
            for _ in 0..lines {
                let line_w = rng.uniform_range(0.45, 0.8) as f32 * w;
                let x_start = (w - line_w) / 2.0;
                let words = rng.range_inclusive(2, 4);
                let word_gap = 0.6 * lh;
                let word_w = (line_w - (words as f32 - 1.0) * word_gap) / words as f32;
                for k in 0..words {
                    // vary word lengths a little while keeping the line width
                    let jitter = if words > 1 { rng.uniform_range(-0.2, 0.2) as f32 * word_w } else { 0.0 };
                    let x0 = x_start + k as f32 * (word_w + word_gap);
                    let x1 = (x0 + word_w + if k + 1 < words { jitter } else { 0.0 }).max(x0 + 1.0);
                    out.push(Primitive::Rect {
                        x0,
                        y0: y,
                        x1,
                        y1: y + lh,
                    });
                }
                y += lh + gap;
            }
            out
        }
    }
}

/// Render one element as a full-canvas layer.
pub fn render_element(e: &ElementRecipe, width: usize, height: usize) -> RgbaImage {
    match e.desc {
        LayerDesc::SolidBackground { color } => draw_solid(color, width, height),
        LayerDesc::GradientBackground { dir, from, to } => draw_gradient(dir, from, to, width, height),
        LayerDesc::Shapes { color, .. } | LayerDesc::Text { color, .. } => draw_layer(&e.prims, color, width, height),
    }
}

/// Render a design. Layers are snapped to 8-bit levels first so that files
/// written from them are exact; the composite is blended from those layers.
pub fn gen_design(spec: &DesignSpec) -> Result<(LayeredDesign, PromptBundle)> {
    let layers: Vec<RgbaImage> = spec
        .elements
        .iter()
        .map(|e| render_element(e, spec.width, spec.height).quantized())
        .collect();
    let full = composite(&layers)?;
    let bundle = spec.plan().bundle();
    let kept = if spec.layered { layers } else { Vec::new() };
    let design = LayeredDesign::new(
        full,
        kept,
        bundle.scene_description.clone(),
        bundle.layer_captions.clone(),
    )?;
    Ok((design, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::grammar::{Color, ShapeKind, SizeClass};

    #[test]
    fn composite_matches_layers() {
        for seed in 0..20 {
            let spec = DesignSpec::sample(seed, 2 + (seed as usize % 3), 64, 48).unwrap();
            let (d, b) = gen_design(&spec).unwrap();
            assert_eq!(composite(&d.layers).unwrap(), d.composite);
            assert_eq!(d.n_layers(), spec.n_layers());
            assert_eq!(b.layer_captions.len(), d.n_layers());
        }
    }

    #[test]
    fn alpha_discipline() {
        for seed in 0..10 {
            let spec = DesignSpec::sample(seed, 3, 40, 40).unwrap();
            let (d, _) = gen_design(&spec).unwrap();
            assert!(d.layers[0].pixels().all(|p| p[3] == 1.0));
            for (layer, e) in d.layers.iter().zip(&spec.elements).skip(1) {
                for y in 0..40 {
                    for x in 0..40 {
                        if layer.pixel(x, y)[3] > 0.0 {
                            assert!(e.prims.iter().any(|p| pixel_touches(p, x, y)));
                        }
                    }
                }
            }
        }
    }

    fn pixel_touches(p: &Primitive, x: usize, y: usize) -> bool {
        (0..4).any(|j| (0..4).any(|i| p.contains(x as f32 + (i as f32 + 0.5) / 4.0, y as f32 + (j as f32 + 0.5) / 4.0)))
    }

    #[test]
    fn scattered_elements_share_one_layer() {
        let desc = LayerDesc::Shapes {
            shape: ShapeKind::Star,
            color: Color(2),
            count: 12,
            size: SizeClass::Small,
        };
        let plan = DesignPlan {
            kind: DesignType::Poster,
            elements: vec![LayerDesc::SolidBackground { color: Color(8) }, desc],
            layered: true,
        };
        let spec = DesignSpec::from_plan(7, &plan, 96, 96, &mut Rng::new(7));
        let stars: Vec<usize> = spec
            .elements
            .iter()
            .map(|e| e.prims.iter().filter(|p| matches!(p, Primitive::Shape { kind: ShapeKind::Star, .. })).count())
            .collect();
        assert_eq!(stars, vec![0, 12]);
    }

    #[test]
    fn deterministic() {
        let a = gen_design(&DesignSpec::sample(99, 3, 64, 64).unwrap()).unwrap();
        let b = gen_design(&DesignSpec::sample(99, 3, 64, 64).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn captions_parse_back_to_recipe() {
        for seed in 0..30 {
            let spec = DesignSpec::sample(seed, 1 + seed as usize % 4, 64, 64).unwrap();
            let (_, bundle) = gen_design(&spec).unwrap();
            for (cap, e) in bundle.layer_captions.iter().zip(&spec.elements) {
                assert_eq!(LayerDesc::parse(cap).unwrap(), e.desc);
            }
        }
    }

    #[test]
    fn flat_design_has_no_layers() {
        let (d, b) = gen_design(&DesignSpec::sample(3, 0, 32, 32).unwrap()).unwrap();
        assert!(d.layers.is_empty());
        assert!(b.layer_captions.is_empty());
        assert!(d.composite.pixels().all(|p| p[3] == 1.0));
    }
}
