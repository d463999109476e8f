//! The closed caption grammar shared by the data generator, the template
//! expander and the tokenizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRAMMAR_VERSION: &str = "g1";

/// Named colours and their sRGB values.
pub const COLORS: [(&str, [u8; 3]); 16] = [
    ("red", [220, 40, 40]),
    ("orange", [245, 140, 30]),
    ("yellow", [250, 215, 40]),
    ("lime", [170, 230, 50]),
    ("green", [40, 160, 70]),
    ("teal", [30, 140, 140]),
    ("cyan", [60, 210, 230]),
    ("blue", [40, 90, 220]),
    ("navy", [20, 30, 90]),
    ("purple", [120, 50, 170]),
    ("magenta", [220, 50, 180]),
    ("pink", [250, 160, 190]),
    ("brown", [120, 75, 40]),
    ("black", [15, 15, 15]),
    ("white", [245, 245, 245]),
    ("gray", [128, 128, 128]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Color(pub u8);

impl Color {
    pub fn name(self) -> &'static str {
        COLORS[self.0 as usize].0
    }

    pub fn rgb(self) -> [f32; 3] {
        COLORS[self.0 as usize].1.map(|v| v as f32 / 255.0)
    }

    pub fn from_name(name: &str) -> Option<Self> {
        COLORS.iter().position(|(n, _)| *n == name).map(|i| Color(i as u8))
    }

    pub fn all() -> impl Iterator<Item = Color> {
        (0..COLORS.len() as u8).map(Color)
    }

    /// Squared RGB distance on the 0-255 scale.
    pub fn distance2(self, other: Color) -> u32 {
        let (a, b) = (COLORS[self.0 as usize].1, COLORS[other.0 as usize].1);
        a.iter().zip(b).map(|(&x, y)| (x as i32 - y as i32).pow(2) as u32).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
    Diamond,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Star,
        ShapeKind::Diamond,
        ShapeKind::Ring,
    ];

    pub fn singular(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Star => "star",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Ring => "ring",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circles",
            ShapeKind::Square => "squares",
            ShapeKind::Triangle => "triangles",
            ShapeKind::Star => "stars",
            ShapeKind::Diamond => "diamonds",
            ShapeKind::Ring => "rings",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.singular() == w || k.plural() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn word(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }

    /// Element radius as a fraction of the shorter image side.
    pub fn radius_fraction(self) -> f32 {
        match self {
            SizeClass::Small => 0.06,
            SizeClass::Medium => 0.1,
            SizeClass::Large => 0.18,
        }
    }

    fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.word() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Top,
    Middle,
    Bottom,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::Top, Placement::Middle, Placement::Bottom];

    pub fn word(self) -> &'static str {
        match self {
            Placement::Top => "top",
            Placement::Middle => "middle",
            Placement::Bottom => "bottom",
        }
    }

    fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.word() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientDir {
    Vertical,
    Horizontal,
}

impl GradientDir {
    pub fn word(self) -> &'static str {
        match self {
            GradientDir::Vertical => "vertical",
            GradientDir::Horizontal => "horizontal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignType {
    Poster,
    Flyer,
    Banner,
    Card,
    Cover,
    Logo,
}

impl DesignType {
    pub const ALL: [DesignType; 6] = [
        DesignType::Poster,
        DesignType::Flyer,
        DesignType::Banner,
        DesignType::Card,
        DesignType::Cover,
        DesignType::Logo,
    ];

    pub fn word(self) -> &'static str {
        match self {
            DesignType::Poster => "poster",
            DesignType::Flyer => "flyer",
            DesignType::Banner => "banner",
            DesignType::Card => "card",
            DesignType::Cover => "cover",
            DesignType::Logo => "logo",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.word() == w)
    }
}

pub const NUMBER_WORDS: [&str; 12] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
];

pub fn number_word(n: usize) -> &'static str {
    NUMBER_WORDS[n - 1]
}

pub fn parse_number(w: &str) -> Option<usize> {
    NUMBER_WORDS
        .iter()
        .position(|&n| n == w)
        .map(|i| i + 1)
        .or_else(|| w.parse().ok().filter(|&n| (1..=NUMBER_WORDS.len()).contains(&n)))
}

pub const MAX_SHAPES: usize = 12;
pub const MAX_TEXT_LINES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDesc {
    SolidBackground {
        color: Color,
    },
    GradientBackground {
        dir: GradientDir,
        from: Color,
        to: Color,
    },
    Shapes {
        shape: ShapeKind,
        color: Color,
        count: usize,
        size: SizeClass,
    },
    Text {
        color: Color,
        lines: usize,
        placement: Placement,
    },
}

impl LayerDesc {
    pub fn is_background(&self) -> bool {
        matches!(self, LayerDesc::SolidBackground { .. } | LayerDesc::GradientBackground { .. })
    }

    pub fn caption(&self) -> String {
        match *self {
            LayerDesc::SolidBackground { color } => format!("a solid {} background", color.name()),
            LayerDesc::GradientBackground { dir, from, to } => format!(
                "a {} gradient background from {} to {}",
                dir.word(),
                from.name(),
                to.name()
            ),
            LayerDesc::Shapes {
                shape,
                color,
                count: 1,
                size,
            } => format!("a single {} {} {}", size.word(), color.name(), shape.singular()),
            LayerDesc::Shapes {
                shape,
                color,
                count,
                size,
            } => format!(
                "{} {} {} {} scattered across the canvas",
                number_word(count),
                size.word(),
                color.name(),
                shape.plural()
            ),
            LayerDesc::Text {
                color,
                lines,
                placement,
            } => format!(
                "{} {} of {} text at the {}",
                number_word(lines),
                if lines == 1 { "line" } else { "lines" },
                color.name(),
                placement.word()
            ),
        }
    }

    /// Inverse of [`Self::caption`].
    pub fn parse(caption: &str) -> Result<Self> {
        let words = words(caption);
        let w: Vec<&str> = words.iter().map(String::as_str).collect();
        let bad = || Error::Data(format!("caption `{caption}` does not follow the grammar"));
        let color = |s: &str| Color::from_name(s).ok_or_else(bad);
        match w.as_slice() {
            ["a", "solid", c, "background"] => Ok(LayerDesc::SolidBackground { color: color(c)? }),
            ["a", dir, "gradient", "background", "from", a, "to", b] => Ok(LayerDesc::GradientBackground {
                dir: match *dir {
                    "vertical" => GradientDir::Vertical,
                    "horizontal" => GradientDir::Horizontal,
                    _ => return Err(bad()),
                },
                from: color(a)?,
                to: color(b)?,
            }),
            ["a", "single", size, c, shape] => Ok(LayerDesc::Shapes {
                shape: ShapeKind::from_word(shape).filter(|k| k.singular() == *shape).ok_or_else(bad)?,
                color: color(c)?,
                count: 1,
                size: SizeClass::from_word(size).ok_or_else(bad)?,
            }),
            [n, size, c, shape, "scattered", "across", "the", "canvas"] => {
                let count = parse_number(n).filter(|&n| n > 1).ok_or_else(bad)?;
                Ok(LayerDesc::Shapes {
                    shape: ShapeKind::from_word(shape).filter(|k| k.plural() == *shape).ok_or_else(bad)?,
                    color: color(c)?,
                    count,
                    size: SizeClass::from_word(size).ok_or_else(bad)?,
                })
            }
            [n, line, "of", c, "text", "at", "the", place] => {
                let lines = parse_number(n).filter(|&n| n <= MAX_TEXT_LINES).ok_or_else(bad)?;
                if *line != if lines == 1 { "line" } else { "lines" } {
                    return Err(bad());
                }
                Ok(LayerDesc::Text {
                    color: color(c)?,
                    lines,
                    placement: Placement::from_word(place).ok_or_else(bad)?,
                })
            }
            _ => Err(bad()),
        }
    }
}

/// Lower-cased alphanumeric words; punctuation separates and is dropped.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Scene sentence naming the design type and each element, back to front.
pub fn scene_caption(kind: DesignType, elements: &[LayerDesc]) -> String {
    let parts: Vec<String> = elements.iter().map(LayerDesc::caption).collect();
    let list = match parts.len() {
        0 => String::new(),
        1 => parts[0].clone(),
        n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
    };
    if list.is_empty() {
        format!("a plain {}", kind.word())
    } else {
        format!("a {} with {}", kind.word(), list)
    }
}

pub fn type_section(kind: DesignType) -> String {
    format!("{} design", kind.word())
}

/// Every word the grammar can emit, plus a few the expander understands.
pub fn grammar_words() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = vec![
        "a", "an", "the", "with", "and", "of", "from", "to", "at", "on", "in", "across", "canvas", "scattered",
        "single", "solid", "gradient", "background", "vertical", "horizontal", "line", "lines", "text", "plain",
        "design", "top", "middle", "bottom", "small", "medium", "large", "layer", "layers", "title", "headline",
        "words", "shape", "shapes", "some", "many", "few", "colorful", "simple", "minimal", "bold", "bright",
        "dark", "light", "pattern", "over", "under", "behind", "front", "left", "right", "center", "centered",
        "corner", "edge", "border", "frame", "is", "are", "for", "by", "this", "that", "it", "its", "their",
        "each", "all", "two", "tone", "caption", "scene", "description", "type", "grey", "party", "sale",
        "event", "night", "summer", "winter", "spring", "autumn", "birthday", "music", "festival", "holiday",
        "welcome", "hello", "new", "big", "tiny", "huge", "random", "around", "everywhere", "some",
    ];
    v.extend(COLORS.iter().map(|(n, _)| *n));
    v.extend(ShapeKind::ALL.iter().flat_map(|k| [k.singular(), k.plural()]));
    v.extend(DesignType::ALL.iter().map(|d| d.word()));
    v.extend(NUMBER_WORDS);
    let mut seen = std::collections::BTreeSet::new();
    v.retain(|w| seen.insert(*w));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn captions_round_trip() {
        let samples = [
            LayerDesc::SolidBackground { color: Color(8) },
            LayerDesc::GradientBackground {
                dir: GradientDir::Horizontal,
                from: Color(0),
                to: Color(2),
            },
            LayerDesc::Shapes {
                shape: ShapeKind::Star,
                color: Color(2),
                count: 12,
                size: SizeClass::Small,
            },
            LayerDesc::Shapes {
                shape: ShapeKind::Ring,
                color: Color(14),
                count: 1,
                size: SizeClass::Large,
            },
            LayerDesc::Text {
                color: Color(14),
                lines: 1,
                placement: Placement::Top,
            },
            LayerDesc::Text {
                color: Color(13),
                lines: 3,
                placement: Placement::Bottom,
            },
        ];
        for d in samples {
            assert_eq!(LayerDesc::parse(&d.caption()).unwrap(), d, "{}", d.caption());
        }
        assert!(LayerDesc::parse("a wobbly blob").is_err());
        assert!(LayerDesc::parse("two lines of red text at the side").is_err());
    }

    #[test]
    fn scene_lists_elements() {
        let els = [
            LayerDesc::SolidBackground { color: Color(8) },
            LayerDesc::Shapes {
                shape: ShapeKind::Star,
                color: Color(2),
                count: 12,
                size: SizeClass::Small,
            },
        ];
        assert_eq!(
            scene_caption(DesignType::Poster, &els),
            "a poster with a solid navy background and twelve small yellow stars scattered across the canvas"
        );
    }

    #[test]
    fn word_list_is_unique_and_modest() {
        let w = grammar_words();
        let set: std::collections::BTreeSet<_> = w.iter().collect();
        assert_eq!(set.len(), w.len());
        assert!(w.len() > 100 && w.len() < 250, "{}", w.len());
    }
}
