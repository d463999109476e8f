use serde::{Deserialize, Serialize};

use crate::prompt::grammar::{Color, GradientDir, ShapeKind};
use crate::rgba::RgbaImage;

/// Samples per pixel along each axis.
pub const SUPERSAMPLE: usize = 4;

/// A filled region in pixel coordinates (origin at the top-left corner).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "prim", rename_all = "snake_case")]
pub enum Primitive {
    Shape { kind: ShapeKind, cx: f32, cy: f32, r: f32 },
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
}

impl Primitive {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Primitive::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Primitive::Shape { kind, cx, cy, r } => {
                let (dx, dy) = (x - cx, y - cy);
                match kind {
                    ShapeKind::Circle => dx * dx + dy * dy <= r * r,
                    ShapeKind::Ring => {
                        let d2 = dx * dx + dy * dy;
                        d2 <= r * r && d2 >= 0.36 * r * r
                    }
                    ShapeKind::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
                    ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
                    ShapeKind::Triangle => dy >= -r && dy <= 0.5 * r && dx.abs() <= 0.577_35 * (dy + r),
                    ShapeKind::Star => in_star(dx, dy, r),
                }
            }
        }
    }

    /// Pixel rows and columns the primitive can touch.
    fn bounds(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let (x0, y0, x1, y1) = match *self {
            Primitive::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            Primitive::Shape { cx, cy, r, .. } => (cx - r, cy - r, cx + r, cy + r),
        };
        let clamp = |v: f32, hi: usize| (v.max(0.0) as usize).min(hi);
        (
            clamp(x0.floor(), width),
            clamp(y0.floor(), height),
            clamp(x1.ceil() + 1.0, width),
            clamp(y1.ceil() + 1.0, height),
        )
    }
}

/// Five-pointed star, point up, inner radius 0.45 r.
fn in_star(dx: f32, dy: f32, r: f32) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    if d > r {
        return false;
    }
    if d < 0.45 * r * 0.81 {
        return true;
    }
    let step = std::f32::consts::PI / 5.0;
    // angle measured from straight up, clockwise
    let theta = dx.atan2(-dy).rem_euclid(2.0 * std::f32::consts::PI);
    let k = (theta / step).floor();
    let (a0, a1) = (k * step, (k + 1.0) * step);
    let radius = |i: f32| if (i as i32) % 2 == 0 { r } else { 0.45 * r };
    let (r0, r1) = (radius(k), radius(k + 1.0));
    let p0 = (r0 * a0.sin(), -r0 * a0.cos());
    let p1 = (r1 * a1.sin(), -r1 * a1.cos());
    // same side of edge p0->p1 as the centre
    let cross = |ax: f32, ay: f32, bx: f32, by: f32| ax * by - ay * bx;
    let edge = (p1.0 - p0.0, p1.1 - p0.1);
    let s_point = cross(edge.0, edge.1, dx - p0.0, dy - p0.1);
    let s_centre = cross(edge.0, edge.1, -p0.0, -p0.1);
    s_point * s_centre >= 0.0
}

/// Coverage in `[0, 1]` per pixel from regular supersampling.
pub fn coverage(prims: &[Primitive], width: usize, height: usize) -> Vec<f32> {
    let n = SUPERSAMPLE;
    let mut hits = vec![0u16; width * height];
    let mut inside = vec![false; n * n];
    // bounding boxes keep this linear in the drawn area
    let mut touched = vec![false; width * height];
    for p in prims {
        let (x0, y0, x1, y1) = p.bounds(width, height);
        for y in y0..y1 {
            for x in x0..x1 {
                touched[y * width + x] = true;
            }
        }
    }
    for y in 0..height {
        for x in 0..width {
            if !touched[y * width + x] {
                continue;
            }
            inside.iter_mut().for_each(|v| *v = false);
            for p in prims {
                for j in 0..n {
                    for i in 0..n {
                        let sx = x as f32 + (i as f32 + 0.5) / n as f32;
                        let sy = y as f32 + (j as f32 + 0.5) / n as f32;
                        if p.contains(sx, sy) {
                            inside[j * n + i] = true;
                        }
                    }
                }
            }
            hits[y * width + x] = inside.iter().filter(|&&v| v).count() as u16;
        }
    }
    hits.into_iter().map(|h| h as f32 / (n * n) as f32).collect()
}

/// A layer filled with `color` whose alpha is the primitives' coverage.
pub fn draw_layer(prims: &[Primitive], color: Color, width: usize, height: usize) -> RgbaImage {
    let cov = coverage(prims, width, height);
    let [r, g, b] = color.rgb();
    RgbaImage::from_fn(width, height, |x, y| [r, g, b, cov[y * width + x]]).expect("valid extents")
}

pub fn draw_solid(color: Color, width: usize, height: usize) -> RgbaImage {
    let [r, g, b] = color.rgb();
    RgbaImage::filled(width, height, [r, g, b, 1.0]).expect("valid extents")
}

pub fn draw_gradient(dir: GradientDir, from: Color, to: Color, width: usize, height: usize) -> RgbaImage {
    let (a, b) = (from.rgb(), to.rgb());
    RgbaImage::from_fn(width, height, |x, y| {
        let t = match dir {
            GradientDir::Vertical => (y as f32 + 0.5) / height as f32,
            GradientDir::Horizontal => (x as f32 + 0.5) / width as f32,
        };
        [
            a[0] + (b[0] - a[0]) * t,
            a[1] + (b[1] - a[1]) * t,
            a[2] + (b[2] - a[2]) * t,
            1.0,
        ]
    })
    .expect("valid extents")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_contain_their_centre_and_not_far_points() {
        for kind in ShapeKind::ALL {
            let p = Primitive::Shape { kind, cx: 10.0, cy: 10.0, r: 5.0 };
            if kind != ShapeKind::Ring {
                assert!(p.contains(10.0, 10.0), "{kind:?}");
            } else {
                assert!(!p.contains(10.0, 10.0));
                assert!(p.contains(14.0, 10.0));
            }
            assert!(!p.contains(16.0, 16.0), "{kind:?}");
        }
    }

    #[test]
    fn star_has_five_tips() {
        let p = Primitive::Shape {
            kind: ShapeKind::Star,
            cx: 0.0,
            cy: 0.0,
            r: 10.0,
        };
        assert!(p.contains(0.0, -9.5));
        let between = 36f32.to_radians();
        assert!(!p.contains(9.0 * between.sin(), -9.0 * between.cos()));
    }

    #[test]
    fn coverage_is_fractional_on_edges() {
        let rect = Primitive::Rect {
            x0: 1.5,
            y0: 0.0,
            x1: 3.0,
            y1: 4.0,
        };
        let c = coverage(&[rect], 4, 4);
        assert_eq!(&c[..4], &[0.0, 0.5, 1.0, 0.0]);
    }
}
