//! Rotary position encoding over four axes: latent row, latent column,
//! layer slot and token role.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{NdArray, Real};

/// What a token is doing in the sequence; stored on the role axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prompt = 0,
    Denoise = 1,
    Frozen = 2,
}

impl Role {
    pub fn code(self) -> u32 {
        self as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Position4D {
    pub h: u32,
    pub w: u32,
    pub f: u32,
    pub r: u32,
}

impl Position4D {
    pub const ORIGIN: Position4D = Position4D { h: 0, w: 0, f: 0, r: 0 };

    pub fn axes(self) -> [u32; 4] {
        [self.h, self.w, self.f, self.r]
    }
}

/// Position shared by every token of prompt part `part_index`
/// (0 for the scene, `i` for the caption of layer slot `i`).
pub fn text_position(part_index: usize) -> Position4D {
    Position4D {
        h: 0,
        w: 0,
        f: part_index as u32,
        r: Role::Prompt.code(),
    }
}

/// Row-major positions for a `latent_h x latent_w` token grid of slot `f`.
pub fn image_positions(latent_h: usize, latent_w: usize, f: usize, role: Role) -> Result<Vec<Position4D>> {
    if role == Role::Prompt {
        return Err(Error::invalid("image_positions", "image tokens cannot carry the prompt role"));
    }
    let mut out = Vec::with_capacity(latent_h * latent_w);
    for h in 0..latent_h {
        for w in 0..latent_w {
            out.push(Position4D {
                h: h as u32,
                w: w as u32,
                f: f as u32,
                r: role.code(),
            });
        }
    }
    Ok(out)
}

/// Channels given to each axis `(H, W, F, R)` and the frequency base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeSplit {
    pub dims: [usize; 4],
    pub base: f64,
}

impl RopeSplit {
    pub const DEFAULT_BASE: f64 = 10000.0;

    pub fn new(dims: [usize; 4]) -> Result<Self> {
        let s = Self {
            dims,
            base: Self::DEFAULT_BASE,
        };
        s.validate()?;
        Ok(s)
    }

    /// Split used for a 32-wide head.
    pub fn desk() -> Self {
        Self::new([14, 14, 2, 2]).unwrap()
    }

    /// Split used for a 128-wide head.
    pub fn full_scale() -> Self {
        Self::new([56, 56, 12, 4]).unwrap()
    }

    /// A split with the same proportions as [`Self::desk`] for any head width
    /// divisible by 4.
    pub fn for_head_dim(head_dim: usize) -> Result<Self> {
        match head_dim {
            32 => Ok(Self::desk()),
            128 => Ok(Self::full_scale()),
            d if d % 4 == 0 && d >= 8 => {
                let small = 2;
                let spatial = (d - 2 * small) / 2;
                if spatial % 2 == 0 {
                    Self::new([spatial, spatial, small, small])
                } else {
                    Self::new([spatial - 1, spatial + 1, small, small])
                }
            }
            d => Err(Error::invalid("RopeSplit", format!("no default split for head dim {d}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.dims.iter().find(|&&d| d % 2 != 0) {
            return Err(Error::invalid("RopeSplit", format!("axis width {d} is odd in {:?}", self.dims)));
        }
        if !(self.base > 1.0) {
            return Err(Error::invalid("RopeSplit", format!("base {} must exceed 1", self.base)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    /// Per-pair angular frequencies in channel order.
    pub fn frequencies(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(self.head_dim() / 2);
        for (axis, &d) in self.dims.iter().enumerate() {
            for j in 0..d / 2 {
                out.push((axis, self.base.powf(-2.0 * j as f64 / d as f64)));
            }
        }
        out
    }

    /// Cosine and sine tables of shape `[positions, head_dim / 2]`.
    pub fn angle_tables<T: Real>(&self, positions: &[Position4D]) -> (NdArray<T>, NdArray<T>) {
        let freqs = self.frequencies();
        let half = freqs.len();
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for p in positions {
            let axes = p.axes();
            for &(axis, freq) in &freqs {
                let angle = axes[axis] as f64 * freq;
                cos.push(T::lit(angle.cos()));
                sin.push(T::lit(angle.sin()));
            }
        }
        let shape = [positions.len(), half];
        (
            NdArray::new(shape, cos).expect("table extents"),
            NdArray::new(shape, sin).expect("table extents"),
        )
    }
}

/// Rotate row vectors `[tokens, head_dim]` in place by their positions.
pub fn apply_rope<T: Real>(vectors: &mut [T], positions: &[Position4D], split: &RopeSplit) -> Result<()> {
    split.validate()?;
    let d = split.head_dim();
    if vectors.len() != positions.len() * d {
        return Err(Error::shape("apply_rope", &[vectors.len()], &[positions.len(), d]));
    }
    let (cos, sin) = split.angle_tables::<T>(positions);
    let half = d / 2;
    for (t, row) in vectors.chunks_mut(d).enumerate() {
        let (c, s) = (&cos.data()[t * half..], &sin.data()[t * half..]);
        for j in 0..half {
            let (x0, x1) = (row[2 * j], row[2 * j + 1]);
            row[2 * j] = x0 * c[j] - x1 * s[j];
            row[2 * j + 1] = x0 * s[j] + x1 * c[j];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    fn random_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.normal()).collect()
    }

    fn rotated(v: &[f64], p: Position4D, split: &RopeSplit) -> Vec<f64> {
        let mut v = v.to_vec();
        apply_rope(&mut v, &[p], split).unwrap();
        v
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn text_positions_follow_part_index() {
        assert_eq!(text_position(0), Position4D::ORIGIN);
        assert_eq!(text_position(3), Position4D { h: 0, w: 0, f: 3, r: 0 });
    }

    #[test]
    fn image_grid_enumeration() {
        let p = image_positions(2, 2, 1, Role::Denoise).unwrap();
        let got: Vec<[u32; 4]> = p.iter().map(|p| p.axes()).collect();
        assert_eq!(got, vec![[0, 0, 1, 1], [0, 1, 1, 1], [1, 0, 1, 1], [1, 1, 1, 1]]);
        let frozen = image_positions(3, 5, 0, Role::Frozen).unwrap();
        assert_eq!(frozen.len(), 15);
        assert!(frozen.iter().all(|p| p.f == 0 && p.r == 2));
        assert!(image_positions(1, 1, 0, Role::Prompt).is_err());
    }

    #[test]
    fn origin_is_identity() {
        let mut rng = Rng::new(1);
        let split = RopeSplit::desk();
        let v = random_vec(&mut rng, 32);
        assert_eq!(rotated(&v, Position4D::ORIGIN, &split), v);
    }

    #[test]
    fn bad_splits_rejected() {
        assert!(RopeSplit::new([13, 15, 2, 2]).is_err());
        let mut v = vec![0.0f64; 30];
        assert!(apply_rope(&mut v, &[Position4D::ORIGIN], &RopeSplit::desk()).is_err());
    }

    #[test]
    fn default_splits() {
        assert_eq!(RopeSplit::for_head_dim(32).unwrap().dims, [14, 14, 2, 2]);
        assert_eq!(RopeSplit::for_head_dim(128).unwrap().dims, [56, 56, 12, 4]);
        assert_eq!(RopeSplit::for_head_dim(16).unwrap().head_dim(), 16);
        assert_eq!(RopeSplit::for_head_dim(8).unwrap().head_dim(), 8);
        assert!(RopeSplit::for_head_dim(6).is_err());
    }

    #[test]
    fn relative_law_and_norm() {
        let mut rng = Rng::new(2);
        let split = RopeSplit::desk();
        for _ in 0..200 {
            let (q, k) = (random_vec(&mut rng, 32), random_vec(&mut rng, 32));
            let p = Position4D {
                h: rng.below(16) as u32,
                w: rng.below(16) as u32,
                f: rng.below(5) as u32,
                r: rng.below(3) as u32,
            };
            let d = Position4D {
                h: rng.below(16) as u32,
                w: rng.below(16) as u32,
                f: rng.below(5) as u32,
                r: rng.below(3) as u32,
            };
            let shifted = Position4D {
                h: p.h + d.h,
                w: p.w + d.w,
                f: p.f + d.f,
                r: p.r + d.r,
            };
            let lhs = dot(&rotated(&q, p, &split), &rotated(&k, shifted, &split));
            let rhs = dot(&q, &rotated(&k, d, &split));
            assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
            let rq = rotated(&q, p, &split);
            assert!((dot(&rq, &rq).sqrt() - dot(&q, &q).sqrt()).abs() <= 1e-9);
        }
    }

    #[test]
    fn role_changes_logits() {
        let mut rng = Rng::new(3);
        let split = RopeSplit::desk();
        let (q, k) = (random_vec(&mut rng, 32), random_vec(&mut rng, 32));
        let key = rotated(&k, Position4D { h: 1, w: 1, f: 1, r: 1 }, &split);
        let a = dot(&rotated(&q, Position4D { h: 1, w: 2, f: 1, r: 1 }, &split), &key);
        let b = dot(&rotated(&q, Position4D { h: 1, w: 2, f: 1, r: 2 }, &split), &key);
        assert!((a - b).abs() > 1e-6);
    }
}
