//! Aspect-ratio bucketing and padding-free packing.

mod pack;

pub use pack::{pack, unpack, PackedSequence, SampleStack, SampleShape};

use serde::Serialize;

use crate::error::{Error, Result};

/// Default aspect-ratio edges, geometric from 0.2 to 4.
pub const DEFAULT_EDGES: [f64; 9] = [0.2, 0.29, 0.42, 0.61, 0.89, 1.30, 1.89, 2.75, 4.0];

/// Default pixel areas.
pub const DEFAULT_AREAS: [usize; 2] = [64 * 64, 96 * 96];

/// Index of the edge nearest to `ar`; ties go to the smaller index.
pub fn assign_bucket(ar: f64, edges: &[f64]) -> Result<usize> {
    if !(ar > 0.0) || !ar.is_finite() {
        return Err(Error::invalid("assign_bucket", format!("aspect ratio {ar} must be positive")));
    }
    if edges.is_empty() {
        return Err(Error::invalid("assign_bucket", "no edges"));
    }
    let mut best = 0;
    let mut best_d = (ar - edges[0]).abs();
    for (i, &e) in edges.iter().enumerate().skip(1) {
        let d = (ar - e).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok(best)
}

fn round_up(x: f64, c: usize) -> usize {
    let c = c as f64;
    // tolerate float noise just above an exact multiple
    ((x / c - 1e-9).ceil().max(1.0) * c) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bucket {
    pub layer_count: usize,
    pub ar_left: f64,
    pub ar_right: f64,
    pub area: usize,
    pub pad_shape: (usize, usize),
}

/// `(H, W)` covering every image of `area` pixels with aspect ratio in
/// `[ar_left, ar_right]`, rounded up to multiples of `c`.
pub fn bucket_pad_shape(ar_left: f64, ar_right: f64, area: usize, c: usize) -> (usize, usize) {
    let a = area as f64;
    (round_up((a / ar_left).sqrt(), c), round_up((a * ar_right).sqrt(), c))
}

impl Bucket {
    pub fn new(layer_count: usize, ar_left: f64, ar_right: f64, area: usize, c: usize) -> Result<Self> {
        if !(ar_left > 0.0 && ar_left <= ar_right) {
            return Err(Error::invalid("Bucket", format!("bad ratio interval [{ar_left}, {ar_right}]")));
        }
        if area == 0 || c == 0 {
            return Err(Error::invalid("Bucket", "area and compression factor must be positive"));
        }
        Ok(Self {
            layer_count,
            ar_left,
            ar_right,
            area,
            pad_shape: bucket_pad_shape(ar_left, ar_right, area, c),
        })
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        h <= self.pad_shape.0 && w <= self.pad_shape.1
    }
}

/// Buckets keyed by layer count, nearest edge and area.
#[derive(Debug, Clone)]
pub struct BucketGrid {
    edges: Vec<f64>,
    areas: Vec<usize>,
    c: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct BucketKey {
    pub layer_count: usize,
    pub edge: usize,
    pub area: usize,
}

impl BucketGrid {
    pub fn new(edges: &[f64], areas: &[usize], c: usize) -> Result<Self> {
        if edges.is_empty() || edges.windows(2).any(|w| !(w[0] < w[1])) || !(edges[0] > 0.0) {
            return Err(Error::invalid("BucketGrid", format!("edges {edges:?} must be positive and strictly increasing")));
        }
        if areas.is_empty() || areas.contains(&0) || c == 0 {
            return Err(Error::invalid("BucketGrid", "areas and compression factor must be positive"));
        }
        let mut areas = areas.to_vec();
        areas.sort_unstable();
        areas.dedup();
        Ok(Self {
            edges: edges.to_vec(),
            areas,
            c,
        })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn areas(&self) -> &[usize] {
        &self.areas
    }

    /// Ratio interval served by edge `i`: between the midpoints to its
    /// neighbours, bounded by the outer edges themselves.
    pub fn interval(&self, i: usize) -> (f64, f64) {
        let e = &self.edges;
        let left = if i == 0 { e[0] } else { 0.5 * (e[i - 1] + e[i]) };
        let right = if i + 1 == e.len() { e[i] } else { 0.5 * (e[i] + e[i + 1]) };
        (left, right)
    }

    pub fn bucket(&self, key: BucketKey) -> Result<Bucket> {
        let (l, r) = self.interval(key.edge);
        Bucket::new(key.layer_count, l, r, key.area, self.c)
    }

    /// Bucket for an `h x w` design with `n_layers` layers; the smallest area
    /// not below `h * w` is used.
    pub fn assign(&self, n_layers: usize, h: usize, w: usize) -> Result<BucketKey> {
        let edge = assign_bucket(w as f64 / h as f64, &self.edges)?;
        let area = *self
            .areas
            .iter()
            .find(|&&a| a >= h * w)
            .ok_or_else(|| Error::Data(format!("{h}x{w} exceeds every bucket area")))?;
        let key = BucketKey {
            layer_count: n_layers,
            edge,
            area,
        };
        let bucket = self.bucket(key)?;
        if !bucket.fits(h, w) {
            return Err(Error::Data(format!(
                "{h}x{w} does not fit bucket pad shape {:?}",
                bucket.pad_shape
            )));
        }
        Ok(key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    #[test]
    fn nearest_edge() {
        assert_eq!(assign_bucket(0.8, &[0.5, 1.0, 2.0]).unwrap(), 1);
        assert_eq!(assign_bucket(2.0, &[0.5, 1.0, 2.0]).unwrap(), 2);
        assert_eq!(assign_bucket(0.75, &[0.5, 1.0, 2.0]).unwrap(), 0);
        assert!(assign_bucket(0.0, &[1.0]).is_err());
        assert!(assign_bucket(-1.0, &[1.0]).is_err());
        assert!(assign_bucket(1.0, &[]).is_err());
    }

    #[test]
    fn matches_linear_scan() {
        let mut rng = Rng::new(5);
        for _ in 0..10_000 {
            let ar = rng.uniform_range(0.05, 6.0);
            let oracle = DEFAULT_EDGES
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |(bi, bd), (i, &e)| {
                    let d = (ar - e).abs();
                    if d < bd {
                        (i, d)
                    } else {
                        (bi, bd)
                    }
                })
                .0;
            assert_eq!(assign_bucket(ar, &DEFAULT_EDGES).unwrap(), oracle);
        }
    }

    #[test]
    fn square_pad_shape() {
        let b = Bucket::new(2, 1.0, 1.0, 4096, 8).unwrap();
        assert_eq!(b.pad_shape, (64, 64));
    }

    #[test]
    fn members_fit_their_bucket() {
        let grid = BucketGrid::new(&DEFAULT_EDGES, &DEFAULT_AREAS, 8).unwrap();
        let mut rng = Rng::new(6);
        for _ in 0..2000 {
            let area = DEFAULT_AREAS[rng.below(2)] as f64;
            let ar = rng.uniform_range(0.2, 4.0);
            let h = ((area / ar).sqrt() / 8.0).floor().max(1.0) as usize * 8;
            let w = ((area * ar).sqrt() / 8.0).floor().max(1.0) as usize * 8;
            let key = grid.assign(2, h, w).unwrap();
            let b = grid.bucket(key).unwrap();
            assert!(b.fits(h, w), "{h}x{w} vs {b:?}");
            assert!(b.ar_left <= b.ar_right);
        }
    }

    #[test]
    fn interval_edges() {
        let grid = BucketGrid::new(&[0.5, 1.0, 2.0], &[4096], 8).unwrap();
        assert_eq!(grid.interval(0), (0.5, 0.75));
        assert_eq!(grid.interval(1), (0.75, 1.5));
        assert_eq!(grid.interval(2), (1.5, 2.0));
        assert!(BucketGrid::new(&[1.0, 1.0], &[4096], 8).is_err());
    }
}
