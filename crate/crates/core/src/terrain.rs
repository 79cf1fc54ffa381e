//! Terrain heightmaps and their C¹ shape-preserving cubic interpolant.
//!
//! Knot slopes follow the Fritsch–Carlson monotone cubic rule (PCHIP), so
//! every interval stays between its two bounding samples.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bound on variable terrain heights (m).
pub const MAX_FEATURE_HEIGHT: f64 = 0.2;

const SPACING_RTOL: f64 = 1e-6;

/// Uniformly sampled terrain heights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heightmap {
    x_samples: Vec<f64>,
    z_samples: Vec<f64>,
}

impl Heightmap {
    pub fn new(x_samples: Vec<f64>, z_samples: Vec<f64>) -> Result<Self> {
        if x_samples.len() != z_samples.len() {
            return Err(Error::InvalidHeightmap(format!(
                "{} x samples but {} z samples",
                x_samples.len(),
                z_samples.len()
            )));
        }
        if x_samples.len() < 2 {
            return Err(Error::InvalidHeightmap("need at least two samples".into()));
        }
        if x_samples.iter().chain(&z_samples).any(|v| !v.is_finite()) {
            return Err(Error::InvalidHeightmap("non-finite sample".into()));
        }
        let dx = x_samples[1] - x_samples[0];
        if dx <= 0.0 {
            return Err(Error::InvalidHeightmap("x samples must be strictly increasing".into()));
        }
        for w in x_samples.windows(2) {
            let step = w[1] - w[0];
            if step <= 0.0 {
                return Err(Error::InvalidHeightmap("x samples must be strictly increasing".into()));
            }
            if (step - dx).abs() > SPACING_RTOL * dx {
                return Err(Error::InvalidHeightmap("x samples must be uniformly spaced".into()));
            }
        }
        Ok(Self { x_samples, z_samples })
    }

    /// Uniform grid on `[x_min, x_max]` with `n` samples at height zero.
    pub fn flat(x_min: f64, x_max: f64, n: usize) -> Result<Self> {
        if n < 2 || !(x_max > x_min) {
            return Err(Error::InvalidHeightmap("flat grid needs n >= 2 and x_max > x_min".into()));
        }
        let dx = (x_max - x_min) / (n - 1) as f64;
        let xs = (0..n).map(|i| x_min + dx * i as f64).collect();
        Self::new(xs, vec![0.0; n])
    }

    pub fn x_samples(&self) -> &[f64] {
        &self.x_samples
    }

    pub fn z_samples(&self) -> &[f64] {
        &self.z_samples
    }

    pub fn len(&self) -> usize {
        self.x_samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_samples.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.x_samples[1] - self.x_samples[0]
    }

    pub fn x_min(&self) -> f64 {
        self.x_samples[0]
    }

    pub fn x_max(&self) -> f64 {
        *self.x_samples.last().unwrap()
    }

    /// Index of the knot closest to `x`.
    pub fn nearest_index(&self, x: f64) -> usize {
        let i = ((x - self.x_min()) / self.spacing()).round();
        (i.max(0.0) as usize).min(self.len() - 1)
    }

    /// Parses the two-column text format (`x z` per line, `#` comments).
    pub fn parse(text: &str) -> Result<Self> {
        let mut xs = Vec::new();
        let mut zs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .collect();
            if cols.len() != 2 {
                return Err(Error::InvalidHeightmap(format!(
                    "line {}: expected two columns",
                    lineno + 1
                )));
            }
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|e| {
                    Error::InvalidHeightmap(format!("line {}: {e}", lineno + 1))
                })
            };
            xs.push(parse(cols[0])?);
            zs.push(parse(cols[1])?);
        }
        Self::new(xs, zs)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# x z\n");
        for (x, z) in self.x_samples.iter().zip(&self.z_samples) {
            let _ = writeln!(out, "{x} {z}");
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Heights of the variable heightmap nodes, used as context features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct TerrainFeatures {
    pub node_heights: Vec<f64>,
}

impl TerrainFeatures {
    pub fn zeros(n: usize) -> Self {
        Self { node_heights: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.node_heights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_heights.is_empty()
    }

    pub fn validate(&self, n_t: usize) -> Result<()> {
        if self.node_heights.len() != n_t {
            return Err(Error::DimensionMismatch { expected: n_t, got: self.node_heights.len() });
        }
        if self
            .node_heights
            .iter()
            .any(|h| !h.is_finite() || h.abs() > MAX_FEATURE_HEIGHT)
        {
            return Err(Error::InvalidContext(format!(
                "terrain features must lie within ±{MAX_FEATURE_HEIGHT} m"
            )));
        }
        Ok(())
    }
}

/// One cubic segment `z + d s + c2 s² + c3 s³`, `s = x - x_k`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Segment {
    z: f64,
    d: f64,
    c2: f64,
    c3: f64,
}

/// Heightmap plus its PCHIP interpolant. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct TerrainModel {
    heightmap: Heightmap,
    segments: Vec<Segment>,
}

/// Local slope and unit surface normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceGradient {
    pub slope: f64,
    pub normal: [f64; 2],
}

impl SurfaceGradient {
    fn from_slope(slope: f64) -> Self {
        let norm = (1.0 + slope * slope).sqrt();
        Self { slope, normal: [-slope / norm, 1.0 / norm] }
    }
}

fn same_sign(a: f64, b: f64) -> bool {
    (a > 0.0 && b > 0.0) || (a < 0.0 && b < 0.0)
}

/// Fritsch–Carlson knot slopes for uniform or non-uniform spacing.
fn pchip_slopes(xs: &[f64], zs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = zs.windows(2).zip(&h).map(|(w, hk)| (w[1] - w[0]) / hk).collect();
    if n == 2 {
        return vec![delta[0]; 2];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        if same_sign(delta[k - 1], delta[k]) {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
        }
    }
    let end_slope = |h0: f64, h1: f64, m0: f64, m1: f64| {
        let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
        if !same_sign(d, m0) {
            0.0
        } else if !same_sign(m0, m1) && d.abs() > 3.0 * m0.abs() {
            3.0 * m0
        } else {
            d
        }
    };
    d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

impl TerrainModel {
    pub fn new(heightmap: Heightmap) -> Self {
        let xs = heightmap.x_samples();
        let zs = heightmap.z_samples();
        let d = pchip_slopes(xs, zs);
        let segments = (0..xs.len() - 1)
            .map(|k| {
                let h = xs[k + 1] - xs[k];
                let delta = (zs[k + 1] - zs[k]) / h;
                Segment {
                    z: zs[k],
                    d: d[k],
                    c2: (3.0 * delta - 2.0 * d[k] - d[k + 1]) / h,
                    c3: (d[k] + d[k + 1] - 2.0 * delta) / (h * h),
                }
            })
            .collect();
        Self { heightmap, segments }
    }

    pub fn flat_default() -> Self {
        Self::new(Heightmap::flat(-0.5, 1.5, 21).expect("valid default grid"))
    }

    pub fn heightmap(&self) -> &Heightmap {
        &self.heightmap
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.heightmap.x_min(), self.heightmap.x_max())
    }

    fn check(&self, x: f64) -> Result<()> {
        let (min, max) = self.x_range();
        if !(x >= min && x <= max) {
            return Err(Error::OutOfRange { x, min, max });
        }
        Ok(())
    }

    /// Segment index and local offset for an in-range `x`.
    fn locate(&self, x: f64) -> (usize, f64) {
        let hm = &self.heightmap;
        let xs = hm.x_samples();
        let mut k = ((x - hm.x_min()) / hm.spacing()).floor() as isize;
        k = k.clamp(0, self.segments.len() as isize - 1);
        let mut k = k as usize;
        // floating-point floor can land one cell off near knots
        if x < xs[k] && k > 0 {
            k -= 1;
        } else if x > xs[k + 1] && k + 1 < self.segments.len() {
            k += 1;
        }
        (k, x - xs[k])
    }

    fn eval(&self, x: f64) -> (f64, f64) {
        let xs = self.heightmap.x_samples();
        let (k, s) = self.locate(x);
        if s == 0.0 {
            return (self.heightmap.z_samples()[k], self.segments[k].d);
        }
        if x == xs[k + 1] {
            let d = if k + 1 < self.segments.len() {
                self.segments[k + 1].d
            } else {
                let seg = &self.segments[k];
                let h = xs[k + 1] - xs[k];
                seg.d + 2.0 * seg.c2 * h + 3.0 * seg.c3 * h * h
            };
            return (self.heightmap.z_samples()[k + 1], d);
        }
        let seg = &self.segments[k];
        let z = seg.z + s * (seg.d + s * (seg.c2 + s * seg.c3));
        let dz = seg.d + s * (2.0 * seg.c2 + 3.0 * seg.c3 * s);
        (z, dz)
    }

    pub fn height_at(&self, x: f64) -> Result<f64> {
        self.check(x)?;
        Ok(self.eval(x).0)
    }

    pub fn gradient_at(&self, x: f64) -> Result<SurfaceGradient> {
        self.check(x)?;
        Ok(SurfaceGradient::from_slope(self.eval(x).1))
    }

    /// Height and gradient with `x` clamped into range. Used inside the
    /// trajectory optimizer, where intermediate iterates may stray.
    pub fn query_clamped(&self, x: f64) -> (f64, SurfaceGradient) {
        let (min, max) = self.x_range();
        let xc = if x.is_nan() { min } else { x.clamp(min, max) };
        let (z, dz) = self.eval(xc);
        if xc != x {
            // flat extension beyond the sampled range
            (z, SurfaceGradient::from_slope(0.0))
        } else {
            (z, SurfaceGradient::from_slope(dz))
        }
    }
}

/// Draws `variable_indices.len()` node heights from `N(0, sigma²)` clipped to
/// ±0.2 m and writes them into a copy of `base`.
pub fn sample_random_terrain<R: Rng + ?Sized>(
    rng: &mut R,
    variable_indices: &[usize],
    sigma: f64,
    base: &Heightmap,
) -> Result<(Heightmap, TerrainFeatures)> {
    if variable_indices.is_empty() {
        return Ok((base.clone(), TerrainFeatures::default()));
    }
    if let Some(&bad) = variable_indices.iter().find(|&&i| i >= base.len()) {
        return Err(Error::InvalidArgument(format!("variable node index {bad} out of range")));
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidArgument(format!("terrain sigma: {e}")))?;
    let mut z = base.z_samples().to_vec();
    let mut heights = Vec::with_capacity(variable_indices.len());
    for &idx in variable_indices {
        let h = normal.sample(rng).clamp(-MAX_FEATURE_HEIGHT, MAX_FEATURE_HEIGHT);
        z[idx] = h;
        heights.push(h);
    }
    let hm = Heightmap::new(base.x_samples().to_vec(), z)?;
    Ok((hm, TerrainFeatures { node_heights: heights }))
}

/// Writes `features` into the variable nodes of `base`.
pub fn apply_features(
    base: &Heightmap,
    variable_indices: &[usize],
    features: &TerrainFeatures,
) -> Result<Heightmap> {
    if features.len() != variable_indices.len() {
        return Err(Error::DimensionMismatch {
            expected: variable_indices.len(),
            got: features.len(),
        });
    }
    let mut z = base.z_samples().to_vec();
    for (&idx, &h) in variable_indices.iter().zip(&features.node_heights) {
        *z.get_mut(idx).ok_or_else(|| {
            Error::InvalidArgument(format!("variable node index {idx} out of range"))
        })? = h;
    }
    Heightmap::new(base.x_samples().to_vec(), z)
}

/// Knots nearest to each of `positions`.
pub fn nearest_indices(base: &Heightmap, positions: &[f64]) -> Vec<usize> {
    positions.iter().map(|&x| base.nearest_index(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bump() -> Heightmap {
        let xs: Vec<f64> = (0..11).map(|i| i as f64 * 0.1).collect();
        let zs = vec![0.0, 0.0, 0.02, 0.1, 0.15, 0.12, 0.0, -0.05, -0.05, 0.0, 0.0];
        Heightmap::new(xs, zs).unwrap()
    }

    #[test]
    fn rejects_bad_heightmaps() {
        assert!(Heightmap::new(vec![0.0], vec![0.0]).is_err());
        assert!(Heightmap::new(vec![0.0, 0.0], vec![0.0, 1.0]).is_err());
        assert!(Heightmap::new(vec![1.0, 0.0], vec![0.0, 1.0]).is_err());
        assert!(Heightmap::new(vec![0.0, 0.1, 0.3], vec![0.0; 3]).is_err());
        assert!(Heightmap::new(vec![0.0, 0.1], vec![0.0; 3]).is_err());
    }

    #[test]
    fn flat_terrain_is_zero() {
        let t = TerrainModel::flat_default();
        for i in 0..=200 {
            let x = -0.5 + i as f64 * 0.01;
            assert_eq!(t.height_at(x).unwrap(), 0.0);
            let g = t.gradient_at(x).unwrap();
            assert_eq!(g.slope, 0.0);
            assert_eq!(g.normal, [0.0, 1.0]);
        }
    }

    #[test]
    fn knots_are_reproduced_exactly() {
        let hm = bump();
        let t = TerrainModel::new(hm.clone());
        for (x, z) in hm.x_samples().iter().zip(hm.z_samples()) {
            assert_eq!(t.height_at(*x).unwrap(), *z);
        }
    }

    #[test]
    fn linear_ramp_has_constant_slope() {
        let xs: Vec<f64> = (0..8).map(|i| i as f64 * 0.25).collect();
        let zs: Vec<f64> = xs.iter().map(|x| 0.3 * x - 0.1).collect();
        let t = TerrainModel::new(Heightmap::new(xs, zs).unwrap());
        for i in 0..=70 {
            let x = i as f64 * 0.025;
            assert!((t.gradient_at(x).unwrap().slope - 0.3).abs() < 1e-12);
            assert!((t.height_at(x).unwrap() - (0.3 * x - 0.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_is_an_error() {
        let t = TerrainModel::new(bump());
        assert!(matches!(t.height_at(-0.01), Err(Error::OutOfRange { .. })));
        assert!(t.gradient_at(1.01).is_err());
        assert!(t.height_at(f64::NAN).is_err());
        assert!(t.height_at(1.0).is_ok());
    }

    #[test]
    fn monotone_data_gives_monotone_interpolant() {
        let xs: Vec<f64> = (0..9).map(|i| i as f64 * 0.1).collect();
        let zs = vec![0.0, 0.01, 0.011, 0.1, 0.18, 0.19, 0.19, 0.2, 0.4];
        let t = TerrainModel::new(Heightmap::new(xs, zs).unwrap());
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=8000 {
            let z = t.height_at(i as f64 * 1e-4).unwrap();
            assert!(z >= prev - 1e-15);
            prev = z;
        }
    }

    #[test]
    fn midpoint_matches_reference_hermite() {
        // reference: Hermite basis evaluated from independently computed
        // harmonic-mean knot slopes
        let hm = bump();
        let t = TerrainModel::new(hm.clone());
        let (xs, zs) = (hm.x_samples(), hm.z_samples());
        let h = 0.1;
        let del: Vec<f64> = zs.windows(2).map(|w| (w[1] - w[0]) / h).collect();
        let slope = |k: usize| -> f64 {
            let (a, b) = (del[k - 1], del[k]);
            if a * b <= 0.0 {
                0.0
            } else {
                2.0 / (1.0 / a + 1.0 / b)
            }
        };
        for k in 1..xs.len() - 2 {
            let (d0, d1) = (slope(k), slope(k + 1));
            let mid = 0.5 * (zs[k] + zs[k + 1]) + h * (d0 - d1) / 8.0;
            let got = t.height_at(xs[k] + 0.5 * h).unwrap();
            assert!((got - mid).abs() < 1e-12, "k={k}: {got} vs {mid}");
        }
    }

    #[test]
    fn text_format_round_trips() {
        let hm = bump();
        let parsed = Heightmap::parse(&format!("# header\n\n{}", hm.to_text())).unwrap();
        assert_eq!(parsed, hm);
        assert!(Heightmap::parse("0 1 2\n").is_err());
        assert!(Heightmap::parse("0 a\n1 0\n").is_err());
    }

    #[test]
    fn random_terrain_respects_nodes_and_bounds() {
        let base = Heightmap::flat(-0.5, 1.5, 21).unwrap();
        let idx = nearest_indices(&base, &[0.4, 0.5, 0.6]);
        assert_eq!(idx, vec![9, 10, 11]);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (hm, f) = sample_random_terrain(&mut rng, &idx, 0.1, &base).unwrap();
            assert_eq!(f.len(), 3);
            f.validate(3).unwrap();
            let changed: Vec<usize> = (0..hm.len())
                .filter(|&i| hm.z_samples()[i] != base.z_samples()[i])
                .collect();
            assert_eq!(changed, idx);
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(sample_random_terrain(&mut rng2, &idx, 0.1, &base).unwrap().0, hm);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (hm, f) = sample_random_terrain(&mut rng, &[], 0.1, &base).unwrap();
        assert_eq!(hm, base);
        assert!(f.is_empty());
    }
}
