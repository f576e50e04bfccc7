//! Empirical measures with uniform weights and their lifts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::TimeGrid;
use crate::report::num;

/// `N` labelled points in `ℝⁿ`, each of mass `1/N`, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    points: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates do not form a non-empty ensemble in dimension {dim}",
                points.len()
            )));
        }
        if !linalg::all_finite(&points) {
            return Err(Error::InvalidInput("ensemble contains non-finite coordinates".into()));
        }
        Ok(Self { dim, points })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch("particles of different dimensions".into()));
        }
        Self::new(dim, points.concat())
    }

    /// `count` copies of `x`: the empirical form of `δ_x`.
    pub fn dirac(x: &[f64], count: usize) -> Result<Self> {
        Self::new(x.len(), x.repeat(count))
    }

    /// Independent normal coordinates, reproducible from `seed`.
    pub fn gaussian(dim: usize, count: usize, mean: f64, std: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(mean, std).map_err(|e| Error::InvalidInput(format!("gaussian init: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(dim, (0..dim * count).map(|_| normal.sample(&mut rng)).collect())
    }

    /// Evenly spaced points from `lo` to `hi` (every coordinate alike).
    pub fn grid(dim: usize, count: usize, lo: f64, hi: f64) -> Result<Self> {
        if count == 0 || !(lo <= hi) {
            return Err(Error::InvalidInput(format!("bad grid init ({lo}, {hi}) with {count} points")));
        }
        let pts = (0..count).flat_map(|i| {
            let s = if count == 1 { 0.5 } else { i as f64 / (count - 1) as f64 };
            std::iter::repeat_n(lo + s * (hi - lo), dim)
        });
        Self::new(dim, pts.collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.points
    }

    pub fn mean(&self) -> Vec<f64> {
        mean_of(&self.points, self.dim)
    }

    /// `(1/N) Σ |x_i − mean|²`.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.points
            .chunks(self.dim)
            .map(|p| p.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / self.len() as f64
    }
}

pub(crate) fn mean_of(points: &[f64], dim: usize) -> Vec<f64> {
    let count = (points.len() / dim) as f64;
    let mut m = vec![0.0; dim];
    for p in points.chunks(dim) {
        linalg::axpy(1.0, p, &mut m);
    }
    m.iter_mut().for_each(|v| *v /= count);
    m
}

/// Particle form of a measure on `ℝⁿ × ℝⁿ`: pairs `(x_i, y_i)`. With
/// labelled particles the barycentric projection at `x_i` is just `y_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedEnsemble {
    pub points: ParticleEnsemble,
    pub covectors: Vec<f64>,
}

impl LiftedEnsemble {
    pub fn new(points: ParticleEnsemble, covectors: Vec<f64>) -> Result<Self> {
        if covectors.len() != points.as_slice().len() {
            return Err(Error::DimensionMismatch("one covector per particle is required".into()));
        }
        Ok(Self { points, covectors })
    }

    pub fn barycentric(&self, i: usize) -> &[f64] {
        let n = self.points.dim();
        &self.covectors[i * n..(i + 1) * n]
    }

    /// `⟨y, w⟩_μ = (1/N) Σ y_i·w_i`.
    pub fn pairing(&self, w: &[f64]) -> f64 {
        linalg::dot(&self.covectors, w) / self.points.len() as f64
    }
}

/// Flat per-particle data (`N·n` numbers) on consecutive nodes `start..=end`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePath {
    grid: TimeGrid,
    start: usize,
    dim: usize,
    width: usize,
    data: Vec<f64>,
}

impl EnsemblePath {
    pub(crate) fn from_parts(grid: TimeGrid, start: usize, dim: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len() % width, 0);
        Self { grid, start, dim, width, data }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particles(&self) -> usize {
        self.width / self.dim
    }

    pub fn start_node(&self) -> usize {
        self.start
    }

    pub fn end_node(&self) -> usize {
        self.start + self.data.len() / self.width - 1
    }

    /// Flat data at absolute node index `node`.
    pub fn at(&self, node: usize) -> &[f64] {
        let i = node - self.start;
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn last(&self) -> &[f64] {
        &self.data[self.data.len() - self.width..]
    }

    pub fn ensemble(&self, node: usize) -> ParticleEnsemble {
        ParticleEnsemble { dim: self.dim, points: self.at(node).to_vec() }
    }

    /// Snapshot rows `t,particle,x_1..`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,particle");
        for i in 1..=self.dim {
            s.push_str(&format!(",x_{i}"));
        }
        s.push('\n');
        for node in self.start..=self.end_node() {
            let t = num(self.grid.node(node));
            for (i, p) in self.at(node).chunks(self.dim).enumerate() {
                s.push_str(&format!("{t},{i}"));
                for v in p {
                    s.push(',');
                    s.push_str(&num(*v));
                }
                s.push('\n');
            }
        }
        s
    }
}

/// `W₂` between two one-dimensional ensembles of equal size: in 1-D the
/// monotone (sorted) pairing is optimal.
pub fn wasserstein2_1d(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 || a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "need two 1-D ensembles of equal size, got {}×{} and {}×{}",
            a.len(),
            a.dim(),
            b.len(),
            b.dim()
        )));
    }
    let sorted = |e: &ParticleEnsemble| {
        let mut v = e.as_slice().to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (sa, sb) = (sorted(a), sorted(b));
    let mean_sq = sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / sa.len() as f64;
    Ok(mean_sq.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(v: &[f64]) -> ParticleEnsemble {
        ParticleEnsemble::new(1, v.to_vec()).unwrap()
    }

    #[test]
    fn w2_examples() {
        assert_eq!(wasserstein2_1d(&line(&[0.3, -1.0]), &line(&[0.3, -1.0])).unwrap(), 0.0);
        assert_eq!(wasserstein2_1d(&line(&[0.0]), &line(&[1.0])).unwrap(), 1.0);
        assert_eq!(wasserstein2_1d(&line(&[2.0, 0.0]), &line(&[1.0, 3.0])).unwrap(), 1.0);
        assert!(wasserstein2_1d(&line(&[0.0]), &line(&[0.0, 1.0])).is_err());
        let planar = ParticleEnsemble::new(2, vec![0.0, 1.0]).unwrap();
        assert!(wasserstein2_1d(&planar, &planar).is_err());
    }

    #[test]
    fn constructors() {
        assert!(ParticleEnsemble::new(2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(ParticleEnsemble::new(1, vec![]).is_err());
        assert!(ParticleEnsemble::new(1, vec![f64::NAN]).is_err());
        let g = ParticleEnsemble::grid(1, 5, -1.0, 1.0).unwrap();
        assert_eq!(g.as_slice(), &[-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(g.mean(), vec![0.0]);
        assert!((g.variance() - 0.5).abs() < 1e-15);
        let d = ParticleEnsemble::dirac(&[1.0, 2.0], 3).unwrap();
        assert_eq!((d.len(), d.point(2)), (3, &[1.0, 2.0][..]));
        let a = ParticleEnsemble::gaussian(1, 50, 0.0, 1.0, 7).unwrap();
        assert_eq!(a, ParticleEnsemble::gaussian(1, 50, 0.0, 1.0, 7).unwrap());
        assert_ne!(a, ParticleEnsemble::gaussian(1, 50, 0.0, 1.0, 8).unwrap());
    }

    #[test]
    fn lifted_pairing() {
        let pts = line(&[0.0, 1.0]);
        let lift = LiftedEnsemble::new(pts, vec![2.0, 4.0]).unwrap();
        assert_eq!(lift.barycentric(1), &[4.0]);
        assert_eq!(lift.pairing(&[1.0, 1.0]), 3.0);
        assert!(LiftedEnsemble::new(line(&[0.0]), vec![1.0, 2.0]).is_err());
    }
}
