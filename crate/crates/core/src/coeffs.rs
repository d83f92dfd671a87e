//! Elementwise-constant material fields: periodic inclusions, raster
//! images, two-phase random layouts and log-Gaussian KLE samples.

use std::path::Path;

use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::FineMesh;
use crate::scalar::{from_usize, lit, to_f64, Real};

/// Lamé parameters, conductivity and thermal expansion, one value per fine
/// element.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialField<T> {
    pub lambda: Vec<T>,
    pub mu: Vec<T>,
    pub kappa: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> MaterialField<T> {
    pub fn constant(elements: usize, lambda: T, mu: T, kappa: T, beta: T) -> Self {
        Self {
            lambda: vec![lambda; elements],
            mu: vec![mu; elements],
            kappa: vec![kappa; elements],
            beta: vec![beta; elements],
        }
    }

    pub fn len(&self) -> usize {
        self.kappa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappa.is_empty()
    }

    pub fn fields(&self) -> [(&'static str, &[T]); 4] {
        [
            ("lambda", &self.lambda),
            ("mu", &self.mu),
            ("kappa", &self.kappa),
            ("beta", &self.beta),
        ]
    }

    /// Checks lengths and strict positivity of all four fields.
    pub fn validate(&self, elements: usize) -> Result<()> {
        for (name, values) in self.fields() {
            if values.len() != elements {
                return Err(Error::DimensionMismatch {
                    what: name,
                    expected: elements,
                    found: values.len(),
                });
            }
            check_positive(name, values)?;
        }
        Ok(())
    }

    /// `λ + 2μ` per element, the weight of the displacement mass.
    pub fn p_modulus(&self) -> Vec<T> {
        self.lambda
            .iter()
            .zip(&self.mu)
            .map(|(&l, &m)| l + m + m)
            .collect()
    }
}

pub fn check_positive<T: Real>(field: &'static str, values: &[T]) -> Result<()> {
    for (element, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{field} at element {element}")));
        }
        if !(v > T::zero()) {
            return Err(Error::CoefficientPositivity {
                field,
                element,
                value: to_f64(v),
            });
        }
    }
    Ok(())
}

/// `max / min` of a positive field.
pub fn contrast<T: Real>(values: &[T]) -> T {
    let (lo, hi) = values
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi / lo
}

/// Lamé parameters from Young's modulus and Poisson's ratio.
pub fn lame_from_young<T: Real>(young: T, poisson: T) -> (T, T) {
    let one = T::one();
    let two = one + one;
    let mu = young / (two * (one + poisson));
    let lambda = young * poisson / ((one + poisson) * (one - two * poisson));
    (lambda, mu)
}

/// Maps a phase indicator onto two coefficient values.
pub fn two_phase<T: Real>(phases: &[bool], low: T, high: T) -> Vec<T> {
    phases.iter().map(|&p| if p { high } else { low }).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InclusionShape {
    /// Centered square; `side` is a fraction of the period cell.
    Square { side: f64 },
    /// Centered disk; `radius` is a fraction of the period cell.
    Disk { radius: f64 },
    /// Every other period cell is the inclusion phase.
    Checkerboard,
}

impl InclusionShape {
    fn validate(self) -> Result<()> {
        match self {
            InclusionShape::Square { side } if !(side > 0.0 && side <= 1.0) => Err(Error::Geometry(
                format!("square side fraction {side} must lie in (0, 1]"),
            )),
            InclusionShape::Disk { radius } if !(radius > 0.0 && radius <= 0.5) => Err(Error::Geometry(
                format!("disk radius fraction {radius} must lie in (0, 0.5]"),
            )),
            _ => Ok(()),
        }
    }

    /// Inclusion area as a fraction of the domain.
    pub fn area_fraction(self) -> f64 {
        match self {
            InclusionShape::Square { side } => side * side,
            InclusionShape::Disk { radius } => std::f64::consts::PI * radius * radius,
            InclusionShape::Checkerboard => 0.5,
        }
    }
}

/// Inclusion indicator per element. `period` is the number of fine cells
/// per period cell along each axis; membership is decided at the element
/// centroid.
pub fn periodic_phases<T: Real>(mesh: &FineMesh<T>, period: usize, shape: InclusionShape) -> Result<Vec<bool>> {
    shape.validate()?;
    if period == 0 || !mesh.nx.is_multiple_of(period) || !mesh.ny.is_multiple_of(period) {
        return Err(Error::Geometry(format!(
            "period of {period} fine cells does not divide the {}x{} grid",
            mesh.nx, mesh.ny
        )));
    }
    let cell_w = to_f64(from_usize::<T>(period) / from_usize::<T>(mesh.nx));
    let cell_h = to_f64(from_usize::<T>(period) / from_usize::<T>(mesh.ny));
    Ok((0..mesh.element_count())
        .map(|e| {
            let c = mesh.centroid(e);
            let (x, y) = (to_f64(c[0]) / cell_w, to_f64(c[1]) / cell_h);
            let (px, py) = (x.floor(), y.floor());
            // local coordinates relative to the period-cell center
            let (lx, ly) = (x - px - 0.5, y - py - 0.5);
            match shape {
                InclusionShape::Square { side } => lx.abs() < 0.5 * side && ly.abs() < 0.5 * side,
                InclusionShape::Disk { radius } => lx * lx + ly * ly < radius * radius,
                InclusionShape::Checkerboard => (px as i64 + py as i64) % 2 == 1,
            }
        })
        .collect())
}

pub fn periodic_field<T: Real>(
    mesh: &FineMesh<T>,
    period: usize,
    shape: InclusionShape,
    value_min: T,
    value_max: T,
) -> Result<Vec<T>> {
    if !(value_min > T::zero()) || value_max < value_min {
        return Err(Error::Geometry(format!(
            "need 0 < value_min <= value_max, got {value_min} and {value_max}"
        )));
    }
    Ok(two_phase(&periodic_phases(mesh, period, shape)?, value_min, value_max))
}

/// Parses whitespace-separated rows; the first line is the top row.
pub fn parse_raster(text: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
    let mut rows = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| format!("line {}: `{tok}`: {e}", line_no + 1))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(format!(
                    "line {}: expected {first} values, found {}",
                    line_no + 1,
                    row.len()
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err("raster is empty".into());
    }
    Ok(rows)
}

pub fn read_raster(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    parse_raster(&text).map_err(|message| Error::Parse {
        file: path.to_path_buf(),
        message,
    })
}

/// Each element takes the pixel covering its centroid. Rows are listed top
/// to bottom and the raster dimensions must divide the cell counts.
pub fn raster_field<T: Real>(mesh: &FineMesh<T>, raster: &[Vec<f64>]) -> Result<Vec<T>> {
    let rows = raster.len();
    let cols = raster.first().map_or(0, Vec::len);
    if rows == 0 || !mesh.ny.is_multiple_of(rows) {
        return Err(Error::DimensionMismatch {
            what: "raster rows",
            expected: mesh.ny,
            found: rows,
        });
    }
    if cols == 0 || !mesh.nx.is_multiple_of(cols) || raster.iter().any(|r| r.len() != cols) {
        return Err(Error::DimensionMismatch {
            what: "raster columns",
            expected: mesh.nx,
            found: cols,
        });
    }
    let values: Vec<T> = (0..mesh.element_count())
        .map(|e| {
            let (i, j) = mesh.cell_of_element(e);
            let col = i / (mesh.nx / cols);
            let row = rows - 1 - j / (mesh.ny / rows);
            lit::<T>(raster[row][col])
        })
        .collect();
    check_positive("raster", &values)?;
    Ok(values)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KleSpec {
    /// Correlation length `l`.
    pub length: f64,
    /// Standard deviation of the log-field.
    pub sigma: f64,
    /// Constant mean `b₀` of the log-field.
    #[serde(default)]
    pub mean: f64,
    /// Retained terms.
    #[serde(default = "default_terms")]
    pub terms: usize,
}

fn default_terms() -> usize {
    50
}

impl KleSpec {
    fn validate(&self) -> Result<()> {
        if !(self.length > 0.0) {
            return Err(Error::config("kle.length", "must be positive"));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::config("kle.sigma", "must be non-negative"));
        }
        if self.terms == 0 {
            return Err(Error::config("kle.terms", "must be at least 1"));
        }
        Ok(())
    }
}

/// Truncated eigenbasis of the unit-variance squared-exponential covariance
/// `exp(-|x - y|² / l²)`, discretized by the midpoint rule on fine-cell
/// centers. Eigenvalues are in descending order.
#[derive(Clone, Debug)]
pub struct KleBasis<T> {
    pub nx: usize,
    pub ny: usize,
    pub eigenvalues: Vec<T>,
    /// `modes[k][j * nx + i]`, normalized so that `Σ φ² / (nx ny) = 1`.
    pub modes: Vec<Vec<T>>,
    /// Unit-variance energy of all `nx ny` modes, i.e. the operator trace.
    pub total_energy: T,
}

/// Eigenpairs of the 1D kernel matrix `K_ij = exp(-(x_i - x_j)² / l²) / n`,
/// descending, with eigenvectors scaled to unit discrete L² norm.
pub fn kle_1d<T: Real>(n: usize, length: T) -> Result<(Vec<T>, Mat<T>)> {
    let h = T::one() / from_usize::<T>(n);
    let half = lit::<T>(0.5);
    let k = Mat::<T>::from_fn(n, n, |i, j| {
        let xi = (from_usize::<T>(i) + half) * h;
        let xj = (from_usize::<T>(j) + half) * h;
        let d = (xi - xj) / length;
        (-(d * d)).exp() * h
    });
    let eig = k
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigensolver(format!("1D covariance: {e:?}")))?;
    // faer returns ascending order
    let vals: Vec<T> = (0..n).rev().map(|i| eig.S()[i].max(T::zero())).collect();
    let scale = from_usize::<T>(n).sqrt();
    let vecs = Mat::<T>::from_fn(n, n, |r, c| eig.U()[(r, n - 1 - c)] * scale);
    Ok((vals, vecs))
}

impl<T: Real> KleBasis<T> {
    pub fn new(nx: usize, ny: usize, length: T, terms: usize) -> Result<Self> {
        let available = nx * ny;
        if terms > available {
            return Err(Error::Truncation {
                requested: terms,
                available,
            });
        }
        let (lx, vx) = kle_1d(nx, length)?;
        let (ly, vy) = if ny == nx { (lx.clone(), vx.clone()) } else { kle_1d(ny, length)? };
        let mut pairs: Vec<(T, usize, usize)> = Vec::with_capacity(available);
        for (a, &la) in lx.iter().enumerate() {
            for (b, &lb) in ly.iter().enumerate() {
                pairs.push((la * lb, a, b));
            }
        }
        pairs.sort_by(|p, q| q.0.partial_cmp(&p.0).unwrap().then((p.1, p.2).cmp(&(q.1, q.2))));
        let total_energy = pairs.iter().map(|p| p.0).sum();
        let kept = &pairs[..terms];
        let modes = kept
            .iter()
            .map(|&(_, a, b)| {
                let mut m = Vec::with_capacity(available);
                for j in 0..ny {
                    for i in 0..nx {
                        m.push(vx[(i, a)] * vy[(j, b)]);
                    }
                }
                m
            })
            .collect();
        Ok(Self {
            nx,
            ny,
            eigenvalues: kept.iter().map(|p| p.0).collect(),
            modes,
            total_energy,
        })
    }

    pub fn for_mesh(mesh: &FineMesh<T>, spec: &KleSpec) -> Result<Self> {
        spec.validate()?;
        Self::new(mesh.nx, mesh.ny, lit::<T>(spec.length), spec.terms)
    }

    /// `Σ_k λ_k φ_k(x)²` at every cell: the variance captured by the
    /// truncation, relative to σ².
    pub fn captured_variance(&self) -> Vec<T> {
        let mut v = vec![T::zero(); self.nx * self.ny];
        for (lam, mode) in self.eigenvalues.iter().zip(&self.modes) {
            for (vi, &phi) in v.iter_mut().zip(mode) {
                *vi += *lam * phi * phi;
            }
        }
        v
    }

    /// Gaussian log-field `b₀ + σ Σ √λ_k φ_k ξ_k` per fine cell.
    pub fn gaussian_cells(&self, spec: &KleSpec, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xi: Vec<T> = (0..self.eigenvalues.len())
            .map(|_| lit::<T>(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let sigma = lit::<T>(spec.sigma);
        let mut g = vec![lit::<T>(spec.mean); self.nx * self.ny];
        if spec.sigma == 0.0 {
            return g;
        }
        for ((lam, mode), &x) in self.eigenvalues.iter().zip(&self.modes).zip(&xi) {
            let w = sigma * lam.sqrt() * x;
            for (gi, &phi) in g.iter_mut().zip(mode) {
                *gi += w * phi;
            }
        }
        g
    }

    /// Lognormal sample expanded to fine elements (both triangles of a
    /// cell share the cell-center value).
    pub fn sample(&self, spec: &KleSpec, seed: u64) -> Result<Vec<T>> {
        let cells = self.gaussian_cells(spec, seed);
        let values: Vec<T> = cells_to_elements(&cells).into_iter().map(|g| g.exp()).collect();
        for (e, v) in values.iter().enumerate() {
            if !v.is_finite() || !(*v > T::zero()) {
                return Err(Error::NonFinite(format!("KLE sample at element {e}")));
            }
        }
        Ok(values)
    }
}

fn cells_to_elements<T: Copy>(cells: &[T]) -> Vec<T> {
    cells.iter().flat_map(|&c| [c, c]).collect()
}

pub fn sample_kle_field<T: Real>(mesh: &FineMesh<T>, spec: &KleSpec, seed: u64) -> Result<Vec<T>> {
    KleBasis::for_mesh(mesh, spec)?.sample(spec, seed)
}

/// Two-phase layout from the sign of a zero-mean KLE sample: elements where
/// the Gaussian field exceeds `mean` belong to the inclusion phase.
pub fn kle_phases<T: Real>(mesh: &FineMesh<T>, spec: &KleSpec, seed: u64) -> Result<Vec<bool>> {
    let basis = KleBasis::for_mesh(mesh, spec)?;
    let mean = lit::<T>(spec.mean);
    let cells = basis.gaussian_cells(spec, seed);
    Ok(cells_to_elements(&cells).into_iter().map(|g| g > mean).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Boundary;

    fn mesh(n: usize) -> FineMesh<f64> {
        FineMesh::unit_square(n, n, Boundary::Bottom).unwrap()
    }

    #[test]
    fn degenerate_contrast_is_constant() {
        let f = periodic_field(&mesh(8), 4, InclusionShape::Disk { radius: 0.3 }, 1.0, 1.0).unwrap();
        assert!(f.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn requested_contrast_is_exact() {
        let f = periodic_field(&mesh(20), 5, InclusionShape::Square { side: 0.6 }, 2.0, 2.0e4).unwrap();
        assert!((contrast(&f) - 1e4).abs() / 1e4 < 1e-10);
    }

    #[test]
    fn square_area_fraction_matches_shape() {
        let m = mesh(40);
        let phases = periodic_phases(&m, 10, InclusionShape::Square { side: 0.6 }).unwrap();
        let frac = phases.iter().filter(|&&p| p).count() as f64 / m.element_count() as f64;
        let element_area = 1.0 / m.element_count() as f64;
        assert!((frac - 0.36).abs() <= element_area + 1e-12, "{frac}");
    }

    #[test]
    fn disk_area_fraction_converges() {
        let m = mesh(200);
        let shape = InclusionShape::Disk { radius: 0.35 };
        let phases = periodic_phases(&m, 50, shape).unwrap();
        let frac = phases.iter().filter(|&&p| p).count() as f64 / m.element_count() as f64;
        // boundary-layer bound: perimeter / period times one fine cell
        let bound = 2.0 * std::f64::consts::PI * 0.35 / 50.0;
        assert!((frac - shape.area_fraction()).abs() < bound, "{frac}");
    }

    #[test]
    fn oversized_inclusion_is_rejected() {
        let r = periodic_phases(&mesh(8), 4, InclusionShape::Disk { radius: 0.6 });
        assert!(matches!(r, Err(Error::Geometry(_))));
        let r = periodic_phases(&mesh(8), 3, InclusionShape::Checkerboard);
        assert!(matches!(r, Err(Error::Geometry(_))));
    }

    #[test]
    fn raster_single_pixel_and_cells() {
        let m = mesh(2);
        let f = raster_field(&m, &[vec![5.0]]).unwrap();
        assert!(f.iter().all(|&v| v == 5.0));
        let raster = parse_raster("1 2\n3 4\n").unwrap();
        let f = raster_field(&m, &raster).unwrap();
        // bottom-left cell is the second raster row
        assert_eq!(&f[0..2], &[3.0, 3.0]);
        assert_eq!(&f[2..4], &[4.0, 4.0]);
        assert_eq!(&f[4..6], &[1.0, 1.0]);
        assert_eq!(&f[6..8], &[2.0, 2.0]);
    }

    #[test]
    fn checkerboard_raster_matches_periodic_field() {
        let m = mesh(12);
        let raster: Vec<Vec<f64>> = (0..4)
            .map(|r| (0..4).map(|c| if (3 - r + c) % 2 == 1 { 7.0 } else { 1.0 }).collect())
            .collect();
        let from_raster = raster_field(&m, &raster).unwrap();
        let periodic = periodic_field(&m, 3, InclusionShape::Checkerboard, 1.0, 7.0).unwrap();
        assert_eq!(from_raster, periodic);
    }

    #[test]
    fn raster_errors() {
        let m = mesh(4);
        assert!(matches!(
            raster_field(&m, &[vec![1.0, 2.0, 3.0]]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            raster_field(&m, &[vec![1.0, -2.0]]),
            Err(Error::CoefficientPositivity { .. })
        ));
        assert!(parse_raster("1 2\n3\n").is_err());
        assert!(parse_raster("1 x\n").is_err());
    }

    #[test]
    fn lame_conversion() {
        let (l, m) = lame_from_young(2.6f64, 0.3);
        assert!((m - 1.0).abs() < 1e-14);
        assert!((l - 2.6 * 0.3 / (1.3 * 0.4)).abs() < 1e-14);
    }

    #[test]
    fn zero_variance_kle_is_exp_mean() {
        let spec = KleSpec {
            length: 0.1,
            sigma: 0.0,
            mean: 0.7,
            terms: 10,
        };
        let f = sample_kle_field(&mesh(10), &spec, 3).unwrap();
        assert!(f.iter().all(|&v| v == 0.7f64.exp()));
    }

    #[test]
    fn kle_is_deterministic_per_seed() {
        let spec = KleSpec {
            length: 0.2,
            sigma: 1.5,
            mean: 0.0,
            terms: 20,
        };
        let m = mesh(10);
        let a = sample_kle_field(&m, &spec, 42).unwrap();
        let b = sample_kle_field(&m, &spec, 42).unwrap();
        let c = sample_kle_field(&m, &spec, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn kle_truncation_limit() {
        let r = KleBasis::<f64>::new(3, 3, 0.1, 10);
        assert!(matches!(
            r,
            Err(Error::Truncation {
                requested: 10,
                available: 9
            })
        ));
    }

    #[test]
    fn kle_eigenvalues_descend_and_modes_are_normalized() {
        let b = KleBasis::<f64>::new(8, 6, 0.3, 20).unwrap();
        for w in b.eigenvalues.windows(2) {
            assert!(w[0] >= w[1] && w[1] >= 0.0);
        }
        for m in &b.modes {
            let s: f64 = m.iter().map(|v| v * v).sum::<f64>() / 48.0;
            assert!((s - 1.0).abs() < 1e-10);
        }
        // the trace of the midpoint-rule operator is one per unit variance
        assert!((b.total_energy - 1.0).abs() < 1e-10);
    }
}
