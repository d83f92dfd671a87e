//! Self-checks behind `cgmsfem verify`: manufactured convergence, the
//! structural invariants, the local interpolation bound, exactness at full
//! enrichment and the KLE oracle.

use faer::{Mat, Side};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::assembly::{assemble_global, assemble_patch, OperatorBlocks};
use crate::coeffs::{periodic_phases, sample_kle_field, two_phase, InclusionShape, KleBasis, KleSpec, MaterialField};
use crate::diagnostics::{coupling_transpose_defect, energy_errors, interpolation_check, largest_principal_sine, InterpolationCheck};
use crate::error::{Error, Result};
use crate::mesh::{build_mesh_pair, build_partition_of_unity, Boundary, FineMesh, MeshPair, PouKind};
use crate::scalar::dot;
use crate::spectral::{
    build_multiscale_basis, coupled_spectra, decoupled_spectra, solve_patch_spectrum, MultiscaleBasis, PatchSpectrum,
    Selection, SpectralConfig, DEFAULT_DOF_LIMIT,
};
use crate::sparse;
use crate::timeloop::manufactured::{Manufactured, Profile};
use crate::timeloop::{
    history_matrix, initial_state, initial_state_from, run_march, run_march_from, system_matrix, CoarseStepper, March,
    Problem, Sources, StoragePolicy, TimeGrid,
};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Upper bound when `at_most`, lower bound otherwise.
    pub bound: f64,
    pub at_most: bool,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            bound,
            at_most: true,
            passed: value <= bound,
        }
    }

    pub fn at_least(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            bound,
            at_most: false,
            passed: value >= bound,
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let op = if self.at_most { "<=" } else { ">=" };
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {:.3e} {op} {:.1e}", self.name, self.value, self.bound)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Suite {
    Manufactured,
    Invariants,
    Lemma,
}

impl std::str::FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "manufactured" => Ok(Suite::Manufactured),
            "invariants" => Ok(Suite::Invariants),
            "lemma" => Ok(Suite::Lemma),
            _ => Err(format!("unknown suite {s:?} (expected manufactured, invariants or lemma)")),
        }
    }
}

pub fn run_suite(suite: Suite) -> Result<Vec<Check>> {
    faer::set_global_parallelism(faer::Par::Seq);
    match suite {
        Suite::Manufactured => {
            let m = manufactured_study(&MANUFACTURED_SIZES)?;
            Ok(vec![
                Check::at_least("displacement L2 order", m.min_order_u(), MIN_ORDER),
                Check::at_least("temperature L2 order", m.min_order_theta(), MIN_ORDER),
            ])
        }
        Suite::Invariants => invariant_checks(),
        Suite::Lemma => {
            let r = lemma_check(LEMMA_TRIALS, 7)?;
            Ok(vec![
                Check::at_least("interpolation trials passed", r.passed as f64, r.trials as f64),
                Check::at_least("worst relative margin", r.worst_margin, -crate::diagnostics::LEMMA_SLACK),
            ])
        }
    }
}

pub const MANUFACTURED_SIZES: [usize; 3] = [16, 32, 64];
pub const MIN_ORDER: f64 = 1.8;
pub const LEMMA_TRIALS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ManufacturedStudy {
    pub sizes: Vec<usize>,
    pub err_u: Vec<f64>,
    pub err_theta: Vec<f64>,
}

fn orders(sizes: &[usize], err: &[f64]) -> Vec<f64> {
    sizes
        .windows(2)
        .zip(err.windows(2))
        .map(|(n, e)| (e[0] / e[1]).ln() / (n[1] as f64 / n[0] as f64).ln())
        .collect()
}

impl ManufacturedStudy {
    pub fn orders_u(&self) -> Vec<f64> {
        orders(&self.sizes, &self.err_u)
    }

    pub fn orders_theta(&self) -> Vec<f64> {
        orders(&self.sizes, &self.err_theta)
    }

    pub fn min_order_u(&self) -> f64 {
        self.orders_u().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn min_order_theta(&self) -> f64 {
        self.orders_theta().into_iter().fold(f64::INFINITY, f64::min)
    }
}

/// Final-time L² errors of the fine solver against the closed-form
/// solution on constant coefficients, `τ = h`, `T = 1`.
pub fn manufactured_study(sizes: &[usize]) -> Result<ManufacturedStudy> {
    let m = Manufactured {
        lambda: 2.0,
        mu: 1.0,
        kappa: 1.0,
        beta: 1.0,
        profile: Profile::Linear,
    };
    let mut out = ManufacturedStudy {
        sizes: sizes.to_vec(),
        err_u: Vec::new(),
        err_theta: Vec::new(),
    };
    for &n in sizes {
        let mesh = FineMesh::<f64>::unit_square(n, n, Boundary::AllEdges)?;
        let mat = MaterialField::constant(mesh.element_count(), m.lambda, m.mu, m.kappa, m.beta);
        let (blocks, dofs) = assemble_global(&mesh, &mat)?;
        let problem = Problem {
            mesh: &mesh,
            blocks: &blocks,
            dofs: &dofs,
            sources: m.sources(),
        };
        let grid = TimeGrid::uniform(1.0, 1.0 / n as f64)?;
        let h = run_march(&problem, &grid, March::Fine, StoragePolicy::Final)?;
        let (eu, et) = m.l2_errors(&mesh, h.last().unwrap(), 1.0)?;
        out.err_u.push(eu);
        out.err_theta.push(et);
    }
    Ok(out)
}

/// Checkerboard of `period` fine cells with contrast 1e2 on `λ, μ` and 1e4
/// on `κ, β`.
pub fn checkerboard(mesh: &FineMesh<f64>, period: usize) -> Result<MaterialField<f64>> {
    let p = periodic_phases(mesh, period, InclusionShape::Checkerboard)?;
    Ok(MaterialField {
        lambda: two_phase(&p, 1.0, 100.0),
        mu: two_phase(&p, 1.0, 100.0),
        kappa: two_phase(&p, 1.0, 1e4),
        beta: two_phase(&p, 1.0, 1e4),
    })
}

fn heated<'a>(pair: &'a MeshPair<f64>, blocks: &'a OperatorBlocks<f64>, dofs: &'a crate::assembly::DofMap) -> Problem<'a, f64> {
    let mut sources = Sources::zero();
    sources.heat = std::sync::Arc::new(|_, _| 10.0);
    sources.theta0 = std::sync::Arc::new(|p| 500.0 * p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]));
    Problem {
        mesh: &pair.fine,
        blocks,
        dofs,
        sources,
    }
}

/// Worst relative energy error between the fine trajectory and the
/// CGMsFEM trajectory with every local mode kept, on a 4×4 / 2×2 mesh,
/// over all 50 steps to `T = 1`.
pub fn full_enrichment_defect() -> Result<f64> {
    let pair = build_mesh_pair::<f64>(4, 4, 2, 2, Boundary::Bottom)?;
    let mat = checkerboard(&pair.fine, 1)?;
    let (blocks, dofs) = assemble_global(&pair.fine, &mat)?;
    let pou = build_partition_of_unity(&pair, PouKind::Bilinear, None)?;
    let config = SpectralConfig::new(0.4, 0.04, usize::MAX);
    let spectra = coupled_spectra(&pair, &mat, &config, usize::MAX)?;
    let sel: Vec<Selection> = spectra.iter().map(|s| Selection::Leading(s.vectors.ncols())).collect();
    let basis = build_multiscale_basis(&pair, &pou, &spectra, &sel, &dofs, true)?;
    let problem = heated(&pair, &blocks, &dofs);
    let grid = TimeGrid::uniform(1.0, 0.02)?;
    let fine = run_march(&problem, &grid, March::Fine, StoragePolicy::Full)?;
    let coarse = run_march(&problem, &grid, March::Coarse(&basis), StoragePolicy::Full)?;
    let mut worst = 0.0f64;
    for (f, c) in fine.states.iter().zip(&coarse.states) {
        worst = worst.max(energy_errors(&blocks, f, c)?.err_w);
    }
    Ok(worst)
}

/// The γ₂ = −γ₁ configuration used for the interpolation bound: γ = 0 on a
/// heterogeneous interior patch, `L = 6` (beyond the four-dimensional
/// kernel of rigid motions and constant temperature).
pub fn lemma_check(trials: usize, seed: u64) -> Result<InterpolationCheck> {
    let pair = build_mesh_pair::<f64>(6, 6, 2, 2, Boundary::Bottom)?;
    let ne = pair.fine.element_count();
    let mut mat = MaterialField::constant(ne, 1.0, 1.0, 1.0, 1.0);
    for e in 0..ne {
        if (e / 2) % 3 == 1 {
            mat.lambda[e] = 50.0;
            mat.mu[e] = 50.0;
            mat.kappa[e] = 1e3;
            mat.beta[e] = 1e3;
        }
    }
    let patch = &pair.coarse.patches[4];
    let blocks = assemble_patch(&pair.fine, &mat, patch)?;
    let spectrum = solve_patch_spectrum(&blocks, 4, 0.0, 0.0, usize::MAX, DEFAULT_DOF_LIMIT)?;
    interpolation_check(&blocks, &spectrum, 6, trials, seed)
}

/// Largest relative deviation of the tensor-product KLE eigenvalues from a
/// dense eigendecomposition of the centroid covariance on a 12×12 grid,
/// over the top `modes`.
pub fn kle_oracle_defect(length: f64, modes: usize) -> Result<f64> {
    let n = 12;
    let basis = KleBasis::<f64>::new(n, n, length, modes)?;
    let h = 1.0 / n as f64;
    let centers: Vec<[f64; 2]> = (0..n * n).map(|k| [((k % n) as f64 + 0.5) * h, ((k / n) as f64 + 0.5) * h]).collect();
    let k = Mat::<f64>::from_fn(n * n, n * n, |a, b| {
        let (p, q) = (centers[a], centers[b]);
        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        (-d2 / (length * length)).exp() * h * h
    });
    let eig = k
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigensolver(format!("dense covariance: {e:?}")))?;
    let m = n * n;
    let mut worst = 0.0f64;
    for (i, &tensor) in basis.eigenvalues.iter().enumerate() {
        let dense = eig.S()[m - 1 - i];
        worst = worst.max((tensor - dense).abs() / dense.abs());
    }
    Ok(worst)
}

/// Whether a σ = 0 sample equals `exp(b₀)` at every element, bit for bit.
pub fn kle_zero_variance_exact(mean: f64) -> Result<bool> {
    let mesh = FineMesh::<f64>::unit_square(12, 12, Boundary::Bottom)?;
    let spec = KleSpec {
        length: 0.2,
        sigma: 0.0,
        mean,
        terms: 50,
    };
    Ok(sample_kle_field(&mesh, &spec, 99)?.iter().all(|&v| v == mean.exp()))
}

fn dense_columns(basis: &MultiscaleBasis<f64>) -> Mat<f64> {
    sparse::to_dense(&basis.r)
}

/// Smallest `L ≥ from` with a relative gap after `μ_L`.
fn gapped_count(s: &PatchSpectrum<f64>, from: usize) -> usize {
    let ev = &s.eigenvalues;
    let top = ev.last().map_or(1.0, |z| z.norm());
    (from..ev.len() - 1)
        .find(|&l| ev[l].re - ev[l - 1].re > 1e-6 * top)
        .unwrap_or(ev.len())
}

pub fn invariant_checks() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let pair = build_mesh_pair::<f64>(8, 8, 2, 2, Boundary::Bottom)?;
    let mat = checkerboard(&pair.fine, 2)?;
    let (blocks, dofs) = assemble_global(&pair.fine, &mat)?;
    let n = blocks.nodes;

    // kernel of every patch pencil
    let config = SpectralConfig::new(0.4, 0.04, 6);
    let spectra = coupled_spectra(&pair, &mat, &config, 8)?;
    let fewest = spectra
        .iter()
        .map(|s| {
            let top = s.eigenvalues.iter().fold(0.0f64, |m, z| m.max(z.norm()));
            s.eigenvalues.iter().filter(|z| z.norm() < 1e-10 * top).count()
        })
        .min()
        .unwrap_or(0);
    checks.push(Check::at_least("zero modes per patch", fewest as f64, 3.0));

    // adjointness, assembled and through the pencil
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut normal = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let (x, y) = (normal(2 * n), normal(n));
    let lhs = dot(&blocks.a3_mul(&x), &y);
    let rhs = dot(&x, &sparse::mul_vec(&blocks.a2, &y));
    checks.push(Check::at_most("A3 = A2^T (global)", (lhs - rhs).abs() / rhs.abs().max(1e-300), 1e-12));
    let patch_blocks = assemble_patch(&pair.fine, &mat, &pair.coarse.patches[4])?;
    checks.push(Check::at_most("A3 = A2^T (patch pencil)", coupling_transpose_defect(&patch_blocks)?, 1e-14));

    // Galerkin energy identity and orthogonality
    let pou = build_partition_of_unity(&pair, PouKind::Bilinear, None)?;
    let sel = vec![Selection::Leading(6); spectra.len()];
    let basis = build_multiscale_basis(&pair, &pou, &spectra, &sel, &dofs, true)?;
    let tau = 0.02;
    let stepper = CoarseStepper::new(&blocks, &basis, tau)?;
    let big = system_matrix(&blocks, tau)?;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let vc = normal(basis.len());
        let coarse = dot(&vc, &mul_dense(&stepper.a_c, &vc));
        let v = sparse::mul_vec(&basis.r, &vc);
        let fine = sparse::quad(&big, &v);
        worst = worst.max((coarse - fine).abs() / fine.abs());
    }
    checks.push(Check::at_most("Galerkin energy identity", worst, 1e-12));
    checks.push(Check::at_most("Galerkin orthogonality", galerkin_residual(&pair, &blocks, &dofs, &basis, tau)?, 1e-10));

    // partitions of unity
    for (kind, name) in [(PouKind::Bilinear, "bilinear"), (PouKind::MsfemHarmonic, "msfem-harmonic")] {
        let p = build_partition_of_unity(&pair, kind, Some(&mat.kappa))?;
        let worst = p.sum(&pair).iter().fold(0.0f64, |m, s| m.max((s - 1.0).abs()));
        checks.push(Check::at_most(&format!("partition of unity sum ({name})"), worst, 1e-12));
    }

    // energy decay with zero sources from a random temperature
    let problem = Problem {
        mesh: &pair.fine,
        blocks: &blocks,
        dofs: &dofs,
        sources: Sources::zero(),
    };
    let theta = normal(n);
    let w0 = initial_state_from(&problem, &theta)?;
    let grid = TimeGrid::uniform(1.0, 0.02)?;
    let hist = run_march_from(&problem, &grid, March::Fine, StoragePolicy::Full, w0)?;
    let energy = |w: &[f64]| 0.5 * sparse::quad(&blocks.a1, &w[..2 * n]) + 0.5 * sparse::quad(&blocks.m_theta, &w[2 * n..]);
    let mut rise = 0.0f64;
    for pair_w in hist.states.windows(2) {
        let (e0, e1) = (energy(&pair_w[0]), energy(&pair_w[1]));
        rise = rise.max((e1 - e0) / e0.max(1e-300));
    }
    checks.push(Check::at_most("energy increase over 50 steps", rise.max(0.0), 1e-12));

    // eigen-selection invariance under uniform mass rescaling
    let c = 3.7;
    let mut scaled = patch_blocks.clone();
    scaled.m1 = sparse::lincomb(c, &patch_blocks.m1, 0.0, &patch_blocks.m1)?;
    scaled.m2 = sparse::lincomb(c, &patch_blocks.m2, 0.0, &patch_blocks.m2)?;
    let s0 = solve_patch_spectrum(&patch_blocks, 4, 0.4, 0.04, 12, DEFAULT_DOF_LIMIT)?;
    let s1 = solve_patch_spectrum(&scaled, 4, 0.4, 0.04, 12, DEFAULT_DOF_LIMIT)?;
    let l = gapped_count(&s0, 4).min(11);
    let mut eig_dev = 0.0f64;
    for k in 0..=l {
        let (a, b) = (s0.eigenvalues[k], s1.eigenvalues[k] * c);
        eig_dev = eig_dev.max((a - b).norm() / s0.eigenvalues.last().unwrap().norm());
    }
    checks.push(Check::at_most("mass rescaling: eigenvalues", eig_dev, 1e-10));
    let sine = largest_principal_sine(&s0.vectors.subcols(0, l).to_owned(), &s1.vectors.subcols(0, l).to_owned())?;
    checks.push(Check::at_most("mass rescaling: selected subspace", sine, 1e-8));

    // γ = 0 coupled basis spans the decoupled one
    checks.push(Check::at_most("gamma = 0 vs decoupled: principal angle", zero_coupling_angle()?, 1e-8));

    // zero data stays zero
    let zero = Problem {
        mesh: &pair.fine,
        blocks: &blocks,
        dofs: &dofs,
        sources: Sources::zero(),
    };
    let grid = TimeGrid::uniform(0.1, 0.02)?;
    let z = run_march(&zero, &grid, March::Coarse(&basis), StoragePolicy::Full)?;
    let biggest = z.states.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    checks.push(Check::at_most("zero data gives zero coarse states", biggest, 0.0));
    Ok(checks)
}

fn mul_dense(a: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    (0..a.nrows()).map(|i| (0..a.ncols()).map(|j| a[(i, j)] * x[j]).sum()).collect()
}

/// Largest `‖Rᵀ(A w^n − B w^{n−1} − F^n)‖` over five coarse steps of the
/// heated problem, relative to the largest of the three projected terms;
/// `w` are the downscaled states.
fn galerkin_residual(
    pair: &MeshPair<f64>,
    blocks: &OperatorBlocks<f64>,
    dofs: &crate::assembly::DofMap,
    basis: &MultiscaleBasis<f64>,
    tau: f64,
) -> Result<f64> {
    let problem = heated(pair, blocks, dofs);
    let grid = TimeGrid::uniform(5.0 * tau, tau)?;
    let hist = run_march_from(&problem, &grid, March::Coarse(basis), StoragePolicy::Full, initial_state(&problem)?)?;
    let a = system_matrix(blocks, tau)?;
    let b = history_matrix(blocks)?;
    let (f, g) = problem.loads(0.0)?;
    let rhs: Vec<f64> = f.into_iter().chain(g.into_iter().map(|x| x * tau)).collect();
    let project = |v: &[f64]| crate::scalar::norm2(&sparse::mul_vec_t(&basis.r, v));
    let mut worst = 0.0f64;
    for w in hist.states.windows(2) {
        let aw = sparse::mul_vec(&a, &w[1]);
        let bw = sparse::mul_vec(&b, &w[0]);
        let r: Vec<f64> = aw.iter().zip(&bw).zip(&rhs).map(|((x, y), z)| x - y - z).collect();
        let scale = project(&aw).max(project(&bw)).max(project(&rhs));
        worst = worst.max(project(&r) / scale);
    }
    Ok(worst)
}

/// Sine of the largest principal angle between the global spans of the
/// γ = 0 coupled basis and the decoupled basis with the same displacement
/// and temperature counts per patch, on a 4×4 / 2×2 checkerboard.
pub fn zero_coupling_angle() -> Result<f64> {
    let pair = build_mesh_pair::<f64>(4, 4, 2, 2, Boundary::Bottom)?;
    let mat = checkerboard(&pair.fine, 1)?;
    let (_, dofs) = assemble_global(&pair.fine, &mat)?;
    let pou = build_partition_of_unity(&pair, PouKind::Bilinear, None)?;
    let coupled = coupled_spectra(&pair, &mat, &SpectralConfig::new(0.0, 0.0, 8), usize::MAX)?;
    let decoupled = decoupled_spectra(&pair, &mat, usize::MAX, usize::MAX, DEFAULT_DOF_LIMIT)?;
    let mut sel_c = Vec::new();
    let mut sel_d = Vec::new();
    for (c, d) in coupled.iter().zip(&decoupled) {
        let l = gapped_count(c, 6);
        let cut = 0.5 * (c.eigenvalues[l - 1].re + c.eigenvalues[l].re);
        let u_modes = match d.layout {
            crate::spectral::Layout::Decoupled { u_modes } => u_modes,
            _ => unreachable!(),
        };
        let (u_vals, t_vals) = d.vector_eigenvalues.split_at(u_modes);
        let u = u_vals.iter().filter(|z| z.re < cut).count();
        let t = t_vals.iter().filter(|z| z.re < cut).count();
        if u + t != l {
            return Err(Error::SpectrumMismatch(format!(
                "patch {}: {u}+{t} decoupled modes below the cut, {l} coupled",
                c.patch
            )));
        }
        sel_c.push(Selection::Leading(l));
        sel_d.push(Selection::Split { u, theta: t });
    }
    let a = build_multiscale_basis(&pair, &pou, &coupled, &sel_c, &dofs, true)?;
    let b = build_multiscale_basis(&pair, &pou, &decoupled, &sel_d, &dofs, true)?;
    if a.len() != b.len() {
        return Err(Error::SpectrumMismatch(format!("{} coupled columns, {} decoupled", a.len(), b.len())));
    }
    largest_principal_sine(&dense_columns(&a), &dense_columns(&b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_of_exact_second_order_data() {
        let o = orders(&[10, 20, 40], &[1.0, 0.25, 0.0625]);
        assert!(o.iter().all(|x| (x - 2.0).abs() < 1e-12));
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("lemma".parse::<Suite>().unwrap(), Suite::Lemma);
        assert!("other".parse::<Suite>().is_err());
    }

    #[test]
    fn check_display() {
        let c = Check::at_most("x", 1e-13, 1e-12);
        assert!(c.passed);
        assert!(c.to_string().starts_with("PASS x"));
        assert!(!Check::at_least("y", 1.0, 2.0).passed);
    }
}
