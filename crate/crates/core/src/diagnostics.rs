//! Relative energy errors, eigenvalue-decay tables and the local
//! interpolation check.

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::assembly::OperatorBlocks;
use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Real};
use crate::spectral::{patch_mass, patch_operator, PatchSpectrum};
use crate::sparse;

/// Relative energy errors of a candidate against a reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ErrorReport {
    pub err_u: f64,
    pub err_theta: f64,
    pub err_w: f64,
}

/// Squared energy numerators and reference energies behind an
/// [`ErrorReport`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyParts {
    pub diff_u: f64,
    pub diff_theta: f64,
    pub ref_u: f64,
    pub ref_theta: f64,
}

impl EnergyParts {
    pub fn report(&self) -> Result<ErrorReport> {
        let ratio = |num: f64, den: f64, what: &'static str| {
            if den > 0.0 {
                Ok((num / den).sqrt())
            } else {
                Err(Error::UndefinedRatio(what))
            }
        };
        Ok(ErrorReport {
            err_u: ratio(self.diff_u, self.ref_u, "displacement")?,
            err_theta: ratio(self.diff_theta, self.ref_theta, "temperature")?,
            err_w: ratio(self.diff_u + self.diff_theta, self.ref_u + self.ref_theta, "total")?,
        })
    }

    /// As [`report`](Self::report), except that a zero difference against a
    /// zero reference counts as an exact match.
    pub fn report_or_exact(&self) -> Result<ErrorReport> {
        let ratio = |num: f64, den: f64, what: &'static str| {
            if den > 0.0 {
                Ok((num / den).sqrt())
            } else if num == 0.0 {
                Ok(0.0)
            } else {
                Err(Error::UndefinedRatio(what))
            }
        };
        Ok(ErrorReport {
            err_u: ratio(self.diff_u, self.ref_u, "displacement")?,
            err_theta: ratio(self.diff_theta, self.ref_theta, "temperature")?,
            err_w: ratio(self.diff_u + self.diff_theta, self.ref_u + self.ref_theta, "total")?,
        })
    }
}

/// `eᵀA₁e` and `eᵀA₄e` for `e = reference − candidate`, and the reference
/// energies in the same forms.
pub fn energy_parts<T: Real>(blocks: &OperatorBlocks<T>, reference: &[T], candidate: &[T]) -> Result<EnergyParts> {
    let n = blocks.nodes;
    for (what, v) in [("reference state", reference), ("candidate state", candidate)] {
        if v.len() != 3 * n {
            return Err(Error::DimensionMismatch {
                what,
                expected: 3 * n,
                found: v.len(),
            });
        }
    }
    let e: Vec<T> = reference.iter().zip(candidate).map(|(&a, &b)| a - b).collect();
    let parts = EnergyParts {
        diff_u: to_f64(sparse::quad(&blocks.a1, &e[..2 * n])),
        diff_theta: to_f64(sparse::quad(&blocks.a4, &e[2 * n..])),
        ref_u: to_f64(sparse::quad(&blocks.a1, &reference[..2 * n])),
        ref_theta: to_f64(sparse::quad(&blocks.a4, &reference[2 * n..])),
    };
    if [parts.diff_u, parts.diff_theta, parts.ref_u, parts.ref_theta]
        .iter()
        .any(|x| !x.is_finite())
    {
        return Err(Error::NonFinite("energy error".into()));
    }
    Ok(parts)
}

pub fn energy_errors<T: Real>(blocks: &OperatorBlocks<T>, reference: &[T], candidate: &[T]) -> Result<ErrorReport> {
    energy_parts(blocks, reference, candidate)?.report()
}

/// `Λ_{L+1} = min_i H² Re μ_{L+1}` over patches, for each requested `L`.
pub fn eigen_decay_report<T: Real>(spectra: &[PatchSpectrum<T>], counts: &[usize], h: T) -> Result<Vec<(usize, f64)>> {
    counts
        .iter()
        .map(|&l| {
            let mut lo = f64::INFINITY;
            for s in spectra {
                if s.len() <= l {
                    return Err(Error::SpectrumMismatch(format!(
                        "patch {} has {} eigenvalues, Λ_{} requested",
                        s.patch,
                        s.len(),
                        l + 1
                    )));
                }
                lo = lo.min(to_f64(s.scaled(l, h)));
            }
            Ok((l, lo))
        })
        .collect()
}

/// `⦀w⦀²_s = Σ_l μ_l^s c_l²` with `c_l = M(w, ψ_l)` over the stored vectors.
/// `μ_l` are the raw pencil eigenvalues, so `μ_l = Λ_l / H²`.
pub fn seminorm<T: Real>(blocks: &OperatorBlocks<T>, spectrum: &PatchSpectrum<T>, w: &[T], s: u32) -> Result<f64> {
    let c = m_coefficients(blocks, spectrum, w)?;
    Ok(weighted(&c, spectrum, s))
}

fn m_coefficients<T: Real>(blocks: &OperatorBlocks<T>, spectrum: &PatchSpectrum<T>, w: &[T]) -> Result<Vec<f64>> {
    let n = spectrum.vectors.nrows();
    if w.len() != n || 3 * blocks.nodes != n {
        return Err(Error::DimensionMismatch {
            what: "patch vector",
            expected: n,
            found: w.len(),
        });
    }
    let mw = sparse::mul_vec(&patch_mass(blocks)?, w);
    Ok((0..spectrum.vectors.ncols())
        .map(|l| (0..n).map(|i| to_f64(spectrum.vectors[(i, l)] * mw[i])).sum())
        .collect())
}

fn weighted<T: Real>(c: &[f64], spectrum: &PatchSpectrum<T>, s: u32) -> f64 {
    c.iter()
        .zip(&spectrum.vector_eigenvalues)
        .map(|(&cl, mu)| {
            let m = to_f64(mu.re).max(0.0);
            if s == 0 {
                cl * cl
            } else {
                m.powi(s as i32) * cl * cl
            }
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterpolationCheck {
    pub trials: usize,
    pub passed: usize,
    /// Smallest `(rhs − lhs) / rhs` over trials and orders.
    pub worst_margin: f64,
    pub orders: Vec<u32>,
}

impl InterpolationCheck {
    pub fn all_passed(&self) -> bool {
        self.passed == self.trials
    }
}

pub const LEMMA_SLACK: f64 = 1e-8;

/// Random trials of `M(w − I_L w, w − I_L w) ≤ μ_{L+1}^{-s} ⦀w⦀²_s` for `w`
/// in the span of the first `2L` modes and `s ∈ {1, 2}`, where `I_L` is the
/// `M`-orthogonal projection onto the first `L` modes.
///
/// The bound presumes an `M`-orthogonal eigenbasis with positive
/// eigenvalues beyond the first `L`. Nonsymmetric pencils and pencils with
/// negative eigenvalues are rejected.
pub fn interpolation_check<T: Real>(
    blocks: &OperatorBlocks<T>,
    spectrum: &PatchSpectrum<T>,
    l: usize,
    trials: usize,
    seed: u64,
) -> Result<InterpolationCheck> {
    if !spectrum.symmetric {
        return Err(Error::Unsupported(
            "the interpolation bound needs a symmetric pencil (gamma2 = -gamma1)".into(),
        ));
    }
    let stored = spectrum.vectors.ncols();
    if stored < 2 * l || spectrum.len() <= l || l == 0 {
        return Err(Error::SpectrumMismatch(format!(
            "interpolation check with L = {l} needs 2L stored modes, patch {} has {stored}",
            spectrum.patch
        )));
    }
    let radius = spectrum
        .eigenvalues
        .iter()
        .fold(0.0f64, |r, z| r.max(to_f64(z.norm())));
    let most_negative = spectrum.eigenvalues.iter().map(|z| to_f64(z.re)).fold(0.0f64, f64::min);
    if most_negative < -1e-10 * radius {
        return Err(Error::Unsupported(format!(
            "patch {} pencil is indefinite (eigenvalue {most_negative:e}); the bound assumes a nonnegative spectrum",
            spectrum.patch
        )));
    }
    let mu_next = to_f64(spectrum.eigenvalues[l].re);
    if !(mu_next > 1e-10 * radius) {
        return Err(Error::Unsupported(format!(
            "patch {}: eigenvalue {} is zero, choose L beyond the kernel",
            spectrum.patch,
            l + 1
        )));
    }
    let mass = patch_mass(blocks)?;
    let n = spectrum.vectors.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let orders = vec![1u32, 2];
    let mut passed = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..trials {
        let xi: Vec<f64> = (0..2 * l).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w: Vec<T> = (0..n)
            .map(|i| {
                xi.iter()
                    .enumerate()
                    .fold(T::zero(), |acc, (k, &x)| acc + spectrum.vectors[(i, k)] * lit::<T>(x))
            })
            .collect();
        let c = m_coefficients(blocks, spectrum, &w)?;
        let mut rest = w.clone();
        for (k, &ck) in c.iter().enumerate().take(l) {
            for (i, r) in rest.iter_mut().enumerate() {
                *r -= lit::<T>(ck) * spectrum.vectors[(i, k)];
            }
        }
        let lhs = to_f64(sparse::quad(&mass, &rest));
        let total = to_f64(sparse::quad(&mass, &w));
        let mut ok = true;
        for &s in &orders {
            let rhs = weighted(&c, spectrum, s) / mu_next.powi(s as i32);
            worst = worst.min((rhs - lhs) / rhs.max(f64::MIN_POSITIVE));
            if lhs > rhs + LEMMA_SLACK * rhs.max(total) {
                ok = false;
            }
        }
        passed += usize::from(ok);
    }
    Ok(InterpolationCheck {
        trials,
        passed,
        worst_margin: worst,
        orders,
    })
}

/// Principal-angle cosines between the column spaces of `a` and `b`,
/// descending. Both inputs are orthonormalized first.
pub fn principal_cosines<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch {
            what: "subspace rows",
            expected: a.nrows(),
            found: b.nrows(),
        });
    }
    let qa = orthonormal(a);
    let qb = orthonormal(b);
    let c = qa.transpose() * &qb;
    let s = c
        .singular_values()
        .map_err(|e| Error::Eigensolver(format!("principal angles: {e:?}")))?;
    Ok(s.into_iter().map(to_f64).collect())
}

/// Sine of the largest principal angle between two column spaces of equal
/// dimension. Accurate for small angles, unlike `acos` of the cosines.
pub fn largest_principal_sine<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Result<f64> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            what: "subspace shape",
            expected: a.ncols(),
            found: b.ncols(),
        });
    }
    let qa = orthonormal(a);
    let qb = orthonormal(b);
    let rest = &qb - &qa * (qa.transpose() * &qb);
    let s = rest
        .singular_values()
        .map_err(|e| Error::Eigensolver(format!("principal angles: {e:?}")))?;
    Ok(s.first().map_or(0.0, |&x| to_f64(x)))
}

fn orthonormal<T: Real>(a: &Mat<T>) -> Mat<T> {
    let k = a.ncols().min(a.nrows());
    a.qr().compute_thin_Q().subcols(0, k).to_owned()
}

/// Relative departure of `A` from the pencil skew structure, as a sanity
/// check on assembled patch operators: `‖A₃ − A₂ᵀ‖ / ‖A₂‖` where the
/// temperature row block of the operator with `γ₁ = 0, γ₂ = 1` is `A₃`.
pub fn coupling_transpose_defect<T: Real>(blocks: &OperatorBlocks<T>) -> Result<f64> {
    let n = blocks.nodes;
    let op = patch_operator(blocks, T::zero(), T::one())?;
    let mut worst = 0.0f64;
    let a2 = sparse::to_dense(&blocks.a2);
    let dense = sparse::to_dense(&op);
    for r in 0..n {
        for c in 0..2 * n {
            worst = worst.max(to_f64((dense[(2 * n + r, c)] - a2[(c, r)]).abs()));
        }
    }
    let scale = to_f64(sparse::max_abs(&blocks.a2));
    Ok(if scale > 0.0 { worst / scale } else { worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble_global, assemble_patch};
    use crate::coeffs::MaterialField;
    use crate::mesh::{build_mesh_pair, Boundary, FineMesh};
    use crate::spectral::solve_patch_spectrum;

    fn state(n: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
        (0..3 * n).map(f).collect()
    }

    #[test]
    fn identical_and_doubled_candidates() {
        let mesh = FineMesh::<f64>::unit_square(4, 4, Boundary::Bottom).unwrap();
        let mat = MaterialField::constant(mesh.element_count(), 1.0, 2.0, 3.0, 1.0);
        let (blocks, _) = assemble_global(&mesh, &mat).unwrap();
        let n = mesh.node_count();
        let w = state(n, |i| ((i * 37) % 11) as f64 - 5.0);
        let r = energy_errors(&blocks, &w, &w).unwrap();
        assert_eq!((r.err_u, r.err_theta, r.err_w), (0.0, 0.0, 0.0));
        let twice: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let r = energy_errors(&blocks, &w, &twice).unwrap();
        for e in [r.err_u, r.err_theta, r.err_w] {
            assert!((e - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_reference_is_undefined() {
        let mesh = FineMesh::<f64>::unit_square(2, 2, Boundary::Bottom).unwrap();
        let mat = MaterialField::constant(mesh.element_count(), 1.0, 1.0, 1.0, 1.0);
        let (blocks, _) = assemble_global(&mesh, &mat).unwrap();
        let z = vec![0.0; 3 * mesh.node_count()];
        assert!(matches!(energy_errors(&blocks, &z, &z), Err(Error::UndefinedRatio(_))));
        let parts = energy_parts(&blocks, &z, &z).unwrap();
        assert_eq!(parts.report_or_exact().unwrap(), ErrorReport::default());
        let mut one = z.clone();
        one[0] = 1.0;
        assert!(energy_parts(&blocks, &z, &one).unwrap().report_or_exact().is_err());
    }

    #[test]
    fn total_numerator_is_sum_of_parts() {
        let mesh = FineMesh::<f64>::unit_square(5, 3, Boundary::Bottom).unwrap();
        let mat = MaterialField::constant(mesh.element_count(), 4.0, 1.5, 0.2, 1.0);
        let (blocks, _) = assemble_global(&mesh, &mat).unwrap();
        let n = mesh.node_count();
        let a = state(n, |i| (i as f64 * 0.37).sin());
        let b = state(n, |i| (i as f64 * 0.11).cos());
        let p = energy_parts(&blocks, &a, &b).unwrap();
        let r = p.report().unwrap();
        let total = r.err_w * r.err_w * (p.ref_u + p.ref_theta);
        let split = r.err_u * r.err_u * p.ref_u + r.err_theta * r.err_theta * p.ref_theta;
        assert!((total - split).abs() <= 1e-12 * total);
    }

    #[test]
    fn energies_match_elementwise_strain_and_gradient_integrals() {
        let mesh = FineMesh::<f64>::unit_square(4, 4, Boundary::Bottom).unwrap();
        let ne = mesh.element_count();
        let mut mat = MaterialField::constant(ne, 1.0, 1.0, 1.0, 1.0);
        for e in 0..ne {
            mat.lambda[e] = 1.0 + e as f64;
            mat.mu[e] = 0.5 + (e % 3) as f64;
            mat.kappa[e] = 2.0 + (e % 5) as f64;
        }
        let (blocks, _) = assemble_global(&mesh, &mat).unwrap();
        let n = mesh.node_count();
        let w = state(n, |i| ((i * 13) % 7) as f64 * 0.3 - 1.0);
        let (mut eu, mut et) = (0.0, 0.0);
        for e in 0..ne {
            let tri = mesh.element(e).unwrap();
            let idx = mesh.triangles[e];
            let grad = |c: usize| {
                let mut g = [0.0; 2];
                for a in 0..3 {
                    for d in 0..2 {
                        g[d] += w[c * n + idx[a]] * tri.grads[a][d];
                    }
                }
                g
            };
            let (g1, g2, gt) = (grad(0), grad(1), grad(2));
            let (exx, eyy, exy) = (g1[0], g2[1], 0.5 * (g1[1] + g2[0]));
            let tr = exx + eyy;
            let se = 2.0 * mat.mu[e] * (exx * exx + eyy * eyy + 2.0 * exy * exy) + mat.lambda[e] * tr * tr;
            eu += tri.area * se;
            et += tri.area * mat.kappa[e] * (gt[0] * gt[0] + gt[1] * gt[1]);
        }
        let zero = vec![0.0; 3 * n];
        let p = energy_parts(&blocks, &w, &zero).unwrap();
        assert!((p.ref_u - eu).abs() <= 1e-12 * eu);
        assert!((p.ref_theta - et).abs() <= 1e-12 * et);
    }

    #[test]
    fn errors_invariant_under_node_permutation() {
        let mesh = FineMesh::<f64>::unit_square(3, 3, Boundary::Bottom).unwrap();
        let mat = MaterialField::constant(mesh.element_count(), 1.0, 1.0, 1.0, 1.0);
        let (blocks, _) = assemble_global(&mesh, &mat).unwrap();
        let n = mesh.node_count();
        let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
        let permute_matrix = |a: &crate::sparse::Sparse<f64>, comps: usize| {
            let mut t = Vec::new();
            crate::sparse::for_each_entry(a, |r, c, v| {
                let map = |k: usize| (k / n) * n + perm[k % n];
                t.push(faer::sparse::Triplet::new(map(r), map(c), v));
            });
            crate::sparse::from_triplets(comps * n, comps * n, &t).unwrap()
        };
        let mut pb = blocks.clone();
        pb.a1 = permute_matrix(&blocks.a1, 2);
        pb.a4 = permute_matrix(&blocks.a4, 1);
        let a = state(n, |i| (i as f64).sin());
        let b = state(n, |i| (i as f64 * 1.7).cos());
        let pv = |v: &[f64]| {
            let mut out = vec![0.0; 3 * n];
            for (k, &x) in v.iter().enumerate() {
                out[(k / n) * n + perm[k % n]] = x;
            }
            out
        };
        let r0 = energy_errors(&blocks, &a, &b).unwrap();
        let r1 = energy_errors(&pb, &pv(&a), &pv(&b)).unwrap();
        assert!((r0.err_w - r1.err_w).abs() < 1e-13);
        assert!((r0.err_u - r1.err_u).abs() < 1e-13);
    }

    fn patch_setup(gamma: f64) -> (OperatorBlocks<f64>, PatchSpectrum<f64>) {
        let pair = build_mesh_pair::<f64>(6, 6, 2, 2, Boundary::Bottom).unwrap();
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
        let blocks = assemble_patch(&pair.fine, &mat, patch).unwrap();
        let spec = solve_patch_spectrum(&blocks, 4, gamma, -gamma, 1000, 10_000).unwrap();
        (blocks, spec)
    }

    #[test]
    fn seminorms_reproduce_mass_and_stiffness_forms() {
        let (blocks, spec) = patch_setup(0.0);
        let n = spec.vectors.nrows();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7) % 13) as f64 / 6.0 - 1.0).collect();
        let m = crate::sparse::quad(&patch_mass(&blocks).unwrap(), &w);
        let a = crate::sparse::quad(&patch_operator(&blocks, 0.0, 0.0).unwrap(), &w);
        assert!((seminorm(&blocks, &spec, &w, 0).unwrap() - m).abs() <= 1e-8 * m);
        assert!((seminorm(&blocks, &spec, &w, 1).unwrap() - a).abs() <= 1e-8 * a);
    }

    #[test]
    fn interpolation_fixed_point_and_saturation() {
        let (blocks, spec) = patch_setup(0.0);
        let l = 6;
        let psi1: Vec<f64> = (0..spec.vectors.nrows()).map(|i| spec.vectors[(i, 0)]).collect();
        let c = m_coefficients(&blocks, &spec, &psi1).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-10 && c[1..].iter().all(|x| x.abs() < 1e-10));
        // w = ψ_{L+1}: lhs = 1, rhs at s = 1 is μ_{L+1}/μ_{L+1}
        let next: Vec<f64> = (0..spec.vectors.nrows()).map(|i| spec.vectors[(i, l)]).collect();
        let c = m_coefficients(&blocks, &spec, &next).unwrap();
        let rhs = weighted(&c, &spec, 1) / spec.eigenvalues[l].re;
        assert!((rhs - 1.0).abs() < 1e-8);
    }

    #[test]
    fn interpolation_trials_pass() {
        let (blocks, spec) = patch_setup(0.0);
        let r = interpolation_check(&blocks, &spec, 6, 100, 7).unwrap();
        assert_eq!(r.passed, 100);
        assert!(r.worst_margin > -1e-8);
    }

    #[test]
    fn symmetric_coupling_makes_the_pencil_indefinite() {
        let (blocks, spec) = patch_setup(0.4);
        assert!(spec.eigenvalues[0].re < 0.0);
        assert!(matches!(
            interpolation_check(&blocks, &spec, 6, 10, 1),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn nonsymmetric_check_is_unsupported() {
        let (blocks, mut spec) = patch_setup(0.0);
        spec.symmetric = false;
        assert!(matches!(
            interpolation_check(&blocks, &spec, 6, 10, 1),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn coupling_block_is_transposed() {
        let (blocks, _) = patch_setup(0.0);
        assert!(coupling_transpose_defect(&blocks).unwrap() < 1e-15);
    }

    #[test]
    fn principal_cosines_of_equal_spans() {
        let a = Mat::<f64>::from_fn(5, 2, |i, j| (i + j) as f64 + if i == j { 1.0 } else { 0.0 });
        let b = Mat::<f64>::from_fn(5, 2, |i, _| a[(i, 0)] + 2.0 * a[(i, 1)]);
        let b = Mat::<f64>::from_fn(5, 2, |i, j| if j == 0 { b[(i, 0)] } else { a[(i, 0)] - a[(i, 1)] });
        let c = principal_cosines(&a, &b).unwrap();
        assert!(c.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        assert!(largest_principal_sine(&a, &b).unwrap() < 1e-12);
        // e₁ against (cos t, sin t): the sine is sin t
        let t = 1e-6f64;
        let e = Mat::<f64>::from_fn(2, 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let r = Mat::<f64>::from_fn(2, 1, |i, _| if i == 0 { t.cos() } else { t.sin() });
        assert!((largest_principal_sine(&e, &r).unwrap() - t.sin()).abs() < 1e-15);
    }
}
