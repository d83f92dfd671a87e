//! Local spectral problems on coarse patches and the multiscale basis
//! matrix `R`.
//!
//! The coupled pencil on a patch is
//!
//! ```text
//! [ A₁        -γ₁ A₂ ] ψ = μ [ M₁  0  ] ψ
//! [ γ₂ A₂ᵀ     A₄    ]       [ 0   M₂ ]
//! ```
//!
//! solved densely after reduction with the Cholesky factor of the mass.
//! Raw pencil eigenvalues `μ` are stored; the scaled values `Λ = H² μ` are
//! what reports show.

use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::sparse::Triplet;
use faer::{Mat, Par, Side};
use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_patch, DofMap, OperatorBlocks};
use crate::coeffs::MaterialField;
use crate::error::{Error, Result};
use crate::mesh::{MeshPair, PartitionOfUnity};
use crate::scalar::{dot, lit, Real};
use crate::sparse::{self, Sparse};

pub const DEFAULT_DOF_LIMIT: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    /// Basis functions per patch.
    pub basis_count: usize,
    /// Overrides `basis_count` patch by patch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_patch: Option<Vec<usize>>,
    /// Displacement/temperature split for the decoupled baseline. Defaults
    /// to `L/2` each, the extra mode going to displacement for odd `L`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<(usize, usize)>,
    #[serde(default = "default_dof_limit")]
    pub dof_limit: usize,
    /// Drop numerically dependent basis columns. The rigid modes of
    /// neighbouring patches are exactly dependent once multiplied by the
    /// partition of unity, so this is on by default.
    #[serde(default = "default_true")]
    pub drop_dependent: bool,
}

fn default_true() -> bool {
    true
}

fn default_dof_limit() -> usize {
    DEFAULT_DOF_LIMIT
}

impl SpectralConfig {
    pub fn new(gamma1: f64, gamma2: f64, basis_count: usize) -> Self {
        Self {
            gamma1,
            gamma2,
            basis_count,
            per_patch: None,
            split: None,
            dof_limit: DEFAULT_DOF_LIMIT,
            drop_dependent: true,
        }
    }

    pub fn count_for(&self, patch: usize) -> usize {
        self.per_patch
            .as_ref()
            .and_then(|v| v.get(patch).copied())
            .unwrap_or(self.basis_count)
    }

    pub fn decoupled_split(&self, l: usize) -> (usize, usize) {
        self.split.unwrap_or((l - l / 2, l / 2))
    }

    pub fn is_symmetric(&self) -> bool {
        self.gamma2 == -self.gamma1
    }
}

/// How the stored vectors of a spectrum are laid out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Columns follow the coupled spectrum in ascending order.
    Coupled,
    /// The first `u_modes` columns are displacement modes, the rest
    /// temperature modes, each in ascending order.
    Decoupled { u_modes: usize },
}

/// Which stored vectors of a patch enter the basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    Leading(usize),
    Split { u: usize, theta: usize },
}

#[derive(Clone, Debug)]
pub struct PatchSpectrum<T> {
    pub patch: usize,
    /// Complete pencil spectrum, ascending by real part (ties by original
    /// index).
    pub eigenvalues: Vec<Complex<T>>,
    /// M-orthonormal real vectors over the patch dofs `[u₁ | u₂ | θ]`.
    pub vectors: Mat<T>,
    /// Eigenvalue each stored vector came from.
    pub vector_eigenvalues: Vec<Complex<T>>,
    pub layout: Layout,
    pub symmetric: bool,
}

impl<T: Real> PatchSpectrum<T> {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// `Λ_k = H² Re μ_k` with `k` zero-based.
    pub fn scaled(&self, k: usize, h: T) -> T {
        h * h * self.eigenvalues[k].re
    }

    /// Largest `|Im μ|` among the stored vectors relative to the spectral
    /// radius; zero when every selected mode is real.
    pub fn imaginary_defect(&self) -> T {
        let radius = self.eigenvalues.iter().fold(T::zero(), |m, z| m.max(z.norm()));
        let worst = self
            .vector_eigenvalues
            .iter()
            .fold(T::zero(), |m, z| m.max(z.im.abs()));
        if radius > T::zero() {
            worst / radius
        } else {
            worst
        }
    }

    pub fn columns(&self, selection: Selection) -> Result<Vec<usize>> {
        let stored = self.vectors.ncols();
        match (selection, self.layout) {
            (Selection::Leading(l), Layout::Coupled) => {
                if l > stored {
                    return Err(Error::SpectrumMismatch(format!(
                        "patch {} stores {stored} modes, {l} requested",
                        self.patch
                    )));
                }
                Ok((0..l).collect())
            }
            (Selection::Split { u, theta }, Layout::Decoupled { u_modes }) => {
                if u > u_modes || theta > stored - u_modes {
                    return Err(Error::SpectrumMismatch(format!(
                        "patch {} stores {u_modes}+{} modes, {u}+{theta} requested",
                        self.patch,
                        stored - u_modes
                    )));
                }
                Ok((0..u).chain(u_modes..u_modes + theta).collect())
            }
            _ => Err(Error::SpectrumMismatch(format!(
                "selection {selection:?} does not match the {:?} layout of patch {}",
                self.layout, self.patch
            ))),
        }
    }
}

/// Block-diagonal patch mass `diag(M₁, M₂)`.
pub fn patch_mass<T: Real>(blocks: &OperatorBlocks<T>) -> Result<Sparse<T>> {
    let n = blocks.nodes;
    let mut t = Vec::new();
    sparse::push_block(&mut t, &blocks.m1, 0, 0, T::one(), false);
    sparse::push_block(&mut t, &blocks.m2, 2 * n, 2 * n, T::one(), false);
    sparse::from_triplets(3 * n, 3 * n, &t)
}

/// The coupled stiffness side of the patch pencil.
pub fn patch_operator<T: Real>(blocks: &OperatorBlocks<T>, gamma1: T, gamma2: T) -> Result<Sparse<T>> {
    let n = blocks.nodes;
    let mut t: Vec<Triplet<usize, usize, T>> = Vec::new();
    sparse::push_block(&mut t, &blocks.a1, 0, 0, T::one(), false);
    sparse::push_block(&mut t, &blocks.a2, 0, 2 * n, -gamma1, false);
    sparse::push_block(&mut t, &blocks.a2, 2 * n, 0, gamma2, true);
    sparse::push_block(&mut t, &blocks.a4, 2 * n, 2 * n, T::one(), false);
    sparse::from_triplets(3 * n, 3 * n, &t)
}

struct Reduced<T> {
    chol: Mat<T>,
    c: Mat<T>,
}

/// `C = L⁻¹ A L⁻ᵀ` with `M = L Lᵀ`.
fn reduce<T: Real>(a: &Mat<T>, m: &Mat<T>, patch: usize) -> Result<Reduced<T>> {
    let llt = m.llt(Side::Lower).map_err(|_| Error::MassNotSpd { patch })?;
    let l = llt.L().to_owned();
    let mut x = a.clone();
    solve_lower_triangular_in_place(l.as_ref(), x.as_mut(), Par::Seq);
    let mut y = x.transpose().to_owned();
    solve_lower_triangular_in_place(l.as_ref(), y.as_mut(), Par::Seq);
    Ok(Reduced {
        chol: l,
        c: y.transpose().to_owned(),
    })
}

fn back_transform<T: Real>(chol: &Mat<T>, y: &mut Mat<T>) {
    solve_upper_triangular_in_place(chol.transpose(), y.as_mut(), Par::Seq);
}

fn ascending_order<T: Real>(values: &[Complex<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[i]
            .re
            .partial_cmp(&values[j].re)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// Modified Gram–Schmidt in the `M` inner product, in column order, then
/// each vector is signed so its largest-magnitude entry is positive.
pub fn m_orthonormalize<T: Real>(vectors: &mut Mat<T>, mass: &Sparse<T>) -> Result<()> {
    let n = vectors.nrows();
    let cols: Vec<Vec<T>> = (0..vectors.ncols())
        .map(|j| (0..n).map(|i| vectors[(i, j)]).collect())
        .collect();
    let mut done: Vec<Vec<T>> = Vec::with_capacity(cols.len());
    let mut done_m: Vec<Vec<T>> = Vec::with_capacity(cols.len());
    for (k, mut v) in cols.into_iter().enumerate() {
        let start = sparse::quad(mass, &v).sqrt();
        for (q, mq) in done.iter().zip(&done_m) {
            let c = dot(mq, &v);
            for (vi, &qi) in v.iter_mut().zip(q) {
                *vi -= c * qi;
            }
        }
        let mv = sparse::mul_vec(mass, &v);
        let norm = dot(&mv, &v).sqrt();
        if !(norm > lit::<T>(1e-12) * start) {
            return Err(Error::Eigensolver(format!("mode {k} is linearly dependent on earlier modes")));
        }
        let (mut big, mut sign) = (T::zero(), T::one());
        for &vi in &v {
            if vi.abs() > big {
                big = vi.abs();
                sign = vi.signum();
            }
        }
        let scale = sign / norm;
        v.iter_mut().for_each(|vi| *vi *= scale);
        done_m.push(mv.into_iter().map(|x| x * scale).collect());
        done.push(v);
    }
    for (j, v) in done.iter().enumerate() {
        for (i, &vi) in v.iter().enumerate() {
            vectors[(i, j)] = vi;
        }
    }
    Ok(())
}

/// Generalized symmetric-definite eigenproblem, ascending, `M`-orthonormal.
fn symmetric_pencil<T: Real>(a: &Mat<T>, m: &Mat<T>, keep: usize, patch: usize) -> Result<(Vec<T>, Mat<T>)> {
    let red = reduce(a, m, patch)?;
    let n = a.nrows();
    let sym = Mat::<T>::from_fn(n, n, |i, j| (red.c[(i, j)] + red.c[(j, i)]) * lit::<T>(0.5));
    let eig = sym
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigensolver(format!("patch {patch}: {e:?}")))?;
    let values: Vec<T> = (0..n).map(|i| eig.S()[i]).collect();
    let keep = keep.min(n);
    let mut y = eig.U().subcols(0, keep).to_owned();
    back_transform(&red.chol, &mut y);
    Ok((values, y))
}

/// Rigid motions of the patch with zero temperature, which lie in both
/// the right and left kernel of the coupled operator.
fn rigid_modes<T: Real>(blocks: &OperatorBlocks<T>) -> Mat<T> {
    let n = blocks.nodes;
    let inv = T::one() / crate::scalar::from_usize::<T>(n);
    let cx = blocks.coords.iter().map(|p| p[0]).sum::<T>() * inv;
    let cy = blocks.coords.iter().map(|p| p[1]).sum::<T>() * inv;
    let mut r = Mat::<T>::zeros(3 * n, 3);
    for (q, p) in blocks.coords.iter().enumerate() {
        r[(q, 0)] = T::one();
        r[(n + q, 1)] = T::one();
        r[(q, 2)] = cy - p[1];
        r[(n + q, 2)] = p[0] - cx;
    }
    r
}

struct Deflated<T> {
    /// Orthogonal; the first three columns span the reduced rigid modes.
    q: Mat<T>,
    u_re: Mat<T>,
    u_im: Mat<T>,
    values: Vec<Complex<T>>,
}

impl<T: Real> Deflated<T> {
    /// Real or imaginary part of eigenvector `k` in reduced coordinates.
    fn column(&self, k: usize, imaginary: bool) -> Vec<T> {
        let n = self.q.nrows();
        if k < 3 {
            return if imaginary {
                vec![T::zero(); n]
            } else {
                (0..n).map(|i| self.q[(i, k)]).collect()
            };
        }
        let u = if imaginary { &self.u_im } else { &self.u_re };
        let v = self.q.subcols(3, n - 3) * u.col(k - 3);
        (0..n).map(|i| v[i]).collect()
    }
}

/// Eigen-decomposition of the reduced operator with the rigid kernel split
/// off exactly. The complement of `Lᵀ · rigid` is invariant because the
/// rigid modes are both left and right null vectors; without the split the
/// nearly triple zero eigenvalue yields nearly parallel eigenvectors.
/// The three rigid modes come first, with eigenvalue zero.
fn deflated_eigen<T: Real>(blocks: &OperatorBlocks<T>, red: &Reduced<T>, patch: usize) -> Result<Deflated<T>> {
    let n = red.c.nrows();
    let z = red.chol.transpose() * rigid_modes(blocks);
    let q = z.qr().compute_Q();
    let q2 = q.subcols(3, n - 3);
    let c22 = q2.transpose() * &red.c * q2;
    let eig = c22
        .eigen()
        .map_err(|e| Error::Eigensolver(format!("patch {patch}: {e:?}")))?;
    let mut values = vec![Complex::new(T::zero(), T::zero()); 3];
    values.extend((0..n - 3).map(|i| eig.S()[i]));
    let u = eig.U();
    let u_re = Mat::<T>::from_fn(n - 3, n - 3, |i, j| u[(i, j)].re);
    let u_im = Mat::<T>::from_fn(n - 3, n - 3, |i, j| u[(i, j)].im);
    Ok(Deflated { q, u_re, u_im, values })
}

fn guard(blocks: &OperatorBlocks<impl Real>, patch: usize, limit: usize) -> Result<()> {
    let dofs = 3 * blocks.nodes;
    if dofs > limit {
        return Err(Error::DofLimit { dofs, limit });
    }
    if blocks.nodes == 0 {
        return Err(Error::EmptyPatch(patch));
    }
    Ok(())
}

/// Solves the coupled pencil on one patch and keeps the leading `keep`
/// modes. Conjugate pairs become their real and imaginary parts; a pair
/// split by the cutoff contributes its real part only.
pub fn solve_patch_spectrum<T: Real>(
    blocks: &OperatorBlocks<T>,
    patch: usize,
    gamma1: T,
    gamma2: T,
    keep: usize,
    dof_limit: usize,
) -> Result<PatchSpectrum<T>> {
    guard(blocks, patch, dof_limit)?;
    let a = sparse::to_dense(&patch_operator(blocks, gamma1, gamma2)?);
    let mass = patch_mass(blocks)?;
    let m = sparse::to_dense(&mass);
    let n = a.nrows();
    let keep = keep.min(n);

    if gamma2 == -gamma1 {
        let (values, mut vectors) = symmetric_pencil(&a, &m, keep, patch)?;
        m_orthonormalize(&mut vectors, &mass)?;
        let eigenvalues: Vec<Complex<T>> = values.iter().map(|&v| Complex::new(v, T::zero())).collect();
        return Ok(PatchSpectrum {
            patch,
            vector_eigenvalues: eigenvalues[..keep].to_vec(),
            eigenvalues,
            vectors,
            layout: Layout::Coupled,
            symmetric: true,
        });
    }

    let red = reduce(&a, &m, patch)?;
    let deflated = deflated_eigen(blocks, &red, patch)?;
    let raw = deflated.values.clone();
    let order = ascending_order(&raw);
    let radius = raw.iter().fold(T::zero(), |r, z| r.max(z.norm()));
    let real_tol = lit::<T>(1e-12) * radius;

    let mut y = Mat::<T>::zeros(n, keep);
    let mut vector_eigenvalues = Vec::with_capacity(keep);
    let mut used = vec![false; n];
    let mut col = 0;
    for (pos, &k) in order.iter().enumerate() {
        if col == keep {
            break;
        }
        if used[k] {
            continue;
        }
        used[k] = true;
        let z = raw[k];
        for (i, v) in deflated.column(k, false).into_iter().enumerate() {
            y[(i, col)] = v;
        }
        vector_eigenvalues.push(z);
        col += 1;
        if z.im.abs() > real_tol {
            let partner = order[pos + 1..]
                .iter()
                .copied()
                .filter(|&j| !used[j])
                .min_by(|&i, &j| {
                    let di = (raw[i] - z.conj()).norm();
                    let dj = (raw[j] - z.conj()).norm();
                    di.partial_cmp(&dj).unwrap_or(std::cmp::Ordering::Equal)
                })
                .ok_or_else(|| Error::Eigensolver(format!("patch {patch}: unpaired complex eigenvalue")))?;
            used[partner] = true;
            if col < keep {
                for (i, v) in deflated.column(k, true).into_iter().enumerate() {
                    y[(i, col)] = v;
                }
                vector_eigenvalues.push(z.conj());
                col += 1;
            }
        }
    }
    back_transform(&red.chol, &mut y);
    m_orthonormalize(&mut y, &mass)?;
    let eigenvalues = order.iter().map(|&k| raw[k]).collect();
    Ok(PatchSpectrum {
        patch,
        eigenvalues,
        vectors: y,
        vector_eigenvalues,
        layout: Layout::Coupled,
        symmetric: false,
    })
}

/// Block-decoupled baseline: `(A₁, M₁)` displacement modes with zero
/// temperature and `(A₄, M₂)` temperature modes with zero displacement.
pub fn solve_decoupled_spectrum<T: Real>(
    blocks: &OperatorBlocks<T>,
    patch: usize,
    u_keep: usize,
    theta_keep: usize,
    dof_limit: usize,
) -> Result<PatchSpectrum<T>> {
    guard(blocks, patch, dof_limit)?;
    let n = blocks.nodes;
    let (u_vals, u_vecs) = symmetric_pencil(
        &sparse::to_dense(&blocks.a1),
        &sparse::to_dense(&blocks.m1),
        u_keep,
        patch,
    )?;
    let (t_vals, t_vecs) = symmetric_pencil(
        &sparse::to_dense(&blocks.a4),
        &sparse::to_dense(&blocks.m2),
        theta_keep,
        patch,
    )?;
    let (uk, tk) = (u_vecs.ncols(), t_vecs.ncols());
    let mut vectors = Mat::<T>::zeros(3 * n, uk + tk);
    for j in 0..uk {
        for i in 0..2 * n {
            vectors[(i, j)] = u_vecs[(i, j)];
        }
    }
    for j in 0..tk {
        for i in 0..n {
            vectors[(2 * n + i, uk + j)] = t_vecs[(i, j)];
        }
    }
    m_orthonormalize(&mut vectors, &patch_mass(blocks)?)?;
    let real = |v: T| Complex::new(v, T::zero());
    let vector_eigenvalues = u_vals[..uk].iter().chain(&t_vals[..tk]).map(|&v| real(v)).collect();
    let mut all: Vec<Complex<T>> = u_vals.iter().chain(&t_vals).map(|&v| real(v)).collect();
    let order = ascending_order(&all);
    all = order.iter().map(|&k| all[k]).collect();
    Ok(PatchSpectrum {
        patch,
        eigenvalues: all,
        vectors,
        vector_eigenvalues,
        layout: Layout::Decoupled { u_modes: uk },
        symmetric: true,
    })
}

/// Solves every patch, in parallel over patches. Results are in patch
/// order regardless of scheduling.
pub fn solve_all_patches<T: Real>(
    pair: &MeshPair<T>,
    material: &MaterialField<T>,
    solve: impl Fn(&OperatorBlocks<T>, usize) -> Result<PatchSpectrum<T>> + Sync,
) -> Result<Vec<PatchSpectrum<T>>> {
    pair.coarse
        .patches
        .par_iter()
        .map(|patch| {
            let blocks = assemble_patch(&pair.fine, material, patch)?;
            solve(&blocks, patch.vertex)
        })
        .collect()
}

/// Coupled spectra keeping `keep` modes on every patch.
pub fn coupled_spectra<T: Real>(
    pair: &MeshPair<T>,
    material: &MaterialField<T>,
    config: &SpectralConfig,
    keep: usize,
) -> Result<Vec<PatchSpectrum<T>>> {
    let (g1, g2) = (lit::<T>(config.gamma1), lit::<T>(config.gamma2));
    solve_all_patches(pair, material, |b, i| solve_patch_spectrum(b, i, g1, g2, keep, config.dof_limit))
}

/// Decoupled spectra keeping `u_keep` displacement and `theta_keep`
/// temperature modes on every patch.
pub fn decoupled_spectra<T: Real>(
    pair: &MeshPair<T>,
    material: &MaterialField<T>,
    u_keep: usize,
    theta_keep: usize,
    dof_limit: usize,
) -> Result<Vec<PatchSpectrum<T>>> {
    solve_all_patches(pair, material, |b, i| {
        solve_decoupled_spectrum(b, i, u_keep, theta_keep, dof_limit)
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DroppedColumn {
    pub patch: usize,
    pub rank: usize,
    pub reason: DropReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropReason {
    /// Vanishes once Dirichlet rows are zeroed.
    Negligible,
    /// Numerically in the span of earlier columns.
    Dependent,
}

#[derive(Clone, Debug)]
pub struct MultiscaleBasis<T> {
    /// Fine dofs × basis functions; Dirichlet rows are zero.
    pub r: Sparse<T>,
    /// `(patch, rank)` of every column.
    pub columns: Vec<(usize, usize)>,
    pub dropped: Vec<DroppedColumn>,
}

impl<T: Real> MultiscaleBasis<T> {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

/// Multiplies the selected modes of every patch by its partition-of-unity
/// function and places them in `R`, in patch order.
pub fn build_multiscale_basis<T: Real>(
    pair: &MeshPair<T>,
    pou: &PartitionOfUnity<T>,
    spectra: &[PatchSpectrum<T>],
    selections: &[Selection],
    dofs: &DofMap,
    drop_dependent: bool,
) -> Result<MultiscaleBasis<T>> {
    let patches = &pair.coarse.patches;
    if spectra.len() != patches.len() || selections.len() != patches.len() {
        return Err(Error::SpectrumMismatch(format!(
            "{} patches, {} spectra, {} selections",
            patches.len(),
            spectra.len(),
            selections.len()
        )));
    }
    let n = dofs.nodes;
    let mut candidates: Vec<Candidate<T>> = Vec::new();
    let mut dropped = Vec::new();
    for ((patch, spectrum), &selection) in patches.iter().zip(spectra).zip(selections) {
        let nl = patch.nodes.len();
        if spectrum.vectors.nrows() != 3 * nl {
            return Err(Error::SpectrumMismatch(format!(
                "patch {} has {} local dofs but its spectrum has {}",
                patch.vertex,
                3 * nl,
                spectrum.vectors.nrows()
            )));
        }
        let chi = &pou.values[patch.vertex];
        for (rank, k) in spectrum.columns(selection)?.into_iter().enumerate() {
            let mut entries = Vec::new();
            let (mut kept, mut full) = (T::zero(), T::zero());
            for c in 0..3 {
                for (q, &p) in patch.nodes.iter().enumerate() {
                    let v = chi[q] * spectrum.vectors[(c * nl + q, k)];
                    full += v * v;
                    let row = c * n + p;
                    if v != T::zero() && !dofs.dirichlet[row] {
                        kept += v * v;
                        entries.push((row, v));
                    }
                }
            }
            if !(kept.sqrt() > lit::<T>(1e-12) * full.sqrt()) {
                dropped.push(DroppedColumn {
                    patch: patch.vertex,
                    rank,
                    reason: DropReason::Negligible,
                });
                continue;
            }
            candidates.push((patch.vertex, rank, entries));
        }
    }
    if drop_dependent {
        let keep = independent_columns(&candidates, 3 * n)?;
        let mut kept = Vec::with_capacity(keep.len());
        for (i, cand) in candidates.into_iter().enumerate() {
            if keep.binary_search(&i).is_ok() {
                kept.push(cand);
            } else {
                dropped.push(DroppedColumn {
                    patch: cand.0,
                    rank: cand.1,
                    reason: DropReason::Dependent,
                });
            }
        }
        candidates = kept;
    }
    let mut triplets = Vec::new();
    let mut columns = Vec::with_capacity(candidates.len());
    for (col, (patch, rank, entries)) in candidates.into_iter().enumerate() {
        for (row, v) in entries {
            triplets.push(Triplet::new(row, col, v));
        }
        columns.push((patch, rank));
    }
    if !dropped.is_empty() {
        log::info!("basis: kept {} columns, dropped {}", columns.len(), dropped.len());
    }
    Ok(MultiscaleBasis {
        r: sparse::from_triplets(3 * n, columns.len(), &triplets)?,
        columns,
        dropped,
    })
}

/// `(patch, rank, nonzero entries)` of a prospective basis column.
type Candidate<T> = (usize, usize, Vec<(usize, T)>);

/// Squared relative distance below which a column counts as dependent on
/// the kept ones.
pub const DEPENDENCE_TOL_SQ: f64 = 1e-12;

/// Greedy column selection by diagonally pivoted Cholesky of the Gram
/// matrix: the candidate with the largest remaining squared distance to
/// the span of the kept columns, relative to its own squared norm, is kept
/// next, until all remaining ratios fall below [`DEPENDENCE_TOL_SQ`].
/// Returned in candidate order.
fn independent_columns<T: Real>(columns: &[Candidate<T>], rows: usize) -> Result<Vec<usize>> {
    let c = columns.len();
    let mut t = Vec::new();
    for (j, (_, _, entries)) in columns.iter().enumerate() {
        for &(r, x) in entries {
            t.push(Triplet::new(r, j, x));
        }
    }
    let r = sparse::from_triplets(rows, c, &t)?;
    let gram = sparse::to_dense(&sparse::matmul(&sparse::transpose(&r)?, &r)?);
    let norms: Vec<T> = (0..c).map(|j| gram[(j, j)]).collect();
    let mut residual = norms.clone();
    let mut active = vec![true; c];
    // rows of the partial Cholesky factor for the kept pivots
    let mut factor: Vec<Vec<T>> = Vec::new();
    let mut kept = Vec::new();
    let tol = lit::<T>(DEPENDENCE_TOL_SQ);
    loop {
        let mut best: Option<(usize, T)> = None;
        for j in 0..c {
            if active[j] && norms[j] > T::zero() {
                let rel = residual[j] / norms[j];
                if best.is_none_or(|(_, b)| rel > b) {
                    best = Some((j, rel));
                }
            }
        }
        let Some((p, rel)) = best else { break };
        if !(rel > tol) {
            break;
        }
        active[p] = false;
        kept.push(p);
        let d = residual[p].sqrt();
        let mut row = vec![T::zero(); c];
        for j in 0..c {
            if active[j] {
                let mut v = gram[(p, j)];
                for f in &factor {
                    v -= f[p] * f[j];
                }
                row[j] = v / d;
                residual[j] -= row[j] * row[j];
            }
        }
        row[p] = d;
        factor.push(row);
    }
    kept.sort_unstable();
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh_pair, build_partition_of_unity, Boundary, PouKind};

    fn diag_blocks(a: [f64; 2], m: [f64; 2]) -> (Mat<f64>, Mat<f64>) {
        (
            Mat::from_fn(2, 2, |i, j| if i == j { a[i] } else { 0.0 }),
            Mat::from_fn(2, 2, |i, j| if i == j { m[i] } else { 0.0 }),
        )
    }

    #[test]
    fn diagonal_pencil() {
        let (a, m) = diag_blocks([2.0, 8.0], [1.0, 2.0]);
        let (vals, vecs) = symmetric_pencil(&a, &m, 2, 0).unwrap();
        assert!((vals[0] - 2.0).abs() < 1e-14 && (vals[1] - 4.0).abs() < 1e-14);
        assert!(vecs[(1, 0)].abs() < 1e-14);
        assert!((vecs[(0, 0)].abs() - 1.0).abs() < 1e-14);
    }

    fn single_cell() -> (MeshPair<f64>, MaterialField<f64>) {
        let pair = build_mesh_pair::<f64>(1, 1, 1, 1, Boundary::Bottom).unwrap();
        let mat = MaterialField::constant(2, 1.5, 1.0, 2.0, 0.5);
        (pair, mat)
    }

    #[test]
    fn rigid_modes_on_single_cell_patch() {
        let (pair, mat) = single_cell();
        let blocks = assemble_patch(&pair.fine, &mat, &pair.coarse.patches[0]).unwrap();
        let s = solve_patch_spectrum(&blocks, 0, 0.4, 0.04, 12, DEFAULT_DOF_LIMIT).unwrap();
        let top = s.eigenvalues.last().unwrap().norm();
        assert!(s.eigenvalues[..3].iter().all(|z| z.norm() < 1e-10 * top));
        assert!(s.eigenvalues[3].re > 1e-8 * top);
    }

    #[test]
    fn symmetric_pencil_vectors_are_m_orthonormal() {
        let pair = build_mesh_pair::<f64>(4, 4, 2, 2, Boundary::Bottom).unwrap();
        let mut mat = MaterialField::constant(pair.fine.element_count(), 1.0, 1.0, 1.0, 1.0);
        for (e, b) in mat.beta.iter_mut().enumerate() {
            *b = 1.0 + (e % 3) as f64;
        }
        let patch = &pair.coarse.patches[4];
        let blocks = assemble_patch(&pair.fine, &mat, patch).unwrap();
        let s = solve_patch_spectrum(&blocks, 4, 0.3, -0.3, 75, DEFAULT_DOF_LIMIT).unwrap();
        assert!(s.symmetric);
        assert!(s.eigenvalues.iter().all(|z| z.im == 0.0));
        let m = sparse::to_dense(&patch_mass(&blocks).unwrap());
        let g = s.vectors.transpose() * &m * &s.vectors;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn nonsymmetric_vectors_are_m_orthonormal_and_deterministic() {
        let pair = build_mesh_pair::<f64>(4, 4, 2, 2, Boundary::Bottom).unwrap();
        let mut mat = MaterialField::constant(pair.fine.element_count(), 1.0, 1.0, 1.0, 30.0);
        for (e, b) in mat.kappa.iter_mut().enumerate() {
            *b = 1.0 + (e % 5) as f64;
        }
        let patch = &pair.coarse.patches[4];
        let blocks = assemble_patch(&pair.fine, &mat, patch).unwrap();
        let s = solve_patch_spectrum(&blocks, 4, 0.75, 0.07, 20, DEFAULT_DOF_LIMIT).unwrap();
        let s2 = solve_patch_spectrum(&blocks, 4, 0.75, 0.07, 20, DEFAULT_DOF_LIMIT).unwrap();
        assert_eq!(s.vectors, s2.vectors);
        let m = sparse::to_dense(&patch_mass(&blocks).unwrap());
        let g = s.vectors.transpose() * &m * &s.vectors;
        for i in 0..20 {
            for j in 0..20 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - e).abs() < 1e-10);
            }
        }
        for w in s.eigenvalues.windows(2) {
            assert!(w[0].re <= w[1].re);
        }
    }

    #[test]
    fn mass_rescaling_keeps_selection() {
        let pair = build_mesh_pair::<f64>(4, 4, 2, 2, Boundary::Bottom).unwrap();
        let mut mat = MaterialField::constant(pair.fine.element_count(), 1.0, 1.0, 1.0, 4.0);
        for (e, k) in mat.kappa.iter_mut().enumerate() {
            *k = if e % 4 == 0 { 100.0 } else { 1.0 };
        }
        let patch = &pair.coarse.patches[4];
        let blocks = assemble_patch(&pair.fine, &mat, patch).unwrap();
        let mut scaled = blocks.clone();
        // 1/H versus 1/H² with H = 1/2
        let c = 2.0;
        scaled.m1 = sparse::lincomb(c, &blocks.m1, 0.0, &blocks.m1).unwrap();
        scaled.m2 = sparse::lincomb(c, &blocks.m2, 0.0, &blocks.m2).unwrap();
        let s = solve_patch_spectrum(&blocks, 4, 0.4, 0.04, 10, DEFAULT_DOF_LIMIT).unwrap();
        let t = solve_patch_spectrum(&scaled, 4, 0.4, 0.04, 10, DEFAULT_DOF_LIMIT).unwrap();
        for k in 3..10 {
            assert!((s.eigenvalues[k].re - c * t.eigenvalues[k].re).abs() < 1e-8 * s.eigenvalues[k].norm());
            // vectors agree up to the 1/√c normalization; sign is fixed
            let mut worst: f64 = 0.0;
            for i in 0..s.vectors.nrows() {
                worst = worst.max((s.vectors[(i, k)] - c.sqrt() * t.vectors[(i, k)]).abs());
            }
            assert!(worst < 1e-6, "mode {k}: {worst}");
        }
    }

    #[test]
    fn constant_kappa_first_heat_mode_is_constant() {
        let pair = build_mesh_pair::<f64>(4, 4, 2, 2, Boundary::Bottom).unwrap();
        let mat = MaterialField::constant(pair.fine.element_count(), 1.0, 1.0, 3.0, 1.0);
        let patch = &pair.coarse.patches[4];
        let blocks = assemble_patch(&pair.fine, &mat, patch).unwrap();
        let s = solve_decoupled_spectrum(&blocks, 4, 3, 2, DEFAULT_DOF_LIMIT).unwrap();
        let n = blocks.nodes;
        let first = s.vectors[(2 * n, 3)];
        for i in 0..n {
            assert!((s.vectors[(2 * n + i, 3)] - first).abs() < 1e-10);
        }
    }

    #[test]
    fn unit_partition_reproduces_eigenvectors() {
        let pair = build_mesh_pair::<f64>(2, 2, 1, 1, Boundary::Bottom).unwrap();
        let mat = MaterialField::constant(pair.fine.element_count(), 1.0, 1.0, 1.0, 1.0);
        let mut pou = build_partition_of_unity(&pair, PouKind::Bilinear, None).unwrap();
        // a single χ ≡ 1 on the one-cell mesh, the others zero
        for (i, v) in pou.values.iter_mut().enumerate() {
            v.iter_mut().for_each(|x| *x = if i == 0 { 1.0 } else { 0.0 });
        }
        let dofs = DofMap::for_mesh(&pair.fine);
        let spectra = coupled_spectra(&pair, &mat, &SpectralConfig::new(0.4, 0.04, 5), 5).unwrap();
        let selections = vec![Selection::Leading(5); 4];
        let basis = build_multiscale_basis(&pair, &pou, &spectra, &selections, &dofs, false).unwrap();
        assert_eq!(basis.len(), 5);
        let r = sparse::to_dense(&basis.r);
        let patch = &pair.coarse.patches[0];
        let nl = patch.nodes.len();
        for k in 0..5 {
            for c in 0..3 {
                for (q, &p) in patch.nodes.iter().enumerate() {
                    let row = c * 9 + p;
                    let expected = if dofs.dirichlet[row] { 0.0 } else { spectra[0].vectors[(c * nl + q, k)] };
                    assert_eq!(r[(row, k)], expected);
                }
            }
        }
    }

    #[test]
    fn decoupled_split_has_no_temperature_with_zero_theta_modes() {
        let pair = build_mesh_pair::<f64>(4, 4, 2, 2, Boundary::Bottom).unwrap();
        let mat = MaterialField::constant(pair.fine.element_count(), 1.0, 1.0, 1.0, 1.0);
        let pou = build_partition_of_unity(&pair, PouKind::Bilinear, None).unwrap();
        let dofs = DofMap::for_mesh(&pair.fine);
        let spectra = decoupled_spectra(&pair, &mat, 4, 0, DEFAULT_DOF_LIMIT).unwrap();
        let sel = vec![Selection::Split { u: 4, theta: 0 }; 9];
        let basis = build_multiscale_basis(&pair, &pou, &spectra, &sel, &dofs, false).unwrap();
        sparse::for_each_entry(&basis.r, |row, _, _| assert!(row < 2 * dofs.nodes));
    }

    #[test]
    fn column_support_stays_in_patch() {
        let pair = build_mesh_pair::<f64>(6, 6, 3, 3, Boundary::Bottom).unwrap();
        let mat = MaterialField::constant(pair.fine.element_count(), 1.0, 1.0, 1.0, 1.0);
        let pou = build_partition_of_unity(&pair, PouKind::Bilinear, None).unwrap();
        let dofs = DofMap::for_mesh(&pair.fine);
        let spectra = coupled_spectra(&pair, &mat, &SpectralConfig::new(0.4, 0.04, 4), 4).unwrap();
        let sel = vec![Selection::Leading(4); 16];
        let basis = build_multiscale_basis(&pair, &pou, &spectra, &sel, &dofs, false).unwrap();
        let n = dofs.nodes;
        sparse::for_each_entry(&basis.r, |row, col, _| {
            let patch = &pair.coarse.patches[basis.columns[col].0];
            assert!(patch.local_node(row % n).is_some());
            assert!(!dofs.dirichlet[row]);
        });
    }

    #[test]
    fn dof_limit_is_enforced() {
        let (pair, mat) = single_cell();
        let blocks = assemble_patch(&pair.fine, &mat, &pair.coarse.patches[0]).unwrap();
        let r = solve_patch_spectrum(&blocks, 0, 0.4, 0.04, 4, 6);
        assert!(matches!(r, Err(Error::DofLimit { dofs: 12, limit: 6 })));
    }
}
