//! Backward-Euler marching of the fine system and of its Galerkin
//! projection onto a multiscale basis.
//!
//! Each step solves
//!
//! ```text
//! [ A₁    -A₂      ] wⁿ = [ 0    0  ] wⁿ⁻¹ + [ Fⁿ  ]
//! [ A₂ᵀ   M' + τA₄ ]      [ A₂ᵀ  M' ]        [ τGⁿ ]
//! ```
//!
//! for `w = (u, θ)`; the coarse march uses `Rᵀ(·)R` of both matrices.

use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::Triplet;
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_loads, DofMap, OperatorBlocks};
use crate::element::Point;
use crate::error::{Error, Result};
use crate::mesh::FineMesh;
use crate::scalar::{lit, norm2, to_f64, Real};
use crate::spectral::MultiscaleBasis;
use crate::sparse::{self, Sparse};

#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid<T> {
    pub steps: Vec<T>,
}

impl<T: Real> TimeGrid<T> {
    /// `round(T / τ)` equal steps; `τ` must divide `T` up to rounding.
    pub fn uniform(final_time: T, tau: T) -> Result<Self> {
        if !(tau > T::zero()) || !(final_time > T::zero()) {
            return Err(Error::config("time", "final time and step must be positive"));
        }
        let count = (final_time / tau).round();
        let n = count.to_usize().unwrap_or(0).max(1);
        if ((count * tau - final_time) / final_time).abs() > lit::<T>(1e-9) {
            return Err(Error::config(
                "time.tau",
                format!("step {tau} does not divide the final time {final_time}"),
            ));
        }
        Ok(Self {
            steps: vec![final_time / crate::scalar::from_usize::<T>(n); n],
        })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `t₀ = 0, t₁, …, t_N`
    pub fn times(&self) -> Vec<T> {
        let mut t = vec![T::zero()];
        for &tau in &self.steps {
            let last = *t.last().unwrap();
            t.push(last + tau);
        }
        t
    }

    pub fn final_time(&self) -> T {
        self.steps.iter().copied().sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoragePolicy {
    Final,
    /// Every `STRIDE`-th step plus the final one.
    #[default]
    Strided,
    Full,
}

pub const STRIDE: usize = 5;

impl StoragePolicy {
    pub fn keeps(self, step: usize, last: usize) -> bool {
        match self {
            StoragePolicy::Final => step == last,
            StoragePolicy::Strided => step.is_multiple_of(STRIDE) || step == last,
            StoragePolicy::Full => true,
        }
    }
}

/// Stored fine-dof states `w = (u₁, u₂, θ)`.
#[derive(Clone, Debug)]
pub struct SolutionHistory<T> {
    pub steps: Vec<usize>,
    pub times: Vec<T>,
    pub states: Vec<Vec<T>>,
}

impl<T> Default for SolutionHistory<T> {
    fn default() -> Self {
        Self {
            steps: Vec::new(),
            times: Vec::new(),
            states: Vec::new(),
        }
    }
}

impl<T: Real> SolutionHistory<T> {
    fn push(&mut self, step: usize, time: T, state: Vec<T>) {
        self.steps.push(step);
        self.times.push(time);
        self.states.push(state);
    }

    pub fn last(&self) -> Option<&[T]> {
        self.states.last().map(Vec::as_slice)
    }
}

pub type VectorField<T> = Arc<dyn Fn(Point<T>, T) -> [T; 2] + Send + Sync>;
pub type ScalarField<T> = Arc<dyn Fn(Point<T>, T) -> T + Send + Sync>;
/// `(u₁, u₂, θ)` at a point and time.
pub type BoundaryData<T> = Arc<dyn Fn(Point<T>, T) -> [T; 3] + Send + Sync>;

/// Right-hand sides, initial temperature and Dirichlet data.
#[derive(Clone)]
pub struct Sources<T> {
    pub force: VectorField<T>,
    pub heat: ScalarField<T>,
    pub theta0: Arc<dyn Fn(Point<T>) -> T + Send + Sync>,
    /// `(u₁, u₂, θ)` on Dirichlet nodes; homogeneous when `None`.
    pub dirichlet: Option<BoundaryData<T>>,
    /// Whether `force` or `heat` depend on time.
    pub time_dependent: bool,
}

impl<T: Real> Sources<T> {
    pub fn zero() -> Self {
        Self {
            force: Arc::new(|_, _| [T::zero(), T::zero()]),
            heat: Arc::new(|_, _| T::zero()),
            theta0: Arc::new(|_| T::zero()),
            dirichlet: None,
            time_dependent: false,
        }
    }
}

pub struct Problem<'a, T> {
    pub mesh: &'a FineMesh<T>,
    pub blocks: &'a OperatorBlocks<T>,
    pub dofs: &'a DofMap,
    pub sources: Sources<T>,
}

impl<T: Real> Problem<'_, T> {
    /// `(F(t), G(t))`
    pub fn loads(&self, t: T) -> Result<(Vec<T>, Vec<T>)> {
        let f = &self.sources.force;
        let g = &self.sources.heat;
        assemble_loads(self.mesh, |p| f(p, t), |p| g(p, t))
    }

    /// Full-length vector holding the Dirichlet values at `t`, zero on free
    /// dofs.
    pub fn dirichlet_values(&self, t: T) -> Vec<T> {
        let n = self.dofs.nodes;
        let mut d = vec![T::zero(); 3 * n];
        if let Some(bc) = &self.sources.dirichlet {
            for (p, &x) in self.mesh.nodes.iter().enumerate() {
                let v = bc(x, t);
                for (c, &vc) in v.iter().enumerate() {
                    let dof = c * n + p;
                    if self.dofs.dirichlet[dof] {
                        d[dof] = vc;
                    }
                }
            }
        }
        d
    }

    pub fn has_dirichlet_data(&self) -> bool {
        self.sources.dirichlet.is_some()
    }
}

/// Memoizes `[F; τG]` when the sources do not depend on time.
struct LoadCache<T> {
    cached: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Real> LoadCache<T> {
    fn new() -> Self {
        Self { cached: None }
    }

    fn rhs(&mut self, problem: &Problem<'_, T>, t: T, tau: T) -> Result<Vec<T>> {
        let (f, g) = match (&self.cached, problem.sources.time_dependent) {
            (Some(c), false) => c.clone(),
            _ => {
                let loads = problem.loads(t)?;
                if !problem.sources.time_dependent {
                    self.cached = Some(loads.clone());
                }
                loads
            }
        };
        Ok(f.into_iter().chain(g.into_iter().map(|x| x * tau)).collect())
    }
}

/// `[A₁, -A₂; A₂ᵀ, M' + τA₄]`
pub fn system_matrix<T: Real>(blocks: &OperatorBlocks<T>, tau: T) -> Result<Sparse<T>> {
    let n = blocks.nodes;
    let mut t: Vec<Triplet<usize, usize, T>> = Vec::new();
    sparse::push_block(&mut t, &blocks.a1, 0, 0, T::one(), false);
    sparse::push_block(&mut t, &blocks.a2, 0, 2 * n, -T::one(), false);
    sparse::push_block(&mut t, &blocks.a2, 2 * n, 0, T::one(), true);
    sparse::push_block(&mut t, &blocks.m_theta, 2 * n, 2 * n, T::one(), false);
    sparse::push_block(&mut t, &blocks.a4, 2 * n, 2 * n, tau, false);
    sparse::from_triplets(3 * n, 3 * n, &t)
}

/// `[0, 0; A₂ᵀ, M']`
pub fn history_matrix<T: Real>(blocks: &OperatorBlocks<T>) -> Result<Sparse<T>> {
    let n = blocks.nodes;
    let mut t: Vec<Triplet<usize, usize, T>> = Vec::new();
    sparse::push_block(&mut t, &blocks.a2, 2 * n, 0, T::one(), true);
    sparse::push_block(&mut t, &blocks.m_theta, 2 * n, 2 * n, T::one(), false);
    sparse::from_triplets(3 * n, 3 * n, &t)
}

const RESIDUAL_TOL: f64 = 1e-10;

/// Sparse LU of a free-dof block with a residual-checked solve.
struct FreeSolver<T: Real> {
    matrix: Sparse<T>,
    lu: Lu<usize, T>,
}

impl<T: Real> FreeSolver<T> {
    fn new(matrix: Sparse<T>) -> Result<Self> {
        let lu = matrix
            .sp_lu()
            .map_err(|e| Error::LinearSolver(format!("sparse LU failed: {e:?}")))?;
        Ok(Self { matrix, lu })
    }

    fn solve(&self, rhs: &[T]) -> Result<Vec<T>> {
        let scale = norm2(rhs);
        if scale == T::zero() {
            return Ok(vec![T::zero(); rhs.len()]);
        }
        let b = Mat::<T>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        let mut x: Vec<T> = {
            let s = self.lu.solve(&b);
            (0..rhs.len()).map(|i| s[(i, 0)]).collect()
        };
        for _ in 0..3 {
            let ax = sparse::mul_vec(&self.matrix, &x);
            let r: Vec<T> = rhs.iter().zip(&ax).map(|(&b, &a)| b - a).collect();
            let res = norm2(&r);
            if !res.is_finite() {
                break;
            }
            if res <= lit::<T>(RESIDUAL_TOL) * scale {
                return Ok(x);
            }
            let rm = Mat::<T>::from_fn(r.len(), 1, |i, _| r[i]);
            let dx = self.lu.solve(&rm);
            for (i, xi) in x.iter_mut().enumerate() {
                *xi += dx[(i, 0)];
            }
        }
        let ax = sparse::mul_vec(&self.matrix, &x);
        let res = norm2(&rhs.iter().zip(&ax).map(|(&b, &a)| b - a).collect::<Vec<_>>());
        Err(Error::LinearSolver(format!(
            "relative residual {:e} above {RESIDUAL_TOL:e}",
            to_f64(res / scale)
        )))
    }
}

fn free_maps(dofs: &DofMap, range: std::ops::Range<usize>) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut map = vec![None; dofs.len()];
    let mut ids = Vec::new();
    for d in range {
        if !dofs.dirichlet[d] {
            map[d] = Some(ids.len());
            ids.push(d);
        }
    }
    (map, ids)
}

/// `θ⁰` interpolated (Dirichlet nodes take the boundary data) and `u⁰` from
/// the momentum balance `A₁u⁰ = F⁰ + A₂θ⁰`.
pub fn initial_state<T: Real>(problem: &Problem<'_, T>) -> Result<Vec<T>> {
    let theta0 = &problem.sources.theta0;
    let theta: Vec<T> = problem.mesh.nodes.iter().map(|&p| theta0(p)).collect();
    initial_state_from(problem, &theta)
}

/// As [`initial_state`] for a given nodal temperature.
pub fn initial_state_from<T: Real>(problem: &Problem<'_, T>, theta: &[T]) -> Result<Vec<T>> {
    let dofs = problem.dofs;
    let n = dofs.nodes;
    if theta.len() != n {
        return Err(Error::DimensionMismatch {
            what: "initial temperature",
            expected: n,
            found: theta.len(),
        });
    }
    if !dofs.dirichlet[..2 * n].iter().any(|&d| d) {
        return Err(Error::Constraint(
            "the displacement has no Dirichlet nodes, so the momentum balance is singular".into(),
        ));
    }
    let mut w = problem.dirichlet_values(T::zero());
    for (p, &t) in theta.iter().enumerate() {
        if !dofs.dirichlet[2 * n + p] {
            w[2 * n + p] = t;
        }
    }
    let (force, _) = problem.loads(T::zero())?;
    let a2theta = sparse::mul_vec(&problem.blocks.a2, &w[2 * n..]);
    let lifted = sparse::mul_vec(&problem.blocks.a1, &w[..2 * n]);
    let (map, ids) = free_maps(dofs, 0..2 * n);
    let rhs: Vec<T> = ids.iter().map(|&d| force[d] + a2theta[d] - lifted[d]).collect();
    let a1ff = sparse::restrict(&problem.blocks.a1, &map[..2 * n], &map[..2 * n], ids.len(), ids.len())?;
    let u = FreeSolver::new(a1ff)?.solve(&rhs)?;
    for (&d, x) in ids.iter().zip(u) {
        w[d] = x;
    }
    Ok(w)
}

/// Factorized fine system for one step size.
pub struct FineStepper<T: Real> {
    pub tau: T,
    system: Sparse<T>,
    history: Sparse<T>,
    map: Vec<Option<usize>>,
    free: Vec<usize>,
    solver: FreeSolver<T>,
}

impl<T: Real> FineStepper<T> {
    pub fn new(blocks: &OperatorBlocks<T>, dofs: &DofMap, tau: T) -> Result<Self> {
        let system = system_matrix(blocks, tau)?;
        let (map, free) = free_maps(dofs, 0..dofs.len());
        let reduced = sparse::restrict(&system, &map, &map, free.len(), free.len())?;
        Ok(Self {
            tau,
            history: history_matrix(blocks)?,
            solver: FreeSolver::new(reduced)?,
            system,
            map,
            free,
        })
    }

    /// One step from `prev` with right-hand side `[Fⁿ; τGⁿ]` and the
    /// Dirichlet values at `tₙ` in `boundary`.
    pub fn step(&self, prev: &[T], rhs: &[T], boundary: &[T]) -> Result<Vec<T>> {
        let bw = sparse::mul_vec(&self.history, prev);
        let lift = sparse::mul_vec(&self.system, boundary);
        let reduced: Vec<T> = self.free.iter().map(|&d| bw[d] + rhs[d] - lift[d]).collect();
        let x = self.solver.solve(&reduced)?;
        let mut w = boundary.to_vec();
        for (&d, xi) in self.free.iter().zip(x) {
            w[d] = xi;
        }
        debug_assert!(self.map.len() == w.len());
        Ok(w)
    }
}

/// Galerkin-projected operators `RᵀAR`, `RᵀBR` with a dense LU of the
/// former.
pub struct CoarseStepper<T: Real> {
    pub tau: T,
    pub a_c: Mat<T>,
    pub b_c: Mat<T>,
    lu: faer::linalg::solvers::PartialPivLu<T>,
}

/// Pivot ratio below which the coarse operator counts as singular.
pub const RANK_TOL: f64 = 1e-13;

fn galerkin<T: Real>(r: &Sparse<T>, a: &Sparse<T>) -> Result<Mat<T>> {
    let rt = sparse::transpose(r)?;
    let ar = sparse::matmul(a, r)?;
    Ok(sparse::to_dense(&sparse::matmul(&rt, &ar)?))
}

impl<T: Real> CoarseStepper<T> {
    pub fn new(blocks: &OperatorBlocks<T>, basis: &MultiscaleBasis<T>, tau: T) -> Result<Self> {
        let a_c = galerkin(&basis.r, &system_matrix(blocks, tau)?)?;
        let b_c = galerkin(&basis.r, &history_matrix(blocks)?)?;
        let lu = a_c.partial_piv_lu();
        let dim = a_c.nrows();
        if dim > 0 {
            let u = lu.U();
            let (mut lo, mut hi) = (T::infinity(), T::zero());
            for i in 0..dim {
                lo = lo.min(u[(i, i)].abs());
                hi = hi.max(u[(i, i)].abs());
            }
            let ratio = to_f64(lo / hi);
            if !(ratio > RANK_TOL) {
                return Err(Error::RankDeficient { dim, ratio });
            }
        }
        Ok(Self { tau, a_c, b_c, lu })
    }

    pub fn step(&self, prev: &[T], rhs_c: &[T]) -> Vec<T> {
        let dim = prev.len();
        let b = Mat::<T>::from_fn(dim, 1, |i, _| {
            let mut s = rhs_c[i];
            for j in 0..dim {
                s += self.b_c[(i, j)] * prev[j];
            }
            s
        });
        let mut x = self.lu.solve(&b);
        // one pass of iterative refinement
        let r = &b - &self.a_c * &x;
        x += self.lu.solve(&r);
        (0..dim).map(|i| x[(i, 0)]).collect()
    }
}

/// Least-squares coefficients `(RᵀR)⁻¹Rᵀw`.
pub fn project<T: Real>(basis: &MultiscaleBasis<T>, w: &[T]) -> Result<Vec<T>> {
    let r = &basis.r;
    let gram = galerkin(r, &identity(r.nrows())?)?;
    let rtw = sparse::mul_vec_t(r, w);
    let llt = gram
        .llt(faer::Side::Lower)
        .map_err(|_| Error::RankDeficient {
            dim: gram.nrows(),
            ratio: 0.0,
        })?;
    let b = Mat::<T>::from_fn(rtw.len(), 1, |i, _| rtw[i]);
    let x = llt.solve(&b);
    Ok((0..rtw.len()).map(|i| x[(i, 0)]).collect())
}

fn identity<T: Real>(n: usize) -> Result<Sparse<T>> {
    let t: Vec<_> = (0..n).map(|i| Triplet::new(i, i, T::one())).collect();
    sparse::from_triplets(n, n, &t)
}

/// `w = R w_c`
pub fn downscale<T: Real>(basis: &MultiscaleBasis<T>, coarse: &[T]) -> Result<Vec<T>> {
    if coarse.len() != basis.r.ncols() {
        return Err(Error::DimensionMismatch {
            what: "coarse coefficients",
            expected: basis.r.ncols(),
            found: coarse.len(),
        });
    }
    Ok(sparse::mul_vec(&basis.r, coarse))
}

pub enum March<'a, T> {
    Fine,
    Coarse(&'a MultiscaleBasis<T>),
}

/// Runs the march from the fine initial state and returns the stored
/// (downscaled) states.
pub fn run_march<T: Real>(
    problem: &Problem<'_, T>,
    grid: &TimeGrid<T>,
    march: March<'_, T>,
    storage: StoragePolicy,
) -> Result<SolutionHistory<T>> {
    let w0 = initial_state(problem)?;
    run_march_from(problem, grid, march, storage, w0)
}

pub fn run_march_from<T: Real>(
    problem: &Problem<'_, T>,
    grid: &TimeGrid<T>,
    march: March<'_, T>,
    storage: StoragePolicy,
    w0: Vec<T>,
) -> Result<SolutionHistory<T>> {
    let times = grid.times();
    let last = grid.len();
    let mut history = SolutionHistory::default();
    let mut loads = LoadCache::new();
    match march {
        March::Fine => {
            let mut stepper: Option<FineStepper<T>> = None;
            let mut w = w0;
            if storage.keeps(0, last) {
                history.push(0, T::zero(), w.clone());
            }
            for (k, &tau) in grid.steps.iter().enumerate() {
                if stepper.as_ref().is_none_or(|s| s.tau != tau) {
                    stepper = Some(FineStepper::new(problem.blocks, problem.dofs, tau)?);
                }
                let t = times[k + 1];
                let rhs = loads.rhs(problem, t, tau)?;
                w = stepper
                    .as_ref()
                    .unwrap()
                    .step(&w, &rhs, &problem.dirichlet_values(t))?;
                if storage.keeps(k + 1, last) {
                    history.push(k + 1, t, w.clone());
                }
            }
        }
        March::Coarse(basis) => {
            if problem.has_dirichlet_data() {
                return Err(Error::Unsupported(
                    "coarse marches need homogeneous Dirichlet data".into(),
                ));
            }
            let mut stepper: Option<CoarseStepper<T>> = None;
            let mut wc = project(basis, &w0)?;
            if storage.keeps(0, last) {
                history.push(0, T::zero(), downscale(basis, &wc)?);
            }
            for (k, &tau) in grid.steps.iter().enumerate() {
                if stepper.as_ref().is_none_or(|s| s.tau != tau) {
                    stepper = Some(CoarseStepper::new(problem.blocks, basis, tau)?);
                }
                let t = times[k + 1];
                let rhs = loads.rhs(problem, t, tau)?;
                let rhs_c = sparse::mul_vec_t(&basis.r, &rhs);
                wc = stepper.as_ref().unwrap().step(&wc, &rhs_c);
                if storage.keeps(k + 1, last) {
                    history.push(k + 1, t, downscale(basis, &wc)?);
                }
            }
        }
    }
    Ok(history)
}

/// Closed-form solution on constant coefficients with homogeneous data on
/// every edge: `u = (s p(t), 0)`, `θ = s p(t)`, `s = sin πx sin πy`.
pub mod manufactured {
    use super::*;
    use std::f64::consts::PI;

    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub enum Profile {
        /// `p(t) = t`
        Linear,
        /// `p(t) = t²`
        Quadratic,
    }

    impl Profile {
        fn p(self, t: f64) -> (f64, f64) {
            match self {
                Profile::Linear => (t, 1.0),
                Profile::Quadratic => (t * t, 2.0 * t),
            }
        }
    }

    #[derive(Clone, Copy, Debug)]
    pub struct Manufactured {
        pub lambda: f64,
        pub mu: f64,
        pub kappa: f64,
        pub beta: f64,
        pub profile: Profile,
    }

    impl Manufactured {
        /// `(u₁, u₂, θ)` at `(x, t)`.
        pub fn exact(&self, x: [f64; 2], t: f64) -> [f64; 3] {
            let s = (PI * x[0]).sin() * (PI * x[1]).sin();
            let (p, _) = self.profile.p(t);
            [s * p, 0.0, s * p]
        }

        pub fn sources<T: Real>(&self) -> Sources<T> {
            let m = *self;
            let force = Arc::new(move |x: Point<T>, t: T| {
                let (x, y, t) = (to_f64(x[0]), to_f64(x[1]), to_f64(t));
                let (p, _) = m.profile.p(t);
                let (sx, cx, sy, cy) = ((PI * x).sin(), (PI * x).cos(), (PI * y).sin(), (PI * y).cos());
                let f1 = (m.lambda + 3.0 * m.mu) * PI * PI * sx * sy * p + m.beta * PI * cx * sy * p;
                let f2 = -(m.lambda + m.mu) * PI * PI * cx * cy * p + m.beta * PI * sx * cy * p;
                [lit::<T>(f1), lit::<T>(f2)]
            });
            let heat = Arc::new(move |x: Point<T>, t: T| {
                let (x, y, t) = (to_f64(x[0]), to_f64(x[1]), to_f64(t));
                let (p, dp) = m.profile.p(t);
                let (sx, cx, sy) = ((PI * x).sin(), (PI * x).cos(), (PI * y).sin());
                lit::<T>(sx * sy * dp + 2.0 * m.kappa * PI * PI * sx * sy * p + m.beta * PI * cx * sy * dp)
            });
            let theta0 = Arc::new(move |x: Point<T>| lit::<T>(m.exact([to_f64(x[0]), to_f64(x[1])], 0.0)[2]));
            Sources {
                force,
                heat,
                theta0,
                dirichlet: None,
                time_dependent: true,
            }
        }

        /// `(‖u_h − u‖, ‖θ_h − θ‖)` in L² by a degree-5 rule per triangle.
        pub fn l2_errors<T: Real>(&self, mesh: &FineMesh<T>, w: &[T], t: f64) -> Result<(f64, f64)> {
            let n = mesh.node_count();
            let (mut eu, mut et) = (0.0, 0.0);
            for e in 0..mesh.element_count() {
                let tri = mesh.element(e)?;
                let idx = mesh.triangles[e];
                for (p, wq, bary) in tri.quadrature7() {
                    let ex = self.exact([to_f64(p[0]), to_f64(p[1])], t);
                    let mut h = [0.0; 3];
                    for (c, hc) in h.iter_mut().enumerate() {
                        for a in 0..3 {
                            *hc += to_f64(bary[a]) * to_f64(w[c * n + idx[a]]);
                        }
                    }
                    let wq = to_f64(wq);
                    eu += wq * ((h[0] - ex[0]).powi(2) + (h[1] - ex[1]).powi(2));
                    et += wq * (h[2] - ex[2]).powi(2);
                }
            }
            Ok((eu.sqrt(), et.sqrt()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble_global;
    use crate::coeffs::MaterialField;
    use crate::mesh::Boundary;
    use crate::scalar::dot;

    fn setup(n: usize, boundary: Boundary, beta: f64) -> (FineMesh<f64>, OperatorBlocks<f64>, DofMap) {
        let mesh = FineMesh::unit_square(n, n, boundary).unwrap();
        let mat = MaterialField::constant(mesh.element_count(), 2.0, 1.0, 1.0, beta.max(1.0));
        let (mut blocks, dofs) = assemble_global(&mesh, &mat).unwrap();
        if beta == 0.0 {
            // coupling switched off by hand; the material check wants β > 0
            blocks.a2 = sparse::zeros(blocks.a2.nrows(), blocks.a2.ncols());
        }
        (mesh, blocks, dofs)
    }

    #[test]
    fn uniform_grid_reaches_final_time() {
        let g = TimeGrid::<f64>::uniform(1.0, 0.02).unwrap();
        assert_eq!(g.len(), 50);
        assert!((g.final_time() - 1.0).abs() < 1e-12);
        assert!(TimeGrid::uniform(1.0, 0.3).is_err());
    }

    #[test]
    fn zero_data_stays_zero() {
        let (mesh, blocks, dofs) = setup(4, Boundary::Bottom, 1.0);
        let problem = Problem {
            mesh: &mesh,
            blocks: &blocks,
            dofs: &dofs,
            sources: Sources::zero(),
        };
        let h = run_march(&problem, &TimeGrid::uniform(1.0, 0.1).unwrap(), March::Fine, StoragePolicy::Full).unwrap();
        assert_eq!(h.states.len(), 11);
        assert!(h.states.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn neumann_only_displacement_is_rejected() {
        let (mesh, blocks, dofs) = setup(3, Boundary::None, 1.0);
        let problem = Problem {
            mesh: &mesh,
            blocks: &blocks,
            dofs: &dofs,
            sources: Sources::zero(),
        };
        assert!(matches!(initial_state(&problem), Err(Error::Constraint(_))));
    }

    #[test]
    fn initial_momentum_residual() {
        let (mesh, blocks, dofs) = setup(6, Boundary::Bottom, 3.0);
        let mut sources = Sources::zero();
        sources.theta0 = Arc::new(|p: Point<f64>| 500.0 * p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]));
        sources.force = Arc::new(|p: Point<f64>, _| [p[1], 1.0]);
        let problem = Problem {
            mesh: &mesh,
            blocks: &blocks,
            dofs: &dofs,
            sources,
        };
        let w = initial_state(&problem).unwrap();
        let n = dofs.nodes;
        let (f, _) = problem.loads(0.0).unwrap();
        let a1u = sparse::mul_vec(&blocks.a1, &w[..2 * n]);
        let a2t = sparse::mul_vec(&blocks.a2, &w[2 * n..]);
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for d in 0..2 * n {
            if !dofs.dirichlet[d] {
                worst = worst.max((a1u[d] - f[d] - a2t[d]).abs());
                scale = scale.max(f[d].abs() + a2t[d].abs());
            }
        }
        assert!(worst <= 1e-10 * scale);
    }

    #[test]
    fn zero_coupling_matches_scalar_heat_march() {
        let (mesh, blocks, dofs) = setup(6, Boundary::Bottom, 0.0);
        let mut sources = Sources::zero();
        sources.theta0 = Arc::new(|p: Point<f64>| (3.0 * p[0]).sin() + p[1]);
        sources.heat = Arc::new(|_, _| 10.0);
        let problem = Problem {
            mesh: &mesh,
            blocks: &blocks,
            dofs: &dofs,
            sources,
        };
        let grid = TimeGrid::uniform(0.5, 0.05).unwrap();
        let h = run_march(&problem, &grid, March::Fine, StoragePolicy::Final).unwrap();

        // independent scalar march on the free temperature dofs
        let n = dofs.nodes;
        let free: Vec<usize> = (0..n).filter(|&p| !mesh.dirichlet[p]).collect();
        let mut map = vec![None; n];
        for (i, &p) in free.iter().enumerate() {
            map[p] = Some(i);
        }
        let tau = 0.05;
        let k = sparse::lincomb(1.0, &blocks.m_theta, tau, &blocks.a4).unwrap();
        let k = sparse::to_dense(&sparse::restrict(&k, &map, &map, free.len(), free.len()).unwrap());
        let m = sparse::to_dense(&blocks.m_theta);
        let (_, g) = problem.loads(0.0).unwrap();
        let mut theta: Vec<f64> = mesh
            .nodes
            .iter()
            .enumerate()
            .map(|(p, x)| if mesh.dirichlet[p] { 0.0 } else { (3.0 * x[0]).sin() + x[1] })
            .collect();
        let lu = k.partial_piv_lu();
        for _ in 0..10 {
            let rhs = Mat::from_fn(free.len(), 1, |i, _| {
                let p = free[i];
                (0..n).map(|q| m[(p, q)] * theta[q]).sum::<f64>() + tau * g[p]
            });
            let x = lu.solve(&rhs);
            for (i, &p) in free.iter().enumerate() {
                theta[p] = x[(i, 0)];
            }
        }
        let w = h.last().unwrap();
        for p in 0..n {
            assert!((w[2 * n + p] - theta[p]).abs() < 1e-12 * (1.0 + theta[p].abs()));
        }
    }

    #[test]
    fn single_heat_mode_decays_by_resolvent() {
        let (mesh, blocks, _) = setup(5, Boundary::Bottom, 0.0);
        // pure Neumann temperature, Dirichlet displacement only
        let node_dirichlet: Vec<bool> = mesh.nodes.iter().map(|p| p[1] == 0.0).collect();
        let mut flags = node_dirichlet.clone();
        flags.extend(node_dirichlet.iter().copied());
        flags.extend(std::iter::repeat_n(false, mesh.node_count()));
        let mut dofs = DofMap::new(&node_dirichlet);
        dofs.dirichlet = flags.clone();
        dofs.free = (0..flags.len()).filter(|&d| !flags[d]).collect();
        let a = sparse::to_dense(&blocks.a4);
        let m = sparse::to_dense(&blocks.m_theta);
        let llt = m.llt(faer::Side::Lower).unwrap();
        let l = llt.L().to_owned();
        let linv = l.partial_piv_lu().solve(Mat::<f64>::identity(l.nrows(), l.nrows()));
        let c = &linv * &a * linv.transpose();
        let eig = c.self_adjoint_eigen(faer::Side::Lower).unwrap();
        let k = 3;
        let lambda = eig.S()[k];
        let phi = linv.transpose() * eig.U().col(k);
        let theta: Vec<f64> = (0..mesh.node_count()).map(|i| phi[i]).collect();
        let problem = Problem {
            mesh: &mesh,
            blocks: &blocks,
            dofs: &dofs,
            sources: Sources::zero(),
        };
        let tau = 0.1;
        let w0 = initial_state_from(&problem, &theta).unwrap();
        let h = run_march_from(
            &problem,
            &TimeGrid::uniform(tau, tau).unwrap(),
            March::Fine,
            StoragePolicy::Final,
            w0,
        )
        .unwrap();
        let n = mesh.node_count();
        let w = h.last().unwrap();
        for p in 0..n {
            assert!((w[2 * n + p] - theta[p] / (1.0 + tau * lambda)).abs() < 1e-10);
        }
    }

    fn energy(blocks: &OperatorBlocks<f64>, w: &[f64]) -> f64 {
        let n = blocks.nodes;
        0.5 * sparse::quad(&blocks.a1, &w[..2 * n]) + 0.5 * sparse::quad(&blocks.m_theta, &w[2 * n..])
    }

    #[test]
    fn energy_decays_without_sources() {
        let (mesh, blocks, dofs) = setup(8, Boundary::Bottom, 5.0);
        let problem = Problem {
            mesh: &mesh,
            blocks: &blocks,
            dofs: &dofs,
            sources: Sources::zero(),
        };
        let theta: Vec<f64> = (0..dofs.nodes).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        for tau in [1e-3, 1e-1, 1.0] {
            let w0 = initial_state_from(&problem, &theta).unwrap();
            let e0 = energy(&blocks, &w0);
            let grid = TimeGrid { steps: vec![tau; 50] };
            let h = run_march_from(&problem, &grid, March::Fine, StoragePolicy::Full, w0).unwrap();
            let mut prev = e0;
            for w in &h.states[1..] {
                let e = energy(&blocks, w);
                assert!(e <= prev * (1.0 + 1e-12), "tau {tau}: {e} > {prev}");
                prev = e;
            }
        }
    }

    #[test]
    fn downscale_is_linear_and_selects_columns() {
        use crate::spectral::MultiscaleBasis;
        let t = vec![
            Triplet::new(0, 0, 1.0),
            Triplet::new(1, 0, 2.0),
            Triplet::new(2, 1, -1.0),
        ];
        let basis = MultiscaleBasis {
            r: sparse::from_triplets(3, 2, &t).unwrap(),
            columns: vec![(0, 0), (0, 1)],
            dropped: vec![],
        };
        assert_eq!(downscale(&basis, &[0.0, 1.0]).unwrap(), vec![0.0, 0.0, -1.0]);
        let x = [0.3f64, -2.0];
        let y = [1.5f64, 0.25];
        let lhs = downscale(&basis, &[2.0 * x[0] - y[0], 2.0 * x[1] - y[1]]).unwrap();
        let dx = downscale(&basis, &x).unwrap();
        let dy = downscale(&basis, &y).unwrap();
        for i in 0..3 {
            assert!((lhs[i] - (2.0 * dx[i] - dy[i])).abs() < 1e-15);
        }
        let w = downscale(&basis, &x).unwrap();
        let back = project(&basis, &w).unwrap();
        assert!((back[0] - x[0]).abs() < 1e-10 && (back[1] - x[1]).abs() < 1e-10);
        assert!(dot(&back, &back) > 0.0);
    }
}
