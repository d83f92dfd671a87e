//! Global and patch-local assembly of the thermoelastic bilinear forms.
//!
//! Dofs are laid out in blocks `[u₁ | u₂ | θ]`, each block indexed by node.
//! Matrices are kept over all dofs; Dirichlet rows and columns are removed
//! by the solvers that need a reduced system.

use faer::sparse::Triplet;

use crate::coeffs::MaterialField;
use crate::element::Point;
use crate::error::{Error, Result};
use crate::mesh::{FineMesh, Patch};
use crate::scalar::Real;
use crate::sparse::{self, Sparse};

#[derive(Clone, Debug)]
pub struct DofMap {
    pub nodes: usize,
    /// One flag per dof, in block order.
    pub dirichlet: Vec<bool>,
    /// Free dof ids, ascending.
    pub free: Vec<usize>,
    /// Position of each dof among the free ones.
    pub free_index: Vec<Option<usize>>,
}

impl DofMap {
    pub fn new(node_dirichlet: &[bool]) -> Self {
        let nodes = node_dirichlet.len();
        let dirichlet: Vec<bool> = (0..3).flat_map(|_| node_dirichlet.iter().copied()).collect();
        let mut free = Vec::new();
        let mut free_index = vec![None; 3 * nodes];
        for (d, &fixed) in dirichlet.iter().enumerate() {
            if !fixed {
                free_index[d] = Some(free.len());
                free.push(d);
            }
        }
        Self {
            nodes,
            dirichlet,
            free,
            free_index,
        }
    }

    /// Every dof free.
    pub fn unconstrained(nodes: usize) -> Self {
        Self::new(&vec![false; nodes])
    }

    pub fn for_mesh<T>(mesh: &FineMesh<T>) -> Self {
        Self::new(&mesh.dirichlet)
    }

    pub fn len(&self) -> usize {
        3 * self.nodes
    }

    pub fn is_empty(&self) -> bool {
        self.nodes == 0
    }

    pub fn u(&self, node: usize, component: usize) -> usize {
        component * self.nodes + node
    }

    pub fn theta(&self, node: usize) -> usize {
        2 * self.nodes + node
    }

    pub fn u_range(&self) -> std::ops::Range<usize> {
        0..2 * self.nodes
    }

    pub fn theta_range(&self) -> std::ops::Range<usize> {
        2 * self.nodes..3 * self.nodes
    }
}

/// Sparse blocks of the thermoelastic system over one set of nodes.
///
/// `a2` holds `b(v, θ) = ∫ β θ ∇·v` with displacement rows and temperature
/// columns; its transpose plays the role of the heat-equation coupling and
/// is never assembled separately.
#[derive(Clone, Debug)]
pub struct OperatorBlocks<T> {
    pub nodes: usize,
    /// Coordinates of the nodes, in local order.
    pub coords: Vec<Point<T>>,
    pub a1: Sparse<T>,
    pub a2: Sparse<T>,
    pub a4: Sparse<T>,
    /// Unweighted temperature mass `c(θ, v)`.
    pub m_theta: Sparse<T>,
    /// `(λ + 2μ)`-weighted displacement mass.
    pub m1: Sparse<T>,
    /// `κ`-weighted temperature mass.
    pub m2: Sparse<T>,
}

impl<T: Real> OperatorBlocks<T> {
    /// `A₂ᵀ x`
    pub fn a3_mul(&self, x: &[T]) -> Vec<T> {
        sparse::mul_vec_t(&self.a2, x)
    }
}

fn assemble_blocks<T: Real>(
    mesh: &FineMesh<T>,
    material: &MaterialField<T>,
    elements: &[usize],
    local: impl Fn(usize) -> usize,
    nodes: &[usize],
) -> Result<OperatorBlocks<T>> {
    let n = nodes.len();
    let cap = 9 * elements.len();
    let mut a1 = Vec::with_capacity(4 * cap);
    let mut a2 = Vec::with_capacity(2 * cap);
    let mut a4 = Vec::with_capacity(cap);
    let mut mt = Vec::with_capacity(cap);
    let mut m1 = Vec::with_capacity(2 * cap);
    let mut m2 = Vec::with_capacity(cap);
    let one = T::one();
    for &e in elements {
        let tri = mesh.element(e)?;
        let (lambda, mu) = (material.lambda[e], material.mu[e]);
        let (kappa, beta) = (material.kappa[e], material.beta[e]);
        let idx = mesh.triangles[e].map(&local);
        let ke = tri.elasticity(lambda, mu);
        let be = tri.coupling(beta);
        let de = tri.diffusion(kappa);
        let mass = tri.mass(one);
        let pm = lambda + mu + mu;
        for a in 0..3 {
            for b in 0..3 {
                for r in 0..2 {
                    for s in 0..2 {
                        a1.push(Triplet::new(r * n + idx[a], s * n + idx[b], ke[a][r][b][s]));
                    }
                    a2.push(Triplet::new(r * n + idx[a], idx[b], be[a][r][b]));
                    m1.push(Triplet::new(r * n + idx[a], r * n + idx[b], pm * mass[a][b]));
                }
                a4.push(Triplet::new(idx[a], idx[b], de[a][b]));
                mt.push(Triplet::new(idx[a], idx[b], mass[a][b]));
                m2.push(Triplet::new(idx[a], idx[b], kappa * mass[a][b]));
            }
        }
    }
    Ok(OperatorBlocks {
        nodes: n,
        coords: nodes.iter().map(|&p| mesh.nodes[p]).collect(),
        a1: sparse::from_triplets(2 * n, 2 * n, &a1)?,
        a2: sparse::from_triplets(2 * n, n, &a2)?,
        a4: sparse::from_triplets(n, n, &a4)?,
        m_theta: sparse::from_triplets(n, n, &mt)?,
        m1: sparse::from_triplets(2 * n, 2 * n, &m1)?,
        m2: sparse::from_triplets(n, n, &m2)?,
    })
}

/// Assembles every block over the whole fine mesh.
pub fn assemble_global<T: Real>(mesh: &FineMesh<T>, material: &MaterialField<T>) -> Result<(OperatorBlocks<T>, DofMap)> {
    material.validate(mesh.element_count())?;
    let elements: Vec<usize> = (0..mesh.element_count()).collect();
    let nodes: Vec<usize> = (0..mesh.node_count()).collect();
    let blocks = assemble_blocks(mesh, material, &elements, |p| p, &nodes)?;
    Ok((blocks, DofMap::for_mesh(mesh)))
}

/// Assembles over the elements of one patch with natural boundary
/// conditions on its boundary. Local node `q` is `patch.nodes[q]`.
pub fn assemble_patch<T: Real>(mesh: &FineMesh<T>, material: &MaterialField<T>, patch: &Patch) -> Result<OperatorBlocks<T>> {
    if patch.elements.is_empty() || patch.nodes.is_empty() {
        return Err(Error::EmptyPatch(patch.vertex));
    }
    material.validate(mesh.element_count())?;
    assemble_blocks(
        mesh,
        material,
        &patch.elements,
        |p| patch.local_node(p).expect("element node inside its patch"),
        &patch.nodes,
    )
}

/// Consistent P1 loads `(F, G)` for body force `f` and heat source `g`,
/// by the edge-midpoint rule. `F` is in `[u₁ | u₂]` block order.
pub fn assemble_loads<T: Real>(
    mesh: &FineMesh<T>,
    f: impl Fn(Point<T>) -> [T; 2],
    g: impl Fn(Point<T>) -> T,
) -> Result<(Vec<T>, Vec<T>)> {
    let n = mesh.node_count();
    let mut force = vec![T::zero(); 2 * n];
    let mut heat = vec![T::zero(); n];
    for e in 0..mesh.element_count() {
        let tri = mesh.element(e)?;
        let idx = mesh.triangles[e];
        let le = tri.load(|p| {
            let [f1, f2] = f(p);
            [f1, f2, g(p)]
        });
        for a in 0..3 {
            force[idx[a]] += le[a][0];
            force[n + idx[a]] += le[a][1];
            heat[idx[a]] += le[a][2];
        }
    }
    if force.iter().chain(&heat).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("source term".into()));
    }
    Ok((force, heat))
}

/// Nodal interpolant of a scalar function.
pub fn interpolate<T: Real>(mesh: &FineMesh<T>, f: impl Fn(Point<T>) -> T) -> Vec<T> {
    mesh.nodes.iter().map(|&p| f(p)).collect()
}
