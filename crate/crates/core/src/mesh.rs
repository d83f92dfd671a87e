//! Structured fine/coarse meshes on the unit square, coarse-vertex patches
//! and the partition of unity subordinate to them.
//!
//! Fine nodes are numbered row by row, `p = j (nx + 1) + i`. Each fine cell
//! `(i, j)` is split along its lower-left to upper-right diagonal into the
//! triangles `2 c` (below the diagonal) and `2 c + 1` (above it), where
//! `c = j nx + i`.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::element::{P1Triangle, Point};
use crate::error::{Error, Result};
use crate::scalar::{from_usize, Real};

/// Which nodes carry Dirichlet data (for both displacement and temperature).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// `Γ_D = [0,1] × {0}`.
    #[default]
    Bottom,
    /// Every node on `∂Ω`.
    AllEdges,
    /// Pure Neumann problem.
    None,
}

#[derive(Clone, Debug)]
pub struct FineMesh<T> {
    pub nx: usize,
    pub ny: usize,
    pub nodes: Vec<Point<T>>,
    pub triangles: Vec<[usize; 3]>,
    pub dirichlet: Vec<bool>,
}

impl<T: Real> FineMesh<T> {
    pub fn unit_square(nx: usize, ny: usize, boundary: Boundary) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidMesh("cell counts must be at least 1".into()));
        }
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push([
                    from_usize::<T>(i) / from_usize::<T>(nx),
                    from_usize::<T>(j) / from_usize::<T>(ny),
                ]);
            }
        }
        let mut triangles = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let n00 = j * (nx + 1) + i;
                let n10 = n00 + 1;
                let n01 = n00 + nx + 1;
                let n11 = n01 + 1;
                triangles.push([n00, n10, n11]);
                triangles.push([n00, n11, n01]);
            }
        }
        let mut mesh = Self {
            nx,
            ny,
            nodes,
            triangles,
            dirichlet: vec![false; (nx + 1) * (ny + 1)],
        };
        mesh.set_boundary(boundary);
        Ok(mesh)
    }

    pub fn set_boundary(&mut self, boundary: Boundary) {
        let (nx, ny) = (self.nx, self.ny);
        self.set_dirichlet_where(|i, j| match boundary {
            Boundary::Bottom => j == 0,
            Boundary::AllEdges => i == 0 || j == 0 || i == nx || j == ny,
            Boundary::None => false,
        });
    }

    /// Marks Dirichlet nodes by their grid indices.
    pub fn set_dirichlet_where(&mut self, pred: impl Fn(usize, usize) -> bool) {
        for j in 0..=self.ny {
            for i in 0..=self.nx {
                self.dirichlet[j * (self.nx + 1) + i] = pred(i, j);
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn element_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    /// Fine cell `(i, j)` containing element `e`.
    pub fn cell_of_element(&self, e: usize) -> (usize, usize) {
        let c = e / 2;
        (c % self.nx, c / self.nx)
    }

    pub fn element(&self, e: usize) -> Result<P1Triangle<T>> {
        let [a, b, c] = self.triangles[e];
        P1Triangle::new([self.nodes[a], self.nodes[b], self.nodes[c]], e)
    }

    pub fn centroid(&self, e: usize) -> Point<T> {
        let [a, b, c] = self.triangles[e];
        let third = T::one() / from_usize::<T>(3);
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        [
            (pa[0] + pb[0] + pc[0]) * third,
            (pa[1] + pb[1] + pc[1]) * third,
        ]
    }

    pub fn dirichlet_count(&self) -> usize {
        self.dirichlet.iter().filter(|&&d| d).count()
    }
}

/// Union of the coarse cells around one coarse vertex.
#[derive(Clone, Debug)]
pub struct Patch {
    pub vertex: usize,
    /// Coarse cell ids, `cj * Nx + ci`.
    pub cells: Vec<usize>,
    /// Fine element ids, ascending.
    pub elements: Vec<usize>,
    /// Fine node ids, ascending. Local node `q` is `nodes[q]`.
    pub nodes: Vec<usize>,
}

impl Patch {
    pub fn local_node(&self, global: usize) -> Option<usize> {
        self.nodes.binary_search(&global).ok()
    }
}

#[derive(Clone, Debug)]
pub struct CoarseMesh<T> {
    pub nx: usize,
    pub ny: usize,
    /// Coarse mesh size `max(1/Nx, 1/Ny)`.
    pub h: T,
    pub vertices: Vec<Point<T>>,
    pub patches: Vec<Patch>,
}

impl<T> CoarseMesh<T> {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertex_index(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }
}

#[derive(Clone, Debug)]
pub struct MeshPair<T> {
    pub fine: FineMesh<T>,
    pub coarse: CoarseMesh<T>,
    /// Fine cells per coarse cell along x and y.
    pub ratio: (usize, usize),
}

pub fn build_mesh_pair<T: Real>(
    nx: usize,
    ny: usize,
    coarse_nx: usize,
    coarse_ny: usize,
    boundary: Boundary,
) -> Result<MeshPair<T>> {
    if coarse_nx == 0 || coarse_ny == 0 {
        return Err(Error::InvalidMesh("coarse cell counts must be at least 1".into()));
    }
    let fine = FineMesh::unit_square(nx, ny, boundary)?;
    if !nx.is_multiple_of(coarse_nx) {
        return Err(Error::NotNested {
            axis: "x",
            fine: nx,
            coarse: coarse_nx,
        });
    }
    if !ny.is_multiple_of(coarse_ny) {
        return Err(Error::NotNested {
            axis: "y",
            fine: ny,
            coarse: coarse_ny,
        });
    }
    let (rx, ry) = (nx / coarse_nx, ny / coarse_ny);

    let mut vertices = Vec::with_capacity((coarse_nx + 1) * (coarse_ny + 1));
    let mut patches = Vec::with_capacity(vertices.capacity());
    for vj in 0..=coarse_ny {
        for vi in 0..=coarse_nx {
            let vertex = vertices.len();
            vertices.push([
                from_usize::<T>(vi) / from_usize::<T>(coarse_nx),
                from_usize::<T>(vj) / from_usize::<T>(coarse_ny),
            ]);
            let ci_range = vi.saturating_sub(1)..(vi + 1).min(coarse_nx);
            let cj_range = vj.saturating_sub(1)..(vj + 1).min(coarse_ny);
            let mut cells = Vec::new();
            let mut elements = Vec::new();
            let mut nodes = Vec::new();
            for cj in cj_range.clone() {
                for ci in ci_range.clone() {
                    cells.push(cj * coarse_nx + ci);
                    for j in cj * ry..(cj + 1) * ry {
                        for i in ci * rx..(ci + 1) * rx {
                            let c = j * nx + i;
                            elements.push(2 * c);
                            elements.push(2 * c + 1);
                        }
                    }
                }
            }
            let (i0, i1) = (ci_range.start * rx, ci_range.end * rx);
            let (j0, j1) = (cj_range.start * ry, cj_range.end * ry);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    nodes.push(j * (nx + 1) + i);
                }
            }
            elements.sort_unstable();
            patches.push(Patch {
                vertex,
                cells,
                elements,
                nodes,
            });
        }
    }
    let h = (T::one() / from_usize::<T>(coarse_nx)).max(T::one() / from_usize::<T>(coarse_ny));
    Ok(MeshPair {
        fine,
        coarse: CoarseMesh {
            nx: coarse_nx,
            ny: coarse_ny,
            h,
            vertices,
            patches,
        },
        ratio: (rx, ry),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PouKind {
    /// Coarse Q1 hat functions.
    #[default]
    Bilinear,
    /// Cellwise `-∇·(κ∇χ) = 0` with the hat's trace on coarse-cell edges.
    MsfemHarmonic,
}

/// `χ_i` stored over the nodes of patch `i` (its support).
#[derive(Clone, Debug)]
pub struct PartitionOfUnity<T> {
    pub kind: PouKind,
    /// `values[i][q]` is `χ_i` at local node `q` of patch `i`.
    pub values: Vec<Vec<T>>,
}

impl<T: Real> PartitionOfUnity<T> {
    /// `χ_i(p)` at a global fine node, zero outside the patch.
    pub fn value(&self, pair: &MeshPair<T>, i: usize, node: usize) -> T {
        pair.coarse.patches[i]
            .local_node(node)
            .map_or(T::zero(), |q| self.values[i][q])
    }

    /// `Σ_i χ_i(p)` at every fine node.
    pub fn sum(&self, pair: &MeshPair<T>) -> Vec<T> {
        let mut s = vec![T::zero(); pair.fine.node_count()];
        for (patch, vals) in pair.coarse.patches.iter().zip(&self.values) {
            for (&p, &v) in patch.nodes.iter().zip(vals) {
                s[p] += v;
            }
        }
        s
    }
}

fn hat<T: Real>(pair: &MeshPair<T>, vertex: usize, p: Point<T>) -> T {
    let c = &pair.coarse;
    let v = c.vertices[vertex];
    let hx = T::one() / from_usize::<T>(c.nx);
    let hy = T::one() / from_usize::<T>(c.ny);
    let wx = (T::one() - ((p[0] - v[0]) / hx).abs()).max(T::zero());
    let wy = (T::one() - ((p[1] - v[1]) / hy).abs()).max(T::zero());
    wx * wy
}

/// Builds `χ_i` for every coarse vertex. `kappa` (one value per fine
/// element) is required for [`PouKind::MsfemHarmonic`].
pub fn build_partition_of_unity<T: Real>(
    pair: &MeshPair<T>,
    kind: PouKind,
    kappa: Option<&[T]>,
) -> Result<PartitionOfUnity<T>> {
    let mut values: Vec<Vec<T>> = pair
        .coarse
        .patches
        .iter()
        .map(|patch| {
            patch
                .nodes
                .iter()
                .map(|&p| hat(pair, patch.vertex, pair.fine.nodes[p]))
                .collect()
        })
        .collect();
    if kind == PouKind::MsfemHarmonic {
        let kappa = kappa.ok_or_else(|| {
            Error::Unsupported("msfem-harmonic partition of unity needs a conductivity field".into())
        })?;
        if kappa.len() != pair.fine.element_count() {
            return Err(Error::DimensionMismatch {
                what: "conductivity field",
                expected: pair.fine.element_count(),
                found: kappa.len(),
            });
        }
        harmonic_interiors(pair, kappa, &mut values)?;
    }
    Ok(PartitionOfUnity { kind, values })
}

/// Replaces hat values strictly inside every coarse cell by the discrete
/// κ-harmonic extension of the hat's trace on the cell boundary.
fn harmonic_interiors<T: Real>(pair: &MeshPair<T>, kappa: &[T], values: &mut [Vec<T>]) -> Result<()> {
    let fine = &pair.fine;
    let coarse = &pair.coarse;
    let (rx, ry) = pair.ratio;
    if rx < 2 || ry < 2 {
        return Ok(()); // no interior fine nodes
    }
    let local = |i: usize, j: usize| j * (rx + 1) + i;
    let n_local = (rx + 1) * (ry + 1);
    let interior = |i: usize, j: usize| i > 0 && j > 0 && i < rx && j < ry;
    let unknown_index = |i: usize, j: usize| (j - 1) * (rx - 1) + (i - 1);
    let n_unknown = (rx - 1) * (ry - 1);

    for cj in 0..coarse.ny {
        for ci in 0..coarse.nx {
            let mut k = Mat::<T>::zeros(n_local, n_local);
            for j in cj * ry..(cj + 1) * ry {
                for i in ci * rx..(ci + 1) * rx {
                    let cell = j * fine.nx + i;
                    for e in [2 * cell, 2 * cell + 1] {
                        let coeff = kappa[e];
                        if !(coeff > T::zero()) {
                            return Err(Error::CoefficientPositivity {
                                field: "kappa",
                                element: e,
                                value: crate::scalar::to_f64(coeff),
                            });
                        }
                        let tri = fine.element(e)?;
                        let ke = tri.diffusion(coeff);
                        let loc = fine.triangles[e].map(|p| {
                            let (pi, pj) = (p % (fine.nx + 1), p / (fine.nx + 1));
                            local(pi - ci * rx, pj - cj * ry)
                        });
                        for a in 0..3 {
                            for b in 0..3 {
                                k[(loc[a], loc[b])] += ke[a][b];
                            }
                        }
                    }
                }
            }
            let global = |i: usize, j: usize| (cj * ry + j) * (fine.nx + 1) + ci * rx + i;
            let mut kii = Mat::<T>::zeros(n_unknown, n_unknown);
            for j in 1..ry {
                for i in 1..rx {
                    for jj in 1..ry {
                        for ii in 1..rx {
                            kii[(unknown_index(i, j), unknown_index(ii, jj))] =
                                k[(local(i, j), local(ii, jj))];
                        }
                    }
                }
            }
            let llt = kii.llt(Side::Lower).map_err(|_| Error::CoefficientPositivity {
                field: "kappa",
                element: 2 * (cj * ry * fine.nx + ci * rx),
                value: f64::NAN,
            })?;

            let corners = [(ci, cj), (ci + 1, cj), (ci, cj + 1), (ci + 1, cj + 1)];
            for (vi, vj) in corners {
                let vertex = coarse.vertex_index(vi, vj);
                let patch = &coarse.patches[vertex];
                let mut rhs = Mat::<T>::zeros(n_unknown, 1);
                for j in 0..=ry {
                    for i in 0..=rx {
                        if interior(i, j) {
                            continue;
                        }
                        let g = hat(pair, vertex, fine.nodes[global(i, j)]);
                        if g == T::zero() {
                            continue;
                        }
                        for jj in 1..ry {
                            for ii in 1..rx {
                                let r = unknown_index(ii, jj);
                                rhs[(r, 0)] -= k[(local(ii, jj), local(i, j))] * g;
                            }
                        }
                    }
                }
                let sol = llt.solve(&rhs);
                for j in 1..ry {
                    for i in 1..rx {
                        let q = patch
                            .local_node(global(i, j))
                            .expect("cell interior lies in the patch of its corners");
                        values[vertex][q] = sol[(unknown_index(i, j), 0)];
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_nested_pair() {
        let m = build_mesh_pair::<f64>(2, 2, 1, 1, Boundary::Bottom).unwrap();
        assert_eq!(m.fine.node_count(), 9);
        assert_eq!(m.fine.element_count(), 8);
        assert_eq!(m.coarse.vertex_count(), 4);
        for p in &m.coarse.patches {
            assert_eq!(p.cells, vec![0]);
            assert_eq!(p.elements.len(), 8);
        }
    }

    #[test]
    fn full_scale_counts() {
        let m = build_mesh_pair::<f64>(200, 200, 20, 20, Boundary::Bottom).unwrap();
        assert_eq!(m.fine.node_count(), 40401);
        assert_eq!(m.coarse.patches.len(), 441);
        let center = &m.coarse.patches[m.coarse.vertex_index(10, 10)];
        assert_eq!(center.nodes.len(), 21 * 21);
        assert_eq!(center.elements.len(), 2 * 20 * 20);
    }

    #[test]
    fn corner_and_center_patch_sizes() {
        // enumerated by hand: a corner vertex touches one 2×2-cell coarse
        // cell (8 triangles), the center vertex touches four (32 triangles)
        let m = build_mesh_pair::<f64>(4, 4, 2, 2, Boundary::Bottom).unwrap();
        assert_eq!(m.coarse.patches[0].elements.len(), 8);
        assert_eq!(m.coarse.patches[m.coarse.vertex_index(1, 1)].elements.len(), 32);
        assert_eq!(m.coarse.patches[m.coarse.vertex_index(1, 0)].elements.len(), 16);
    }

    #[test]
    fn non_nested_ratio_is_rejected() {
        let r = build_mesh_pair::<f64>(10, 10, 3, 5, Boundary::Bottom);
        assert!(matches!(r, Err(Error::NotNested { axis: "x", .. })));
        let r = build_mesh_pair::<f64>(10, 9, 5, 2, Boundary::Bottom);
        assert!(matches!(r, Err(Error::NotNested { axis: "y", .. })));
    }

    #[test]
    fn dirichlet_nodes_are_bottom_row() {
        let m = FineMesh::<f64>::unit_square(5, 3, Boundary::Bottom).unwrap();
        for (p, &d) in m.dirichlet.iter().enumerate() {
            assert_eq!(d, m.nodes[p][1] == 0.0);
        }
    }

    #[test]
    fn triangles_have_positive_area() {
        let m = FineMesh::<f64>::unit_square(3, 4, Boundary::Bottom).unwrap();
        for e in 0..m.element_count() {
            assert!(m.element(e).unwrap().area > 0.0);
        }
    }

    #[test]
    fn bilinear_pou_is_nodal_and_sums_to_one() {
        let m = build_mesh_pair::<f64>(6, 4, 3, 2, Boundary::Bottom).unwrap();
        let pou = build_partition_of_unity(&m, PouKind::Bilinear, None).unwrap();
        for s in pou.sum(&m) {
            assert!((s - 1.0).abs() < 1e-12);
        }
        for i in 0..m.coarse.vertex_count() {
            for j in 0..m.coarse.vertex_count() {
                let v = m.coarse.vertices[j];
                let p = m
                    .fine
                    .nodes
                    .iter()
                    .position(|q| (q[0] - v[0]).abs() < 1e-14 && (q[1] - v[1]).abs() < 1e-14)
                    .unwrap();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((pou.value(&m, i, p) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn harmonic_pou_with_constant_kappa_is_the_hat() {
        let m = build_mesh_pair::<f64>(8, 8, 2, 2, Boundary::Bottom).unwrap();
        let kappa = vec![3.5; m.fine.element_count()];
        let bil = build_partition_of_unity(&m, PouKind::Bilinear, None).unwrap();
        let harm = build_partition_of_unity(&m, PouKind::MsfemHarmonic, Some(&kappa)).unwrap();
        for (a, b) in bil.values.iter().flatten().zip(harm.values.iter().flatten()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn harmonic_pou_with_rough_kappa_stays_a_partition() {
        let m = build_mesh_pair::<f64>(8, 8, 2, 2, Boundary::Bottom).unwrap();
        let kappa: Vec<f64> = (0..m.fine.element_count())
            .map(|e| if (e / 2) % 3 == 0 { 1e3 } else { 1.0 })
            .collect();
        let harm = build_partition_of_unity(&m, PouKind::MsfemHarmonic, Some(&kappa)).unwrap();
        for s in harm.sum(&m) {
            assert!((s - 1.0).abs() < 1e-12);
        }
        for v in harm.values.iter().flatten() {
            assert!(*v >= -1e-12 && *v <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn harmonic_pou_rejects_nonpositive_kappa() {
        let m = build_mesh_pair::<f64>(4, 4, 2, 2, Boundary::Bottom).unwrap();
        let mut kappa = vec![1.0; m.fine.element_count()];
        kappa[5] = 0.0;
        let r = build_partition_of_unity(&m, PouKind::MsfemHarmonic, Some(&kappa));
        assert!(matches!(r, Err(Error::CoefficientPositivity { .. })));
    }
}
