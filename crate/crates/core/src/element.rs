//! Linear (P1) triangle kernels with elementwise-constant coefficients.
//!
//! All element integrals below are exact: gradients of P1 functions are
//! constant per triangle, and mass integrals use the closed-form
//! `|T|/12 (1 + δ_ab)`.

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

pub type Point<T> = [T; 2];

/// Geometry of one triangle: signed area and barycentric gradients.
#[derive(Clone, Copy, Debug)]
pub struct P1Triangle<T> {
    pub area: T,
    pub grads: [[T; 2]; 3],
    pub vertices: [Point<T>; 3],
}

impl<T: Real> P1Triangle<T> {
    pub fn new(vertices: [Point<T>; 3], element: usize) -> Result<Self> {
        let [p0, p1, p2] = vertices;
        let two_area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
        if !(two_area > T::zero()) {
            return Err(Error::ZeroArea { element });
        }
        let mut grads = [[T::zero(); 2]; 3];
        for k in 0..3 {
            let a = vertices[(k + 1) % 3];
            let b = vertices[(k + 2) % 3];
            grads[k] = [(a[1] - b[1]) / two_area, (b[0] - a[0]) / two_area];
        }
        Ok(Self {
            area: two_area * lit::<T>(0.5),
            grads,
            vertices,
        })
    }

    pub fn centroid(&self) -> Point<T> {
        let third = lit::<T>(1.0 / 3.0);
        let [p0, p1, p2] = self.vertices;
        [(p0[0] + p1[0] + p2[0]) * third, (p0[1] + p1[1] + p2[1]) * third]
    }

    /// `∫ κ ∇φ_a · ∇φ_b`
    pub fn diffusion(&self, kappa: T) -> [[T; 3]; 3] {
        let mut k = [[T::zero(); 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                let g = self.grads[a][0] * self.grads[b][0] + self.grads[a][1] * self.grads[b][1];
                k[a][b] = kappa * self.area * g;
            }
        }
        k
    }

    /// `∫ c φ_a φ_b`
    pub fn mass(&self, c: T) -> [[T; 3]; 3] {
        let off = c * self.area / lit::<T>(12.0);
        let mut m = [[off; 3]; 3];
        for (a, row) in m.iter_mut().enumerate() {
            row[a] = off + off;
        }
        m
    }

    /// `∫ σ(φ_a e_r) : ε(φ_b e_s)`, indexed `[a][r][b][s]`.
    pub fn elasticity(&self, lambda: T, mu: T) -> [[[[T; 2]; 3]; 2]; 3] {
        let mut k = [[[[T::zero(); 2]; 3]; 2]; 3];
        let g = &self.grads;
        for a in 0..3 {
            for r in 0..2 {
                for b in 0..3 {
                    for s in 0..2 {
                        let gg = g[a][0] * g[b][0] + g[a][1] * g[b][1];
                        let delta = if r == s { gg } else { T::zero() };
                        let shear = mu * (delta + g[a][s] * g[b][r]);
                        let dil = lambda * g[a][r] * g[b][s];
                        k[a][r][b][s] = self.area * (shear + dil);
                    }
                }
            }
        }
        k
    }

    /// `∫ β φ_b ∇·(φ_a e_r)`, indexed `[a][r][b]` (displacement test, temperature trial).
    pub fn coupling(&self, beta: T) -> [[[T; 3]; 2]; 3] {
        let mut c = [[[T::zero(); 3]; 2]; 3];
        let third = self.area / lit::<T>(3.0);
        for a in 0..3 {
            for r in 0..2 {
                for b in 0..3 {
                    c[a][r][b] = beta * self.grads[a][r] * third;
                }
            }
        }
        c
    }

    /// Edge midpoints, ordered opposite to vertex 2, 0, 1 respectively:
    /// midpoint `m` lies on the edge `(m, m+1)`.
    pub fn edge_midpoints(&self) -> [Point<T>; 3] {
        let half = lit::<T>(0.5);
        let v = self.vertices;
        [0, 1, 2].map(|m| {
            let a = v[m];
            let b = v[(m + 1) % 3];
            [(a[0] + b[0]) * half, (a[1] + b[1]) * half]
        })
    }

    /// `∫ f φ_a` by the edge-midpoint rule, exact when `f` is linear.
    pub fn load<const N: usize>(&self, mut f: impl FnMut(Point<T>) -> [T; N]) -> [[T; N]; 3] {
        let mids = self.edge_midpoints();
        let vals = mids.map(&mut f);
        let w = self.area / lit::<T>(3.0);
        let half = lit::<T>(0.5);
        let mut out = [[T::zero(); N]; 3];
        for (m, val) in vals.iter().enumerate() {
            // midpoint m sits on vertices m and m+1, where the hat equals 1/2
            for a in [m, (m + 1) % 3] {
                for c in 0..N {
                    out[a][c] += w * half * val[c];
                }
            }
        }
        out
    }

    /// Degree-5 seven-point rule: returns `(point, weight)` pairs with the
    /// weights summing to the triangle area.
    pub fn quadrature7(&self) -> [(Point<T>, T, [T; 3]); 7] {
        let a1 = 0.059_715_871_789_770;
        let b1 = 0.470_142_064_105_115;
        let a2 = 0.797_426_985_353_087;
        let b2 = 0.101_286_507_323_456;
        let w0 = 0.225;
        let w1 = 0.132_394_152_788_506;
        let w2 = 0.125_939_180_544_827;
        let bary: [([f64; 3], f64); 7] = [
            ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], w0),
            ([a1, b1, b1], w1),
            ([b1, a1, b1], w1),
            ([b1, b1, a1], w1),
            ([a2, b2, b2], w2),
            ([b2, a2, b2], w2),
            ([b2, b2, a2], w2),
        ];
        let v = self.vertices;
        bary.map(|(l, w)| {
            let l = l.map(lit::<T>);
            let p = [
                l[0] * v[0][0] + l[1] * v[1][0] + l[2] * v[2][0],
                l[0] * v[0][1] + l[1] * v[1][1] + l[2] * v[2][1],
            ];
            (p, lit::<T>(w) * self.area, l)
        })
    }
}
