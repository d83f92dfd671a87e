//! Thin helpers over faer's compressed-column matrices.

use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub type Sparse<T> = SparseColMat<usize, T>;

/// Builds a matrix from triplets; duplicate entries are summed.
pub fn from_triplets<T: Real>(
    nrows: usize,
    ncols: usize,
    triplets: &[Triplet<usize, usize, T>],
) -> Result<Sparse<T>> {
    Sparse::try_new_from_triplets(nrows, ncols, triplets)
        .map_err(|e| Error::LinearSolver(format!("sparse construction failed: {e:?}")))
}

pub fn zeros<T: Real>(nrows: usize, ncols: usize) -> Sparse<T> {
    from_triplets(nrows, ncols, &[]).expect("empty matrix")
}

/// Visits every stored entry as `(row, col, value)`.
pub fn for_each_entry<T: Real>(a: &Sparse<T>, mut f: impl FnMut(usize, usize, T)) {
    for j in 0..a.ncols() {
        let rows = a.row_idx_of_col_raw(j);
        let vals = a.val_of_col(j);
        for (&i, &v) in rows.iter().zip(vals) {
            f(i, j, v);
        }
    }
}

/// `y = A x`
pub fn mul_vec<T: Real>(a: &Sparse<T>, x: &[T]) -> Vec<T> {
    assert_eq!(a.ncols(), x.len());
    let mut y = vec![T::zero(); a.nrows()];
    for_each_entry(a, |i, j, v| y[i] += v * x[j]);
    y
}

/// `y = Aᵀ x`
pub fn mul_vec_t<T: Real>(a: &Sparse<T>, x: &[T]) -> Vec<T> {
    assert_eq!(a.nrows(), x.len());
    let mut y = vec![T::zero(); a.ncols()];
    for_each_entry(a, |i, j, v| y[j] += v * x[i]);
    y
}

/// `xᵀ A y`
pub fn bilinear<T: Real>(a: &Sparse<T>, x: &[T], y: &[T]) -> T {
    assert_eq!(a.nrows(), x.len());
    assert_eq!(a.ncols(), y.len());
    let mut s = T::zero();
    for_each_entry(a, |i, j, v| s += x[i] * v * y[j]);
    s
}

pub fn quad<T: Real>(a: &Sparse<T>, x: &[T]) -> T {
    bilinear(a, x, x)
}

/// Appends `scale * A` (or `scale * Aᵀ`) shifted by the given offsets.
pub fn push_block<T: Real>(
    out: &mut Vec<Triplet<usize, usize, T>>,
    a: &Sparse<T>,
    row_offset: usize,
    col_offset: usize,
    scale: T,
    transpose: bool,
) {
    for_each_entry(a, |i, j, v| {
        let (r, c) = if transpose { (j, i) } else { (i, j) };
        out.push(Triplet::new(row_offset + r, col_offset + c, scale * v));
    });
}

/// `alpha * A + beta * B`
pub fn lincomb<T: Real>(alpha: T, a: &Sparse<T>, beta: T, b: &Sparse<T>) -> Result<Sparse<T>> {
    assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    let mut t = Vec::with_capacity(a.compute_nnz() + b.compute_nnz());
    push_block(&mut t, a, 0, 0, alpha, false);
    push_block(&mut t, b, 0, 0, beta, false);
    from_triplets(a.nrows(), a.ncols(), &t)
}

/// Keeps rows/cols whose map entry is `Some(new_index)`.
pub fn restrict<T: Real>(
    a: &Sparse<T>,
    row_map: &[Option<usize>],
    col_map: &[Option<usize>],
    nrows: usize,
    ncols: usize,
) -> Result<Sparse<T>> {
    let mut t = Vec::with_capacity(a.compute_nnz());
    for_each_entry(a, |i, j, v| {
        if let (Some(r), Some(c)) = (row_map[i], col_map[j]) {
            t.push(Triplet::new(r, c, v));
        }
    });
    from_triplets(nrows, ncols, &t)
}

pub fn to_dense<T: Real>(a: &Sparse<T>) -> Mat<T> {
    let mut m = Mat::<T>::zeros(a.nrows(), a.ncols());
    for_each_entry(a, |i, j, v| m[(i, j)] += v);
    m
}

pub fn transpose<T: Real>(a: &Sparse<T>) -> Result<Sparse<T>> {
    let mut t = Vec::with_capacity(a.compute_nnz());
    push_block(&mut t, a, 0, 0, T::one(), true);
    from_triplets(a.ncols(), a.nrows(), &t)
}

/// `A B` for two sparse operands.
pub fn matmul<T: Real>(a: &Sparse<T>, b: &Sparse<T>) -> Result<Sparse<T>> {
    faer::sparse::linalg::matmul::sparse_sparse_matmul(
        a.as_ref(),
        b.as_ref(),
        T::one(),
        faer::Par::Seq,
    )
    .map_err(|e| Error::LinearSolver(format!("sparse product failed: {e:?}")))
}

/// Largest absolute entry, used to scale kernel tolerances.
pub fn max_abs<T: Real>(a: &Sparse<T>) -> T {
    let mut m = T::zero();
    for_each_entry(a, |_, _, v| m = m.max(v.abs()));
    m
}

/// Symmetry defect `max |A - Aᵀ| / max |A|`.
pub fn asymmetry<T: Real>(a: &Sparse<T>) -> T {
    let at = transpose(a).expect("transpose of a valid matrix");
    let worst = max_abs(&lincomb(T::one(), a, -T::one(), &at).expect("same shape"));
    let scale = max_abs(a);
    if scale > T::zero() {
        worst / scale
    } else {
        worst
    }
}
