//! Small dense kernels on row-major slices. State dimensions here are tiny
//! (a handful of components), so these stay allocation free and simple.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = m * v` for a row-major `rows × v.len()` matrix.
#[inline]
pub fn matvec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&m[i * n..(i + 1) * n], v);
    }
}

/// `out = mᵀ * v` for a row-major `v.len() × out.len()` matrix.
#[inline]
pub fn matvec_t(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = out.len();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, vi) in v.iter().enumerate() {
        let row = &m[i * cols..(i + 1) * cols];
        for (o, mij) in out.iter_mut().zip(row) {
            *o += mij * vi;
        }
    }
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Max-norm of `a - aᵀ` for a row-major square matrix.
pub fn asymmetry(a: &[f64], n: usize) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((a[i * n + j] - a[j * n + i]).abs());
        }
    }
    worst
}

pub fn symmetrize(a: &mut [f64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = s;
            a[j * n + i] = s;
        }
    }
}

pub fn to_matrix(a: &[f64], n: usize) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(n, n, a)
}
