use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for (c, v) in self.row(r).iter().enumerate() {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v}")?;
            }
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices. An empty input yields a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::dim(
                "Matrix::add_assign",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row_vector(&mut self, v: &Matrix) -> Result<()> {
        if v.rows != 1 || v.cols != self.cols {
            return Err(Error::dim(
                "Matrix::add_row_vector",
                format!("1x{}", self.cols),
                format!("{}x{}", v.rows, v.cols),
            ));
        }
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(&v.data) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Column sums as a `1 x cols` matrix.
    pub fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (a, b) in out.data.iter_mut().zip(self.row(r)) {
                *a += b;
            }
        }
        out
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices vertically. All parts must share a column count;
    /// `cols` is used when `parts` is empty.
    pub fn vstack(parts: &[&Matrix], cols: usize) -> Result<Matrix> {
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::dim("Matrix::vstack", cols, p.cols));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dim(
            "matmul",
            format!("lhs cols == rhs rows ({})", a.cols),
            format!("rhs rows {}", b.rows),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::dim("matmul_tn", a.rows, b.rows));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let b_row = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::dim("matmul_nt", a.cols, b.cols));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

/// Row-normalised copy of a matrix plus the rows that were left untouched
/// because their norm fell below `eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub matrix: Matrix,
    pub norms: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl Normalized {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

pub fn l2_normalize_rows(m: &Matrix, eps: f64) -> Normalized {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows);
    let mut degenerate = Vec::with_capacity(m.rows);
    for r in 0..m.rows {
        let n = norm(m.row(r));
        norms.push(n);
        if n < eps {
            degenerate.push(true);
        } else {
            degenerate.push(false);
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
    }
    Normalized {
        matrix: out,
        norms,
        degenerate,
    }
}

/// Pairwise cosine similarity between the rows of `a` (n x d) and `b`
/// (t x d), clamped to `[-1, 1]`.
pub fn cosine_rows(a: &Matrix, b: &Matrix, eps: f64) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::dim("cosine_rows", a.cols, b.cols));
    }
    let a_norms: Vec<f64> = a.row_iter().map(norm).collect();
    let b_norms: Vec<f64> = b.row_iter().map(norm).collect();
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            let denom = (a_norms[i] * b_norms[j]).max(eps);
            out.data[i * b.rows + j] = (dot(a.row(i), b.row(j)) / denom).clamp(-1.0, 1.0);
        }
    }
    Ok(out)
}

/// Gradient of `Σ grad ⊙ cosine_rows(a, b, eps)` with respect to `a`.
/// Entries that were clamped to ±1 contribute nothing.
pub fn cosine_rows_backward(a: &Matrix, b: &Matrix, eps: f64, grad: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols || grad.shape() != (a.rows, b.rows) {
        return Err(Error::dim(
            "cosine_rows_backward",
            format!("grad {}x{}", a.rows, b.rows),
            format!("grad {}x{}", grad.rows, grad.cols),
        ));
    }
    let b_norms: Vec<f64> = b.row_iter().map(norm).collect();
    let mut out = Matrix::zeros(a.rows, a.cols);
    for i in 0..a.rows {
        let ai = a.row(i);
        let na = norm(ai);
        let mut acc = vec![0.0; a.cols];
        for (j, &nb) in b_norms.iter().enumerate() {
            let g = grad.get(i, j);
            if g == 0.0 {
                continue;
            }
            let bj = b.row(j);
            let denom = na * nb;
            if denom > eps {
                let raw = dot(ai, bj) / denom;
                if raw.abs() > 1.0 {
                    continue;
                }
                let k = raw / (na * na);
                for ((o, &x), &y) in acc.iter_mut().zip(ai).zip(bj) {
                    *o += g * (y / denom - k * x);
                }
            } else {
                for (o, &y) in acc.iter_mut().zip(bj) {
                    *o += g * y / eps;
                }
            }
        }
        out.row_mut(i).copy_from_slice(&acc);
    }
    Ok(out)
}

/// Max-subtracted softmax over each row.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_product() {
        let m = Matrix::from_rows(&[[1.5, -2.0], [0.25, 7.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert_eq!(
            matmul(&a, &b).unwrap(),
            Matrix::from_rows(&[[2.0], [4.0]]).unwrap()
        );
    }

    #[test]
    fn product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random(&mut rng, 3, 4);
            let b = random(&mut rng, 4, 2);
            let fast = matmul(&a, &b).unwrap();
            let slow = naive_matmul(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                assert!((x - y).abs() <= 1e-14, "{x} vs {y}");
            }
            assert_eq!(matmul_tn(&a.transpose(), &b).unwrap().data(), fast.data());
            assert_eq!(matmul_nt(&a, &b.transpose()).unwrap(), slow);
        }
    }

    #[test]
    fn product_shape_mismatch() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn normalize_rows() {
        let m = Matrix::from_rows(&[[3.0, 4.0], [1.0, 0.0], [0.0, 0.0]]).unwrap();
        let n = l2_normalize_rows(&m, 1e-12);
        assert!((n.matrix.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.matrix.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(n.matrix.row(1), &[1.0, 0.0]);
        assert_eq!(n.matrix.row(2), &[0.0, 0.0]);
        assert_eq!(n.degenerate, vec![false, false, true]);
    }

    #[test]
    fn cosine_cases() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let b =
            Matrix::from_rows(&[[1.0, 2.0, 3.0], [-1.0, -2.0, -3.0], [2.0, -1.0, 0.0]]).unwrap();
        let c = cosine_rows(&a, &b, 1e-12).unwrap();
        assert!((c.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((c.get(0, 1) + 1.0).abs() < 1e-15);
        assert_eq!(c.get(0, 2), 0.0);
        assert!(cosine_rows(&a, &Matrix::zeros(1, 2), 1e-12).is_err());
    }

    #[test]
    fn cosine_against_zero_row_is_zero() {
        let a = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let c = cosine_rows(&a, &Matrix::zeros(1, 2), 1e-12).unwrap();
        assert_eq!(c.get(0, 0), 0.0);
    }

    #[test]
    fn cosine_backward_matches_finite_differences() {
        use crate::numerics::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random(&mut rng, 3, 4);
            let b = random(&mut rng, 5, 4);
            let w = random(&mut rng, 3, 5);
            let analytic = cosine_rows_backward(&a, &b, 1e-12, &w).unwrap();
            let report = grad_check(
                |p| {
                    let a = Matrix::from_vec(3, 4, p.to_vec()).unwrap();
                    let c = cosine_rows(&a, &b, 1e-12).unwrap();
                    c.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
                },
                a.data(),
                analytic.data(),
                1e-6,
                1e-6,
            );
            assert!(report.within_tolerance, "{report:?}");
        }
    }

    #[test]
    fn softmax_cases() {
        let m = Matrix::from_rows(&[[0.3, 0.3, 0.3, 0.3], [0.0, 0.5, 0.0, 0.0]]).unwrap();
        let s = softmax_rows(&m);
        for v in s.row(0) {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let two = softmax_rows(&Matrix::from_rows(&[[0.0, 0.5]]).unwrap());
        // e^0.5 / (1 + e^0.5) = 0.622459331201854...
        assert!((two.get(0, 1) - 0.622_459_331_201_854_6).abs() < 1e-15);
        assert!((two.get(0, 0) - 0.377_540_668_798_145_4).abs() < 1e-15);
        let shifted = softmax_rows(&Matrix::from_rows(&[[100.0, 100.5]]).unwrap());
        assert!((shifted.get(0, 1) - two.get(0, 1)).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_and_softplus_are_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
