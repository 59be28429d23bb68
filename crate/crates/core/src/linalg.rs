//! Complex matrices stored as `(re, im)` pairs of real matrices.
//!
//! [`CMatrix`] and [`CVector`] are the plain numeric flavor. [`CVar`] is the
//! differentiable flavor: a pair of tape nodes on a [`DiffGraph`]. Stacks of
//! equally sized square matrices are stored row-wise, block `k` occupying rows
//! `k·d .. (k+1)·d`.

use ndarray::{s, Array1, Array2};
use num_complex::Complex64;

use crate::autodiff::{DiffGraph, NodeId};
use crate::error::{Error, Result};

pub const DEFAULT_TAYLOR_ORDER: usize = 12;
/// Scaling target for the squaring phase of the matrix exponential.
pub const SCALED_NORM_TARGET: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    pub re: Array2<f64>,
    pub im: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CVector {
    pub re: Array1<f64>,
    pub im: Array1<f64>,
}

fn dims(a: &Array2<f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

impl CMatrix {
    pub fn new(re: Array2<f64>, im: Array2<f64>) -> Result<Self> {
        if re.dim() != im.dim() {
            return Err(Error::ShapeMismatch {
                op: "cmatrix",
                lhs: dims(&re),
                rhs: dims(&im),
            });
        }
        Ok(Self { re, im })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            re: Array2::zeros((rows, cols)),
            im: Array2::zeros((rows, cols)),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            re: Array2::eye(n),
            im: Array2::zeros((n, n)),
        }
    }

    pub fn from_real(re: Array2<f64>) -> Self {
        let im = Array2::zeros(re.dim());
        Self { re, im }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> Complex64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// Builds a matrix from rows of complex entries.
    pub fn from_rows(rows: &[Vec<Complex64>]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        Self::from_fn(n, m, |i, j| rows[i][j])
    }

    pub fn diag(entries: &[Complex64]) -> Self {
        let n = entries.len();
        Self::from_fn(n, n, |i, j| if i == j { entries[i] } else { Complex64::new(0.0, 0.0) })
    }

    pub fn rows(&self) -> usize {
        self.re.nrows()
    }

    pub fn cols(&self) -> usize {
        self.re.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        dims(&self.re)
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        Complex64::new(self.re[[i, j]], self.im[[i, j]])
    }

    pub fn set(&mut self, i: usize, j: usize, z: Complex64) {
        self.re[[i, j]] = z.re;
        self.im[[i, j]] = z.im;
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        Ok(Self {
            re: &self.re + &other.re,
            im: &self.im + &other.im,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        Ok(Self {
            re: &self.re - &other.re,
            im: &self.im - &other.im,
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            re: &self.re * c,
            im: &self.im * c,
        }
    }

    pub fn scale_complex(&self, z: Complex64) -> Self {
        Self {
            re: &self.re * z.re - &self.im * z.im,
            im: &self.re * z.im + &self.im * z.re,
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols() != other.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(Self {
            re: self.re.dot(&other.re) - self.im.dot(&other.im),
            im: self.re.dot(&other.im) + self.im.dot(&other.re),
        })
    }

    pub fn matvec(&self, v: &CVector) -> Result<CVector> {
        if self.cols() != v.dim() {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: self.shape(),
                rhs: (v.dim(), 1),
            });
        }
        Ok(CVector {
            re: self.re.dot(&v.re) - self.im.dot(&v.im),
            im: self.re.dot(&v.im) + self.im.dot(&v.re),
        })
    }

    pub fn transpose(&self) -> Self {
        Self {
            re: self.re.t().to_owned(),
            im: self.im.t().to_owned(),
        }
    }

    pub fn conj(&self) -> Self {
        Self {
            re: self.re.clone(),
            im: -&self.im,
        }
    }

    pub fn adjoint(&self) -> Self {
        Self {
            re: self.re.t().to_owned(),
            im: -&self.im.t(),
        }
    }

    pub fn trace(&self) -> Result<Complex64> {
        if self.rows() != self.cols() {
            return Err(Error::ShapeMismatch {
                op: "trace",
                lhs: self.shape(),
                rhs: (self.cols(), self.rows()),
            });
        }
        Ok(Complex64::new(self.re.diag().sum(), self.im.diag().sum()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        (self.re.mapv(|x| x * x).sum() + self.im.mapv(|x| x * x).sum()).sqrt()
    }

    /// `‖A − A†‖_F`.
    pub fn hermitian_deviation(&self) -> f64 {
        match self.sub(&self.adjoint()) {
            Ok(d) => d.frobenius_norm(),
            Err(_) => f64::INFINITY,
        }
    }

    /// `‖A†A − I‖_F`.
    pub fn unitarity_deviation(&self) -> f64 {
        let n = self.cols();
        self.adjoint()
            .matmul(self)
            .and_then(|p| p.sub(&CMatrix::identity(n)))
            .map_or(f64::INFINITY, |d| d.frobenius_norm())
    }

    pub fn kron(&self, other: &Self) -> Self {
        let (ar, ac) = self.shape();
        let (br, bc) = other.shape();
        let mut out = Self::zeros(ar * br, ac * bc);
        for i in 0..ar {
            for j in 0..ac {
                let a = self.get(i, j);
                let blk = other.scale_complex(a);
                out.re.slice_mut(s![i * br..(i + 1) * br, j * bc..(j + 1) * bc]).assign(&blk.re);
                out.im.slice_mut(s![i * br..(i + 1) * br, j * bc..(j + 1) * bc]).assign(&blk.im);
            }
        }
        out
    }

    /// Column-stacking vectorization: entry `(i, j)` lands at `i + j·rows`.
    pub fn vec(&self) -> CVector {
        let (r, c) = self.shape();
        let mut v = CVector::zeros(r * c);
        for j in 0..c {
            for i in 0..r {
                v.re[i + j * r] = self.re[[i, j]];
                v.im[i + j * r] = self.im[[i, j]];
            }
        }
        v
    }

    /// Inverse of [`CMatrix::vec`] for a `d×d` matrix.
    pub fn unvec(v: &CVector, d: usize) -> Result<Self> {
        if v.dim() != d * d {
            return Err(Error::ShapeMismatch {
                op: "unvec",
                lhs: (v.dim(), 1),
                rhs: (d * d, 1),
            });
        }
        let mut m = Self::zeros(d, d);
        for j in 0..d {
            for i in 0..d {
                m.re[[i, j]] = v.re[i + j * d];
                m.im[[i, j]] = v.im[i + j * d];
            }
        }
        Ok(m)
    }

    /// Matrix exponential by a truncated Taylor series with scaling and
    /// squaring. `squarings = None` picks the smallest `s` with
    /// `‖A‖_F / 2^s ≤ 0.5`.
    pub fn matexp(&self, taylor_order: usize, squarings: Option<u32>) -> Result<Self> {
        if self.rows() != self.cols() {
            return Err(Error::ShapeMismatch {
                op: "matexp",
                lhs: self.shape(),
                rhs: (self.cols(), self.rows()),
            });
        }
        let order = taylor_order.max(1);
        let s = squarings.unwrap_or_else(|| squarings_for(self.frobenius_norm()));
        let n = self.rows();
        let x = self.scale(0.5f64.powi(s as i32));
        let id = CMatrix::identity(n);
        let mut t = id.add(&x.scale(1.0 / order as f64))?;
        for k in (1..order).rev() {
            t = id.add(&x.matmul(&t)?.scale(1.0 / k as f64))?;
        }
        for _ in 0..s {
            t = t.matmul(&t)?;
        }
        if !t.re.iter().chain(t.im.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFiniteValue { op: "matexp", node: 0 });
        }
        Ok(t)
    }

    pub fn expm(&self) -> Result<Self> {
        self.matexp(DEFAULT_TAYLOR_ORDER, None)
    }

    /// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
    pub fn hermitian_eig(&self) -> Result<(Array1<f64>, CMatrix)> {
        let n = self.rows();
        if n != self.cols() {
            return Err(Error::NotHermitian(f64::INFINITY));
        }
        let dev = self.hermitian_deviation();
        if dev > 1e-10 {
            return Err(Error::NotHermitian(dev));
        }
        let m = nalgebra::DMatrix::<Complex64>::from_fn(n, n, |i, j| {
            // Symmetrize so round-off asymmetry does not leak into the solver.
            (self.get(i, j) + self.get(j, i).conj()) * 0.5
        });
        let eig = m.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = Array1::from_iter(order.iter().map(|&k| eig.eigenvalues[k]));
        let vectors = CMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
        Ok((values, vectors))
    }

    /// `V · diag(f(λ)) · V†` for Hermitian `self`.
    pub fn hermitian_map(&self, f: impl Fn(f64) -> Complex64) -> Result<CMatrix> {
        let (vals, vecs) = self.hermitian_eig()?;
        let d: Vec<Complex64> = vals.iter().map(|&l| f(l)).collect();
        vecs.matmul(&CMatrix::diag(&d))?.matmul(&vecs.adjoint())
    }
}

impl CVector {
    pub fn new(re: Array1<f64>, im: Array1<f64>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::ShapeMismatch {
                op: "cvector",
                lhs: (re.len(), 1),
                rhs: (im.len(), 1),
            });
        }
        Ok(Self { re, im })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            re: Array1::zeros(n),
            im: Array1::zeros(n),
        }
    }

    pub fn basis(n: usize, k: usize) -> Self {
        let mut v = Self::zeros(n);
        v.re[k] = 1.0;
        v
    }

    pub fn from_complex(entries: &[Complex64]) -> Self {
        Self {
            re: entries.iter().map(|z| z.re).collect(),
            im: entries.iter().map(|z| z.im).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.re.len()
    }

    pub fn get(&self, i: usize) -> Complex64 {
        Complex64::new(self.re[i], self.im[i])
    }

    pub fn euclidean_norm(&self) -> f64 {
        (self.re.dot(&self.re) + self.im.dot(&self.im)).sqrt()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: (self.dim(), 1),
                rhs: (other.dim(), 1),
            });
        }
        Ok(Self {
            re: &self.re + &other.re,
            im: &self.im + &other.im,
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            re: &self.re * c,
            im: &self.im * c,
        }
    }

    /// `⟨self|other⟩`, conjugate-linear in `self`.
    pub fn inner(&self, other: &Self) -> Complex64 {
        Complex64::new(
            self.re.dot(&other.re) + self.im.dot(&other.im),
            self.re.dot(&other.im) - self.im.dot(&other.re),
        )
    }

    /// `|self⟩⟨other|`.
    pub fn outer(&self, other: &Self) -> CMatrix {
        CMatrix::from_fn(self.dim(), other.dim(), |i, j| self.get(i) * other.get(j).conj())
    }

    pub fn normalized(&self) -> Self {
        self.scale(1.0 / self.euclidean_norm())
    }
}

/// Smallest `s` such that `norm / 2^s ≤ 0.5`.
pub fn squarings_for(norm: f64) -> u32 {
    let mut s = 0;
    let mut scaled = norm;
    while scaled > SCALED_NORM_TARGET && s < 64 {
        scaled *= 0.5;
        s += 1;
    }
    s
}

/// Checks the density-matrix preconditions used by state-level metrics.
pub fn check_density(rho: &CMatrix, tol: f64) -> Result<Array1<f64>> {
    let dev = rho.hermitian_deviation();
    if dev > tol {
        return Err(Error::InvalidDensityMatrix(format!("not Hermitian ({dev:.3e})")));
    }
    let tr = rho.trace()?;
    if (tr.re - 1.0).abs() > tol || tr.im.abs() > tol {
        return Err(Error::InvalidDensityMatrix(format!("trace {tr}")));
    }
    let (vals, _) = rho.hermitian_eig().map_err(|e| Error::InvalidDensityMatrix(e.to_string()))?;
    if vals[0] < -tol {
        return Err(Error::InvalidDensityMatrix(format!("negative eigenvalue {:.3e}", vals[0])));
    }
    Ok(vals)
}

/// Eigenvalues at or below this are round-off; their square roots would not be.
const EIG_FLOOR: f64 = 1e-14;

fn psd_sqrt(l: f64) -> Complex64 {
    let l = if l <= EIG_FLOOR { 0.0 } else { l };
    Complex64::new(l.sqrt(), 0.0)
}

/// Uhlmann fidelity `(tr √(√ρ σ √ρ))²`.
pub fn uhlmann_fidelity(rho: &CMatrix, sigma: &CMatrix) -> Result<f64> {
    check_density(rho, 1e-8)?;
    check_density(sigma, 1e-8)?;
    let sqrt_rho = rho.hermitian_map(psd_sqrt)?;
    let inner = sqrt_rho.matmul(sigma)?.matmul(&sqrt_rho)?;
    // Restore exact Hermiticity lost to round-off before the second solve.
    let inner = inner.add(&inner.adjoint())?.scale(0.5);
    let (mu, _) = inner.hermitian_eig()?;
    let root_sum: f64 = mu.iter().map(|&m| psd_sqrt(m).re).sum();
    Ok((root_sum * root_sum).clamp(0.0, 1.0))
}

/// A complex matrix living on a [`DiffGraph`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CVar {
    pub re: NodeId,
    pub im: NodeId,
}

impl CVar {
    pub fn constant(g: &mut DiffGraph, m: &CMatrix) -> Result<Self> {
        Ok(Self {
            re: g.constant(m.re.clone())?,
            im: g.constant(m.im.clone())?,
        })
    }

    pub fn input(g: &mut DiffGraph, m: &CMatrix) -> Result<Self> {
        Ok(Self {
            re: g.input(m.re.clone())?,
            im: g.input(m.im.clone())?,
        })
    }

    pub fn value(&self, g: &DiffGraph) -> CMatrix {
        CMatrix {
            re: g.value(self.re).clone(),
            im: g.value(self.im).clone(),
        }
    }

    pub fn shape(&self, g: &DiffGraph) -> (usize, usize) {
        g.shape(self.re)
    }

    pub fn add(self, g: &mut DiffGraph, o: Self) -> Result<Self> {
        Ok(Self {
            re: g.add(self.re, o.re)?,
            im: g.add(self.im, o.im)?,
        })
    }

    pub fn sub(self, g: &mut DiffGraph, o: Self) -> Result<Self> {
        Ok(Self {
            re: g.sub(self.re, o.re)?,
            im: g.sub(self.im, o.im)?,
        })
    }

    pub fn scale(self, g: &mut DiffGraph, c: f64) -> Result<Self> {
        Ok(Self {
            re: g.scale(self.re, c)?,
            im: g.scale(self.im, c)?,
        })
    }

    /// Multiplication by `i`.
    pub fn mul_i(self, g: &mut DiffGraph) -> Result<Self> {
        Ok(Self {
            re: g.neg(self.im)?,
            im: self.re,
        })
    }

    pub fn matmul(self, g: &mut DiffGraph, o: Self) -> Result<Self> {
        complex_product(g, self, o, |g, a, b| g.matmul(a, b))
    }

    pub fn block_matmul(self, g: &mut DiffGraph, o: Self, blocks: usize) -> Result<Self> {
        complex_product(g, self, o, |g, a, b| g.block_matmul(a, b, blocks))
    }

    pub fn slice_rows(self, g: &mut DiffGraph, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            re: g.slice_rows(self.re, start, len)?,
            im: g.slice_rows(self.im, start, len)?,
        })
    }

    /// `Σ |a_ij|²` as a `1×1` node.
    pub fn squared_norm(self, g: &mut DiffGraph) -> Result<NodeId> {
        let r2 = g.square(self.re)?;
        let i2 = g.square(self.im)?;
        let s = g.add(r2, i2)?;
        g.sum(s)
    }
}

fn complex_product(
    g: &mut DiffGraph,
    a: CVar,
    b: CVar,
    mut op: impl FnMut(&mut DiffGraph, NodeId, NodeId) -> Result<NodeId>,
) -> Result<CVar> {
    let rr = op(g, a.re, b.re)?;
    let ii = op(g, a.im, b.im)?;
    let ri = op(g, a.re, b.im)?;
    let ir = op(g, a.im, b.re)?;
    Ok(CVar {
        re: g.sub(rr, ii)?,
        im: g.add(ri, ir)?,
    })
}

/// `blocks` copies of `m` stacked row-wise.
pub fn tile_rows(m: &Array2<f64>, blocks: usize) -> Array2<f64> {
    let (r, c) = m.dim();
    let mut out = Array2::zeros((blocks * r, c));
    for k in 0..blocks {
        out.slice_mut(s![k * r..(k + 1) * r, ..]).assign(m);
    }
    out
}

/// Differentiable matrix exponential of every block of a stacked `(b·d)×d`
/// matrix, by the same Taylor/scaling-squaring scheme as [`CMatrix::matexp`].
/// With `squarings = None` the count is chosen from the largest block norm.
pub fn matexp_blocks(
    g: &mut DiffGraph,
    a: CVar,
    blocks: usize,
    taylor_order: usize,
    squarings: Option<u32>,
) -> Result<CVar> {
    let (rows, d) = a.shape(g);
    if blocks == 0 || rows != blocks * d {
        return Err(Error::ShapeMismatch {
            op: "matexp",
            lhs: (rows, d),
            rhs: (blocks * d, d),
        });
    }
    let order = taylor_order.max(1);
    let s = squarings.unwrap_or_else(|| {
        let (re, im) = (g.value(a.re), g.value(a.im));
        let max_norm = (0..blocks)
            .map(|k| {
                let br = re.slice(s![k * d..(k + 1) * d, ..]);
                let bi = im.slice(s![k * d..(k + 1) * d, ..]);
                (br.mapv(|x| x * x).sum() + bi.mapv(|x| x * x).sum()).sqrt()
            })
            .fold(0.0, f64::max);
        squarings_for(max_norm)
    });
    let x = if s > 0 { a.scale(g, 0.5f64.powi(s as i32))? } else { a };
    let eye = g.constant(tile_rows(&Array2::eye(d), blocks))?;

    let top = x.scale(g, 1.0 / order as f64)?;
    let mut t = CVar {
        re: g.add(top.re, eye)?,
        im: top.im,
    };
    for k in (1..order).rev() {
        let p = x.block_matmul(g, t, blocks)?.scale(g, 1.0 / k as f64)?;
        t = CVar {
            re: g.add(p.re, eye)?,
            im: p.im,
        };
    }
    for _ in 0..s {
        t = t.block_matmul(g, t, blocks)?;
    }
    Ok(t)
}

pub fn matexp(g: &mut DiffGraph, a: CVar, taylor_order: usize, squarings: Option<u32>) -> Result<CVar> {
    matexp_blocks(g, a, 1, taylor_order, squarings)
}
