//! Composite electronic ⊗ vibrational Hilbert space.
//!
//! Basis ordering is electronic-major: `index = elec * N + n`, with the donor
//! `|D⟩` at `elec = 0` (σ_z = +1) and the acceptor `|A⟩` at `elec = 1`.

use std::ops::{Add, Mul, Sub};

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{ci, cone, cplx, czero, Real};

/// Largest vibrational truncation accepted by the builders.
pub const MAX_FOCK_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams<T> {
    pub epsilon: T,
    pub delta: T,
    pub omega_v: T,
    pub gamma: T,
    pub fock_dim: usize,
}

impl<T: Real> SystemParams<T> {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.epsilon >= T::zero()) || !self.epsilon.is_finite() {
            bad.push(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if !(self.omega_v > T::zero()) || !self.omega_v.is_finite() {
            bad.push(format!("omega_v must be > 0, got {}", self.omega_v));
        }
        if !(self.delta >= T::zero()) || !self.delta.is_finite() {
            bad.push(format!("delta must be >= 0, got {}", self.delta));
        }
        if !(self.gamma >= T::zero()) || !self.gamma.is_finite() {
            bad.push(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if self.fock_dim < 2 {
            bad.push(format!("fock_dim must be >= 2, got {}", self.fock_dim));
        }
        if self.fock_dim > MAX_FOCK_DIM {
            return Err(Error::Config(format!(
                "fock_dim {} exceeds the maximum of {MAX_FOCK_DIM}",
                self.fock_dim
            )));
        }
        match bad.len() {
            0 => Ok(()),
            1 => Err(Error::invalid("system", bad.remove(0))),
            _ => Err(Error::Validation(bad)),
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.fock_dim
    }
}

/// Dense row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> OperatorMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![czero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = cone();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex<T>) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Side length of a square matrix.
    pub fn dim(&self) -> usize {
        self.rows
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn scale(&self, s: Complex<T>) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    pub fn scale_real(&self, s: T) -> Self {
        self.scale(cplx(s, T::zero()))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == czero() {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn commutator(&self, other: &Self) -> Result<Self> {
        Ok(&self.matmul(other)? - &other.matmul(self)?)
    }

    pub fn kron(&self, other: &Self) -> Self {
        let rows = self.rows * other.rows;
        let cols = self.cols * other.cols;
        Self::from_fn(rows, cols, |r, c| {
            self[(r / other.rows, c / other.cols)] * other[(r % other.rows, c % other.cols)]
        })
    }

    pub fn trace(&self) -> Complex<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).fold(czero(), |a, b| a + b)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, z| m.max(z.norm()))
    }

    /// Largest entrywise deviation from Hermiticity, `max |A_ij − conj(A_ji)|`.
    pub fn hermiticity_defect(&self) -> T {
        if !self.is_square() {
            return T::infinity();
        }
        let mut worst = T::zero();
        for r in 0..self.rows {
            for c in r..self.cols {
                worst = worst.max((self[(r, c)] - self[(c, r)].conj()).norm());
            }
        }
        worst
    }

    pub fn apply(&self, v: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!(
                "vector of length {} does not match {} columns",
                v.len(),
                self.cols
            )));
        }
        Ok((0..self.rows)
            .map(|r| {
                let row = &self.data[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(v).fold(czero(), |acc, (&a, &x)| acc + a * x)
            })
            .collect())
    }

    /// `⟨v|A|v⟩` for a normalized `v`.
    pub fn expectation(&self, v: &[Complex<T>]) -> Result<Complex<T>> {
        let av = self.apply(v)?;
        Ok(v.iter().zip(&av).fold(czero(), |acc, (&x, &y)| acc + x.conj() * y))
    }

    /// Row-sum (Gershgorin) bound on the spectral radius.
    pub fn gershgorin_bound(&self) -> T {
        (0..self.rows)
            .map(|r| {
                self.data[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .fold(T::zero(), |s, z| s + z.norm())
            })
            .fold(T::zero(), T::max)
    }

    pub fn outer(v: &[Complex<T>]) -> Self {
        Self::from_fn(v.len(), v.len(), |r, c| v[r] * v[c].conj())
    }
}

impl<T> std::ops::Index<(usize, usize)> for OperatorMatrix<T> {
    type Output = Complex<T>;
    fn index(&self, (r, c): (usize, usize)) -> &Complex<T> {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for OperatorMatrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex<T> {
        &mut self.data[r * self.cols + c]
    }
}

impl<T: Real> Add for &OperatorMatrix<T> {
    type Output = OperatorMatrix<T>;
    fn add(self, rhs: Self) -> OperatorMatrix<T> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "shape mismatch in add");
        OperatorMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        }
    }
}

impl<T: Real> Sub for &OperatorMatrix<T> {
    type Output = OperatorMatrix<T>;
    fn sub(self, rhs: Self) -> OperatorMatrix<T> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "shape mismatch in sub");
        OperatorMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        }
    }
}

impl<T: Real> Mul for &OperatorMatrix<T> {
    type Output = OperatorMatrix<T>;
    fn mul(self, rhs: Self) -> OperatorMatrix<T> {
        self.matmul(rhs).expect("shape mismatch in mul")
    }
}

/// Compressed sparse row form used in the propagation hot loop.
#[derive(Debug, Clone)]
pub struct SparseOperator<T> {
    dim: usize,
    row_start: Vec<usize>,
    col: Vec<usize>,
    val: Vec<Complex<T>>,
}

impl<T: Real> SparseOperator<T> {
    pub fn from_dense(m: &OperatorMatrix<T>) -> Self {
        let mut row_start = Vec::with_capacity(m.rows + 1);
        let mut col = Vec::new();
        let mut val = Vec::new();
        row_start.push(0);
        for r in 0..m.rows {
            for c in 0..m.cols {
                let v = m[(r, c)];
                if v != czero() {
                    col.push(c);
                    val.push(v);
                }
            }
            row_start.push(col.len());
        }
        Self {
            dim: m.rows,
            row_start,
            col,
            val,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    /// `out = A x`
    #[inline]
    pub fn apply_into(&self, x: &[Complex<T>], out: &mut [Complex<T>]) {
        for (r, o) in out.iter_mut().enumerate().take(self.dim) {
            let mut acc = czero();
            for k in self.row_start[r]..self.row_start[r + 1] {
                acc += self.val[k] * x[self.col[k]];
            }
            *o = acc;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector<T> {
    amplitudes: Vec<Complex<T>>,
}

impl<T: Real> StateVector<T> {
    pub fn new(amplitudes: Vec<Complex<T>>) -> Self {
        Self { amplitudes }
    }

    pub fn basis(dim: usize, index: usize) -> Self {
        let mut a = vec![czero(); dim];
        a[index] = cone();
        Self { amplitudes: a }
    }

    /// `|elec⟩ ⊗ |n⟩` with `elec = 0` for the donor.
    pub fn product(fock_dim: usize, elec: usize, n: usize) -> Self {
        Self::basis(2 * fock_dim, elec * fock_dim + n)
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[Complex<T>] {
        &self.amplitudes
    }

    pub fn amplitudes_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<Complex<T>> {
        self.amplitudes
    }

    pub fn norm(&self) -> T {
        norm_sqr(&self.amplitudes).sqrt()
    }

    pub fn normalize(&mut self) -> T {
        normalize(&mut self.amplitudes)
    }
}

#[inline]
pub fn norm_sqr<T: Real>(v: &[Complex<T>]) -> T {
    v.iter().fold(T::zero(), |s, z| s + z.norm_sqr())
}

/// Rescales `v` to unit norm and returns the norm it had.
pub fn normalize<T: Real>(v: &mut [Complex<T>]) -> T {
    let n = norm_sqr(v).sqrt();
    if n > T::zero() {
        let inv = n.recip();
        for z in v.iter_mut() {
            *z *= inv;
        }
    }
    n
}

pub fn pauli_x<T: Real>() -> OperatorMatrix<T> {
    OperatorMatrix::from_fn(2, 2, |r, c| if r != c { cone() } else { czero() })
}

pub fn pauli_y<T: Real>() -> OperatorMatrix<T> {
    let mut m = OperatorMatrix::zeros(2, 2);
    m[(0, 1)] = -ci::<T>();
    m[(1, 0)] = ci();
    m
}

pub fn pauli_z<T: Real>() -> OperatorMatrix<T> {
    let mut m = OperatorMatrix::zeros(2, 2);
    m[(0, 0)] = cone();
    m[(1, 1)] = -cone::<T>();
    m
}

/// Truncated annihilation operator, `⟨n|b|n+1⟩ = √(n+1)`.
pub fn annihilation<T: Real>(n: usize) -> OperatorMatrix<T> {
    OperatorMatrix::from_fn(n, n, |r, c| {
        if c == r + 1 {
            cplx(T::of(c as f64).sqrt(), T::zero())
        } else {
            czero()
        }
    })
}

pub fn creation<T: Real>(n: usize) -> OperatorMatrix<T> {
    annihilation::<T>(n).adjoint()
}

/// Vibrational displacement `x̂ = b + b†`.
pub fn displacement<T: Real>(n: usize) -> OperatorMatrix<T> {
    &annihilation::<T>(n) + &creation::<T>(n)
}

pub fn build_system_hamiltonian<T: Real>(p: &SystemParams<T>) -> Result<OperatorMatrix<T>> {
    p.validate()?;
    let n = p.fock_dim;
    let half = T::of(0.5);
    let id_v = OperatorMatrix::<T>::identity(n);
    let id_e = OperatorMatrix::<T>::identity(2);
    let number = OperatorMatrix::from_fn(n, n, |r, c| {
        if r == c {
            cplx(T::of(r as f64) + half, T::zero())
        } else {
            czero()
        }
    });
    let h_tls = &pauli_z::<T>().scale_real(half * p.epsilon) + &pauli_x::<T>().scale_real(half * p.delta);
    let h = &h_tls.kron(&id_v) + &id_e.kron(&number.scale_real(p.omega_v));
    let h = &h + &pauli_z::<T>().kron(&displacement::<T>(n)).scale_real(p.gamma);
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingKind {
    /// `L = γ_E σ_z`
    Diagonal,
    /// `L = γ_E σ_x`
    OffDiagonal,
}

pub fn build_coupling_operator<T: Real>(
    kind: CouplingKind,
    gamma_e: T,
    fock_dim: usize,
) -> Result<OperatorMatrix<T>> {
    if !(gamma_e >= T::zero()) || !gamma_e.is_finite() {
        return Err(Error::invalid("gamma_e", format!("must be >= 0, got {gamma_e}")));
    }
    if fock_dim == 0 || fock_dim > MAX_FOCK_DIM {
        return Err(Error::Config(format!("fock_dim {fock_dim} outside 1..={MAX_FOCK_DIM}")));
    }
    let sigma = match kind {
        CouplingKind::Diagonal => pauli_z::<T>(),
        CouplingKind::OffDiagonal => pauli_x::<T>(),
    };
    Ok(sigma.scale_real(gamma_e).kron(&OperatorMatrix::identity(fock_dim)))
}

/// `Tr_vib ρ` for a `2N × 2N` density matrix.
pub fn partial_trace_vib<T: Real>(rho: &OperatorMatrix<T>) -> Result<OperatorMatrix<T>> {
    if !rho.is_square() {
        return Err(Error::Shape(format!(
            "partial trace needs a square matrix, got {}x{}",
            rho.rows(),
            rho.cols()
        )));
    }
    let d = rho.rows();
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Shape(format!("partial trace needs an even dimension, got {d}")));
    }
    let n = d / 2;
    Ok(OperatorMatrix::from_fn(2, 2, |a, b| {
        (0..n).fold(czero(), |acc, k| acc + rho[(a * n + k, b * n + k)])
    }))
}

/// Electronic reduced density matrix `[[ρ_DD, ρ_DA], [ρ_AD, ρ_AA]]` of a pure state.
#[inline]
pub fn reduced_electronic<T: Real>(psi: &[Complex<T>]) -> [[Complex<T>; 2]; 2] {
    let n = psi.len() / 2;
    let (d, a) = psi.split_at(n);
    let mut dd = T::zero();
    let mut aa = T::zero();
    let mut da = czero();
    for k in 0..n {
        dd += d[k].norm_sqr();
        aa += a[k].norm_sqr();
        da += d[k] * a[k].conj();
    }
    [[cplx(dd, T::zero()), da], [da.conj(), cplx(aa, T::zero())]]
}
