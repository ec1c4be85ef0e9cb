//! Dense complex linear algebra for registers of at most a few qubits.
//!
//! Qubit 0 is the most significant bit of a basis-state index, so `|b0 b1 b2>`
//! has index `4*b0 + 2*b1 + b2`. Every module in the crate shares this layout.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

pub use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

const HERMITIAN_TOL: f64 = 1e-12;
const TRACE_TOL: f64 = 1e-10;
const POSITIVITY_TOL: f64 = 1e-10;
const EXPECTATION_IM_TOL: f64 = 1e-10;
const DEGENERACY_GAP: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);
pub(crate) const I: C64 = C64::new(0.0, 1.0);

pub(crate) fn qubits_for_dim(dim: usize) -> Result<usize> {
    if dim == 0 || !dim.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(dim));
    }
    Ok(dim.trailing_zeros() as usize)
}

/// Square complex matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    dim: usize,
    data: Vec<C64>,
}

impl Matrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![ZERO; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                data.push(f(i, j));
            }
        }
        Self { dim, data }
    }

    /// Builds a matrix from row-major entries; the length must be a perfect square.
    pub fn from_row_major(data: Vec<C64>) -> Result<Self> {
        let dim = (data.len() as f64).sqrt().round() as usize;
        if dim * dim != data.len() {
            return Err(Error::DimensionMismatch { expected: dim * dim, actual: data.len() });
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { dim, data })
    }

    pub fn from_real(dim: usize, values: &[f64]) -> Result<Self> {
        Self::from_row_major(values.iter().map(|&x| C64::new(x, 0.0)).collect())
            .and_then(|m| {
                if m.dim == dim {
                    Ok(m)
                } else {
                    Err(Error::DimensionMismatch { expected: dim, actual: m.dim })
                }
            })
    }

    pub fn diagonal(values: &[C64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_qubits(&self) -> Result<usize> {
        qubits_for_dim(self.dim)
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.dim, |i, j| self[(j, i)].conj())
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim).map(|i| self[(i, i)]).sum()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn scale(&self, factor: C64) -> Self {
        Self { dim: self.dim, data: self.data.iter().map(|&z| z * factor).collect() }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.dim, other.dim, "max_abs_diff on mismatched dimensions");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Largest `|A_ij - conj(A_ji)|`.
    pub fn hermiticity_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.dim {
            for j in i..self.dim {
                worst = worst.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        worst
    }

    /// `‖U†U − I‖` elementwise maximum.
    pub fn unitarity_defect(&self) -> f64 {
        (&self.adjoint() * self).max_abs_diff(&Matrix::identity(self.dim))
    }

    pub fn mul_vec(&self, v: &[C64]) -> Result<Vec<C64>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: v.len() });
        }
        Ok((0..self.dim)
            .map(|i| {
                let row = &self.data[i * self.dim..(i + 1) * self.dim];
                row.iter().zip(v).map(|(a, b)| a * b).sum()
            })
            .collect())
    }

    /// `self · other · self†`
    pub fn conjugate(&self, other: &Matrix) -> Matrix {
        &(self * other) * &self.adjoint()
    }

    pub(crate) fn column(&self, j: usize) -> Vec<C64> {
        (0..self.dim).map(|i| self[(i, j)]).collect()
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix({}x{})", self.dim, self.dim)?;
        for i in 0..self.dim {
            let row: Vec<String> = (0..self.dim)
                .map(|j| {
                    let z = self[(i, j)];
                    format!("{:+.4}{:+.4}i", z.re, z.im)
                })
                .collect();
            writeln!(f, "  [{}]", row.join(", "))?;
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.dim + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.dim + j]
    }
}

impl Mul for &Matrix {
    type Output = Matrix;
    fn mul(self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.dim, rhs.dim, "matrix product of mismatched dimensions");
        let n = self.dim;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == ZERO {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * rhs.data[k * n + j];
                }
            }
        }
        out
    }
}

impl Add for &Matrix {
    type Output = Matrix;
    fn add(self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.dim, rhs.dim, "matrix sum of mismatched dimensions");
        Matrix { dim: self.dim, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect() }
    }
}

impl Sub for &Matrix {
    type Output = Matrix;
    fn sub(self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.dim, rhs.dim, "matrix difference of mismatched dimensions");
        Matrix { dim: self.dim, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect() }
    }
}

/// Tensor product with `self` as the more significant factor.
pub trait Kron {
    fn kron(&self, other: &Self) -> Self;
}

impl Kron for Matrix {
    fn kron(&self, other: &Matrix) -> Matrix {
        let (da, db) = (self.dim, other.dim);
        Matrix::from_fn(da * db, |i, j| self[(i / db, j / db)] * other[(i % db, j % db)])
    }
}

/// Normalized pure state over `2^n` amplitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    amps: Vec<C64>,
}

impl StateVector {
    /// Wraps amplitudes as given; call [`StateVector::normalize`] if needed.
    pub fn new(amps: Vec<C64>) -> Result<Self> {
        qubits_for_dim(amps.len())?;
        if amps.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { amps })
    }

    pub fn from_real(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    pub fn basis(n_qubits: usize, index: usize) -> Self {
        let mut amps = vec![ZERO; 1 << n_qubits];
        amps[index] = ONE;
        Self { amps }
    }

    /// `|+>` (`positive = true`) or `|->` on one qubit.
    pub fn plus_minus(positive: bool) -> Self {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let sign = if positive { 1.0 } else { -1.0 };
        Self { amps: vec![C64::new(h, 0.0), C64::new(sign * h, 0.0)] }
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn n_qubits(&self) -> usize {
        self.amps.len().trailing_zeros() as usize
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn normalize(&mut self) -> Result<()> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::InvalidState("cannot normalize a zero vector".into()));
        }
        for z in &mut self.amps {
            *z /= n;
        }
        Ok(())
    }

    /// `<self|other>`
    pub fn inner(&self, other: &StateVector) -> Result<C64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: other.dim() });
        }
        Ok(self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum())
    }

    /// `|<self|other>|^2`
    pub fn fidelity(&self, other: &StateVector) -> Result<f64> {
        Ok(self.inner(other)?.norm_sqr())
    }

    pub fn apply(&self, op: &Matrix) -> Result<StateVector> {
        Ok(StateVector { amps: op.mul_vec(&self.amps)? })
    }

    /// `|self><self|`
    pub fn projector(&self) -> Matrix {
        Matrix::from_fn(self.dim(), |i, j| self.amps[i] * self.amps[j].conj())
    }

    /// Multiplies every amplitude by a unit phase.
    pub fn with_phase(&self, phase: C64) -> StateVector {
        StateVector { amps: self.amps.iter().map(|&z| z * phase).collect() }
    }
}

impl Kron for StateVector {
    fn kron(&self, other: &StateVector) -> StateVector {
        let db = other.dim();
        StateVector {
            amps: (0..self.dim() * db).map(|i| self.amps[i / db] * other.amps[i % db]).collect(),
        }
    }
}

/// Matrix checked to be Hermitian at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianOperator(Matrix);

impl HermitianOperator {
    pub fn new(m: Matrix) -> Result<Self> {
        qubits_for_dim(m.dim())?;
        let deviation = m.hermiticity_defect();
        if deviation > HERMITIAN_TOL * m.norm().max(1.0) {
            return Err(Error::NotHermitian { deviation });
        }
        Ok(Self(m))
    }

    pub fn identity(n_qubits: usize) -> Self {
        Self(Matrix::identity(1 << n_qubits))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn n_qubits(&self) -> usize {
        self.0.dim().trailing_zeros() as usize
    }

    /// `self + shift · I`
    pub fn shifted(&self, shift: f64) -> Self {
        Self(&self.0 + &Matrix::identity(self.dim()).scale(C64::new(shift, 0.0)))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.scale(C64::new(factor, 0.0)))
    }

    pub fn sum<'a>(dim: usize, terms: impl IntoIterator<Item = &'a HermitianOperator>) -> Result<Self> {
        let mut acc = Matrix::zeros(dim);
        for t in terms {
            if t.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: t.dim() });
            }
            acc = &acc + &t.0;
        }
        Ok(Self(acc))
    }

    /// `U · self · U†`, which stays Hermitian for any `U`.
    pub fn conjugated_by(&self, u: &Matrix) -> Self {
        Self(u.conjugate(&self.0))
    }

    /// Embeds `op` (acting on `sites` in order) into an `n_qubits` register.
    pub fn embed(op: &HermitianOperator, sites: &[usize], n_qubits: usize) -> Result<Self> {
        Ok(Self(embed(op.matrix(), sites, n_qubits)?))
    }
}

impl Kron for HermitianOperator {
    fn kron(&self, other: &Self) -> Self {
        Self(self.0.kron(&other.0))
    }
}

/// Unit-trace positive semidefinite Hermitian matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix(Matrix);

impl DensityMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        qubits_for_dim(m.dim())?;
        let deviation = m.hermiticity_defect();
        if deviation > HERMITIAN_TOL * m.norm().max(1.0) {
            return Err(Error::InvalidState(format!("not Hermitian (deviation {deviation:e})")));
        }
        let tr = m.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::InvalidState(format!("trace {tr} differs from 1")));
        }
        let eig = eigh_matrix(&m)?;
        if let Some(&lo) = eig.eigenvalues.first() {
            if lo < -POSITIVITY_TOL {
                return Err(Error::InvalidState(format!("negative eigenvalue {lo:e}")));
            }
        }
        Ok(Self(m))
    }

    pub fn from_pure(state: &StateVector) -> Self {
        Self(state.projector())
    }

    pub fn maximally_mixed(n_qubits: usize) -> Self {
        let d = 1usize << n_qubits;
        Self(Matrix::identity(d).scale(C64::new(1.0 / d as f64, 0.0)))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn n_qubits(&self) -> usize {
        self.0.dim().trailing_zeros() as usize
    }

    /// `Tr[ρ²]`
    pub fn purity(&self) -> f64 {
        (&self.0 * &self.0).trace().re
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    pub fn matrix(self) -> Matrix {
        let (a, b, c, d) = match self {
            Pauli::I => (ONE, ZERO, ZERO, ONE),
            Pauli::X => (ZERO, ONE, ONE, ZERO),
            Pauli::Y => (ZERO, -I, I, ZERO),
            Pauli::Z => (ONE, ZERO, ZERO, -ONE),
        };
        Matrix { dim: 2, data: vec![a, b, c, d] }
    }

    pub fn operator(self) -> HermitianOperator {
        HermitianOperator(self.matrix())
    }

    pub fn symbol(self) -> char {
        match self {
            Pauli::I => 'I',
            Pauli::X => 'X',
            Pauli::Y => 'Y',
            Pauli::Z => 'Z',
        }
    }
}

pub fn hadamard() -> Matrix {
    let h = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    Matrix { dim: 2, data: vec![h, h, h, -h] }
}

/// `R_Y(θ) = exp(-iθY/2)`
pub fn ry(theta: f64) -> Matrix {
    let (s, c) = (theta / 2.0).sin_cos();
    Matrix::from_real(2, &[c, -s, s, c]).expect("2x2")
}

/// `R_Z(θ) = exp(-iθZ/2)`
pub fn rz(theta: f64) -> Matrix {
    let half = theta / 2.0;
    Matrix::diagonal(&[C64::from_polar(1.0, -half), C64::from_polar(1.0, half)])
}

/// Embeds `op` acting on `sites` (first site = most significant factor of `op`)
/// into an `n_qubits` register, identity elsewhere.
pub fn embed(op: &Matrix, sites: &[usize], n_qubits: usize) -> Result<Matrix> {
    for (i, &s) in sites.iter().enumerate() {
        if s >= n_qubits {
            return Err(Error::SiteOutOfRange { site: s, n_qubits });
        }
        if sites[..i].contains(&s) {
            return Err(Error::DuplicateSite(s));
        }
    }
    let k = sites.len();
    if op.dim() != 1 << k {
        return Err(Error::DimensionMismatch { expected: 1 << k, actual: op.dim() });
    }
    let dim = 1usize << n_qubits;
    let masks: Vec<usize> = sites.iter().map(|&s| 1 << (n_qubits - 1 - s)).collect();
    let site_mask: usize = masks.iter().sum();
    let local = |idx: usize| -> usize {
        masks.iter().fold(0, |acc, &m| (acc << 1) | usize::from(idx & m != 0))
    };
    Ok(Matrix::from_fn(dim, |r, c| {
        if r & !site_mask != c & !site_mask {
            ZERO
        } else {
            op[(local(r), local(c))]
        }
    }))
}

/// Eigenpairs with ascending eigenvalues; eigenvectors are the columns.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigenDecomposition {
    pub fn eigenvector(&self, i: usize) -> StateVector {
        StateVector { amps: self.eigenvectors.column(i) }
    }

    /// `V · diag(λ) · V†`
    pub fn reconstruct(&self) -> Matrix {
        let lambda: Vec<C64> = self.eigenvalues.iter().map(|&l| C64::new(l, 0.0)).collect();
        self.eigenvectors.conjugate(&Matrix::diagonal(&lambda))
    }

    /// `V · diag(f(λ)) · V†`
    pub fn apply_fn(&self, f: impl Fn(f64) -> C64) -> Matrix {
        let vals: Vec<C64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        self.eigenvectors.conjugate(&Matrix::diagonal(&vals))
    }
}

pub fn eigh(op: &HermitianOperator) -> Result<EigenDecomposition> {
    eigh_matrix(op.matrix())
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..a.dim {
        for j in 0..a.dim {
            if i != j {
                s += a[(i, j)].norm_sqr();
            }
        }
    }
    s.sqrt()
}

/// Cyclic complex Jacobi with a fixed `(p, q)` sweep order.
pub(crate) fn eigh_matrix(m: &Matrix) -> Result<EigenDecomposition> {
    let n = m.dim();
    let deviation = m.hermiticity_defect();
    if deviation > HERMITIAN_TOL * m.norm().max(1.0) {
        return Err(Error::NotHermitian { deviation });
    }
    if m.data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    let scale = a.norm();
    let mut sweeps = 0;
    loop {
        if off_diagonal_norm(&a) <= 1e-15 * scale {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps, off_norm: off_diagonal_norm(&a) });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let z = a[(p, q)];
                let r = z.norm();
                if r <= f64::MIN_POSITIVE {
                    continue;
                }
                let e = z / r;
                let tau = (a[(q, q)].re - a[(p, p)].re) / (2.0 * r);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // J = diag(1, conj(e)) · [[c, s], [-s, c]] on the (p, q) plane
                let jqp = -e.conj() * s;
                let jqq = e.conj() * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = akp * c + akq * jqp;
                    a[(k, q)] = akp * s + akq * jqq;
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = vkp * c + vkq * jqp;
                    v[(k, q)] = vkp * s + vkq * jqq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = apk * c + aqk * jqp.conj();
                    a[(q, k)] = apk * s + aqk * jqq.conj();
                }
                a[(p, q)] = ZERO;
                a[(q, p)] = ZERO;
                a[(p, p)] = C64::new(a[(p, p)].re, 0.0);
                a[(q, q)] = C64::new(a[(q, q)].re, 0.0);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].re.total_cmp(&a[(j, j)].re).then(i.cmp(&j)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[(i, i)].re).collect();
    let mut cols: Vec<Vec<C64>> = order.iter().map(|&i| v.column(i)).collect();

    // Re-orthonormalize each degenerate cluster in index order.
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && eigenvalues[end] - eigenvalues[end - 1] < DEGENERACY_GAP {
            end += 1;
        }
        if end - start > 1 {
            gram_schmidt(&mut cols[start..end]);
        }
        start = end;
    }

    let eigenvectors = Matrix::from_fn(n, |i, j| cols[j][i]);
    Ok(EigenDecomposition { eigenvalues, eigenvectors })
}

fn gram_schmidt(vectors: &mut [Vec<C64>]) {
    for i in 0..vectors.len() {
        let (done, rest) = vectors.split_at_mut(i);
        let v = &mut rest[0];
        for u in done.iter() {
            let proj: C64 = u.iter().zip(v.iter()).map(|(a, b)| a.conj() * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= proj * y;
            }
        }
        let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

fn real_part_checked(z: C64, scale: f64) -> Result<f64> {
    if z.im.abs() > EXPECTATION_IM_TOL * scale.max(1.0) {
        return Err(Error::ComplexExpectation(z.im));
    }
    Ok(z.re)
}

pub trait Expectation {
    fn expectation(&self, op: &HermitianOperator) -> Result<f64>;
}

impl Expectation for StateVector {
    fn expectation(&self, op: &HermitianOperator) -> Result<f64> {
        let applied = op.matrix().mul_vec(&self.amps)?;
        let z: C64 = self.amps.iter().zip(&applied).map(|(a, b)| a.conj() * b).sum();
        real_part_checked(z, op.matrix().norm())
    }
}

impl Expectation for DensityMatrix {
    fn expectation(&self, op: &HermitianOperator) -> Result<f64> {
        if self.dim() != op.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: op.dim() });
        }
        let (a, b) = (&self.0, op.matrix());
        let n = a.dim();
        let mut z = ZERO;
        for i in 0..n {
            for k in 0..n {
                z += a[(i, k)] * b[(k, i)];
            }
        }
        real_part_checked(z, op.matrix().norm())
    }
}

/// `exp(-i t H)` via the eigendecomposition of `H`.
pub fn evolve(op: &HermitianOperator, t: f64) -> Result<Matrix> {
    let eig = eigh(op)?;
    Ok(eig.apply_fn(|l| C64::from_polar(1.0, -l * t)))
}

/// Reduced state on `keep`; the kept sites retain their relative order.
pub fn partial_trace(rho: &DensityMatrix, keep: &[usize]) -> Result<DensityMatrix> {
    if keep.is_empty() {
        return Err(Error::EmptyKeep);
    }
    let n = rho.n_qubits();
    let mut kept: Vec<usize> = keep.to_vec();
    for (i, &s) in kept.iter().enumerate() {
        if s >= n {
            return Err(Error::SiteOutOfRange { site: s, n_qubits: n });
        }
        if kept[..i].contains(&s) {
            return Err(Error::DuplicateSite(s));
        }
    }
    kept.sort_unstable();
    let traced: Vec<usize> = (0..n).filter(|s| !kept.contains(s)).collect();
    let bit = |s: usize| 1usize << (n - 1 - s);
    let compose = |kept_idx: usize, traced_idx: usize| -> usize {
        let mut full = 0;
        for (pos, &s) in kept.iter().enumerate() {
            if kept_idx >> (kept.len() - 1 - pos) & 1 == 1 {
                full |= bit(s);
            }
        }
        for (pos, &s) in traced.iter().enumerate() {
            if traced_idx >> (traced.len() - 1 - pos) & 1 == 1 {
                full |= bit(s);
            }
        }
        full
    };
    let dk = 1usize << kept.len();
    let dt = 1usize << traced.len();
    let m = rho.matrix();
    let out = Matrix::from_fn(dk, |i, j| (0..dt).map(|t| m[(compose(i, t), compose(j, t))]).sum());
    Ok(DensityMatrix(out))
}

/// `-Σ λ ln λ` in nats, with `0 ln 0 = 0`.
pub fn von_neumann_entropy(rho: &DensityMatrix) -> Result<f64> {
    let eig = eigh_matrix(rho.matrix())?;
    let mut s = 0.0;
    for &l in &eig.eigenvalues {
        if l < -1e-8 {
            return Err(Error::InvalidState(format!("negative eigenvalue {l:e}")));
        }
        if l > 0.0 {
            s -= l * l.ln();
        }
    }
    Ok(s.max(0.0))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, LN_2};

    pub(crate) fn random_hermitian(dim: usize, values: &[f64]) -> HermitianOperator {
        let b = Matrix::from_fn(dim, |i, j| {
            let k = 2 * (i * dim + j);
            C64::new(values[k], values[k + 1])
        });
        let h = (&b + &b.adjoint()).scale(C64::new(0.5, 0.0));
        HermitianOperator::new(h).unwrap()
    }

    fn hermitian_strategy() -> impl Strategy<Value = HermitianOperator> {
        (1usize..=3).prop_flat_map(|n| {
            let dim = 1 << n;
            prop::collection::vec(-1.0f64..1.0, 2 * dim * dim)
                .prop_map(move |v| random_hermitian(dim, &v))
        })
    }

    #[test]
    fn kron_examples() {
        let i2 = Matrix::identity(2);
        assert_eq!(i2.kron(&i2), Matrix::identity(4));

        let zi = HermitianOperator::new(Pauli::Z.matrix().kron(&i2)).unwrap();
        let s10 = StateVector::basis(2, 0b10);
        assert!((s10.expectation(&zi).unwrap() + 1.0).abs() < 1e-15);

        let xx = Pauli::X.matrix().kron(&Pauli::X.matrix());
        let out = StateVector::basis(2, 0).apply(&xx).unwrap();
        assert_eq!(out, StateVector::basis(2, 0b11));
    }

    #[test]
    fn embed_examples() {
        let z1 = embed(&Pauli::Z.matrix(), &[1], 3).unwrap();
        let expected = Matrix::identity(2).kron(&Pauli::Z.matrix()).kron(&Matrix::identity(2));
        assert_eq!(z1, expected);

        let xx = Pauli::X.matrix().kron(&Pauli::X.matrix());
        let op = embed(&xx, &[0, 2], 3).unwrap();
        let out = StateVector::basis(3, 0b001).apply(&op).unwrap();
        assert_eq!(out, StateVector::basis(3, 0b100));

        let z0 = HermitianOperator::new(embed(&Pauli::Z.matrix(), &[0], 3).unwrap()).unwrap();
        assert_eq!(StateVector::basis(3, 0).expectation(&z0).unwrap(), 1.0);
    }

    #[test]
    fn embed_rejects_bad_sites() {
        let xx = Pauli::X.matrix().kron(&Pauli::X.matrix());
        assert!(matches!(embed(&xx, &[1, 1], 3), Err(Error::DuplicateSite(1))));
        assert!(matches!(embed(&Pauli::Z.matrix(), &[3], 3), Err(Error::SiteOutOfRange { .. })));
        assert!(matches!(embed(&xx, &[0], 3), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn embed_respects_site_order() {
        // CNOT with control on the first listed site.
        let cnot = Matrix::from_real(4, &[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0., 1., 0., 0., 1., 0.]).unwrap();
        let op = embed(&cnot, &[2, 0], 3).unwrap();
        let out = StateVector::basis(3, 0b001).apply(&op).unwrap();
        assert_eq!(out, StateVector::basis(3, 0b101));
    }

    #[test]
    fn eigh_paulis() {
        let ez = eigh(&Pauli::Z.operator()).unwrap();
        assert_eq!(ez.eigenvalues, vec![-1.0, 1.0]);

        let ex = eigh(&Pauli::X.operator()).unwrap();
        assert!((ex.eigenvalues[0] + 1.0).abs() < 1e-15);
        let minus = StateVector::plus_minus(false);
        let plus = StateVector::plus_minus(true);
        assert!((ex.eigenvector(0).fidelity(&minus).unwrap() - 1.0).abs() < 1e-14);
        assert!((ex.eigenvector(1).fidelity(&plus).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eigh_minimal_traceless_hamiltonian() {
        let (h, k) = (1.0, 1.5);
        let z0 = embed(&Pauli::Z.matrix(), &[0], 2).unwrap();
        let z1 = embed(&Pauli::Z.matrix(), &[1], 2).unwrap();
        let xx = Pauli::X.matrix().kron(&Pauli::X.matrix());
        let hm = &(&z0 + &z1).scale(C64::new(h, 0.0)) + &xx.scale(C64::new(2.0 * k, 0.0));
        let eig = eigh(&HermitianOperator::new(hm).unwrap()).unwrap();
        let expected = -2.0 * (h * h + k * k).sqrt();
        assert!((eig.eigenvalues[0] - expected).abs() < 1e-12);
        assert!((eig.eigenvalues[0] + 3.6056).abs() < 1e-4);
    }

    #[test]
    fn eigh_degenerate_cluster_is_orthonormal() {
        let eig = eigh(&HermitianOperator::identity(3)).unwrap();
        assert!(eig.eigenvectors.unitarity_defect() < 1e-14);
        let zz = HermitianOperator::new(Pauli::Z.matrix().kron(&Pauli::Z.matrix())).unwrap();
        let eig = eigh(&zz).unwrap();
        assert_eq!(eig.eigenvalues, vec![-1.0, -1.0, 1.0, 1.0]);
        assert!(eig.eigenvectors.unitarity_defect() < 1e-14);
    }

    #[test]
    fn eigh_is_deterministic() {
        let vals: Vec<f64> = (0..128).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let h = random_hermitian(8, &vals);
        let a = eigh(&h).unwrap();
        let b = eigh(&h).unwrap();
        assert_eq!(a.eigenvalues, b.eigenvalues);
        assert_eq!(a.eigenvectors, b.eigenvectors);
    }

    #[test]
    fn non_hermitian_rejected() {
        let m = Matrix::from_real(2, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(HermitianOperator::new(m.clone()), Err(Error::NotHermitian { .. })));
        assert!(matches!(eigh_matrix(&m), Err(Error::NotHermitian { .. })));
    }

    #[test]
    fn expectation_examples() {
        let z = Pauli::Z.operator();
        assert_eq!(StateVector::basis(1, 0).expectation(&z).unwrap(), 1.0);
        assert!(StateVector::plus_minus(true).expectation(&z).unwrap().abs() < 1e-15);
        assert!(StateVector::plus_minus(false).expectation(&z).unwrap().abs() < 1e-15);
        let xx = HermitianOperator::new(Pauli::X.matrix().kron(&Pauli::X.matrix())).unwrap();
        assert_eq!(DensityMatrix::maximally_mixed(2).expectation(&xx).unwrap(), 0.0);
        assert!(matches!(
            DensityMatrix::maximally_mixed(1).expectation(&xx),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn evolve_examples() {
        let z = Pauli::Z.operator();
        assert!(evolve(&z, 0.0).unwrap().max_abs_diff(&Matrix::identity(2)) < 1e-15);
        let u = evolve(&z, FRAC_PI_2).unwrap();
        let expected = Matrix::diagonal(&[C64::from_polar(1.0, -FRAC_PI_2), C64::from_polar(1.0, FRAC_PI_2)]);
        assert!(u.max_abs_diff(&expected) < 1e-15);
        assert!(u.max_abs_diff(&rz(std::f64::consts::PI)) < 1e-15);
    }

    #[test]
    fn partial_trace_examples() {
        let rho = DensityMatrix::from_pure(&StateVector::basis(2, 0));
        let red = partial_trace(&rho, &[0]).unwrap();
        assert_eq!(red.matrix(), &StateVector::basis(1, 0).projector());

        let bell = StateVector::from_real(&[1.0, 0.0, 0.0, 1.0]).map(|mut s| {
            s.normalize().unwrap();
            s
        });
        let red = partial_trace(&DensityMatrix::from_pure(&bell.unwrap()), &[0]).unwrap();
        assert!(red.matrix().max_abs_diff(DensityMatrix::maximally_mixed(1).matrix()) < 1e-15);

        assert!(matches!(partial_trace(&rho, &[]), Err(Error::EmptyKeep)));
    }

    #[test]
    fn partial_trace_keeps_the_right_factor() {
        // |0> ⊗ |1> ⊗ |+>: tracing out site 1 leaves |0>|+>.
        let s = StateVector::basis(1, 0)
            .kron(&StateVector::basis(1, 1))
            .kron(&StateVector::plus_minus(true));
        let red = partial_trace(&DensityMatrix::from_pure(&s), &[2, 0]).unwrap();
        let expected = StateVector::basis(1, 0).kron(&StateVector::plus_minus(true)).projector();
        assert!(red.matrix().max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn entropy_examples() {
        let pure = DensityMatrix::from_pure(&StateVector::plus_minus(true));
        assert!(von_neumann_entropy(&pure).unwrap().abs() < 1e-12);
        let s1 = von_neumann_entropy(&DensityMatrix::maximally_mixed(1)).unwrap();
        assert!((s1 - LN_2).abs() < 1e-14);
        let s2 = von_neumann_entropy(&DensityMatrix::maximally_mixed(2)).unwrap();
        assert!((s2 - 2.0 * LN_2).abs() < 1e-14);
    }

    #[test]
    fn density_matrix_validation() {
        let bad_trace = Matrix::identity(2);
        assert!(DensityMatrix::new(bad_trace).is_err());
        let negative = Matrix::from_real(2, &[1.5, 0.0, 0.0, -0.5]).unwrap();
        assert!(DensityMatrix::new(negative).is_err());
        assert!(DensityMatrix::new(DensityMatrix::maximally_mixed(3).matrix().clone()).is_ok());
    }

    #[test]
    fn evolve_random_hermitian_is_unitary() {
        let vals: Vec<f64> = (0..128).map(|i| ((i * 53 % 97) as f64 / 48.0) - 1.0).collect();
        let u = evolve(&random_hermitian(8, &vals), 0.7).unwrap();
        assert!(u.unitarity_defect() <= 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn kron_is_associative(a in hermitian_strategy(), b in hermitian_strategy()) {
            let c = Pauli::Y.operator();
            let left = a.kron(&b).kron(&c);
            let right = a.kron(&b.kron(&c));
            prop_assert!(left.matrix().max_abs_diff(right.matrix()) <= 1e-12);
        }

        #[test]
        fn eigh_reconstructs(a in hermitian_strategy()) {
            let eig = eigh(&a).unwrap();
            let scale = a.matrix().norm().max(1e-300);
            prop_assert!(eig.reconstruct().max_abs_diff(a.matrix()) <= 1e-9 * scale);
            prop_assert!(eig.eigenvectors.unitarity_defect() <= 1e-9);
            prop_assert!(eig.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
            for i in 0..a.dim() {
                let v = eig.eigenvector(i);
                let av = v.apply(a.matrix()).unwrap();
                let resid: f64 = av.amplitudes().iter().zip(v.amplitudes())
                    .map(|(x, y)| (x - y * eig.eigenvalues[i]).norm_sqr()).sum::<f64>().sqrt();
                prop_assert!(resid <= 1e-9 * scale);
            }
        }

        #[test]
        fn evolve_inverse(a in hermitian_strategy(), t in -3.0f64..3.0) {
            let fwd = evolve(&a, t).unwrap();
            let back = evolve(&a, -t).unwrap();
            prop_assert!((&fwd * &back).max_abs_diff(&Matrix::identity(a.dim())) <= 1e-9);
        }

        #[test]
        fn density_matrices_have_unit_identity_expectation(a in hermitian_strategy()) {
            // Gibbs-like state exp(-A)/Z is a valid density matrix.
            let eig = eigh(&a).unwrap();
            let m = eig.apply_fn(|l| C64::new((-l).exp(), 0.0));
            let z = m.trace().re;
            let rho = DensityMatrix::new(m.scale(C64::new(1.0 / z, 0.0))).unwrap();
            let id = HermitianOperator::identity(rho.n_qubits());
            prop_assert!((rho.expectation(&id).unwrap() - 1.0).abs() <= 1e-10);
        }

        #[test]
        fn entropy_is_unitarily_invariant(a in hermitian_strategy(), b_seed in prop::collection::vec(-1.0f64..1.0, 128)) {
            let eig = eigh(&a).unwrap();
            let m = eig.apply_fn(|l| C64::new((-2.0 * l).exp(), 0.0));
            let z = m.trace().re;
            let rho = DensityMatrix::new(m.scale(C64::new(1.0 / z, 0.0))).unwrap();
            let gen = random_hermitian(rho.dim(), &b_seed[..2 * rho.dim() * rho.dim()]);
            let u = evolve(&gen, 1.3).unwrap();
            let rotated = DensityMatrix::new(u.conjugate(rho.matrix())).unwrap();
            let s0 = von_neumann_entropy(&rho).unwrap();
            let s1 = von_neumann_entropy(&rotated).unwrap();
            prop_assert!((s0 - s1).abs() <= 1e-9);
        }
    }
}
