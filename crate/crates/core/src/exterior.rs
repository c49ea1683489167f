//! Dense exterior algebra on `R^n` (n ≤ 10).
//!
//! A k-form is stored as its `C(n,k)` coefficients on the increasing basis
//! `e^{i_1} ∧ … ∧ e^{i_k}`, enumerated in lexicographic order of the index
//! tuples. A coefficient is the value of the form on the corresponding
//! increasing tuple of basis vectors, so there are no `1/k!` factors anywhere.
//!
//! The module also hosts the G2 kernel: the model forms `φ₀`, `ψ₀` and the
//! reconstruction of the metric induced by a G2 3-form.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 10;

/// Tolerance on `det B` below which a 3-form is reported as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-30;

struct IndexTable {
    /// `masks[k]` lists the k-subsets of `0..n` as bitmasks, lexicographically.
    masks: Vec<Vec<u16>>,
    /// Rank of every bitmask within its degree.
    rank: Vec<u16>,
}

fn tables() -> &'static [IndexTable] {
    static TABLES: OnceLock<Vec<IndexTable>> = OnceLock::new();
    TABLES.get_or_init(|| (0..=MAX_DIM).map(build_table).collect())
}

fn build_table(n: usize) -> IndexTable {
    let mut masks = vec![Vec::new(); n + 1];
    let mut rank = vec![0u16; 1 << n];
    for k in 0..=n {
        let mut current: Vec<usize> = (0..k).collect();
        loop {
            let mask = current.iter().fold(0u16, |m, &i| m | (1 << i));
            rank[mask as usize] = masks[k].len() as u16;
            masks[k].push(mask);
            // advance to the next combination in lexicographic order
            let mut pos = k;
            let mut advanced = false;
            while pos > 0 {
                pos -= 1;
                if current[pos] < n - k + pos {
                    current[pos] += 1;
                    for q in pos + 1..k {
                        current[q] = current[q - 1] + 1;
                    }
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                break;
            }
        }
    }
    IndexTable { masks, rank }
}

fn table(n: usize) -> &'static IndexTable {
    &tables()[n]
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Sign of the permutation sorting the concatenation of two disjoint
/// increasing index sets.
#[inline]
fn merge_sign(a: u16, b: u16) -> f64 {
    let mut swaps = 0u32;
    let mut rest = b;
    while rest != 0 {
        let y = rest.trailing_zeros();
        swaps += (a >> (y + 1)).count_ones();
        rest &= rest - 1;
    }
    if swaps % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
fn mask_indices(mask: u16) -> impl Iterator<Item = usize> {
    let mut rest = mask;
    std::iter::from_fn(move || {
        if rest == 0 {
            None
        } else {
            let i = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            Some(i)
        }
    })
}

/// Strictly increasing tuple of indices in `0..dim`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct MultiIndex {
    dim: u8,
    mask: u16,
}

impl MultiIndex {
    pub fn new(dim: usize, indices: &[usize]) -> Result<Self> {
        if dim > MAX_DIM {
            return Err(Error::InvalidArgument(format!("dimension {dim} exceeds {MAX_DIM}")));
        }
        let mut mask = 0u16;
        let mut prev: Option<usize> = None;
        for &i in indices {
            if i >= dim || prev.is_some_and(|p| p >= i) {
                return Err(Error::InvalidArgument(format!(
                    "multi-index {indices:?} is not strictly increasing in 0..{dim}"
                )));
            }
            mask |= 1 << i;
            prev = Some(i);
        }
        Ok(Self { dim: dim as u8, mask })
    }

    pub fn from_rank(dim: usize, degree: usize, rank: usize) -> Self {
        Self {
            dim: dim as u8,
            mask: table(dim).masks[degree][rank],
        }
    }

    pub fn rank(&self) -> usize {
        table(self.dim as usize).rank[self.mask as usize] as usize
    }

    pub fn degree(&self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn indices(&self) -> Vec<usize> {
        mask_indices(self.mask).collect()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.mask & (1 << i) != 0
    }

    /// All multi-indices of the given degree, in lexicographic order.
    pub fn all(dim: usize, degree: usize) -> impl Iterator<Item = MultiIndex> {
        let masks: &'static [u16] = if degree <= dim { &table(dim).masks[degree] } else { &[] };
        masks.iter().map(move |&mask| MultiIndex { dim: dim as u8, mask })
    }
}

impl fmt::Debug for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e^{:?}", self.indices())
    }
}

/// Antisymmetric k-form on `R^n` with dense lexicographic coefficients.
#[derive(Clone, PartialEq)]
pub struct AltForm {
    dim: usize,
    degree: usize,
    coeffs: Vec<f64>,
}

impl fmt::Debug for AltForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AltForm({}, {}) ", self.dim, self.degree)?;
        let mut list = f.debug_map();
        for (idx, c) in self.terms() {
            if c != 0.0 {
                list.entry(&idx, &c);
            }
        }
        list.finish()
    }
}

impl AltForm {
    pub fn zero(dim: usize, degree: usize) -> Self {
        assert!(dim <= MAX_DIM, "dimension {dim} exceeds {MAX_DIM}");
        Self {
            dim,
            degree,
            coeffs: vec![0.0; binomial(dim, degree)],
        }
    }

    pub fn scalar(dim: usize, value: f64) -> Self {
        let mut f = Self::zero(dim, 0);
        f.coeffs[0] = value;
        f
    }

    pub fn from_coeffs(dim: usize, degree: usize, coeffs: Vec<f64>) -> Result<Self> {
        if dim > MAX_DIM {
            return Err(Error::InvalidArgument(format!("dimension {dim} exceeds {MAX_DIM}")));
        }
        let expected = binomial(dim, degree);
        if coeffs.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: coeffs.len(),
            });
        }
        Ok(Self { dim, degree, coeffs })
    }

    /// The 1-form `Σ v_i e^i`.
    pub fn one_form(v: &[f64]) -> Self {
        Self {
            dim: v.len(),
            degree: 1,
            coeffs: v.to_vec(),
        }
    }

    /// Basis form `e^{i_1 … i_k}` (0-based, strictly increasing indices).
    pub fn basis(dim: usize, indices: &[usize]) -> Result<Self> {
        let idx = MultiIndex::new(dim, indices)?;
        let mut f = Self::zero(dim, idx.degree());
        f.coeffs[idx.rank()] = 1.0;
        Ok(f)
    }

    /// The coordinate volume form `e^{0…n-1}`.
    pub fn volume(dim: usize) -> Self {
        Self::scalar_top(dim, 1.0)
    }

    fn scalar_top(dim: usize, value: f64) -> Self {
        let mut f = Self::zero(dim, dim);
        f.coeffs[0] = value;
        f
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn get(&self, idx: MultiIndex) -> f64 {
        debug_assert_eq!(idx.degree(), self.degree);
        self.coeffs[idx.rank()]
    }

    pub fn set(&mut self, idx: MultiIndex, value: f64) {
        debug_assert_eq!(idx.degree(), self.degree);
        self.coeffs[idx.rank()] = value;
    }

    /// Coefficient on an explicit increasing index tuple.
    pub fn coeff(&self, indices: &[usize]) -> Result<f64> {
        let idx = MultiIndex::new(self.dim, indices)?;
        if idx.degree() != self.degree {
            return Err(Error::InvalidDegree {
                degree: idx.degree(),
                dim: self.dim,
            });
        }
        Ok(self.get(idx))
    }

    pub fn terms(&self) -> impl Iterator<Item = (MultiIndex, f64)> + '_ {
        MultiIndex::all(self.dim, self.degree).zip(self.coeffs.iter().copied())
    }

    /// Coefficient on `e^{0…n-1}` of a top-degree form.
    pub fn top_coefficient(&self) -> Result<f64> {
        if self.degree != self.dim {
            return Err(Error::InvalidDegree {
                degree: self.degree,
                dim: self.dim,
            });
        }
        Ok(self.coeffs[0])
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn euclidean_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            degree: self.degree,
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        self.check_compatible(other)?;
        if self.degree != other.degree {
            return Err(Error::InvalidDegree {
                degree: other.degree,
                dim: other.dim,
            });
        }
        Ok(())
    }

    pub fn try_add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn try_sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            dim: self.dim,
            degree: self.degree,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Exterior product. Degrees summing past `dim` give the (empty) zero form.
    pub fn wedge(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let degree = self.degree + other.degree;
        let mut out = Self::zero(self.dim, degree);
        if degree > self.dim {
            return Ok(out);
        }
        let tab = table(self.dim);
        let a_masks = &tab.masks[self.degree];
        let b_masks = &tab.masks[other.degree];
        for (&ma, &ca) in a_masks.iter().zip(&self.coeffs) {
            if ca == 0.0 {
                continue;
            }
            for (&mb, &cb) in b_masks.iter().zip(&other.coeffs) {
                if cb == 0.0 || ma & mb != 0 {
                    continue;
                }
                let r = tab.rank[(ma | mb) as usize] as usize;
                out.coeffs[r] += merge_sign(ma, mb) * ca * cb;
            }
        }
        Ok(out)
    }

    /// Interior product `v ⌟ a`.
    pub fn interior(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        if self.degree == 0 {
            return Err(Error::InvalidDegree {
                degree: 0,
                dim: self.dim,
            });
        }
        let tab = table(self.dim);
        let mut out = Self::zero(self.dim, self.degree - 1);
        for (&mask, &c) in tab.masks[self.degree].iter().zip(&self.coeffs) {
            if c == 0.0 {
                continue;
            }
            for i in mask_indices(mask) {
                if v[i] == 0.0 {
                    continue;
                }
                let rest = mask & !(1 << i);
                // moving e^i to the front passes the indices of `rest` below i
                let below = (rest & ((1u16 << i) - 1)).count_ones();
                let sign = if below % 2 == 0 { 1.0 } else { -1.0 };
                out.coeffs[tab.rank[rest as usize] as usize] += sign * v[i] * c;
            }
        }
        Ok(out)
    }

    /// Interior product with the coordinate vector `∂/∂x^i`.
    pub fn interior_basis(&self, i: usize) -> Result<Self> {
        let mut v = vec![0.0; self.dim];
        if i >= self.dim {
            return Err(Error::InvalidArgument(format!("coordinate {i} out of range")));
        }
        v[i] = 1.0;
        self.interior(&v)
    }

    /// Components with all indices raised by `g^{-1}`.
    fn raised(&self, g_inv: &DMatrix<f64>) -> Vec<f64> {
        let compound = compound_matrix(g_inv, self.degree);
        let m = self.coeffs.len();
        (0..m)
            .map(|i| (0..m).map(|j| compound[i * m + j] * self.coeffs[j]).sum())
            .collect()
    }

    /// Metric Hodge star, characterised by `b ∧ *a = ⟨b, a⟩_g vol_g`.
    pub fn hodge_star(&self, g: &MetricTensor) -> Result<Self> {
        if g.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: g.dim(),
            });
        }
        let det = g.det();
        if !(det > 0.0) {
            return Err(Error::SingularMetric { det });
        }
        let g_inv = g.inverse()?;
        let raised = self.raised(&g_inv);
        let sqrt_det = det.sqrt();
        Ok(self.star_from_raised(&raised, sqrt_det))
    }

    pub fn hodge_star_euclidean(&self) -> Self {
        self.star_from_raised(&self.coeffs, 1.0)
    }

    fn star_from_raised(&self, raised: &[f64], sqrt_det: f64) -> Self {
        let tab = table(self.dim);
        let full: u16 = ((1u32 << self.dim) - 1) as u16;
        let mut out = Self::zero(self.dim, self.dim - self.degree);
        for (&mask, &c) in tab.masks[self.degree].iter().zip(raised) {
            let comp = full & !mask;
            out.coeffs[tab.rank[comp as usize] as usize] += sqrt_det * merge_sign(mask, comp) * c;
        }
        out
    }

    /// Pointwise norm induced by `g` on k-forms.
    pub fn norm(&self, g: &MetricTensor) -> Result<f64> {
        if g.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: g.dim(),
            });
        }
        let g_inv = g.inverse()?;
        let raised = self.raised(&g_inv);
        let sq: f64 = raised.iter().zip(&self.coeffs).map(|(a, b)| a * b).sum();
        Ok(sq.max(0.0).sqrt())
    }

    pub fn inner(&self, other: &Self, g: &MetricTensor) -> Result<f64> {
        self.check_same_shape(other)?;
        let g_inv = g.inverse()?;
        let raised = self.raised(&g_inv);
        Ok(raised.iter().zip(&other.coeffs).map(|(a, b)| a * b).sum())
    }

    /// Pullback along a linear map with Jacobian `jac` (`jac[(i, j)] = ∂x^i/∂u^j`),
    /// from this form's space (rows) to the source space (columns).
    pub fn pullback(&self, jac: &DMatrix<f64>) -> Result<Self> {
        if jac.nrows() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: jac.nrows(),
            });
        }
        let n = jac.ncols();
        let k = self.degree;
        let mut out = Self::zero(n, k);
        if k > n {
            return Ok(out);
        }
        let mut block = [0.0f64; MAX_DIM * MAX_DIM];
        for (rows, &c) in MultiIndex::all(self.dim, k).zip(&self.coeffs) {
            if c == 0.0 {
                continue;
            }
            let rows = rows.indices();
            for (cols, slot) in MultiIndex::all(n, k).zip(out.coeffs.iter_mut()) {
                let cols = cols.indices();
                for (a, &r) in rows.iter().enumerate() {
                    for (b, &s) in cols.iter().enumerate() {
                        block[a * k + b] = jac[(r, s)];
                    }
                }
                *slot += c * det_small(&mut block[..k * k], k);
            }
        }
        Ok(out)
    }

    /// Embed a form on `R^m` into `R^n` (n ≥ m), the first m coordinates
    /// mapping to the listed target coordinates.
    pub fn embed(&self, n: usize, targets: &[usize]) -> Result<Self> {
        if targets.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: targets.len(),
            });
        }
        let mut out = Self::zero(n, self.degree);
        for (idx, c) in self.terms() {
            if c == 0.0 {
                continue;
            }
            let mapped: Vec<usize> = idx.indices().iter().map(|&i| targets[i]).collect();
            let mut sorted = mapped.clone();
            sorted.sort_unstable();
            let sign = permutation_sign(&mapped);
            let target = MultiIndex::new(n, &sorted)?;
            out.coeffs[target.rank()] += sign * c;
        }
        Ok(out)
    }
}

fn permutation_sign(values: &[usize]) -> f64 {
    let mut inversions = 0;
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            if values[i] > values[j] {
                inversions += 1;
            }
        }
    }
    if inversions % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

impl Add for &AltForm {
    type Output = AltForm;
    fn add(self, rhs: &AltForm) -> AltForm {
        self.try_add(rhs).expect("adding forms of different shape")
    }
}

impl Sub for &AltForm {
    type Output = AltForm;
    fn sub(self, rhs: &AltForm) -> AltForm {
        self.try_sub(rhs).expect("subtracting forms of different shape")
    }
}

impl AddAssign<&AltForm> for AltForm {
    fn add_assign(&mut self, rhs: &AltForm) {
        assert_eq!((self.dim, self.degree), (rhs.dim, rhs.degree));
        for (a, b) in self.coeffs.iter_mut().zip(&rhs.coeffs) {
            *a += b;
        }
    }
}

impl Mul<f64> for &AltForm {
    type Output = AltForm;
    fn mul(self, s: f64) -> AltForm {
        self.scaled(s)
    }
}

impl Neg for &AltForm {
    type Output = AltForm;
    fn neg(self) -> AltForm {
        self.scaled(-1.0)
    }
}

/// Determinant of a small dense row-major matrix; the buffer is overwritten.
pub(crate) fn det_small(a: &mut [f64], n: usize) -> f64 {
    match n {
        0 => 1.0,
        1 => a[0],
        2 => a[0] * a[3] - a[1] * a[2],
        3 => {
            a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
                + a[2] * (a[3] * a[7] - a[4] * a[6])
        }
        _ => {
            let mut det = 1.0;
            for col in 0..n {
                let mut piv = col;
                for r in col + 1..n {
                    if a[r * n + col].abs() > a[piv * n + col].abs() {
                        piv = r;
                    }
                }
                if a[piv * n + col] == 0.0 {
                    return 0.0;
                }
                if piv != col {
                    for c in 0..n {
                        a.swap(col * n + c, piv * n + c);
                    }
                    det = -det;
                }
                let p = a[col * n + col];
                det *= p;
                for r in col + 1..n {
                    let f = a[r * n + col] / p;
                    if f != 0.0 {
                        for c in col + 1..n {
                            a[r * n + c] -= f * a[col * n + c];
                        }
                    }
                }
            }
            det
        }
    }
}

/// k-th compound matrix: entry `(I, J)` is the minor `det m[I, J]`.
pub fn compound_matrix(m: &DMatrix<f64>, k: usize) -> Vec<f64> {
    let n = m.nrows();
    let subsets: Vec<Vec<usize>> = MultiIndex::all(n, k).map(|i| i.indices()).collect();
    let size = subsets.len();
    let mut out = vec![0.0; size * size];
    let mut block = [0.0f64; MAX_DIM * MAX_DIM];
    for (a, rows) in subsets.iter().enumerate() {
        for (b, cols) in subsets.iter().enumerate() {
            for (p, &r) in rows.iter().enumerate() {
                for (q, &c) in cols.iter().enumerate() {
                    block[p * k + q] = m[(r, c)];
                }
            }
            out[a * size + b] = det_small(&mut block[..k * k], k);
        }
    }
    out
}

/// Symmetric bilinear form on `R^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTensor {
    m: DMatrix<f64>,
}

impl MetricTensor {
    pub const SYMMETRY_TOL: f64 = 1e-9;

    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        let scale = m.amax().max(1.0);
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > Self::SYMMETRY_TOL * scale {
                    return Err(Error::InvalidArgument(format!(
                        "metric is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { m })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            m: DMatrix::identity(n, n),
        }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        Self {
            m: DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d)),
        }
    }

    /// Build from the lower triangle listed row by row:
    /// `(0,0), (1,0), (1,1), (2,0), …`.
    pub fn from_lower_triangle(n: usize, values: &[f64]) -> Result<Self> {
        if values.len() != n * (n + 1) / 2 {
            return Err(Error::DimensionMismatch {
                expected: n * (n + 1) / 2,
                found: values.len(),
            });
        }
        let mut m = DMatrix::zeros(n, n);
        let mut it = values.iter();
        for i in 0..n {
            for j in 0..=i {
                let v = *it.next().unwrap();
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(Self { m })
    }

    pub fn lower_triangle(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                out.push(self.m[(i, j)]);
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn det(&self) -> f64 {
        self.m.determinant()
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        self.m
            .clone()
            .try_inverse()
            .ok_or(Error::SingularMetric { det: self.det() })
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.m.clone().symmetric_eigen().eigenvalues.iter().copied().collect()
    }

    pub fn is_positive_definite(&self) -> bool {
        self.m.clone().cholesky().is_some()
    }

    pub fn volume_density(&self) -> f64 {
        self.det().abs().sqrt()
    }
}

/// The model G2 3-form `φ₀ = e¹²³ + e¹⁴⁵ + e¹⁶⁷ + e²⁴⁶ − e²⁵⁷ − e³⁴⁷ − e³⁵⁶`
/// (indices written 1-based as is customary; stored 0-based).
pub fn phi0() -> AltForm {
    signed_sum(
        7,
        &[
            (1.0, [1, 2, 3]),
            (1.0, [1, 4, 5]),
            (1.0, [1, 6, 7]),
            (1.0, [2, 4, 6]),
            (-1.0, [2, 5, 7]),
            (-1.0, [3, 4, 7]),
            (-1.0, [3, 5, 6]),
        ],
    )
}

/// `ψ₀ = *φ₀ = e⁴⁵⁶⁷ + e²³⁶⁷ + e²³⁴⁵ + e¹³⁵⁷ − e¹³⁴⁶ − e¹²⁵⁶ − e¹²⁴⁷`.
pub fn psi0() -> AltForm {
    signed_sum(
        7,
        &[
            (1.0, [4, 5, 6, 7]),
            (1.0, [2, 3, 6, 7]),
            (1.0, [2, 3, 4, 5]),
            (1.0, [1, 3, 5, 7]),
            (-1.0, [1, 3, 4, 6]),
            (-1.0, [1, 2, 5, 6]),
            (-1.0, [1, 2, 4, 7]),
        ],
    )
}

fn signed_sum<const K: usize>(dim: usize, terms: &[(f64, [usize; K])]) -> AltForm {
    let mut out = AltForm::zero(dim, K);
    for (sign, one_based) in terms {
        let idx: Vec<usize> = one_based.iter().map(|i| i - 1).collect();
        let mi = MultiIndex::new(dim, &idx).expect("static multi-index");
        out.coeffs[mi.rank()] += sign;
    }
    out
}

/// Metric and volume density induced by a G2 3-form on `R^7`.
///
/// `B_ij` is read off from `(∂_i ⌟ φ) ∧ (∂_j ⌟ φ) ∧ φ = 6 B_ij e^{1…7}`;
/// then `√det g = (det B)^{1/9}` and `g = B / (det B)^{1/9}`. The sign is the
/// one for which `φ₀` (with the orientation `e^{1…7}`) has `B = I`; with the
/// opposite sign `det B` would be negative for every positive G2 form.
pub fn metric_from_3form(phi: &AltForm) -> Result<(MetricTensor, f64)> {
    if phi.dim() != 7 || phi.degree() != 3 {
        return Err(Error::InvalidDegree {
            degree: phi.degree(),
            dim: phi.dim(),
        });
    }
    let contracted: Vec<AltForm> = (0..7)
        .map(|i| phi.interior_basis(i))
        .collect::<Result<_>>()?;
    let with_phi: Vec<AltForm> = contracted
        .iter()
        .map(|c| c.wedge(phi))
        .collect::<Result<_>>()?;
    let mut b = DMatrix::zeros(7, 7);
    for i in 0..7 {
        for j in 0..=i {
            let top = contracted[i].wedge(&with_phi[j])?.top_coefficient()?;
            let v = top / 6.0;
            b[(i, j)] = v;
            b[(j, i)] = v;
        }
    }
    let det_b = b.determinant();
    if !(det_b > DEGENERACY_TOL) {
        return Err(Error::DegenerateForm { det_b });
    }
    let vol = det_b.powf(1.0 / 9.0);
    Ok((MetricTensor { m: b / vol }, vol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn e(dim: usize, idx: &[usize]) -> AltForm {
        AltForm::basis(dim, idx).unwrap()
    }

    #[test]
    fn lexicographic_enumeration() {
        let all: Vec<Vec<usize>> = MultiIndex::all(4, 2).map(|m| m.indices()).collect();
        assert_eq!(
            all,
            vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
        );
        for n in 0..=MAX_DIM {
            for k in 0..=n {
                assert_eq!(MultiIndex::all(n, k).count(), binomial(n, k));
                for (r, m) in MultiIndex::all(n, k).enumerate() {
                    assert_eq!(m.rank(), r);
                    assert_eq!(MultiIndex::from_rank(n, k, r), m);
                }
            }
        }
    }

    #[test]
    fn multi_index_rejects_unsorted() {
        assert!(MultiIndex::new(7, &[2, 1]).is_err());
        assert!(MultiIndex::new(7, &[1, 1]).is_err());
        assert!(MultiIndex::new(7, &[7]).is_err());
    }

    #[test]
    fn wedge_of_basis_one_forms() {
        let w = e(7, &[0]).wedge(&e(7, &[1])).unwrap();
        assert_eq!(w, e(7, &[0, 1]));
        let w = e(7, &[1]).wedge(&e(7, &[0])).unwrap();
        assert_eq!(w, &e(7, &[0, 1]) * -1.0);
        assert!(e(7, &[0]).wedge(&e(7, &[0])).unwrap().is_zero());
    }

    #[test]
    fn wedge_dimension_mismatch_errors() {
        assert!(e(7, &[0]).wedge(&e(6, &[0])).is_err());
    }

    #[test]
    fn wedge_past_top_degree_is_empty_zero() {
        let w = AltForm::volume(3).wedge(&e(3, &[0])).unwrap();
        assert_eq!(w.degree(), 4);
        assert!(w.coeffs().is_empty());
    }

    #[test]
    fn phi0_wedge_psi0_is_seven_vol() {
        let top = phi0().wedge(&psi0()).unwrap();
        assert_eq!(top.top_coefficient().unwrap(), 7.0);
    }

    #[test]
    fn interior_examples() {
        let a = e(7, &[0, 1]);
        let mut v = vec![0.0; 7];
        v[0] = 1.0;
        assert_eq!(a.interior(&v).unwrap(), e(7, &[1]));
        v[0] = 0.0;
        v[2] = 1.0;
        assert!(a.interior(&v).unwrap().is_zero());
        // e_1 ⌟ φ₀ = e²³ + e⁴⁵ + e⁶⁷, expanded by hand from the three e¹-terms.
        let expected = &(&e(7, &[1, 2]) + &e(7, &[3, 4])) + &e(7, &[5, 6]);
        assert_eq!(phi0().interior_basis(0).unwrap(), expected);
    }

    #[test]
    fn interior_of_scalar_errors() {
        assert!(AltForm::scalar(7, 1.0).interior(&[0.0; 7]).is_err());
    }

    #[test]
    fn hodge_star_examples() {
        assert_eq!(phi0().hodge_star_euclidean(), psi0());
        let star = phi0().hodge_star(&MetricTensor::identity(7)).unwrap();
        for (a, b) in star.coeffs().iter().zip(psi0().coeffs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(AltForm::scalar(7, 1.0).hodge_star_euclidean(), AltForm::volume(7));
        let mut d = vec![1.0; 7];
        d[0] = 4.0;
        let g = MetricTensor::diagonal(&d);
        let star = (&e(7, &[0]) * 3.0).hodge_star(&g).unwrap();
        let expected = e(7, &[1, 2, 3, 4, 5, 6]);
        for (a, b) in star.coeffs().iter().zip(expected.coeffs()) {
            assert_abs_diff_eq!(*a, 1.5 * b, epsilon = 1e-12);
        }
    }

    #[test]
    fn hodge_star_rejects_singular_metric() {
        let g = MetricTensor::diagonal(&[1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            phi0().hodge_star(&g),
            Err(Error::SingularMetric { .. })
        ));
    }

    #[test]
    fn norm_examples() {
        assert_abs_diff_eq!(phi0().norm(&MetricTensor::identity(7)).unwrap(), 7f64.sqrt(), epsilon = 1e-14);
        assert_eq!(AltForm::zero(7, 3).norm(&MetricTensor::identity(7)).unwrap(), 0.0);
        let mut d = vec![1.0; 7];
        d[0] = 4.0;
        assert_abs_diff_eq!(
            e(7, &[0]).norm(&MetricTensor::diagonal(&d)).unwrap(),
            0.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn metric_of_phi0_is_identity() {
        let (g, vol) = metric_from_3form(&phi0()).unwrap();
        assert_abs_diff_eq!(vol, 1.0, epsilon = 1e-12);
        let diff = g.matrix() - DMatrix::<f64>::identity(7, 7);
        assert!(diff.amax() < 1e-12);
    }

    #[test]
    fn metric_scales_conformally() {
        let lambda: f64 = 1.7;
        let (g, vol) = metric_from_3form(&(&phi0() * lambda.powi(3))).unwrap();
        let diff = g.matrix() - DMatrix::<f64>::identity(7, 7) * lambda * lambda;
        assert!(diff.amax() < 1e-12);
        assert_abs_diff_eq!(vol, lambda.powi(7), epsilon = 1e-10);
    }

    #[test]
    fn degenerate_forms_are_rejected() {
        assert!(matches!(
            metric_from_3form(&AltForm::zero(7, 3)),
            Err(Error::DegenerateForm { .. })
        ));
        // reversed orientation
        assert!(matches!(
            metric_from_3form(&(&phi0() * -1.0)),
            Err(Error::DegenerateForm { .. })
        ));
        assert!(metric_from_3form(&AltForm::zero(6, 3)).is_err());
    }

    #[test]
    fn pullback_of_one_form_is_transpose() {
        let jac = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let a = AltForm::one_form(&[1.0, -1.0, 2.0]);
        let pb = a.pullback(&jac).unwrap();
        assert_eq!(pb.coeffs(), &[1.0 - 3.0 + 10.0, 2.0 - 4.0 + 12.0]);
    }

    #[test]
    fn embed_reorders_with_sign() {
        let a = e(2, &[0, 1]);
        let emb = a.embed(4, &[3, 1]).unwrap();
        assert_eq!(emb, &e(4, &[1, 3]) * -1.0);
    }

    #[test]
    fn lower_triangle_roundtrip() {
        let vals: Vec<f64> = (0..28).map(|i| i as f64).collect();
        let g = MetricTensor::from_lower_triangle(7, &vals).unwrap();
        assert_eq!(g.lower_triangle(), vals);
        assert_eq!(g.matrix()[(1, 0)], 1.0);
        assert_eq!(g.matrix()[(0, 1)], 1.0);
    }
}
