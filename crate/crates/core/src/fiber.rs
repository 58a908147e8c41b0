//! A single fiber π^λ realized on the truncated Hermite basis of L²(R^d).
//!
//! Conventions: π^λ(P_j) = √|λ| ∂_{ξ_j}, π^λ(Q_j) = i√|λ| ξ_j, π^λ(Z_k) = iλ_k,
//! H(λ) = −Σ_j (π(P_j)² + π(Q_j)²), and π^λ_x Φ(ξ) = e^{iλ(z) + i|λ|p·q/2 + i√|λ| ξ·q} Φ(ξ + √|λ| p)
//! with (p, q) the adapted coordinates of v.

use std::collections::HashMap;
use std::f64::consts::PI;

use base64::Engine;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::htype::{AdaptedFrame, GroupPoint, GroupStructure};
use crate::{Complex64, Error, Result, I};

pub type CMat = DMatrix<Complex64>;

/// Multi-indices α ∈ N^d with |α| ≤ A, graded by |α|, lexicographically decreasing within a degree.
#[derive(Clone, Debug)]
pub struct HermiteFrame {
    pub d: usize,
    pub a: usize,
    index: Vec<Vec<usize>>,
    lookup: HashMap<Vec<usize>, usize>,
    band_start: Vec<usize>,
}

fn binom(n: usize, k: usize) -> usize {
    let k = k.min(n - k.min(n));
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

fn push_degree(d: usize, m: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() == d - 1 {
        let mut alpha = prefix.clone();
        alpha.push(m);
        out.push(alpha);
        return;
    }
    for first in (0..=m).rev() {
        prefix.push(first);
        push_degree(d, m - first, prefix, out);
        prefix.pop();
    }
}

impl HermiteFrame {
    pub fn new(d: usize, a: usize) -> Self {
        assert!(d >= 1, "HermiteFrame needs d ≥ 1");
        let mut index = Vec::new();
        let mut band_start = Vec::with_capacity(a + 2);
        for m in 0..=a {
            band_start.push(index.len());
            push_degree(d, m, &mut Vec::new(), &mut index);
        }
        band_start.push(index.len());
        let lookup = index.iter().enumerate().map(|(i, al)| (al.clone(), i)).collect();
        HermiteFrame { d, a, index, lookup, band_start }
    }

    /// N = C(A+d, d).
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn alpha(&self, i: usize) -> &[usize] {
        &self.index[i]
    }

    pub fn index_of(&self, alpha: &[usize]) -> Option<usize> {
        self.lookup.get(alpha).copied()
    }

    /// |α| of basis element i.
    pub fn degree(&self, i: usize) -> usize {
        self.index[i].iter().sum()
    }

    /// Index range of the band |α| = n.
    pub fn band(&self, n: usize) -> std::ops::Range<usize> {
        if n > self.a {
            return self.len()..self.len();
        }
        self.band_start[n]..self.band_start[n + 1]
    }

    /// Number of indices with |α| ≤ m.
    pub fn count_upto(&self, m: usize) -> usize {
        self.band_start[(m + 1).min(self.a + 1)]
    }

    pub fn band_rank(d: usize, n: usize) -> usize {
        binom(n + d - 1, d - 1)
    }

    pub fn expected_len(d: usize, a: usize) -> usize {
        binom(a + d, d)
    }
}

/// A matrix on the truncated Hermite basis attached to a nonzero λ.
#[derive(Clone, Debug)]
pub struct FiberOperator {
    pub lambda: Vec<f64>,
    pub d: usize,
    pub a: usize,
    pub mat: CMat,
}

#[derive(Serialize, Deserialize)]
struct Dump {
    lambda: Vec<f64>,
    d: usize,
    #[serde(rename = "A")]
    a: usize,
    n: usize,
    encoding: String,
    data: String,
}

impl FiberOperator {
    pub fn new(lambda: &[f64], frame: &HermiteFrame, mat: CMat) -> Self {
        FiberOperator { lambda: lambda.to_vec(), d: frame.d, a: frame.a, mat }
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        (&self.mat - self.mat.adjoint()).camax() <= tol
    }

    /// JSON header plus base64 of row-major little-endian (re, im) f64 pairs.
    pub fn to_dump(&self) -> String {
        let n = self.mat.nrows();
        let mut bytes = Vec::with_capacity(16 * n * n);
        for i in 0..n {
            for j in 0..n {
                let c = self.mat[(i, j)];
                bytes.extend_from_slice(&c.re.to_le_bytes());
                bytes.extend_from_slice(&c.im.to_le_bytes());
            }
        }
        let dump = Dump {
            lambda: self.lambda.clone(),
            d: self.d,
            a: self.a,
            n,
            encoding: "base64-f64le-rowmajor-complex".into(),
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        };
        serde_json::to_string(&dump).expect("dump serializes")
    }

    pub fn from_dump(s: &str) -> Result<Self> {
        let dump: Dump = serde_json::from_str(s)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(dump.data.as_bytes())
            .map_err(|e| Error::Config(format!("bad base64 payload: {e}")))?;
        let n = dump.n;
        if bytes.len() != 16 * n * n || n != HermiteFrame::expected_len(dump.d, dump.a) {
            return Err(Error::Dimension("dump payload does not match header".into()));
        }
        let f = |k: usize| f64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap());
        let mat = CMat::from_fn(n, n, |i, j| Complex64::new(f(2 * (i * n + j)), f(2 * (i * n + j) + 1)));
        Ok(FiberOperator { lambda: dump.lambda, d: dump.d, a: dump.a, mat })
    }
}

pub(crate) fn lambda_norm(lambda: &[f64]) -> Result<f64> {
    let n = lambda.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Domain("fiber operators need λ ≠ 0".into()));
    }
    Ok(n)
}

/// Hermite function h_n(ξ) by the normalized three-term recurrence.
pub fn hermite_eval(n: usize, xi: f64) -> Result<f64> {
    if n > 200 {
        return Err(Error::Domain(format!("hermite order {n} above stability guard 200")));
    }
    Ok(hermite_all(n, xi)[n])
}

/// h_0(ξ), …, h_n(ξ).
pub fn hermite_all(n: usize, xi: f64) -> Vec<f64> {
    let mut h = Vec::with_capacity(n + 1);
    h.push(PI.powf(-0.25) * (-0.5 * xi * xi).exp());
    if n >= 1 {
        h.push(2f64.sqrt() * xi * h[0]);
    }
    for k in 1..n {
        let next = (2.0 / (k as f64 + 1.0)).sqrt() * xi * h[k] - (k as f64 / (k as f64 + 1.0)).sqrt() * h[k - 1];
        h.push(next);
    }
    h
}

/// Gauss–Hermite nodes with modified weights W_i = w_i e^{x_i²} = 1/(n h_{n−1}(x_i)²),
/// so that ∫F ≈ Σ W_i F(x_i) for F = e^{−x²}·polynomial.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let jac = DMatrix::<f64>::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = jac.symmetric_eigen().eigenvalues.iter().cloned().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut weights = Vec::with_capacity(n);
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let h = hermite_all(n, *x);
            let dh = (2.0 * n as f64).sqrt() * h[n - 1] - *x * h[n];
            if dh != 0.0 {
                *x -= h[n] / dh;
            }
        }
        let h = hermite_all(n, *x);
        weights.push(1.0 / (n as f64 * h[n - 1] * h[n - 1]));
    }
    (nodes, weights)
}

/// Diagonal |λ|(2|α|+d).
pub fn hamiltonian(lambda: &[f64], frame: &HermiteFrame) -> Result<FiberOperator> {
    spectral_function(&SpectralFn::Identity, lambda, frame)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ladder {
    Raise,
    Lower,
}

/// π^λ(R_j) (lower) or π^λ(R̄_j) (raise); j is 0-based.
pub fn ladder(lambda: &[f64], frame: &HermiteFrame, j: usize, kind: Ladder) -> Result<FiberOperator> {
    let ln = lambda_norm(lambda)?;
    if j >= frame.d {
        return Err(Error::Domain(format!("ladder index {j} out of range 0..{}", frame.d)));
    }
    let n = frame.len();
    let mut m = CMat::zeros(n, n);
    for col in 0..n {
        let alpha = frame.alpha(col);
        let aj = alpha[j] as f64;
        match kind {
            Ladder::Lower => {
                if alpha[j] > 0 {
                    let mut t = alpha.to_vec();
                    t[j] -= 1;
                    let row = frame.index_of(&t).expect("lower stays in frame");
                    m[(row, col)] = Complex64::new((ln * aj / 2.0).sqrt(), 0.0);
                }
            }
            Ladder::Raise => {
                let mut t = alpha.to_vec();
                t[j] += 1;
                if let Some(row) = frame.index_of(&t) {
                    m[(row, col)] = Complex64::new(-(ln * (aj + 1.0) / 2.0).sqrt(), 0.0);
                }
            }
        }
    }
    Ok(FiberOperator::new(lambda, frame, m))
}

/// Left-invariant field selector in the λ-adapted frame (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Field {
    P(usize),
    Q(usize),
    Z(usize),
}

pub fn vector_field_rep(lambda: &[f64], frame: &HermiteFrame, which: Field) -> Result<FiberOperator> {
    lambda_norm(lambda)?;
    let n = frame.len();
    let mat = match which {
        Field::P(j) => {
            let r = ladder(lambda, frame, j, Ladder::Lower)?.mat;
            let rb = ladder(lambda, frame, j, Ladder::Raise)?.mat;
            r + rb
        }
        Field::Q(j) => {
            let r = ladder(lambda, frame, j, Ladder::Lower)?.mat;
            let rb = ladder(lambda, frame, j, Ladder::Raise)?.mat;
            (r - rb) * I
        }
        Field::Z(k) => {
            if k >= lambda.len() {
                return Err(Error::Domain(format!("central index {k} out of range")));
            }
            CMat::identity(n, n) * Complex64::new(0.0, lambda[k])
        }
    };
    Ok(FiberOperator::new(lambda, frame, mat))
}

/// π^λ(V_i) for the fixed-basis field V_i, i ∈ 0..2d: Σ_c R_{ic} π^λ(X_c).
pub fn fixed_field_rep(lambda: &[f64], frame: &HermiteFrame, adapted: &AdaptedFrame, i: usize) -> Result<FiberOperator> {
    let d = frame.d;
    let n = frame.len();
    let mut mat = CMat::zeros(n, n);
    for c in 0..2 * d {
        let coef = adapted.r[i * 2 * d + c];
        if coef == 0.0 {
            continue;
        }
        let f = if c < d { Field::P(c) } else { Field::Q(c - d) };
        mat += vector_field_rep(lambda, frame, f)?.mat * Complex64::new(coef, 0.0);
    }
    Ok(FiberOperator::new(lambda, frame, mat))
}

/// Orthogonal projector onto band n.
pub fn projector(n: usize, lambda: &[f64], frame: &HermiteFrame) -> Result<FiberOperator> {
    lambda_norm(lambda)?;
    if n > frame.a {
        return Err(Error::Domain(format!("band {n} beyond cutoff {}", frame.a)));
    }
    let dim = frame.len();
    let mut m = CMat::zeros(dim, dim);
    for i in frame.band(n) {
        m[(i, i)] = Complex64::new(1.0, 0.0);
    }
    Ok(FiberOperator::new(lambda, frame, m))
}

/// Riesz projector (2πi)⁻¹∮ (z − |λ|⁻¹H)⁻¹ dz over the circle |z − (2n+d)| = ρ, trapezoid rule.
pub fn projector_contour(n: usize, lambda: &[f64], frame: &HermiteFrame, quad_nodes: usize, rho: f64) -> Result<FiberOperator> {
    let ln = lambda_norm(lambda)?;
    if n > frame.a {
        return Err(Error::Domain(format!("band {n} beyond cutoff {}", frame.a)));
    }
    if !(rho > 0.0 && rho < 2.0) {
        return Err(Error::Domain(format!("contour radius must lie in (0,2), got {rho}")));
    }
    if quad_nodes < 16 {
        return Err(Error::Domain("contour quadrature needs at least 16 nodes".into()));
    }
    let dim = frame.len();
    let a = hamiltonian(lambda, frame)?.mat / Complex64::new(ln, 0.0);
    let center = (2 * n + frame.d) as f64;
    let mut acc = CMat::zeros(dim, dim);
    for k in 0..quad_nodes {
        let w = Complex64::from_polar(rho, 2.0 * PI * k as f64 / quad_nodes as f64);
        let z = Complex64::new(center, 0.0) + w;
        let shifted = CMat::identity(dim, dim) * z - &a;
        let inv = shifted
            .try_inverse()
            .ok_or_else(|| Error::Quadrature(format!("resolvent singular at node {k} (z = {z})")))?;
        acc += inv * w;
    }
    acc /= Complex64::new(quad_nodes as f64, 0.0);
    Ok(FiberOperator::new(lambda, frame, acc))
}

/// Scalar functions applied to the spectrum of H(λ).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SpectralFn {
    One,
    Identity,
    /// ψ(u·x) with ψ = 0 on (−∞, ½], 1 on [1, ∞), smooth in between.
    SmoothCutoff { u: f64 },
    /// e^{−i c x}
    Phase { c: f64 },
    /// 1_{x > threshold}
    Above { threshold: f64 },
    /// 1_{x < threshold}
    Below { threshold: f64 },
    Power { k: i32 },
}

/// Smooth step: 0 on (−∞, ½], 1 on [1, ∞).
pub fn smooth_step(s: f64) -> f64 {
    let h = |t: f64| if t > 0.0 { (-1.0 / t).exp() } else { 0.0 };
    let a = h(2.0 * s - 1.0);
    let b = h(2.0 - 2.0 * s);
    if a + b == 0.0 {
        0.0
    } else {
        a / (a + b)
    }
}

impl SpectralFn {
    pub fn eval(&self, x: f64) -> Result<Complex64> {
        let v = match *self {
            SpectralFn::One => Complex64::new(1.0, 0.0),
            SpectralFn::Identity => Complex64::new(x, 0.0),
            SpectralFn::SmoothCutoff { u } => Complex64::new(smooth_step(u * x), 0.0),
            SpectralFn::Phase { c } => Complex64::from_polar(1.0, -c * x),
            SpectralFn::Above { threshold } => Complex64::new(if x > threshold { 1.0 } else { 0.0 }, 0.0),
            SpectralFn::Below { threshold } => Complex64::new(if x < threshold { 1.0 } else { 0.0 }, 0.0),
            SpectralFn::Power { k } => Complex64::new(x.powi(k), 0.0),
        };
        if !(v.re.is_finite() && v.im.is_finite()) {
            return Err(Error::Domain(format!("{self:?} undefined at spectral point {x}")));
        }
        Ok(v)
    }
}

/// Diagonal f(|λ|(2|α|+d)).
pub fn spectral_function(f: &SpectralFn, lambda: &[f64], frame: &HermiteFrame) -> Result<FiberOperator> {
    let ln = lambda_norm(lambda)?;
    let n = frame.len();
    let mut m = CMat::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = f.eval(ln * (2 * frame.degree(i) + frame.d) as f64)?;
    }
    Ok(FiberOperator::new(lambda, frame, m))
}

/// ⟨h_m, π h_n⟩ for the one-dimensional factor π = exp(ibξ + a∂), as a row-major
/// (nmax+1)² table. π is the displacement D(α), α = (−a + ib)/√2, and for m = n + k
/// D_{mn} = √(n!/m!) α^k e^{−|α|²/2} L_n^{(k)}(|α|²), D_{nm} = √(n!/m!) (−ᾱ)^k e^{−|α|²/2} L_n^{(k)}(|α|²).
/// The Laguerre recurrence in n stays accurate where the ladder recurrence in m drifts.
pub fn displacement_1d(a: f64, b: f64, nmax: usize) -> Vec<Complex64> {
    let s = nmax + 1;
    let alpha = Complex64::new(-a, b) / 2f64.sqrt();
    let x = alpha.norm_sqr();
    let mut t = vec![Complex64::new(0.0, 0.0); s * s];
    let mut apow = Complex64::new(1.0, 0.0);
    let mut mpow = Complex64::new(1.0, 0.0);
    let mut pre0 = (-0.5 * x).exp();
    for k in 0..s {
        let kf = k as f64;
        let (mut l0, mut l1) = (1.0, 1.0 + kf - x);
        let mut pre = pre0;
        for n in 0..s - k {
            let l = match n {
                0 => 1.0,
                1 => l1,
                _ => {
                    let m = (n - 1) as f64;
                    let l2 = ((2.0 * m + 1.0 + kf - x) * l1 - (m + kf) * l0) / (m + 1.0);
                    l0 = l1;
                    l1 = l2;
                    l2
                }
            };
            if n > 0 {
                pre *= (n as f64 / (n + k) as f64).sqrt();
            }
            t[(n + k) * s + n] = apow * (pre * l);
            t[n * s + n + k] = mpow * (pre * l);
        }
        apow *= alpha;
        mpow *= -alpha.conj();
        pre0 /= (kf + 1.0).sqrt();
    }
    t
}

/// One-dimensional factor of the matrix coefficient by Gauss–Hermite quadrature
/// of ∫ e^{ibη} h_m(η − a/2) h_n(η + a/2) dη.
pub fn displacement_1d_quadrature(a: f64, b: f64, nmax: usize, nodes: usize) -> Vec<Complex64> {
    quadrature_table(a, b, nmax + 1, nmax + 1, nodes)
}

/// rows × cols table (row-major) of the quadrature above.
fn quadrature_table(a: f64, b: f64, rows: usize, cols: usize, nodes: usize) -> Vec<Complex64> {
    let (x, w) = gauss_hermite(nodes);
    let mut t = vec![Complex64::new(0.0, 0.0); rows * cols];
    for (xi, wi) in x.iter().zip(&w) {
        let hm = hermite_all(rows - 1, xi - a / 2.0);
        let hp = hermite_all(cols - 1, xi + a / 2.0);
        let ph = Complex64::from_polar(*wi, b * xi);
        for m in 0..rows {
            let pm = ph * hm[m];
            for n in 0..cols {
                t[m * cols + n] += pm * hp[n];
            }
        }
    }
    t
}

/// Matrix of π^λ_x on the frame from the exact displacement recurrence;
/// `pq` are adapted coordinates of v, `z` the central coordinates.
pub fn rep_matrix_adapted(lambda: &[f64], frame: &HermiteFrame, p: &[f64], q: &[f64], z: &[f64]) -> Result<CMat> {
    let ln = lambda_norm(lambda)?;
    let s = ln.sqrt();
    let tables: Vec<Vec<Complex64>> = (0..frame.d).map(|j| displacement_1d(s * p[j], s * q[j], frame.a)).collect();
    let phase = Complex64::from_polar(1.0, lambda.iter().zip(z).map(|(l, zz)| l * zz).sum());
    Ok(assemble_product(frame, &tables, phase))
}

pub(crate) fn assemble_product(frame: &HermiteFrame, tables: &[Vec<Complex64>], phase: Complex64) -> CMat {
    let n = frame.len();
    let s = frame.a + 1;
    CMat::from_fn(n, n, |r, c| {
        let ar = frame.alpha(r);
        let ac = frame.alpha(c);
        let mut v = phase;
        for j in 0..frame.d {
            v *= tables[j][ar[j] * s + ac[j]];
        }
        v
    })
}

/// π^λ_x for x in fixed coordinates.
pub fn rep_matrix(g: &GroupStructure, lambda: &[f64], frame: &HermiteFrame, x: &GroupPoint) -> Result<CMat> {
    let af = g.adapted_frame(lambda)?;
    let (p, q) = af.coords(&x.v);
    rep_matrix_adapted(lambda, frame, &p, &q, &x.z)
}

#[derive(Clone, Debug)]
pub struct MatrixCoefficient {
    pub mat: CMat,
    pub nodes: usize,
    /// max |G − I| over the Gram matrix of all frame columns, rows extended past A.
    pub unitarity_residual: f64,
    pub flagged: bool,
}

/// ⟨π^λ_x h_β, h_α⟩ by Gauss–Hermite quadrature of the defining integral.
///
/// Starts at 4A nodes and doubles until the column Gram matrix is within 1e−8 of
/// the identity (cap 64A). The Gram check uses rows extended well beyond A so it
/// measures the quadrature, not the truncation; it factorizes over coordinates.
pub fn matrix_coefficient(lambda: &[f64], frame: &HermiteFrame, p: &[f64], q: &[f64], z: &[f64]) -> Result<MatrixCoefficient> {
    let ln = lambda_norm(lambda)?;
    let s = ln.sqrt();
    let phase = Complex64::from_polar(1.0, lambda.iter().zip(z).map(|(l, zz)| l * zz).sum());
    let cols = frame.a + 1;
    let ext: Vec<usize> = (0..frame.d)
        .map(|j| {
            let x = 0.5 * s * s * (p[j] * p[j] + q[j] * q[j]);
            (2 * frame.a + (4.0 * x).ceil() as usize + 40).min(200) + 1
        })
        .collect();
    let mut nodes = (4 * frame.a).max(16);
    let cap = (64 * frame.a).max(256);
    loop {
        let tables: Vec<Vec<Complex64>> =
            (0..frame.d).map(|j| quadrature_table(s * p[j], s * q[j], ext[j], cols, nodes)).collect();
        let grams: Vec<Vec<Complex64>> = tables
            .iter()
            .zip(&ext)
            .map(|(t, &rows)| {
                let mut g = vec![Complex64::new(0.0, 0.0); cols * cols];
                for m in 0..rows {
                    for i in 0..cols {
                        let ci = t[m * cols + i].conj();
                        for k in 0..cols {
                            g[i * cols + k] += ci * t[m * cols + k];
                        }
                    }
                }
                g
            })
            .collect();
        let n = frame.len();
        let mut residual: f64 = 0.0;
        for r in 0..n {
            for c in 0..n {
                let (ar, ac) = (frame.alpha(r), frame.alpha(c));
                let mut v = Complex64::new(1.0, 0.0);
                for j in 0..frame.d {
                    v *= grams[j][ar[j] * cols + ac[j]];
                }
                if r == c {
                    v -= 1.0;
                }
                residual = residual.max(v.norm());
            }
        }
        if residual <= 1e-8 || nodes >= cap {
            let square: Vec<Vec<Complex64>> = tables.iter().map(|t| t[..cols * cols].to_vec()).collect();
            let mat = assemble_product(frame, &square, phase);
            return Ok(MatrixCoefficient { mat, nodes, unitarity_residual: residual, flagged: residual > 1e-6 });
        }
        nodes *= 2;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ResidualReport {
    /// Restricted to |α| ≤ A − 2 (rows and columns).
    pub interior: f64,
    pub full: f64,
}

fn block_residual(frame: &HermiteFrame, diff: &CMat, guard: usize) -> ResidualReport {
    let k = frame.count_upto(frame.a.saturating_sub(guard));
    ResidualReport { interior: diff.view((0, 0), (k, k)).camax(), full: diff.camax() }
}

/// [π(Δ_G), π(P_j)] + 2|λ|⁻¹ π(Z^(λ)) π(Q_j) and [π(Δ_G), π(Q_j)] − 2|λ|⁻¹ π(Z^(λ)) π(P_j), π(Δ_G) = −H.
pub fn bracket_identity_check(lambda: &[f64], frame: &HermiteFrame) -> Result<ResidualReport> {
    let ln = lambda_norm(lambda)?;
    if frame.a < 4 {
        return Err(Error::Domain("bracket check needs cutoff A ≥ 4".into()));
    }
    let delta = -hamiltonian(lambda, frame)?.mat;
    let zl = Complex64::new(0.0, ln * ln);
    let mut interior: f64 = 0.0;
    let mut full: f64 = 0.0;
    for j in 0..frame.d {
        let p = vector_field_rep(lambda, frame, Field::P(j))?.mat;
        let q = vector_field_rep(lambda, frame, Field::Q(j))?.mat;
        let lhs1 = &delta * &p - &p * &delta;
        let rhs1 = &q * (zl * (-2.0 / ln));
        let lhs2 = &delta * &q - &q * &delta;
        let rhs2 = &p * (zl * (2.0 / ln));
        for diff in [lhs1 - rhs1, lhs2 - rhs2] {
            let r = block_residual(frame, &diff, 2);
            interior = interior.max(r.interior);
            full = full.max(r.full);
        }
    }
    Ok(ResidualReport { interior, full })
}

/// Checks Π_n T Π_n = (|λ|/2)(|λ|⁻¹ Z^(λ)(2n+d) + iΔ_G) Π_n with
/// T = (Σ_j V_j π(V_j))(Σ_j P_j π(Q_j) − Q_j π(P_j)).
///
/// The x-field factor is represented by a second copy of π^λ acting on the left
/// tensor slot, so both sides are matrices on H_λ ⊗ H_λ; the left slot is guarded
/// (|α| ≤ A − 2). `scale` multiplies T and the right side (0 gives the degenerate control).
pub fn band_t_identity_check(lambda: &[f64], frame: &HermiteFrame, n: usize, scale: f64) -> Result<f64> {
    let ln = lambda_norm(lambda)?;
    if n + 2 > frame.a {
        return Err(Error::Domain(format!("band {n} beyond guard (A − 2 = {})", frame.a as i64 - 2)));
    }
    let d = frame.d;
    let dim = frame.len();
    let id = CMat::identity(dim, dim);
    let ps: Vec<CMat> = (0..d).map(|j| vector_field_rep(lambda, frame, Field::P(j)).map(|f| f.mat)).collect::<Result<_>>()?;
    let qs: Vec<CMat> = (0..d).map(|j| vector_field_rep(lambda, frame, Field::Q(j)).map(|f| f.mat)).collect::<Result<_>>()?;
    let big = dim * dim;
    let mut first = CMat::zeros(big, big);
    let mut second = CMat::zeros(big, big);
    for j in 0..d {
        first += ps[j].kronecker(&ps[j]) + qs[j].kronecker(&qs[j]);
        second += ps[j].kronecker(&qs[j]) - qs[j].kronecker(&ps[j]);
    }
    // Π_n is a coordinate projector, so Π T Π lives on the rows/columns S with right slot in band n
    let band: Vec<usize> = frame.band(n).collect();
    let sel: Vec<usize> = (0..dim).flat_map(|r1| band.iter().map(move |&r2| r1 * dim + r2)).collect();
    let lhs = first.select_rows(&sel) * second.select_columns(&sel) * Complex64::new(scale, 0.0);
    // ρ(Z^(λ)) = i|λ|², ρ(Δ_G) = −H(λ) on the left slot
    let h = hamiltonian(lambda, frame)?.mat;
    let left = (id * Complex64::new(0.0, ln * (2 * n + d) as f64) - h * I) * Complex64::new(scale * ln / 2.0, 0.0);
    let k = frame.count_upto(frame.a - 2);
    let nb = band.len();
    let mut worst: f64 = 0.0;
    for r1 in 0..k {
        for c1 in 0..k {
            for i2 in 0..nb {
                for j2 in 0..nb {
                    let want = if i2 == j2 { left[(r1, c1)] } else { Complex64::new(0.0, 0.0) };
                    worst = worst.max((lhs[(r1 * nb + i2, c1 * nb + j2)] - want).norm());
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn comm(a: &CMat, b: &CMat) -> CMat {
        a * b - b * a
    }

    #[test]
    fn frame_enumeration() {
        let f = HermiteFrame::new(1, 5);
        assert_eq!(f.len(), 6);
        assert_eq!(f.alpha(3), &[3]);
        let f = HermiteFrame::new(2, 4);
        assert_eq!(f.len(), HermiteFrame::expected_len(2, 4));
        assert_eq!(f.len(), 15);
        let mut last = 0;
        for i in 0..f.len() {
            assert!(f.degree(i) >= last);
            last = f.degree(i);
            assert_eq!(f.index_of(f.alpha(i)), Some(i));
        }
        for n in 0..=4 {
            assert_eq!(f.band(n).len(), HermiteFrame::band_rank(2, n));
        }
        let f = HermiteFrame::new(3, 3);
        assert_eq!(f.len(), 20);
    }

    #[test]
    fn hermite_values() {
        assert!((hermite_eval(0, 0.0).unwrap() - 0.7511255444649425).abs() < 1e-15);
        assert_eq!(hermite_eval(1, 0.0).unwrap(), 0.0);
        assert!(hermite_eval(201, 0.0).is_err());
        // h_2(ξ) = (2ξ² − 1) π^{−1/4} e^{−ξ²/2} / √2
        let x: f64 = 0.7;
        let want = (2.0 * x * x - 1.0) * PI.powf(-0.25) * (-x * x / 2.0).exp() / 2f64.sqrt();
        assert!((hermite_eval(2, x).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn hermite_orthonormal_by_quadrature() {
        let (x, w) = gauss_hermite(128);
        let total: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * (-xi * xi).exp()).sum();
        assert!((total - PI.sqrt()).abs() < 1e-12);
        let hs: Vec<Vec<f64>> = x.iter().map(|xi| hermite_all(20, *xi)).collect();
        for m in 0..=20 {
            for n in 0..=20 {
                let s: f64 = hs.iter().zip(&w).map(|(h, wi)| wi * h[m] * h[n]).sum();
                let want = if m == n { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-10, "({m},{n}) {s}");
            }
        }
    }

    #[test]
    fn hamiltonian_examples() {
        let f = HermiteFrame::new(1, 6);
        let h = hamiltonian(&[1.0], &f).unwrap();
        for i in 0..4 {
            assert_eq!(h.mat[(i, i)].re, (2 * i + 1) as f64);
        }
        let f2 = HermiteFrame::new(2, 3);
        let h = hamiltonian(&[0.0, 2.0, 0.0], &f2).unwrap();
        assert_eq!(h.mat[(0, 0)].re, 4.0);
        assert!(hamiltonian(&[0.0], &f).is_err());
        assert!(h.is_hermitian(1e-12));
    }

    #[test]
    fn hamiltonian_from_ladders() {
        for (d, a, lam) in [(1usize, 16usize, vec![1.3]), (2, 8, vec![0.4, -0.7, 0.2])] {
            let f = HermiteFrame::new(d, a);
            let mut acc = CMat::zeros(f.len(), f.len());
            for j in 0..d {
                let p = vector_field_rep(&lam, &f, Field::P(j)).unwrap().mat;
                let q = vector_field_rep(&lam, &f, Field::Q(j)).unwrap().mat;
                acc -= &p * &p + &q * &q;
            }
            let h = hamiltonian(&lam, &f).unwrap().mat;
            let k = f.count_upto(a - 2);
            let diff = (acc - h).view((0, 0), (k, k)).camax();
            assert!(diff < 1e-10, "{diff}");
        }
    }

    #[test]
    fn ladder_examples() {
        let f = HermiteFrame::new(1, 8);
        let lo = ladder(&[1.0], &f, 0, Ladder::Lower).unwrap().mat;
        assert!(lo.column(0).camax() == 0.0);
        assert!((lo[(0, 1)].re - 0.5f64.sqrt()).abs() < 1e-15);
        let ra = ladder(&[1.0], &f, 0, Ladder::Raise).unwrap().mat;
        let prod = &lo * &ra;
        for al in 0..7 {
            assert!((prod[(al, al)].re + 0.5 * (al as f64 + 1.0)).abs() < 1e-12);
        }
        let pb = &ra * &lo;
        for al in 0..8 {
            assert!((pb[(al, al)].re + 0.5 * al as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn ladder_band_shift() {
        let f = HermiteFrame::new(2, 6);
        let lam = [1.7];
        for n in 0..5 {
            let pn = projector(n, &lam, &f).unwrap().mat;
            let pn1 = projector(n + 1, &lam, &f).unwrap().mat;
            for j in 0..2 {
                let r = ladder(&lam, &f, j, Ladder::Raise).unwrap().mat;
                assert!((&pn1 * &r * &pn - &r * &pn).camax() < 1e-14);
                let l = ladder(&lam, &f, j, Ladder::Lower).unwrap().mat;
                assert!((&pn * &l * &pn1 - &l * &pn1).camax() < 1e-14);
            }
        }
    }

    #[test]
    fn vector_field_examples() {
        let f = HermiteFrame::new(1, 12);
        let z = vector_field_rep(&[1.0], &f, Field::Z(0)).unwrap().mat;
        assert!((z - CMat::identity(13, 13) * I).camax() < 1e-15);
        let g = HermiteFrame::new(2, 4);
        let lam = [0.6, -0.8, 1.2];
        let mut zl = CMat::zeros(g.len(), g.len());
        for k in 0..3 {
            zl += vector_field_rep(&lam, &g, Field::Z(k)).unwrap().mat * Complex64::new(lam[k], 0.0);
        }
        let l2: f64 = lam.iter().map(|x| x * x).sum();
        assert!((zl - CMat::identity(g.len(), g.len()) * Complex64::new(0.0, l2)).camax() < 1e-14);
        for lam in [[2.5], [-0.3]] {
            let p = vector_field_rep(&lam, &f, Field::P(0)).unwrap().mat;
            let q = vector_field_rep(&lam, &f, Field::Q(0)).unwrap().mat;
            let c = comm(&p, &q);
            let k = f.count_upto(f.a - 1);
            let target = CMat::identity(k, k) * Complex64::new(0.0, lam[0].abs());
            assert!((c.view((0, 0), (k, k)) - target).camax() < 1e-12);
            assert!((&p + p.adjoint()).view((0, 0), (k, k)).camax() < 1e-12);
            assert!((&q + q.adjoint()).view((0, 0), (k, k)).camax() < 1e-12);
        }
        assert!(vector_field_rep(&[1.0], &f, Field::Z(1)).is_err());
    }

    #[test]
    fn field_scaling() {
        let f = HermiteFrame::new(1, 10);
        let p1 = vector_field_rep(&[0.7], &f, Field::P(0)).unwrap().mat;
        let p4 = vector_field_rep(&[2.8], &f, Field::P(0)).unwrap().mat;
        assert!((p4 - p1 * Complex64::new(2.0, 0.0)).camax() < 1e-13);
    }

    #[test]
    fn projector_examples() {
        let f = HermiteFrame::new(1, 10);
        for n in 0..=10 {
            let p = projector(n, &[1.0], &f).unwrap().mat;
            assert_eq!(p.diagonal().iter().filter(|c| c.re == 1.0).count(), 1);
        }
        let g = HermiteFrame::new(2, 5);
        let mut sum = CMat::zeros(g.len(), g.len());
        for n in 0..=5 {
            let pn = projector(n, &[0.5], &g).unwrap().mat;
            assert!((&pn * &pn - &pn).camax() == 0.0);
            for m in 0..=5 {
                if m != n {
                    let pm = projector(m, &[0.5], &g).unwrap().mat;
                    assert!((&pn * &pm).camax() == 0.0);
                }
            }
            sum += pn;
        }
        assert_eq!(sum, CMat::identity(g.len(), g.len()));
        assert!(projector(6, &[0.5], &g).is_err());
        let h = hamiltonian(&[0.5], &g).unwrap().mat;
        let p2 = projector(2, &[0.5], &g).unwrap().mat;
        assert!((&p2 * &h * &p2 - &p2 * Complex64::new(0.5 * 6.0, 0.0)).camax() < 1e-14);
        assert!(comm(&h, &p2).camax() == 0.0);
    }

    #[test]
    fn contour_projector_examples() {
        let f = HermiteFrame::new(1, 8);
        let c = projector_contour(0, &[1.0], &f, 64, 1.0).unwrap().mat;
        let p = projector(0, &[1.0], &f).unwrap().mat;
        assert!((c - p).camax() < 1e-8);
        let g = HermiteFrame::new(2, 4);
        let c = projector_contour(2, &[0.5], &g, 64, 1.0).unwrap().mat;
        let rank = c.diagonal().iter().filter(|z| (z.re - 1.0).abs() < 1e-8).count();
        assert_eq!(rank, 3);
        assert!(projector_contour(0, &[1.0], &f, 64, 2.0).is_err());
        assert!(projector_contour(0, &[1.0], &f, 8, 1.0).is_err());
    }

    #[test]
    fn contour_radius_sweep() {
        // trapezoid error for a neighbour at distance 2 is r^K/(1−r^K), r = ρ/2
        let f = HermiteFrame::new(1, 10);
        for n in 0..=10 {
            let p = projector(n, &[1.0], &f).unwrap().mat;
            for (rho, nodes) in [(0.5, 64), (1.0, 64), (1.9, 512)] {
                let c = projector_contour(n, &[1.0], &f, nodes, rho).unwrap().mat;
                assert!((c - &p).camax() < 1e-8, "n={n} rho={rho}");
            }
        }
        let p = projector(3, &[1.0], &f).unwrap().mat;
        let c = projector_contour(3, &[1.0], &f, 64, 1.9).unwrap().mat;
        let err = (c - p).camax();
        let r: f64 = 0.95f64.powi(64);
        assert!((err - r / (1.0 - r)).abs() < 1e-6, "{err}");
    }

    #[test]
    fn spectral_function_examples() {
        let f = HermiteFrame::new(1, 8);
        let one = spectral_function(&SpectralFn::One, &[2.0], &f).unwrap().mat;
        assert_eq!(one, CMat::identity(9, 9));
        let id = spectral_function(&SpectralFn::Identity, &[2.0], &f).unwrap().mat;
        assert_eq!(id, hamiltonian(&[2.0], &f).unwrap().mat);
        // u|λ|(2n+1) ≤ ½ kills band n
        let cut = spectral_function(&SpectralFn::SmoothCutoff { u: 0.05 }, &[2.0], &f).unwrap().mat;
        for n in 0..=8 {
            let x = 0.05 * 2.0 * (2 * n + 1) as f64;
            if x <= 0.5 {
                assert_eq!(cut[(n, n)].re, 0.0);
            }
            if x >= 1.0 {
                assert_eq!(cut[(n, n)].re, 1.0);
            }
        }
        assert_eq!(smooth_step(0.5), 0.0);
        assert_eq!(smooth_step(1.0), 1.0);
        assert!(smooth_step(0.75) > 0.0 && smooth_step(0.75) < 1.0);
    }

    #[test]
    fn displacement_matches_quadrature() {
        for &(a, b) in &[(0.0, 0.0), (1.0, 0.0), (0.3, -1.7), (-2.5, 2.0), (3.0, 3.0)] {
            let exact = displacement_1d(a, b, 24);
            let quad = displacement_1d_quadrature(a, b, 24, 192);
            let diff = exact.iter().zip(&quad).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
            assert!(diff < 1e-10, "({a},{b}) {diff}");
        }
    }

    #[test]
    fn matrix_coefficient_examples() {
        let f = HermiteFrame::new(1, 24);
        let m = matrix_coefficient(&[1.0], &f, &[0.0], &[0.0], &[0.0]).unwrap();
        assert!((m.mat - CMat::identity(25, 25)).camax() < 1e-12);
        let m = matrix_coefficient(&[2.0], &f, &[0.0], &[0.0], &[0.4]).unwrap();
        assert!((m.mat - CMat::identity(25, 25) * Complex64::from_polar(1.0, 0.8)).camax() < 1e-12);
        for p in [0.3, 1.0, 2.0] {
            let m = matrix_coefficient(&[1.0], &f, &[p], &[0.0], &[0.0]).unwrap();
            assert!((m.mat[(0, 0)].re - (-p * p / 4.0).exp()).abs() < 1e-13);
            assert!(!m.flagged);
        }
        let m = matrix_coefficient(&[1.0], &f, &[3.0], &[-3.0], &[0.0]).unwrap();
        assert!(m.unitarity_residual < 1e-8, "{}", m.unitarity_residual);
        let exact = rep_matrix_adapted(&[1.0], &f, &[3.0], &[-3.0], &[0.0]).unwrap();
        assert!((m.mat - exact).camax() < 1e-10);
        let g = HermiteFrame::new(2, 10);
        let m = matrix_coefficient(&[0.5, 0.5], &g, &[1.0, -0.4], &[0.2, 2.0], &[0.3, -0.1]).unwrap();
        let exact = rep_matrix_adapted(&[0.5, 0.5], &g, &[1.0, -0.4], &[0.2, 2.0], &[0.3, -0.1]).unwrap();
        assert!(!m.flagged);
        assert!((m.mat - exact).camax() < 1e-10);
    }

    #[test]
    fn representation_is_homomorphism() {
        let g = GroupStructure::quaternionic();
        let f = HermiteFrame::new(2, 32);
        let lam = [0.7, -0.2, 0.5];
        let x = GroupPoint::new(vec![0.3, -0.5, 0.2, 0.4], vec![0.1, 0.7, -0.3]);
        let y = GroupPoint::new(vec![-0.6, 0.1, 0.5, -0.2], vec![0.4, 0.2, 0.9]);
        let xy = g.multiply(&x, &y).unwrap();
        let mx = rep_matrix(&g, &lam, &f, &x).unwrap();
        let my = rep_matrix(&g, &lam, &f, &y).unwrap();
        let mxy = rep_matrix(&g, &lam, &f, &xy).unwrap();
        let k = f.count_upto(8);
        let diff = (mx * my - mxy).view((0, 0), (k, k)).camax();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn bracket_identities() {
        let f = HermiteFrame::new(1, 16);
        let r = bracket_identity_check(&[1.0], &f).unwrap();
        assert!(r.interior < 1e-10);
        // H is diagonal, so the commutators close even on the edge band
        assert!(r.full < 1e-9);
        let r2 = bracket_identity_check(&[4.0], &f).unwrap();
        assert!(r2.interior < 1e-9);
        let g = HermiteFrame::new(2, 6);
        assert!(bracket_identity_check(&[0.3, 0.4, -1.2], &g).unwrap().interior < 1e-10);
    }

    #[test]
    fn band_t_identity() {
        let f = HermiteFrame::new(1, 10);
        for n in 0..3 {
            let r = band_t_identity_check(&[1.0], &f, n, 1.0).unwrap();
            assert!(r < 1e-10, "n={n} {r}");
        }
        assert!(band_t_identity_check(&[2.0], &f, 1, 1.0).unwrap() < 1e-10);
        assert_eq!(band_t_identity_check(&[1.0], &f, 0, 0.0).unwrap(), 0.0);
        let g = HermiteFrame::new(2, 5);
        assert!(band_t_identity_check(&[0.8], &g, 1, 1.0).unwrap() < 1e-10);
        assert!(band_t_identity_check(&[1.0], &f, 9, 1.0).is_err());
    }

    #[test]
    fn dump_roundtrip() {
        let f = HermiteFrame::new(2, 3);
        let op = vector_field_rep(&[0.5, 1.0], &f, Field::Q(1)).unwrap();
        let s = op.to_dump();
        let back = FiberOperator::from_dump(&s).unwrap();
        assert_eq!(back.mat, op.mat);
        assert_eq!(back.lambda, op.lambda);
        assert!(FiberOperator::from_dump("{}").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn contour_equals_direct(n in 0usize..6, rho in prop::sample::select(vec![0.5, 1.0]), lam in 0.1f64..5.0) {
            let f = HermiteFrame::new(1, 8);
            let c = projector_contour(n, &[lam], &f, 64, rho).unwrap().mat;
            let p = projector(n, &[lam], &f).unwrap().mat;
            prop_assert!((c - p).camax() < 1e-8);
        }

        #[test]
        fn hamiltonian_commutes_with_projectors(n in 0usize..5, lam in -4.0f64..4.0) {
            prop_assume!(lam.abs() > 1e-3);
            let f = HermiteFrame::new(2, 5);
            let h = hamiltonian(&[lam], &f).unwrap().mat;
            let p = projector(n, &[lam], &f).unwrap().mat;
            prop_assert!(comm(&h, &p).camax() == 0.0);
            let want = &p * Complex64::new(lam.abs() * (2 * n + 2) as f64, 0.0);
            prop_assert!((&p * &h * &p - want).camax() < 1e-12);
        }

        #[test]
        fn small_displacements_compose(a1 in -1.0f64..1.0, b1 in -1.0f64..1.0, a2 in -1.0f64..1.0, b2 in -1.0f64..1.0) {
            let g = GroupStructure::heisenberg(1);
            let f = HermiteFrame::new(1, 32);
            let x = GroupPoint::new(vec![a1, b1], vec![0.2]);
            let y = GroupPoint::new(vec![a2, b2], vec![-0.1]);
            let lhs = rep_matrix(&g, &[1.3], &f, &x).unwrap() * rep_matrix(&g, &[1.3], &f, &y).unwrap();
            let rhs = rep_matrix(&g, &[1.3], &f, &g.multiply(&x, &y).unwrap()).unwrap();
            let k = f.count_upto(16);
            prop_assert!((lhs - rhs).view((0, 0), (k, k)).camax() < 1e-6);
        }
    }
}
