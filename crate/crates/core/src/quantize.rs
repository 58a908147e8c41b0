//! Finite-sum operator-valued symbols σ(x, λ) = Σ a_t(x) M_t(λ) and the quantization
//! Op_ε(σ)f(x) = c₀ Σ_λ Tr(π^λ_x σ(x, ε²λ) 𝓕f(λ)) |λ|^d Δλ^p.
//!
//! Per term: multiplier first (M(ε²λ)·𝓕f), then inverse transform, then the pointwise
//! product with a. Profiles that depend on λ (after a flow) are applied per group of
//! λ-slices sharing a direction.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::fiber::{
    fixed_field_rep, lambda_norm, ladder, projector, smooth_step, spectral_function, vector_field_rep, CMat, Field, HermiteFrame,
    Ladder, SpectralFn,
};
use crate::gft::{FiberField, Gft};
use crate::grid::{axis_frequencies, fft_axes, shift_z_profile, GridSpec, PhysicalState};
use crate::htype::{AdaptedFrame, GroupStructure};
use crate::{Complex64, Error, Result, I};

/// x-part of a term, sampled on the transform grid (no carrier).
#[derive(Clone, Debug)]
pub enum Profile {
    Uniform(Complex64),
    Grid(Arc<Vec<Complex64>>),
    /// One profile per group of λ-slices; `group_of[li]` indexes `groups`, `dirs` holds each group's λ/|λ|.
    ByLambda { groups: Vec<Arc<Vec<Complex64>>>, group_of: Arc<Vec<usize>>, dirs: Vec<Vec<f64>> },
}

/// Smooth scalar cutoff in |λ|: 0 below lo/2 and above 2·hi, 1 on [lo, hi].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaCutoff {
    pub lo: f64,
    pub hi: f64,
}

impl LambdaCutoff {
    pub fn eval(&self, ln: f64) -> f64 {
        smooth_step(ln / self.lo) * (1.0 - smooth_step(ln / (2.0 * self.hi)))
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lo / 2.0, 2.0 * self.hi)
    }
}

/// λ-family of fiber matrices; everything is evaluated at the already rescaled λ.
#[derive(Clone, Debug)]
pub enum FiberPart {
    One,
    Band(usize),
    Spectral(SpectralFn),
    Ladder(usize, Ladder),
    /// Field in the λ-adapted frame.
    Field(Field),
    /// π^λ(V_i) for the fixed basis field V_i.
    FixedField(usize),
    Cutoff(LambdaCutoff),
    /// B(λ)_{ik}/|λ|
    KCoeff(usize, usize),
    /// λ_k/|λ|
    Direction(usize),
    /// |λ|^k
    NormPower(i32),
    Scale(Complex64),
    Const(Arc<CMat>),
    /// Left-to-right matrix product.
    Product(Vec<FiberPart>),
    /// Π_n · inner · Π_m
    Compress { n: usize, m: usize, inner: Box<FiberPart> },
    /// ψ(H/u) Π_n · inner · Π_m ψ(H/u)
    SmoothCompress { n: usize, m: usize, u: f64, inner: Box<FiberPart> },
    /// [H, inner]
    CommH(Box<FiberPart>),
}

#[derive(Clone, Debug)]
pub struct Term {
    pub profile: Profile,
    pub fiber: FiberPart,
    /// (n, n′) band support when known.
    pub bands: Option<(usize, usize)>,
}

#[derive(Clone, Debug, Default)]
pub struct Symbol {
    pub terms: Vec<Term>,
}

/// Everything a fiber evaluation needs about one λ.
pub struct FiberCtx<'a> {
    pub group: &'a GroupStructure,
    pub frame: &'a HermiteFrame,
    pub adapted: &'a AdaptedFrame,
}

impl FiberPart {
    pub fn product(parts: Vec<FiberPart>) -> FiberPart {
        FiberPart::Product(parts)
    }

    pub fn compress(n: usize, m: usize, inner: FiberPart) -> FiberPart {
        FiberPart::Compress { n, m, inner: Box::new(inner) }
    }

    pub fn eval(&self, lam: &[f64], ctx: &FiberCtx) -> Result<CMat> {
        let frame = ctx.frame;
        let n = frame.len();
        let scalar = |c: Complex64| CMat::identity(n, n) * c;
        Ok(match self {
            FiberPart::One => CMat::identity(n, n),
            FiberPart::Band(k) => projector(*k, lam, frame)?.mat,
            FiberPart::Spectral(f) => spectral_function(f, lam, frame)?.mat,
            FiberPart::Ladder(j, kind) => ladder(lam, frame, *j, *kind)?.mat,
            FiberPart::Field(f) => vector_field_rep(lam, frame, *f)?.mat,
            FiberPart::FixedField(i) => fixed_field_rep(lam, frame, ctx.adapted, *i)?.mat,
            FiberPart::Cutoff(c) => scalar(Complex64::new(c.eval(lambda_norm(lam)?), 0.0)),
            FiberPart::KCoeff(i, k) => {
                let bl = ctx.group.b_lambda(lam);
                let dim = ctx.group.dim_v();
                scalar(Complex64::new(bl[i * dim + k] / lambda_norm(lam)?, 0.0))
            }
            FiberPart::Direction(k) => scalar(Complex64::new(lam[*k] / lambda_norm(lam)?, 0.0)),
            FiberPart::NormPower(k) => scalar(Complex64::new(lambda_norm(lam)?.powi(*k), 0.0)),
            FiberPart::Scale(c) => scalar(*c),
            FiberPart::Const(m) => {
                if m.nrows() != n {
                    return Err(Error::Dimension(format!("constant fiber matrix is {}×{}, frame has {n}", m.nrows(), m.ncols())));
                }
                (**m).clone()
            }
            FiberPart::Product(parts) => {
                let mut acc = CMat::identity(n, n);
                for p in parts {
                    acc = match p {
                        FiberPart::Cutoff(_) | FiberPart::KCoeff(..) | FiberPart::Direction(_) | FiberPart::NormPower(_) | FiberPart::Scale(_) => {
                            let c = p.eval(lam, ctx)?[(0, 0)];
                            acc * c
                        }
                        _ => acc * p.eval(lam, ctx)?,
                    };
                }
                acc
            }
            FiberPart::Compress { n: a, m: b, inner } => {
                let inner = inner.eval(lam, ctx)?;
                mask(frame, &inner, *a, *b)
            }
            FiberPart::SmoothCompress { n: a, m: b, u, inner } => {
                // ψ(H/u): identity on the band once u ≤ |λ|(2n+d), zero for u large
                let psi = spectral_function(&SpectralFn::SmoothCutoff { u: 1.0 / *u }, lam, frame)?.mat;
                let inner = mask(frame, &inner.eval(lam, ctx)?, *a, *b);
                &psi * inner * &psi
            }
            FiberPart::CommH(inner) => {
                let h = spectral_function(&SpectralFn::Identity, lam, frame)?.mat;
                let m = inner.eval(lam, ctx)?;
                &h * &m - &m * &h
            }
        })
    }

    /// Possible band shifts (row band − column band), when structurally known.
    pub fn shifts(&self) -> Option<Vec<i64>> {
        Some(match self {
            FiberPart::One
            | FiberPart::Band(_)
            | FiberPart::Spectral(_)
            | FiberPart::Cutoff(_)
            | FiberPart::KCoeff(..)
            | FiberPart::Direction(_)
            | FiberPart::NormPower(_)
            | FiberPart::Scale(_) => vec![0],
            FiberPart::Field(Field::Z(_)) => vec![0],
            FiberPart::Ladder(_, Ladder::Raise) => vec![1],
            FiberPart::Ladder(_, Ladder::Lower) => vec![-1],
            FiberPart::Field(_) | FiberPart::FixedField(_) => vec![-1, 1],
            FiberPart::Const(_) => return None,
            FiberPart::Product(parts) => {
                let mut acc = vec![0i64];
                for p in parts {
                    let s = p.shifts()?;
                    let mut next: Vec<i64> = acc.iter().flat_map(|a| s.iter().map(move |b| a + b)).collect();
                    next.sort();
                    next.dedup();
                    acc = next;
                }
                acc
            }
            FiberPart::Compress { n, m, .. } | FiberPart::SmoothCompress { n, m, .. } => vec![*n as i64 - *m as i64],
            FiberPart::CommH(inner) => inner.shifts()?,
        })
    }

    /// Largest band index the part can reach, when bounded.
    pub fn band_bound(&self) -> Option<usize> {
        match self {
            FiberPart::Band(n) => Some(*n),
            FiberPart::Compress { n, m, .. } | FiberPart::SmoothCompress { n, m, .. } => Some((*n).max(*m)),
            FiberPart::Product(parts) => parts.iter().filter_map(|p| p.band_bound()).min().map(|b| b + parts.len()),
            _ => None,
        }
    }

    fn cutoff(&self) -> Option<LambdaCutoff> {
        match self {
            FiberPart::Cutoff(c) => Some(*c),
            FiberPart::Product(parts) => parts.iter().find_map(|p| p.cutoff()),
            FiberPart::Compress { inner, .. } | FiberPart::SmoothCompress { inner, .. } | FiberPart::CommH(inner) => inner.cutoff(),
            _ => None,
        }
    }
}

fn mask(frame: &HermiteFrame, m: &CMat, n: usize, k: usize) -> CMat {
    let mut out = CMat::zeros(m.nrows(), m.ncols());
    if n > frame.a || k > frame.a {
        return out;
    }
    for r in frame.band(n) {
        for c in frame.band(k) {
            out[(r, c)] = m[(r, c)];
        }
    }
    out
}

impl Profile {
    /// Profile values seen by λ-slice `li` (None for a uniform profile).
    pub fn slice(&self, li: usize) -> ProfileView<'_> {
        match self {
            Profile::Uniform(c) => ProfileView::Uniform(*c),
            Profile::Grid(v) => ProfileView::Values(v),
            Profile::ByLambda { groups, group_of, .. } => ProfileView::Values(&groups[group_of[li]]),
        }
    }

    pub fn from_fn(grid: &GridSpec, f: impl Fn(&[f64], &[f64]) -> Complex64) -> Profile {
        let nz = grid.nz_total();
        let vals = (0..grid.len()).map(|idx| f(&grid.v_coords(idx / nz), &grid.z_coords(idx % nz))).collect();
        Profile::Grid(Arc::new(vals))
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Profile::Uniform(c) => *c == Complex64::new(0.0, 0.0),
            Profile::Grid(v) => v.iter().all(|c| *c == Complex64::new(0.0, 0.0)),
            Profile::ByLambda { groups, .. } => groups.iter().all(|g| g.iter().all(|c| *c == Complex64::new(0.0, 0.0))),
        }
    }

    /// Point value at grid index `idx` for λ-slice `li`.
    pub fn at(&self, li: usize, idx: usize) -> Complex64 {
        match self.slice(li) {
            ProfileView::Uniform(c) => c,
            ProfileView::Values(v) => v[idx],
        }
    }
}

pub enum ProfileView<'a> {
    Uniform(Complex64),
    Values(&'a [Complex64]),
}

impl Term {
    pub fn new(profile: Profile, fiber: FiberPart) -> Term {
        Term { profile, fiber, bands: None }
    }

    pub fn banded(profile: Profile, fiber: FiberPart, n: usize, m: usize) -> Term {
        Term { profile, fiber: FiberPart::compress(n, m, fiber), bands: Some((n, m)) }
    }
}

impl Symbol {
    pub fn new(terms: Vec<Term>) -> Symbol {
        Symbol { terms }
    }

    pub fn single(profile: Profile, fiber: FiberPart) -> Symbol {
        Symbol { terms: vec![Term::new(profile, fiber)] }
    }

    pub fn plus(mut self, other: Symbol) -> Symbol {
        self.terms.extend(other.terms);
        self
    }

    pub fn scaled(&self, c: Complex64) -> Symbol {
        Symbol {
            terms: self
                .terms
                .iter()
                .map(|t| Term { profile: t.profile.clone(), fiber: FiberPart::Product(vec![FiberPart::Scale(c), t.fiber.clone()]), bands: t.bands })
                .collect(),
        }
    }

    /// Every term diagonal in the bands (band meta n = n′, or structural shift 0 only).
    pub fn is_h_diagonal(&self) -> bool {
        self.terms.iter().all(|t| match t.bands {
            Some((n, m)) => n == m,
            None => t.fiber.shifts().is_some_and(|s| s == vec![0]),
        })
    }

    /// λ-support [λ_min, λ_max] when every term carries a scalar cutoff.
    pub fn lambda_support(&self) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for t in &self.terms {
            let (a, b) = t.fiber.cutoff()?.support();
            lo = lo.min(a);
            hi = hi.max(b);
        }
        Some((lo, hi))
    }

    /// λ_min > 0 and a finite band bound on every term.
    pub fn in_ah_fragment(&self) -> bool {
        self.lambda_support().is_some_and(|(lo, _)| lo > 0.0)
            && self.terms.iter().all(|t| t.bands.is_some() || t.fiber.band_bound().is_some())
    }

    /// σ(x, λ) at grid point `idx`, with λ the (already rescaled) value and `li` the slice it belongs to.
    pub fn eval_at(&self, li: usize, idx: usize, lam: &[f64], ctx: &FiberCtx) -> Result<CMat> {
        let n = ctx.frame.len();
        let mut acc = CMat::zeros(n, n);
        for t in &self.terms {
            acc += t.fiber.eval(lam, ctx)? * t.profile.at(li, idx);
        }
        Ok(acc)
    }
}

/// (σ_d, σ_a): band compressions n = n′ and n ≠ n′. Terms without band meta are expanded
/// over n, n′ ≤ `band_bound`, keeping only pairs allowed by the structural shifts.
pub fn split_diag(sym: &Symbol, band_bound: Option<usize>) -> Result<(Symbol, Symbol)> {
    let mut d = Vec::new();
    let mut a = Vec::new();
    for t in &sym.terms {
        if let Some((n, m)) = t.bands {
            if n == m {
                d.push(t.clone());
            } else {
                a.push(t.clone());
            }
            continue;
        }
        let bound = band_bound
            .or_else(|| t.fiber.band_bound())
            .ok_or_else(|| Error::Domain("split needs a band bound for terms without band support".into()))?;
        let shifts = t.fiber.shifts();
        for n in 0..=bound {
            for m in 0..=bound {
                let s = n as i64 - m as i64;
                if let Some(sh) = &shifts {
                    if !sh.contains(&s) {
                        continue;
                    }
                }
                let nt = Term::banded(t.profile.clone(), t.fiber.clone(), n, m);
                if n == m {
                    d.push(nt);
                } else {
                    a.push(nt);
                }
            }
        }
    }
    Ok((Symbol::new(d), Symbol::new(a)))
}

/// ψ(H/u) Π_n σ Π_{n′} ψ(H/u).
pub fn band_cutoff_symbol(sym: &Symbol, n: usize, m: usize, u: f64) -> Result<Symbol> {
    if !(u > 0.0 && u <= 1.0) {
        return Err(Error::Domain(format!("u must lie in (0, 1], got {u}")));
    }
    Ok(Symbol::new(
        sym.terms
            .iter()
            .map(|t| Term {
                profile: t.profile.clone(),
                fiber: FiberPart::SmoothCompress { n, m, u, inner: Box::new(t.fiber.clone()) },
                bands: Some((n, m)),
            })
            .collect(),
    ))
}

/// Groups λ-slices by direction λ/|λ|; deterministic order.
pub fn direction_groups(gft: &Gft) -> (Vec<usize>, Vec<Vec<f64>>) {
    let mut keys: BTreeMap<Vec<i64>, usize> = BTreeMap::new();
    let mut dirs = Vec::new();
    let mut group_of = Vec::with_capacity(gft.n_lambda());
    for li in 0..gft.n_lambda() {
        let ln = gft.lambda_norm(li);
        let dir: Vec<f64> = gft.lambdas[li].lambda.iter().map(|x| x / ln).collect();
        let key: Vec<i64> = dir.iter().map(|x| (x * 1e9).round() as i64).collect();
        let next = keys.len();
        let g = *keys.entry(key).or_insert_with(|| {
            dirs.push(dir.clone());
            next
        });
        group_of.push(g);
    }
    (group_of, dirs)
}

/// Φ^s on an H-diagonal symbol: band n's profile becomes a(v, z + s(2n+d)λ/(2|λ|)).
pub fn flow_phi(gft: &Gft, sym: &Symbol, s: f64) -> Result<Symbol> {
    let grid = &gft.grid;
    let d = grid.d as f64;
    let mut terms = Vec::new();
    for t in &sym.terms {
        let n = match t.bands {
            Some((n, m)) if n == m => n,
            _ => return Err(Error::Domain("flow_phi needs single-band H-diagonal terms".into())),
        };
        let rate = s * (2.0 * n as f64 + d) / 2.0;
        let profile = match &t.profile {
            Profile::Uniform(c) => Profile::Uniform(*c),
            Profile::Grid(vals) => {
                let (group_of, dirs) = direction_groups(gft);
                let groups = dirs
                    .iter()
                    .map(|dir| {
                        let w: Vec<f64> = dir.iter().map(|x| -rate * x).collect();
                        Arc::new(shift_z_profile(grid, vals, &w, false))
                    })
                    .collect();
                Profile::ByLambda { groups, group_of: Arc::new(group_of), dirs }
            }
            Profile::ByLambda { groups, group_of, dirs } => Profile::ByLambda {
                groups: groups
                    .iter()
                    .zip(dirs)
                    .map(|(vals, dir)| {
                        let w: Vec<f64> = dir.iter().map(|x| -rate * x).collect();
                        Arc::new(shift_z_profile(grid, vals, &w, false))
                    })
                    .collect(),
                group_of: group_of.clone(),
                dirs: dirs.clone(),
            },
        };
        terms.push(Term { profile, fiber: t.fiber.clone(), bands: t.bands });
    }
    Ok(Symbol::new(terms))
}

/// Spectral derivatives of grid profiles along the fixed left-invariant fields.
pub struct Derivatives<'a> {
    grid: &'a GridSpec,
    group: &'a GroupStructure,
}

impl<'a> Derivatives<'a> {
    pub fn new(gft: &'a Gft) -> Self {
        Derivatives { grid: &gft.grid, group: &gft.group }
    }

    /// ∂ along grid axis (v axes first, then z axes).
    pub fn partial(&self, vals: &[Complex64], axis: usize) -> Vec<Complex64> {
        let grid = self.grid;
        let nv = grid.dim_v();
        let (n, l) = if axis < nv { (grid.n_v, grid.v_extent) } else { (grid.n_z, grid.z_extent) };
        let freqs = axis_frequencies(n, l);
        let mut shape = vec![grid.n_v; nv];
        shape.extend(std::iter::repeat_n(grid.n_z, grid.p));
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vals.to_vec();
        fft_axes(grid, &mut data, &[axis], false);
        for (idx, x) in data.iter_mut().enumerate() {
            let k = (idx / inner) % n;
            // the Nyquist mode has no odd derivative on a periodic grid
            let f = if k == n / 2 { 0.0 } else { freqs[k] };
            *x *= I * f / n as f64;
        }
        fft_axes(grid, &mut data, &[axis], true);
        data
    }

    /// c^i_k(v) = ½ Σ_m v_m B_k[m][i] at every grid point.
    fn coeff(&self, i: usize, k: usize) -> Vec<f64> {
        let grid = self.grid;
        let dim = grid.dim_v();
        let nz = grid.nz_total();
        let bk = &self.group.b[k];
        (0..grid.len())
            .map(|idx| {
                let v = grid.v_coords(idx / nz);
                0.5 * (0..dim).map(|m| v[m] * bk[m * dim + i]).sum::<f64>()
            })
            .collect()
    }

    /// V_i a = ∂_{v_i} a + Σ_k c^i_k ∂_{z_k} a.
    pub fn field(&self, a: &[Complex64], i: usize) -> Vec<Complex64> {
        let nv = self.grid.dim_v();
        let mut out = self.partial(a, i);
        for k in 0..self.grid.p {
            let dz = self.partial(a, nv + k);
            let c = self.coeff(i, k);
            for ((o, x), ci) in out.iter_mut().zip(&dz).zip(&c) {
                *o += x * ci;
            }
        }
        out
    }

    /// V_l V_i a expanded so that only derivatives of a itself are taken spectrally.
    pub fn field2(&self, a: &[Complex64], l: usize, i: usize) -> Vec<Complex64> {
        let nv = self.grid.dim_v();
        let p = self.grid.p;
        let dim = nv;
        let di = self.partial(a, i);
        let mut out = self.partial(&di, l);
        for k in 0..p {
            let dzk = self.partial(a, nv + k);
            let b = 0.5 * self.group.b[k][l * dim + i];
            let ci = self.coeff(i, k);
            let cl = self.coeff(l, k);
            let dl_dzk = self.partial(&dzk, l);
            let di_dzk = self.partial(&dzk, i);
            for idx in 0..out.len() {
                out[idx] += dzk[idx] * b + dl_dzk[idx] * ci[idx] + di_dzk[idx] * cl[idx];
            }
            for m in 0..p {
                let cim = self.coeff(i, m);
                let dzkm = self.partial(&dzk, nv + m);
                for idx in 0..out.len() {
                    out[idx] += dzkm[idx] * cl[idx] * cim[idx];
                }
            }
        }
        out
    }

    /// Δ_G a = Σ_i V_i² a.
    pub fn sublaplacian(&self, a: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); a.len()];
        for i in 0..self.grid.dim_v() {
            for (o, x) in out.iter_mut().zip(self.field2(a, i, i)) {
                *o += x;
            }
        }
        out
    }

    pub fn z_partial(&self, a: &[Complex64], k: usize) -> Vec<Complex64> {
        self.partial(a, self.grid.dim_v() + k)
    }
}

fn grid_values(p: &Profile) -> Result<Arc<Vec<Complex64>>> {
    match p {
        Profile::Grid(v) => Ok(v.clone()),
        _ => Err(Error::Domain("derivative symbols need a λ-independent grid profile".into())),
    }
}

/// V·π(V)σ = Σ_i (V_i a) π(V_i) M.
pub fn v_pi_v(gft: &Gft, sym: &Symbol) -> Result<Symbol> {
    let der = Derivatives::new(gft);
    let mut terms = Vec::new();
    for t in &sym.terms {
        if let Profile::Uniform(_) = t.profile {
            continue;
        }
        let a = grid_values(&t.profile)?;
        for i in 0..gft.grid.dim_v() {
            terms.push(Term::new(
                Profile::Grid(Arc::new(der.field(&a, i))),
                FiberPart::Product(vec![FiberPart::FixedField(i), t.fiber.clone()]),
            ));
        }
    }
    Ok(Symbol::new(terms))
}

/// Δ_G σ = Σ (Δ_G a) M.
pub fn sublaplacian_symbol(gft: &Gft, sym: &Symbol) -> Result<Symbol> {
    let der = Derivatives::new(gft);
    let mut terms = Vec::new();
    for t in &sym.terms {
        if let Profile::Uniform(_) = t.profile {
            continue;
        }
        let a = grid_values(&t.profile)?;
        terms.push(Term { profile: Profile::Grid(Arc::new(der.sublaplacian(&a))), fiber: t.fiber.clone(), bands: t.bands });
    }
    Ok(Symbol::new(terms))
}

/// [H(λ), σ].
pub fn comm_h_symbol(sym: &Symbol) -> Symbol {
    Symbol::new(
        sym.terms
            .iter()
            .map(|t| Term { profile: t.profile.clone(), fiber: FiberPart::CommH(Box::new(t.fiber.clone())), bands: t.bands })
            .collect(),
    )
}

/// σ₁ = −(2i|λ|)⁻¹ Σ_j (P_j a π(Q_j) − Q_j a π(P_j)) M, written in the fixed basis as
/// −(2i|λ|)⁻¹ Σ_{i,k} (B(λ)_{ik}/|λ|) (V_i a) π(V_k) M.
pub fn sigma1_construct(gft: &Gft, sym: &Symbol) -> Result<Symbol> {
    for t in &sym.terms {
        match t.fiber.cutoff() {
            Some(c) if c.support().0 > 0.0 => {}
            _ => return Err(Error::Domain("σ₁ needs a scalar cutoff supported away from λ = 0".into())),
        }
    }
    let der = Derivatives::new(gft);
    let dim = gft.grid.dim_v();
    let pref = FiberPart::Scale(-1.0 / (2.0 * I));
    let mut terms = Vec::new();
    for t in &sym.terms {
        if let Profile::Uniform(_) = t.profile {
            continue;
        }
        let a = grid_values(&t.profile)?;
        for i in 0..dim {
            let via = Arc::new(der.field(&a, i));
            for k in 0..dim {
                if gft.group.b.iter().all(|bk| bk[i * dim + k] == 0.0) {
                    continue;
                }
                terms.push(Term::new(
                    Profile::Grid(via.clone()),
                    FiberPart::Product(vec![
                        pref.clone(),
                        FiberPart::NormPower(-1),
                        FiberPart::KCoeff(i, k),
                        FiberPart::FixedField(k),
                        t.fiber.clone(),
                    ]),
                ));
            }
        }
    }
    Ok(Symbol::new(terms))
}

/// V·π(V)σ₁ assembled from V_l V_i a directly; differentiating the σ₁ profiles again
/// would take spectral v-derivatives of c(v)∂_z a, which is not periodic.
pub fn v_pi_v_sigma1(gft: &Gft, sym: &Symbol) -> Result<Symbol> {
    sigma1_construct(gft, sym)?;
    let der = Derivatives::new(gft);
    let dim = gft.grid.dim_v();
    let pref = FiberPart::Scale(-1.0 / (2.0 * I));
    let mut terms = Vec::new();
    for t in &sym.terms {
        if let Profile::Uniform(_) = t.profile {
            continue;
        }
        let a = grid_values(&t.profile)?;
        for l in 0..dim {
            for i in 0..dim {
                let prof = Arc::new(der.field2(&a, l, i));
                for k in 0..dim {
                    if gft.group.b.iter().all(|bk| bk[i * dim + k] == 0.0) {
                        continue;
                    }
                    terms.push(Term::new(
                        Profile::Grid(prof.clone()),
                        FiberPart::Product(vec![
                            FiberPart::FixedField(l),
                            pref.clone(),
                            FiberPart::NormPower(-1),
                            FiberPart::KCoeff(i, k),
                            FiberPart::FixedField(k),
                            t.fiber.clone(),
                        ]),
                    ));
                }
            }
        }
    }
    Ok(Symbol::new(terms))
}

/// Σ_k (λ_k/|λ|) ∂_{z_k} a ⊗ c·M, i.e. c·|λ|⁻¹Z^{(λ)}σ.
pub fn central_symbol(gft: &Gft, sym: &Symbol, c: Complex64) -> Result<Symbol> {
    let der = Derivatives::new(gft);
    let mut terms = Vec::new();
    for t in &sym.terms {
        if let Profile::Uniform(_) = t.profile {
            continue;
        }
        let a = grid_values(&t.profile)?;
        for k in 0..gft.grid.p {
            terms.push(Term {
                profile: Profile::Grid(Arc::new(der.z_partial(&a, k))),
                fiber: FiberPart::Product(vec![FiberPart::Scale(c), FiberPart::Direction(k), t.fiber.clone()]),
                bands: t.bands,
            });
        }
    }
    Ok(Symbol::new(terms))
}

/// Op_ε(σ) applied to a state given by its transform.
pub fn op_apply_field(gft: &Gft, sym: &Symbol, eps: f64, field: &FiberField) -> Result<PhysicalState> {
    if !(eps > 0.0) {
        return Err(Error::Domain("ε must be positive".into()));
    }
    let mut out = PhysicalState::zeros(&gft.grid);
    let e2 = eps * eps;
    let multiplied = |fiber: &FiberPart, keep: &dyn Fn(usize) -> bool| -> Result<FiberField> {
        let mats = field
            .mats
            .iter()
            .enumerate()
            .map(|(li, m)| match m {
                Some(m) if keep(li) => {
                    let lam: Vec<f64> = gft.lambdas[li].lambda.iter().map(|x| x * e2).collect();
                    let ctx = FiberCtx { group: &gft.group, frame: &gft.frame, adapted: &gft.adapted[li] };
                    Ok(Some(fiber.eval(&lam, &ctx)? * m))
                }
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FiberField { mats })
    };
    for (profile, fibers) in group_terms(&sym.terms) {
        let sum_fields = |keep: &dyn Fn(usize) -> bool| -> Result<FiberField> {
            let mut acc = multiplied(&fibers[0], keep)?;
            for f in &fibers[1..] {
                acc = acc.add(&multiplied(f, keep)?);
            }
            Ok(acc)
        };
        match &profile {
            Profile::Uniform(c) => {
                let u = gft.inverse(&sum_fields(&|_| true)?);
                out.axpy(*c, &u);
            }
            Profile::Grid(a) => {
                let u = gft.inverse(&sum_fields(&|_| true)?);
                for ((o, x), ai) in out.values.iter_mut().zip(&u.values).zip(a.iter()) {
                    *o += x * ai;
                }
            }
            Profile::ByLambda { groups, group_of, .. } => {
                for (gi, a) in groups.iter().enumerate() {
                    let u = gft.inverse(&sum_fields(&|li| group_of[li] == gi)?);
                    for ((o, x), ai) in out.values.iter_mut().zip(&u.values).zip(a.iter()) {
                        *o += x * ai;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Terms sharing a profile (same allocation or equal uniform value) are summed before inversion.
pub(crate) fn group_terms(terms: &[Term]) -> Vec<(Profile, Vec<FiberPart>)> {
    let mut out: Vec<(Profile, Vec<FiberPart>)> = Vec::new();
    for t in terms {
        let hit = out.iter_mut().find(|(p, _)| match (p, &t.profile) {
            (Profile::Uniform(a), Profile::Uniform(b)) => a == b,
            (Profile::Grid(a), Profile::Grid(b)) => Arc::ptr_eq(a, b),
            (Profile::ByLambda { groups: a, .. }, Profile::ByLambda { groups: b, .. }) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| Arc::ptr_eq(x, y))
            }
            _ => false,
        });
        match hit {
            Some((_, f)) => f.push(t.fiber.clone()),
            None => out.push((t.profile.clone(), vec![t.fiber.clone()])),
        }
    }
    out
}

pub fn op_eps_apply(gft: &Gft, sym: &Symbol, eps: f64, f: &PhysicalState) -> Result<PhysicalState> {
    op_apply_field(gft, sym, eps, &gft.forward(f)?)
}

/// (Op_ε(σ)f, f).
pub fn expectation(gft: &Gft, sym: &Symbol, eps: f64, f: &PhysicalState) -> Result<Complex64> {
    Ok(op_eps_apply(gft, sym, eps, f)?.inner(f))
}

#[derive(Clone, Debug)]
pub struct CommutatorReport {
    pub lhs: Complex64,
    pub rhs: Complex64,
    pub terms: [Complex64; 3],
    pub abs_residual: f64,
    /// |LHS − RHS| / (‖f‖‖ε²Δg‖ + ‖ε²Δf‖‖g‖)
    pub rel_residual: f64,
}

/// ⟨[−ε²Δ_G, Op_ε(σ)]f, g⟩ against ⟨(Op_ε([H,σ]) − 2εOp_ε(V·π(V)σ) − ε²Op_ε(Δ_Gσ))f, g⟩.
/// −ε²Δ_G acts spectrally (as ε²H on the left of 𝓕), and moves onto g by self-adjointness.
pub fn commutator_expansion_check(gft: &Gft, sym: &Symbol, eps: f64, f: &PhysicalState, g: &PhysicalState) -> Result<CommutatorReport> {
    let ff = gft.forward(f)?;
    let fg = gft.forward(g)?;
    let e2 = eps * eps;
    let lap = |field: &FiberField| {
        field.map(|li, m| {
            let lam = &gft.lambdas[li].lambda;
            let h = spectral_function(&SpectralFn::Identity, lam, &gft.frame).expect("λ ≠ 0 on the grid").mat;
            h * m * Complex64::new(e2, 0.0)
        })
    };
    let lf = lap(&ff);
    let lg = lap(&fg);
    let lg_state = gft.inverse(&lg);
    let lf_state = gft.inverse(&lf);
    let lhs = op_apply_field(gft, sym, eps, &ff)?.inner(&lg_state) - op_apply_field(gft, sym, eps, &lf)?.inner(g);
    let t1 = op_apply_field(gft, &comm_h_symbol(sym), eps, &ff)?.inner(g);
    let t2 = op_apply_field(gft, &v_pi_v(gft, sym)?, eps, &ff)?.inner(g);
    let t3 = op_apply_field(gft, &sublaplacian_symbol(gft, sym)?, eps, &ff)?.inner(g);
    let rhs = t1 - t2 * (2.0 * eps) - t3 * e2;
    let abs_residual = (lhs - rhs).norm();
    let scale = f.l2_norm() * lg_state.l2_norm() + lf_state.l2_norm() * g.l2_norm();
    Ok(CommutatorReport { lhs, rhs, terms: [t1, t2, t3], abs_residual, rel_residual: abs_residual / scale })
}

#[derive(Clone, Copy, Debug)]
pub struct CorrectorReport {
    /// max over samples of ‖[H, σ₁] − V·π(V)σ‖ on the guarded block, relative to ‖V·π(V)σ‖
    pub part2: f64,
    /// same for Π_n(V·π(V)σ₁)Π_n − ¼((2n+d)i|λ|⁻¹Z^{(λ)} − Δ_G)Π_nσΠ_n
    pub part3: f64,
}

/// Fiberwise check of the σ₁ identities at the listed grid points and λ-slices.
/// λ is used unscaled (ε = 1); `bands` are the n of part (3).
pub fn corrector_identity_check(gft: &Gft, sym: &Symbol, points: &[usize], slices: &[usize], bands: &[usize]) -> Result<CorrectorReport> {
    let s1 = sigma1_construct(gft, sym)?;
    let vpv = v_pi_v(gft, sym)?;
    let vpv1 = v_pi_v_sigma1(gft, sym)?;
    let lap = sublaplacian_symbol(gft, sym)?;
    let frame = &gft.frame;
    let d = frame.d as f64;
    let k = frame.count_upto(frame.a.saturating_sub(3));
    let mut part2: f64 = 0.0;
    let mut part3: f64 = 0.0;
    for &li in slices {
        let lam = &gft.lambdas[li].lambda;
        let ctx = FiberCtx { group: &gft.group, frame, adapted: &gft.adapted[li] };
        let h = spectral_function(&SpectralFn::Identity, lam, frame)?.mat;
        for &idx in points {
            let s1m = s1.eval_at(li, idx, lam, &ctx)?;
            let target = vpv.eval_at(li, idx, lam, &ctx)?;
            let diff = (&h * &s1m - &s1m * &h) - &target;
            let scale = target.view((0, 0), (k, k)).camax().max(1e-300);
            part2 = part2.max(diff.view((0, 0), (k, k)).camax() / scale);
            let lhs_full = vpv1.eval_at(li, idx, lam, &ctx)?;
            let sig = sym.eval_at(li, idx, lam, &ctx)?;
            let lapm = lap.eval_at(li, idx, lam, &ctx)?;
            let ln = lambda_norm(lam)?;
            for &n in bands {
                let lhs = mask(frame, &lhs_full, n, n);
                // Z^{(λ)} a / |λ| = Σ_k (λ_k/|λ|) ∂_{z_k} a, evaluated through the central symbol
                let zs = central_symbol(gft, &restrict_band(sym, n), Complex64::new(1.0, 0.0))?.eval_at(li, idx, lam, &ctx)?;
                let rhs = (zs * Complex64::new(0.0, (2.0 * n as f64 + d) / 4.0)) - mask(frame, &lapm, n, n) * Complex64::new(0.25, 0.0);
                let diff = lhs - &rhs;
                let sc = rhs.camax().max(mask(frame, &sig, n, n).camax() * ln).max(1e-300);
                part3 = part3.max(diff.camax() / sc);
            }
        }
    }
    Ok(CorrectorReport { part2, part3 })
}

fn restrict_band(sym: &Symbol, n: usize) -> Symbol {
    Symbol::new(sym.terms.iter().map(|t| Term::banded(t.profile.clone(), t.fiber.clone(), n, n)).collect())
}
