//! Spectral propagation for iε^τ ∂_t ψ = −(ε²/2) Δ_G ψ, time windows, and the Euclidean baseline.
//!
//! On the transform side the propagator is diagonal: rows of band n at λ pick up
//! e^{−iε^{2−τ} t |λ|(2n+d)/2}. [`Dynamics`] keeps one mixed (v, λ) array per band so a
//! time sample costs a phase sweep and a central inverse FFT.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fiber::{spectral_function, SpectralFn};
use crate::gft::{FiberField, Gft, Mixed};
use crate::grid::{axis_frequencies, fft_axes, PhysicalState};
use crate::quantize::{group_terms, op_apply_field, FiberCtx, Profile, Symbol};
use crate::{Complex64, Error, Result};

/// Time window θ with unit integral, supported on [start, start + length].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Window {
    /// C^∞ bump exp(−1/(1−u²)).
    Bump { start: f64, length: f64 },
    /// (1 + cos πu)², C³ at the edges.
    CosSq { start: f64, length: f64 },
}

fn bump_integral() -> f64 {
    static CELL: OnceLock<f64> = OnceLock::new();
    *CELL.get_or_init(|| {
        // trapezoid on a compactly supported C^∞ function converges faster than any power
        let n = 20_000;
        let h = 2.0 / n as f64;
        (1..n).map(|k| bump_shape(-1.0 + k as f64 * h)).sum::<f64>() * h
    })
}

fn bump_shape(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - u * u)).exp()
    }
}

impl Window {
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Window::Bump { start, length } | Window::CosSq { start, length } => (start, start + length),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.support();
        if !(a.is_finite() && b.is_finite() && b > a) {
            return Err(Error::Config(format!("window needs a positive length, got {self:?}")));
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Window::Bump { start, length } => {
                let u = 2.0 * (t - start) / length - 1.0;
                bump_shape(u) * 2.0 / (length * bump_integral())
            }
            Window::CosSq { start, length } => {
                let u = 2.0 * (t - start) / length - 1.0;
                if u.abs() >= 1.0 {
                    0.0
                } else {
                    (1.0 + (PI * u).cos()).powi(2) * 2.0 / (3.0 * length)
                }
            }
        }
    }

    /// θ_s(t) = θ(t + s).
    pub fn shifted(&self, s: f64) -> Window {
        match *self {
            Window::Bump { start, length } => Window::Bump { start: start - s, length },
            Window::CosSq { start, length } => Window::CosSq { start: start - s, length },
        }
    }

    /// Uniform samples over the support and trapezoid weights θ(t_k)Δt.
    pub fn quadrature(&self, intervals: usize) -> (Vec<f64>, Vec<f64>) {
        let (a, b) = self.support();
        let h = (b - a) / intervals as f64;
        let ts: Vec<f64> = (0..=intervals).map(|k| a + k as f64 * h).collect();
        // θ vanishes at both ends, so trapezoid weights are plain θ h
        let ws = ts.iter().map(|&t| self.eval(t) * h).collect();
        (ts, ws)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionSpec {
    pub eps: f64,
    pub tau: f64,
    pub window: Window,
    /// Fixed number of quadrature intervals; derived from the phase rates when absent.
    #[serde(default)]
    pub intervals: Option<usize>,
}

impl EvolutionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(Error::Config(format!("ε must lie in (0, 1], got {}", self.eps)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("τ must be positive, got {}", self.tau)));
        }
        self.window.validate()
    }

    /// ε^{2−τ}
    pub fn time_scale(&self) -> f64 {
        self.eps.powf(2.0 - self.tau)
    }

    /// Phase rate of band n at |λ|.
    pub fn rate(&self, lambda_norm: f64, n: usize, d: usize) -> f64 {
        self.time_scale() * lambda_norm * (2 * n + d) as f64 / 2.0
    }
}

/// F(t): rows of band n multiplied by e^{−i rate t}.
pub fn evolve(gft: &Gft, field: &FiberField, t: f64, spec: &EvolutionSpec) -> FiberField {
    let d = gft.frame.d;
    field.map(|li, m| {
        let ln = gft.lambda_norm(li);
        let mut out = m.clone();
        for r in 0..out.nrows() {
            let ph = Complex64::from_polar(1.0, -spec.rate(ln, gft.frame.degree(r), d) * t);
            for x in out.row_mut(r).iter_mut() {
                *x *= ph;
            }
        }
        out
    })
}

fn keep_rows(field: &FiberField, rows: std::ops::Range<usize>) -> FiberField {
    field.map(|_, m| {
        let mut out = m.clone() * Complex64::new(0.0, 0.0);
        for r in rows.clone() {
            out.set_row(r, &m.row(r));
        }
        out
    })
}

/// Band-resolved trajectory of one initial state.
pub struct Dynamics<'a> {
    pub gft: &'a Gft,
    pub spec: EvolutionSpec,
    pub initial: FiberField,
    bands: Vec<(usize, Mixed)>,
    slot_li: Vec<Option<usize>>,
    /// Subtracted from every rate; a common phase leaves states' densities and expectations unchanged.
    omega_ref: f64,
}

/// Per-symbol data for repeated expectations along a trajectory.
pub struct Prepared {
    groups: Vec<(Profile, Vec<(usize, Mixed)>)>,
}

impl<'a> Dynamics<'a> {
    pub fn new(gft: &'a Gft, initial: &FiberField, spec: &EvolutionSpec) -> Result<Self> {
        spec.validate()?;
        let present = bands_present(gft, initial);
        if present.is_empty() {
            return Err(Error::Domain("initial state has no spectral content".into()));
        }
        let bands = present.iter().map(|&n| (n, gft.mixed(&keep_rows(initial, gft.frame.band(n))))).collect();
        let mut slot_li = vec![None; gft.grid.nz_total()];
        for (li, lp) in gft.lambdas.iter().enumerate() {
            slot_li[lp.slot] = Some(li);
        }
        // reference: the rate at the mass-weighted mean of the data
        let mut num = 0.0;
        let mut den = 0.0;
        for (li, m) in initial.mats.iter().enumerate() {
            if let Some(m) = m {
                let ln = gft.lambda_norm(li);
                for r in 0..m.nrows() {
                    let w = m.row(r).norm_squared() * gft.weight(li);
                    num += w * spec.rate(ln, gft.frame.degree(r), gft.frame.d);
                    den += w;
                }
            }
        }
        let omega_ref = if den > 0.0 { num / den } else { 0.0 };
        Ok(Dynamics { gft, spec: spec.clone(), initial: initial.clone(), bands, slot_li, omega_ref })
    }

    /// Bands carrying the data.
    pub fn bands(&self) -> Vec<usize> {
        self.bands.iter().map(|(n, _)| *n).collect()
    }

    /// Largest |rate − reference| over the bands and slices carrying data.
    pub fn max_relative_rate(&self) -> f64 {
        let mut out: f64 = 0.0;
        for (li, m) in self.initial.mats.iter().enumerate() {
            if let Some(m) = m {
                let ln = self.gft.lambda_norm(li);
                for &n in &self.bands() {
                    if self.gft.frame.band(n).any(|r| m.row(r).iter().any(|x| x.norm() > 0.0)) {
                        out = out.max((self.spec.rate(ln, n, self.gft.frame.d) - self.omega_ref).abs());
                    }
                }
            }
        }
        out
    }

    fn phase(&self, slot: usize, n: usize, t: f64) -> Complex64 {
        match self.slot_li[slot] {
            Some(li) => {
                let r = self.spec.rate(self.gft.lambda_norm(li), n, self.gft.frame.d) - self.omega_ref;
                Complex64::from_polar(1.0, -r * t)
            }
            None => Complex64::new(0.0, 0.0),
        }
    }

    fn sum_bands(&self, parts: &[(usize, Mixed)], t: f64, keep: impl Fn(usize) -> bool) -> PhysicalState {
        let nz = self.gft.grid.nz_total();
        let mut data = vec![Complex64::new(0.0, 0.0); self.gft.grid.len()];
        for (n, m) in parts {
            let ph: Vec<Complex64> =
                (0..nz).map(|s| if self.slot_li[s].is_some_and(&keep) { self.phase(s, *n, t) } else { Complex64::new(0.0, 0.0) }).collect();
            for (row_out, row_in) in data.chunks_mut(nz).zip(m.data.chunks(nz)) {
                for ((o, x), p) in row_out.iter_mut().zip(row_in).zip(&ph) {
                    *o += x * p;
                }
            }
        }
        self.gft.mixed_to_state(&Mixed { data })
    }

    /// ψ(t), up to the common phase e^{i ω_ref t}.
    pub fn state_at(&self, t: f64) -> PhysicalState {
        self.sum_bands(&self.bands, t, |_| true)
    }

    /// Exact ψ(t) (no reference phase removed).
    pub fn exact_state_at(&self, t: f64) -> PhysicalState {
        let mut s = self.state_at(t);
        s.scale(Complex64::from_polar(1.0, -self.omega_ref * t));
        s
    }

    pub fn field_at(&self, t: f64) -> FiberField {
        evolve(self.gft, &self.initial, t, &self.spec)
    }

    pub fn prepare(&self, sym: &Symbol) -> Result<Prepared> {
        let gft = self.gft;
        let e2 = self.spec.eps * self.spec.eps;
        let mut groups = Vec::new();
        for (profile, fibers) in group_terms(&sym.terms) {
            let mut per_band = Vec::new();
            for &n in &self.bands() {
                let part = keep_rows(&self.initial, gft.frame.band(n));
                let mats = part
                    .mats
                    .par_iter()
                    .enumerate()
                    .map(|(li, m)| match m {
                        Some(m) => {
                            let lam: Vec<f64> = gft.lambdas[li].lambda.iter().map(|x| x * e2).collect();
                            let ctx = FiberCtx { group: &gft.group, frame: &gft.frame, adapted: &gft.adapted[li] };
                            let mut acc = m.clone() * Complex64::new(0.0, 0.0);
                            for f in &fibers {
                                acc += f.eval(&lam, &ctx)? * m;
                            }
                            Ok(Some(acc))
                        }
                        None => Ok(None),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let field = FiberField { mats };
                if !field.is_zero() {
                    per_band.push((n, gft.mixed(&field)));
                }
            }
            groups.push((profile, per_band));
        }
        Ok(Prepared { groups })
    }

    /// (Op_ε(σ)ψ(t), ψ(t)).
    pub fn expectation_at(&self, prep: &Prepared, t: f64) -> Complex64 {
        let psi = self.state_at(t);
        self.expectation_with(prep, t, &psi)
    }

    fn expectation_with(&self, prep: &Prepared, t: f64, psi: &PhysicalState) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (profile, parts) in &prep.groups {
            match profile {
                Profile::Uniform(c) => acc += self.sum_bands(parts, t, |_| true).inner(psi) * c,
                Profile::Grid(a) => acc += self.sum_bands(parts, t, |_| true).multiply(a).inner(psi),
                Profile::ByLambda { groups, group_of, .. } => {
                    for (gi, a) in groups.iter().enumerate() {
                        acc += self.sum_bands(parts, t, |li| group_of[li] == gi).multiply(a).inner(psi);
                    }
                }
            }
        }
        acc
    }

    /// Quadrature intervals resolving θ and the fastest relative phase (20 samples per period).
    pub fn intervals_for(&self, window: &Window) -> usize {
        if let Some(n) = self.spec.intervals {
            return n;
        }
        let (a, b) = window.support();
        let rate = self.max_relative_rate();
        let mut n = (((b - a) * rate * 20.0 / (2.0 * PI)).ceil() as usize).max(64);
        // the weights must also integrate θ to 1e−10
        while (window.quadrature(n).1.iter().sum::<f64>() - 1.0).abs() > 1e-10 && n < 1 << 20 {
            n *= 2;
        }
        n
    }
}

fn bands_present(gft: &Gft, field: &FiberField) -> Vec<usize> {
    (0..=gft.frame.a)
        .filter(|&n| field.mats.iter().flatten().any(|m| gft.frame.band(n).any(|r| m.row(r).iter().any(|x| x.norm() > 0.0))))
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct TimeAverage {
    pub value: Complex64,
    /// Same quadrature with every other sample.
    pub coarse: Complex64,
    pub intervals: usize,
    /// |value − coarse| > 1e−4 |value| + 1e−12
    pub flagged: bool,
}

/// ℓ_ε(θ, σ) = ∫θ(t)(Op_ε(σ)ψ(t), ψ(t))dt by trapezoid, with the halved grid as a doubling check.
///
/// Each pair of slots (λ, λ') contributes a fixed bilinear term times a pure phase, so the
/// trapezoid sum is taken per pair on the phase alone and no state is ever formed in time.
pub fn time_averaged_expectation(dynamics: &Dynamics, sym: &Symbol, window: &Window) -> Result<TimeAverage> {
    let prep = dynamics.prepare(sym)?;
    time_average_prepared(dynamics, &prep, window)
}

/// Transformed profile (None for a constant), scale, and the λ-slices it applies to.
type Piece = (Option<Vec<Complex64>>, Complex64, Box<dyn Fn(usize) -> bool>);

pub fn time_average_prepared(dynamics: &Dynamics, prep: &Prepared, window: &Window) -> Result<TimeAverage> {
    window.validate()?;
    let half = dynamics.intervals_for(window).div_ceil(2);
    let n = 2 * half;
    let (ts, ws) = window.quadrature(n);
    let gft = dynamics.gft;
    let grid = &gft.grid;
    let nz = grid.nz_total();
    // slots carrying data; the others have zero phase in every band
    let slots: Vec<usize> = (0..nz).filter(|&s| dynamics.slot_li[s].is_some_and(|li| dynamics.initial.mats[li].is_some())).collect();
    let ns = slots.len();
    let diff = slot_differences(grid, &slots);
    let gather = |m: &Mixed, keep: &dyn Fn(usize) -> bool| -> Vec<Complex64> {
        let mut out = Vec::with_capacity(grid.nv_total() * ns);
        for row in m.data.chunks(nz) {
            out.extend(slots.iter().map(|&s| {
                if keep(dynamics.slot_li[s].expect("active slot")) {
                    row[s] * grid.slot_sign(s)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            }));
        }
        out
    };
    let psi: Vec<(usize, Vec<Complex64>)> = dynamics.bands.iter().map(|(b, m)| (*b, gather(m, &|_| true).iter().map(|x| x.conj()).collect())).collect();
    let rates = |b: usize| -> Vec<f64> {
        slots.iter().map(|&s| dynamics.spec.rate(gft.lambda_norm(dynamics.slot_li[s].unwrap()), b, gft.frame.d)).collect()
    };
    let mut hats = std::collections::BTreeMap::new();
    let mut fine = Complex64::new(0.0, 0.0);
    let mut coarse = Complex64::new(0.0, 0.0);
    for (profile, parts) in &prep.groups {
        let pieces: Vec<Piece> = match profile {
            Profile::Uniform(c) => vec![(None, *c * nz as f64, Box::new(|_| true))],
            Profile::Grid(a) => vec![(Some(z_transform(grid, a)), Complex64::new(1.0, 0.0), Box::new(|_| true))],
            Profile::ByLambda { groups, group_of, .. } => groups
                .iter()
                .enumerate()
                .map(|(gi, a)| {
                    let go = group_of.clone();
                    let keep: Box<dyn Fn(usize) -> bool> = Box::new(move |li| go[li] == gi);
                    (Some(z_transform(grid, a)), Complex64::new(1.0, 0.0), keep)
                })
                .collect(),
        };
        for (ahat, scale, keep) in &pieces {
            for (bn, pm) in parts {
                let p = gather(pm, keep.as_ref());
                for (bm, q) in &psi {
                    let k = pair_kernel(&p, q, ahat.as_deref(), &diff, ns, nz);
                    let (hf, hc) = &*hats.entry((*bn, *bm)).or_insert_with(|| window_transform(&rates(*bn), &rates(*bm), &ts, &ws));
                    for ((kv, f), c) in k.iter().zip(hf).zip(hc) {
                        fine += kv * f * scale;
                        coarse += kv * c * scale;
                    }
                }
            }
        }
    }
    let vol = grid.cell_volume();
    fine *= vol;
    coarse *= vol;
    let flagged = (fine - coarse).norm() > 1e-4 * fine.norm() + 1e-12;
    Ok(TimeAverage { value: fine, coarse, intervals: n, flagged })
}

/// Unnormalized forward z-FFT of a sampled profile.
fn z_transform(grid: &crate::grid::GridSpec, a: &[Complex64]) -> Vec<Complex64> {
    let mut out = a.to_vec();
    crate::grid::fft_z(grid, &mut out, false);
    out
}

/// Flattened index of slots[b] − slots[a] (mod n_z per axis), row-major in (a, b).
fn slot_differences(grid: &crate::grid::GridSpec, slots: &[usize]) -> Vec<usize> {
    let idx: Vec<Vec<usize>> = slots.iter().map(|&s| crate::grid::GridSpec::unflatten(s, grid.n_z, grid.p)).collect();
    let mut out = Vec::with_capacity(slots.len() * slots.len());
    for ia in &idx {
        for ib in &idx {
            out.push(ia.iter().zip(ib).fold(0, |acc, (x, y)| acc * grid.n_z + (y + grid.n_z - x) % grid.n_z));
        }
    }
    out
}

/// K(a, b) = Σ_v p(v, a) q(v, b) â(v, slot_b − slot_a); without â only the diagonal survives.
/// Fixed row chunks summed in order keep the result independent of the thread count.
fn pair_kernel(p: &[Complex64], q: &[Complex64], ahat: Option<&[Complex64]>, diff: &[usize], ns: usize, nz: usize) -> Vec<Complex64> {
    const ROWS: usize = 32;
    let zero = Complex64::new(0.0, 0.0);
    let partial: Vec<Vec<Complex64>> = p
        .par_chunks(ROWS * ns)
        .enumerate()
        .map(|(ci, pc)| {
            let mut acc = vec![zero; ns * ns];
            for (r, prow) in pc.chunks(ns).enumerate() {
                let v = ci * ROWS + r;
                let qrow = &q[v * ns..(v + 1) * ns];
                match ahat {
                    Some(ah) => {
                        let arow = &ah[v * nz..(v + 1) * nz];
                        for (a, pa) in prow.iter().enumerate() {
                            if *pa == zero {
                                continue;
                            }
                            let out = &mut acc[a * ns..(a + 1) * ns];
                            for ((o, qb), &k) in out.iter_mut().zip(qrow).zip(&diff[a * ns..(a + 1) * ns]) {
                                *o += pa * qb * arow[k];
                            }
                        }
                    }
                    None => {
                        for (a, (pa, qa)) in prow.iter().zip(qrow).enumerate() {
                            acc[a * ns + a] += pa * qa;
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut out = vec![zero; ns * ns];
    for part in partial {
        for (o, x) in out.iter_mut().zip(part) {
            *o += x;
        }
    }
    out
}

/// Trapezoid values of ∫θ(t)e^{−i(r_a − r_b)t}dt on all pairs, fine and every-other-node.
fn window_transform(ra: &[f64], rb: &[f64], ts: &[f64], ws: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
    let h = ts[1] - ts[0];
    let pairs: Vec<(Complex64, Complex64)> = ra
        .par_iter()
        .flat_map_iter(|&x| {
            rb.iter().map(move |&y| {
                let w = x - y;
                let step = Complex64::from_polar(1.0, -w * h);
                let mut ph = Complex64::from_polar(1.0, -w * ts[0]);
                let mut f = Complex64::new(0.0, 0.0);
                let mut c = Complex64::new(0.0, 0.0);
                for (k, wk) in ws.iter().enumerate() {
                    f += ph * wk;
                    if k % 2 == 0 {
                        c += ph * (2.0 * wk);
                    }
                    // re-anchor now and then so the recurrence does not drift
                    ph = if k % 64 == 63 { Complex64::from_polar(1.0, -w * ts[k + 1]) } else { ph * step };
                }
                (f, c)
            })
        })
        .collect();
    pairs.into_iter().unzip()
}

/// iε^τ d/dt(Op_ε(σ)ψ, ψ) by centred differences against ([Op_ε(σ), −(ε²/2)Δ_G]ψ, ψ).
pub fn energy_derivative_check(dynamics: &Dynamics, sym: &Symbol, t: f64, h: f64) -> Result<(Complex64, Complex64)> {
    let gft = dynamics.gft;
    let spec = &dynamics.spec;
    let expect = |s: f64| -> Result<Complex64> {
        let f = dynamics.field_at(s);
        Ok(op_apply_field(gft, sym, spec.eps, &f)?.inner(&gft.inverse(&f)))
    };
    let lhs = Complex64::new(0.0, spec.eps.powf(spec.tau)) * (expect(t + h)? - expect(t - h)?) / (2.0 * h);
    let f = dynamics.field_at(t);
    let half_e2 = spec.eps * spec.eps / 2.0;
    let lf = f.map(|li, m| {
        let h = spectral_function(&SpectralFn::Identity, &gft.lambdas[li].lambda, &gft.frame).expect("λ ≠ 0").mat;
        h * m * Complex64::new(half_e2, 0.0)
    });
    let psi = gft.inverse(&f);
    let lpsi = gft.inverse(&lf);
    let rhs = op_apply_field(gft, sym, spec.eps, &lf)?.inner(&psi) - op_apply_field(gft, sym, spec.eps, &f)?.inner(&lpsi);
    Ok((lhs, rhs))
}

/// Free Euclidean propagator in v applied to every z-slice: v-Fourier modes ξ pick up
/// e^{−iε^{2−κ}t|ξ|²/2}.
pub fn euclidean_evolve(state: &PhysicalState, t: f64, eps: f64, kappa: f64) -> PhysicalState {
    let grid = &state.grid;
    let nv = grid.dim_v();
    let axes: Vec<usize> = (0..nv).collect();
    let mut data = state.values.clone();
    fft_axes(grid, &mut data, &axes, false);
    let freqs = axis_frequencies(grid.n_v, grid.v_extent);
    let c = eps.powf(2.0 - kappa) * t / 2.0;
    let nz = grid.nz_total();
    let norm = 1.0 / grid.nv_total() as f64;
    for (iv, row) in data.chunks_mut(nz).enumerate() {
        let xi2: f64 = grid.v_index(iv).iter().map(|&k| freqs[k] * freqs[k]).sum();
        let ph = Complex64::from_polar(norm, -c * xi2);
        for x in row.iter_mut() {
            *x *= ph;
        }
    }
    fft_axes(grid, &mut data, &axes, true);
    PhysicalState { grid: grid.clone(), values: data }
}

/// e^{i h V_i²} exactly: in (v_i, z)-Fourier space with the other v fixed, V_i acts as
/// i(ξ_i + Σ_k c^i_k(v) ζ_k), where c^i_k does not involve v_i.
fn field_square_step(g: &crate::htype::GroupStructure, state: &mut PhysicalState, i: usize, h: f64) {
    let grid = state.grid.clone();
    let nv = grid.dim_v();
    let mut axes = vec![i];
    axes.extend(nv..nv + grid.p);
    fft_axes(&grid, &mut state.values, &axes, false);
    let vf = axis_frequencies(grid.n_v, grid.v_extent);
    let zf = axis_frequencies(grid.n_z, grid.z_extent);
    let carrier = grid.carrier();
    let nz = grid.nz_total();
    let norm = 1.0 / (grid.n_v * nz) as f64;
    let zeta: Vec<Vec<f64>> = (0..nz)
        .map(|slot| {
            let mut k = Vec::with_capacity(grid.p);
            let mut s = slot;
            for _ in 0..grid.p {
                k.push(s % grid.n_z);
                s /= grid.n_z;
            }
            k.reverse();
            k.iter().enumerate().map(|(a, &ki)| zf[ki] + carrier[a]).collect()
        })
        .collect();
    state.values.par_chunks_mut(nz).enumerate().for_each(|(iv, row)| {
        let idx = grid.v_index(iv);
        let v = grid.v_coords(iv);
        let xi = vf[idx[i]];
        // c^i_k(v) = ½ Σ_m v_m B_k[m][i]; the m = i entry vanishes
        let c: Vec<f64> = (0..grid.p).map(|k| 0.5 * (0..nv).filter(|&m| m != i).map(|m| v[m] * g.b[k][m * nv + i]).sum::<f64>()).collect();
        for (slot, x) in row.iter_mut().enumerate() {
            let s = xi + c.iter().zip(&zeta[slot]).map(|(a, b)| a * b).sum::<f64>();
            *x *= Complex64::from_polar(norm, -h * s * s);
        }
    });
    fft_axes(&grid, &mut state.values, &axes, true);
}

/// Strang splitting of e^{i(ε^{2−τ}/2) t Δ_G} over the fields V_1..V_{2d}.
pub fn group_split_step(g: &crate::htype::GroupStructure, state: &PhysicalState, t: f64, eps: f64, tau: f64, steps: usize) -> PhysicalState {
    let mut s = state.clone();
    let nv = state.grid.dim_v();
    let h = eps.powf(2.0 - tau) * t / (2.0 * steps as f64);
    for _ in 0..steps {
        for i in 0..nv - 1 {
            field_square_step(g, &mut s, i, h / 2.0);
        }
        field_square_step(g, &mut s, nv - 1, h);
        for i in (0..nv - 1).rev() {
            field_square_step(g, &mut s, i, h / 2.0);
        }
    }
    s
}

/// Spectral form of the same propagator, for states resolved by the transform.
pub fn spectral_evolve_state(gft: &Gft, state: &PhysicalState, t: f64, spec: &EvolutionSpec) -> Result<PhysicalState> {
    Ok(gft.inverse(&evolve(gft, &gft.forward(state)?, t, spec)))
}

/// ∫ v_j |ψ|² or ∫ z_k |ψ|² per coordinate, with the mass fraction in the outer half of the box.
pub fn centroid(state: &PhysicalState, central: bool) -> (Vec<f64>, f64) {
    let grid = &state.grid;
    let nz = grid.nz_total();
    let dim = if central { grid.p } else { grid.dim_v() };
    let mut c = vec![0.0; dim];
    let mut mass = 0.0;
    let mut outer = 0.0;
    for (idx, x) in state.values.iter().enumerate() {
        let w = x.norm_sqr();
        let coords = if central { grid.z_coords(idx % nz) } else { grid.v_coords(idx / nz) };
        let ext = if central { grid.z_extent } else { grid.v_extent };
        for (ci, xi) in c.iter_mut().zip(&coords) {
            *ci += w * xi;
        }
        if coords.iter().any(|x| x.abs() > ext / 2.0) {
            outer += w;
        }
        mass += w;
    }
    for ci in c.iter_mut() {
        *ci /= mass;
    }
    (c, outer / mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fiber::CMat;
    use crate::htype::GroupStructure;
    use crate::grid::GridSpec;
    use crate::quantize::{FiberPart, Term};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> Gft {
        let g = GroupStructure::heisenberg(1);
        let grid = GridSpec::new(&g, 5.0, PI, 64, 32).unwrap();
        Gft::new(&g, &grid, 12).unwrap()
    }

    fn random_field(gft: &Gft, seed: u64, bands: &[usize]) -> FiberField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = gft.frame.len();
        FiberField {
            mats: gft
                .lambdas
                .iter()
                .map(|lp| {
                    let l = lp.lambda[0];
                    if !(8.0..=18.0).contains(&l) {
                        return None;
                    }
                    let g = (-(l - 12.0).powi(2) / 4.0).exp();
                    let mut m = CMat::zeros(n, n);
                    for &b in bands {
                        for r in gft.frame.band(b) {
                            for c in 0..4 {
                                m[(r, c)] = Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * g;
                            }
                        }
                    }
                    Some(m)
                })
                .collect(),
        }
    }

    fn spec(eps: f64, tau: f64) -> EvolutionSpec {
        EvolutionSpec { eps, tau, window: Window::Bump { start: 0.0, length: 1.0 }, intervals: None }
    }

    #[test]
    fn windows_have_unit_integral() {
        for w in [Window::Bump { start: 0.3, length: 1.7 }, Window::CosSq { start: -1.0, length: 0.5 }] {
            let (_, ws) = w.quadrature(400);
            assert!((ws.iter().sum::<f64>() - 1.0).abs() < 1e-10, "{w:?}");
            let s = w.shifted(0.25);
            assert!((s.eval(0.2) - w.eval(0.45)).abs() < 1e-14);
        }
        assert!(Window::Bump { start: 0.0, length: 0.0 }.validate().is_err());
    }

    #[test]
    fn evolve_examples() {
        let gft = setup();
        let f = random_field(&gft, 1, &[0, 1, 2]);
        let sp = spec(0.5, 2.0);
        assert_eq!(evolve(&gft, &f, 0.0, &sp).max_diff(&f), 0.0);
        let two = evolve(&gft, &evolve(&gft, &f, 0.3, &sp), 0.45, &sp);
        assert!(two.max_diff(&evolve(&gft, &f, 0.75, &sp)) < 1e-12);
        let nrm = gft.hs_norm_sqr(&f);
        let mut g = f.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            g = evolve(&gft, &g, rng.random::<f64>(), &sp);
        }
        assert!((gft.hs_norm_sqr(&g) - nrm).abs() <= 1e-12 * nrm);
        // single band: one scalar phase per λ
        let b = random_field(&gft, 2, &[1]);
        let sp = spec(0.3, 1.5);
        let t = 0.7;
        let out = evolve(&gft, &b, t, &sp);
        for (li, m) in b.mats.iter().enumerate() {
            if let Some(m) = m {
                let ph = Complex64::from_polar(1.0, -sp.time_scale() * t * gft.lambda_norm(li) * 3.0 / 2.0);
                assert!((out.mats[li].as_ref().unwrap() - m * ph).camax() < 1e-14);
            }
        }
    }

    #[test]
    fn evolve_commutes_with_cutoffs() {
        use crate::gft::CutoffKind;
        let gft = setup();
        let f = random_field(&gft, 4, &[0, 1, 3]);
        let sp = spec(0.4, 1.0);
        let a = evolve(&gft, &gft.spectral_cutoff(&f, CutoffKind::High, 4.0, 0.4).unwrap(), 0.9, &sp);
        let b = gft.spectral_cutoff(&evolve(&gft, &f, 0.9, &sp), CutoffKind::High, 4.0, 0.4).unwrap();
        assert_eq!(a.max_diff(&b), 0.0);
    }

    #[test]
    fn dynamics_matches_direct_evolution() {
        let gft = setup();
        let f = random_field(&gft, 5, &[0, 2]);
        let dy = Dynamics::new(&gft, &f, &spec(0.5, 2.0)).unwrap();
        assert_eq!(dy.bands(), vec![0, 2]);
        for t in [0.0, 0.37, 1.2] {
            let direct = gft.inverse(&evolve(&gft, &f, t, &dy.spec));
            assert!(dy.exact_state_at(t).rel_distance(&direct) < 1e-10);
        }
    }

    #[test]
    fn time_average_examples() {
        let gft = setup();
        let f = random_field(&gft, 6, &[1]);
        let mut f0 = f.clone();
        let nrm = gft.inverse(&f).norm_sqr();
        f0 = f0.scale(Complex64::new(1.0 / nrm.sqrt(), 0.0));
        let dy = Dynamics::new(&gft, &f0, &spec(0.5, 2.0)).unwrap();
        let w = Window::Bump { start: 0.0, length: 1.0 };
        let one = Symbol::single(Profile::Uniform(Complex64::new(1.0, 0.0)), FiberPart::One);
        let avg = time_averaged_expectation(&dy, &one, &w).unwrap();
        assert!((avg.value - 1.0).norm() < 1e-8, "{:?}", avg);
        assert!(!avg.flagged);
        // diagonal, single band, x-independent: stationary
        let sym = Symbol::single(Profile::Uniform(Complex64::new(1.0, 0.0)), FiberPart::Spectral(SpectralFn::SmoothCutoff { u: 0.02 }));
        let avg = time_averaged_expectation(&dy, &sym, &w).unwrap();
        let inst = dy.expectation_at(&dy.prepare(&sym).unwrap(), 0.0);
        assert!((avg.value - inst).norm() < 1e-9);
        // too few samples on a fast two-band observable is flagged
        let f2 = random_field(&gft, 7, &[0, 1]);
        let mut sp = spec(0.5, 1.0);
        sp.intervals = Some(8);
        let dy2 = Dynamics::new(&gft, &f2, &sp).unwrap();
        let lad = Symbol::single(
            Profile::Uniform(Complex64::new(1.0, 0.0)),
            FiberPart::Product(vec![FiberPart::compress(0, 1, FiberPart::Field(crate::fiber::Field::P(0)))]),
        );
        assert!(time_averaged_expectation(&dy2, &lad, &w).unwrap().flagged);
    }

    #[test]
    fn pairwise_average_matches_sampled_trapezoid() {
        let gft = setup();
        let f = random_field(&gft, 11, &[0, 2]);
        let dy = Dynamics::new(&gft, &f, &spec(0.5, 1.0)).unwrap();
        let a = Profile::from_fn(&gft.grid, |v, z| Complex64::new((-(v[0] * v[0]) / 3.0).exp(), 0.2 * (2.0 * z[0]).sin()));
        let sym = Symbol::new(vec![
            Term::new(a, FiberPart::Band(2)),
            Term::new(Profile::Uniform(Complex64::new(0.0, 0.7)), FiberPart::compress(0, 2, FiberPart::Field(crate::fiber::Field::Q(0)))),
        ]);
        let w = Window::CosSq { start: 0.1, length: 0.8 };
        let prep = dy.prepare(&sym).unwrap();
        let avg = time_average_prepared(&dy, &prep, &w).unwrap();
        let (ts, ws) = w.quadrature(avg.intervals);
        let direct: Complex64 = ts.iter().zip(&ws).map(|(&t, wk)| dy.expectation_at(&prep, t) * wk).sum();
        assert!((avg.value - direct).norm() < 1e-10 * direct.norm().max(1.0), "{} {direct}", avg.value);
    }

    #[test]
    fn energy_derivative_identity() {
        let gft = setup();
        let f = random_field(&gft, 8, &[0, 1]);
        let sp = spec(0.5, 1.5);
        let dy = Dynamics::new(&gft, &f, &sp).unwrap();
        let a = Profile::from_fn(&gft.grid, |v, z| {
            Complex64::new((-(v[0] * v[0] + v[1] * v[1]) / 2.0).exp() * (1.0 + 0.3 * z[0].cos()), 0.0)
        });
        let sym = Symbol::new(vec![
            Term::new(a.clone(), FiberPart::Band(1)),
            Term::new(Profile::Uniform(Complex64::new(0.5, 0.0)), FiberPart::compress(0, 1, FiberPart::Field(crate::fiber::Field::Q(0)))),
        ]);
        for h in [1e-3, 5e-4] {
            let (l, r) = energy_derivative_check(&dy, &sym, 0.2, h).unwrap();
            assert!((l - r).norm() < 1e-6 * r.norm().max(1.0) + 50.0 * h * h, "{l} {r}");
        }
    }

    #[test]
    fn euclidean_examples() {
        let g = GroupStructure::heisenberg(1);
        let grid = GridSpec::new(&g, 8.0, 4.0, 128, 8).unwrap();
        let eps = 0.1;
        let st = PhysicalState::from_fn(&grid, |v, _| {
            Complex64::from_polar((-(v[0] * v[0] + v[1] * v[1]) * 2.0).exp(), v[0] / eps)
        });
        assert!(euclidean_evolve(&st, 0.0, eps, 1.0).rel_distance(&st) < 1e-14);
        let out = euclidean_evolve(&st, 2.0, eps, 1.0);
        assert!((out.l2_norm() - st.l2_norm()).abs() < 1e-12 * st.l2_norm());
        let (c0, _) = centroid(&st, false);
        let (c1, _) = centroid(&out, false);
        assert!(((c1[0] - c0[0]) / 2.0 - 1.0).abs() < 0.01, "{c1:?}");
        assert!(c1[1].abs() < 1e-10);
    }

    #[test]
    fn split_step_matches_spectral_propagator() {
        let gft = setup();
        let f = random_field(&gft, 9, &[0, 1]);
        let st = gft.inverse(&f);
        let sp = spec(0.5, 2.0);
        let t = 0.1;
        let exact = spectral_evolve_state(&gft, &st, t, &sp).unwrap();
        let e1 = group_split_step(&gft.group, &st, t, 0.5, 2.0, 40).rel_distance(&exact);
        let e2 = group_split_step(&gft.group, &st, t, 0.5, 2.0, 80).rel_distance(&exact);
        assert!(e2 < 1e-3, "{e1} {e2}");
        assert!(e1 / e2 > 3.0, "{e1} {e2}");
    }
}
