//! Wave packets and the measure-level diagnostics: Egorov residuals, anti-diagonal decay,
//! centroids, dispersion, ε-oscillation tails, marginals, and the j_ε identity.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fiber::{rep_matrix, smooth_step, CMat};
use crate::gft::{FiberField, Gft};
use crate::grid::{axis_frequencies, fft_axes, GridSpec, PhysicalState};
use crate::htype::{inverse, quasi_norm, GroupPoint, GroupStructure};
use crate::propagate::{time_average_prepared, time_averaged_expectation, Dynamics, TimeAverage, Window};
use crate::quantize::{central_symbol, flow_phi, sublaplacian_symbol, v_pi_v_sigma1, FiberPart, Profile, Symbol, Term};
use crate::{Complex64, Error, Result};

/// A λ₀-packet concentrated on band n; ε is snapped so that λ₀/ε² lies on the λ-grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WavePacketSpec {
    pub x0: GroupPoint,
    pub lambda0: Vec<f64>,
    pub n: usize,
    /// Standard deviation of |g|² in each central coordinate.
    pub width_z: f64,
    pub eps: f64,
}

/// Grid shape for packets. The v-box scales like 1/√|λ|, the λ-window is centred on λ₀/ε².
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacketLayout {
    pub n_v: usize,
    pub n_z: usize,
    pub z_extent: f64,
    /// v half-width in units of 1/√|λ₀/ε²|.
    pub v_scale: f64,
    pub a: usize,
}

impl Default for PacketLayout {
    fn default() -> Self {
        PacketLayout { n_v: 64, n_z: 64, z_extent: 4.0, v_scale: 14.0, a: 24 }
    }
}

pub struct Packet {
    pub gft: Gft,
    pub field: FiberField,
    pub state: PhysicalState,
    /// ε after the grid snap.
    pub eps: f64,
    pub lambda_c: Vec<f64>,
}

/// Heterodyne grid for a packet: offset k_c = round(λ₀ L_z/(π ε²)), ε′ = √(|λ₀|/|λ_c|).
pub fn packet_grid(g: &GroupStructure, spec: &WavePacketSpec, layout: &PacketLayout, max_band: usize) -> Result<(GridSpec, f64, Vec<f64>)> {
    if spec.lambda0.len() != g.p {
        return Err(Error::Dimension(format!("λ₀ has {} entries, group has p = {}", spec.lambda0.len(), g.p)));
    }
    let l0: f64 = spec.lambda0.iter().map(|x| x * x).sum::<f64>().sqrt();
    if l0 == 0.0 {
        return Err(Error::Domain("λ₀ must be nonzero".into()));
    }
    if !(spec.eps > 0.0 && spec.eps <= 1.0) {
        return Err(Error::Domain(format!("ε must lie in (0, 1], got {}", spec.eps)));
    }
    let dl = std::f64::consts::PI / layout.z_extent;
    let kc: Vec<i64> = spec.lambda0.iter().map(|x| (x / (spec.eps * spec.eps) / dl).round() as i64).collect();
    let lc: Vec<f64> = kc.iter().map(|&k| k as f64 * dl).collect();
    let lcn: f64 = lc.iter().map(|x| x * x).sum::<f64>().sqrt();
    let max_eps = (l0 / (2.0 * dl)).sqrt();
    if lcn == 0.0 {
        return Err(Error::Domain(format!("grid cannot hold λ₀/ε²; largest admissible ε ≈ {max_eps:.4}")));
    }
    let eps = (l0 / lcn).sqrt();
    if (eps / spec.eps - 1.0).abs() > 0.01 {
        return Err(Error::Domain(format!(
            "λ-grid snap moves ε from {} to {eps:.5} (> 1%); largest admissible ε ≈ {max_eps:.4}",
            spec.eps
        )));
    }
    let lv = (layout.v_scale + 2.0 * ((2 * max_band + 1) as f64).sqrt()) / lcn.sqrt();
    let grid = GridSpec::new(g, lv, layout.z_extent, layout.n_v, layout.n_z)?.with_offset(kc)?;
    Ok((grid, eps, lc))
}

/// 𝓕ψ₀(λ) = ĝ(λ − λ_c) Σ_b c_b |h_b⟩⟨h_0| (π^λ_{x₀})*, normalized in L².
pub fn packet_field(gft: &Gft, spec: &WavePacketSpec, lambda_c: &[f64], bands: &[(usize, Complex64)]) -> Result<(FiberField, PhysicalState)> {
    let frame = &gft.frame;
    let d = frame.d;
    let mut rows = Vec::new();
    for &(b, c) in bands {
        let mut alpha = vec![0; d];
        alpha[0] = b;
        let r = frame.index_of(&alpha).ok_or_else(|| Error::Domain(format!("band {b} above the frame cutoff {}", frame.a)))?;
        rows.push((r, c));
    }
    let w2 = spec.width_z * spec.width_z;
    let ghat = |lam: &[f64]| -> f64 { (-w2 * lam.iter().zip(lambda_c).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).exp() };
    // the envelope must have decayed before the edge of the λ-window
    let edge = gft.grid.dlambda() * (gft.grid.n_z / 2) as f64;
    if (-w2 * edge * edge).exp() > 1e-8 {
        return Err(Error::Domain(format!(
            "z-envelope width {} too narrow for the λ-window (needs n_z ≥ {})",
            spec.width_z,
            (2.0 * (18.4f64).sqrt() / (spec.width_z * gft.grid.dlambda())).ceil()
        )));
    }
    let xinv = inverse(&spec.x0);
    let pure_central = spec.x0.v.iter().all(|x| *x == 0.0);
    let n = frame.len();
    let mats: Vec<Option<CMat>> = gft
        .lambdas
        .par_iter()
        .map(|lp| {
            let amp = ghat(&lp.lambda);
            if amp < 1e-18 {
                return Ok(None);
            }
            let row0: Vec<Complex64> = if pure_central {
                let ph: f64 = lp.lambda.iter().zip(&xinv.z).map(|(a, b)| a * b).sum();
                let mut r = vec![Complex64::new(0.0, 0.0); n];
                r[0] = Complex64::from_polar(1.0, ph);
                r
            } else {
                let pm = rep_matrix(&gft.group, &lp.lambda, frame, &xinv)?;
                let r: Vec<Complex64> = (0..n).map(|c| pm[(0, c)]).collect();
                let nrm: f64 = r.iter().map(|x| x.norm_sqr()).sum();
                if (nrm - 1.0).abs() > 1e-8 {
                    return Err(Error::Domain("v₀ displaces the packet beyond the Hermite cutoff".into()));
                }
                r
            };
            let mut m = CMat::zeros(n, n);
            for &(r, c) in &rows {
                for (k, x) in row0.iter().enumerate() {
                    m[(r, k)] = c * x * amp;
                }
            }
            Ok(Some(m))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut field = FiberField { mats };
    let mut state = gft.inverse(&field);
    let nrm = state.l2_norm();
    if nrm == 0.0 {
        return Err(Error::Domain("packet has no content on the λ-grid".into()));
    }
    field = field.scale(Complex64::new(1.0 / nrm, 0.0));
    state.scale(Complex64::new(1.0 / nrm, 0.0));
    Ok((field, state))
}

pub fn synthesize_packet(g: &GroupStructure, spec: &WavePacketSpec, layout: &PacketLayout) -> Result<Packet> {
    synthesize_bands(g, spec, layout, &[(spec.n, Complex64::new(1.0, 0.0))])
}

/// Superposition over several bands sharing one envelope.
pub fn synthesize_bands(g: &GroupStructure, spec: &WavePacketSpec, layout: &PacketLayout, bands: &[(usize, Complex64)]) -> Result<Packet> {
    let max_band = bands.iter().map(|b| b.0).max().unwrap_or(spec.n);
    let (grid, eps, lambda_c) = packet_grid(g, spec, layout, max_band)?;
    let gft = Gft::new(g, &grid, layout.a)?;
    let (field, state) = packet_field(&gft, spec, &lambda_c, bands)?;
    Ok(Packet { gft, field, state, eps, lambda_c })
}

/// η(x) e^{iω₀·v/ε}: Gaussian envelope (|η|² standard deviations width_v, width_z) centred at x₀.
pub fn synthesize_euclidean_packet(grid: &GridSpec, x0: &GroupPoint, omega0: &[f64], width_v: f64, width_z: f64, eps: f64) -> Result<PhysicalState> {
    let nyq = std::f64::consts::PI / grid.dv();
    let top = omega0.iter().map(|w| w.abs()).fold(0.0, f64::max) / eps + 6.0 / (2.0 * width_v);
    if top > nyq {
        return Err(Error::Domain(format!("ω₀/ε plus envelope spread {top:.2} exceeds the v-Nyquist limit {nyq:.2}")));
    }
    let carrier = grid.carrier();
    let mut st = PhysicalState::from_fn(grid, |v, z| {
        let ev: f64 = v.iter().zip(&x0.v).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (4.0 * width_v * width_v);
        let ez: f64 = z.iter().zip(&x0.z).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (4.0 * width_z * width_z);
        let ph: f64 = v.iter().zip(omega0).map(|(a, w)| a * w).sum::<f64>() / eps;
        Complex64::from_polar((-ev - ez).exp(), ph)
    });
    if carrier.iter().any(|c| *c != 0.0) {
        return Err(Error::Domain("Euclidean packets live on grids without a central carrier".into()));
    }
    let n = st.l2_norm();
    st.scale(Complex64::new(1.0 / n, 0.0));
    Ok(st)
}

#[derive(Clone, Copy, Debug)]
pub struct EgorovReport {
    pub lhs: TimeAverage,
    pub rhs: TimeAverage,
    pub residual: f64,
}

/// |∫θ(t)(Op_ε(σ)ψ(t),ψ(t))dt − ∫θ(t+s)(Op_ε(Φ^s σ)ψ(t),ψ(t))dt| at τ = 2; for τ > 2 the window is not shifted.
pub fn egorov_residual(dynamics: &Dynamics, sym_d: &Symbol, window: &Window, s: f64) -> Result<EgorovReport> {
    if !sym_d.is_h_diagonal() {
        return Err(Error::Domain("Egorov residual needs an H-diagonal symbol".into()));
    }
    let lhs = time_averaged_expectation(dynamics, sym_d, window)?;
    let flowed = flow_phi(dynamics.gft, sym_d, s)?;
    let tau = dynamics.spec.tau;
    let w2 = if (tau - 2.0).abs() < 1e-12 { window.shifted(s) } else { *window };
    let rhs = time_averaged_expectation(dynamics, &flowed, &w2)?;
    Ok(EgorovReport { lhs, rhs, residual: (lhs.value - rhs.value).norm() })
}

#[derive(Clone, Copy, Debug)]
pub struct AntidiagonalReport {
    pub average: TimeAverage,
    pub instantaneous: Complex64,
    /// The t = 0 pairing vanishes, so decay says nothing.
    pub degenerate: bool,
}

pub fn antidiagonal_value(dynamics: &Dynamics, sym_a: &Symbol, window: &Window) -> Result<AntidiagonalReport> {
    if sym_a.terms.iter().any(|t| matches!(t.bands, Some((n, m)) if n == m)) {
        return Err(Error::Domain("anti-diagonal symbol has a diagonal term".into()));
    }
    let prep = dynamics.prepare(sym_a)?;
    let instantaneous = dynamics.expectation_at(&prep, 0.0);
    let average = time_average_prepared(dynamics, &prep, window)?;
    Ok(AntidiagonalReport { average, instantaneous, degenerate: instantaneous.norm() < 1e-8 })
}

/// Centroid of |ψ(t)|² in z (central) or v; fails when more than 1e−3 of the mass sits in the outer half of the box.
pub fn centroid_track(dynamics: &Dynamics, times: &[f64], central: bool) -> Result<Vec<(f64, Vec<f64>)>> {
    times
        .iter()
        .map(|&t| {
            let (c, tail) = crate::propagate::centroid(&dynamics.state_at(t), central);
            if tail > 1e-3 {
                return Err(Error::Domain(format!("packet reaches the box edge at t = {t} (outer mass {tail:.2e})")));
            }
            Ok((t, c))
        })
        .collect()
}

/// Indicator of the quasi-norm ball {|x₀⁻¹x| ≤ r} on the grid.
pub fn ball_indicator(grid: &GridSpec, g: &GroupStructure, x0: &GroupPoint, r: f64) -> Vec<Complex64> {
    let nz = grid.nz_total();
    let xinv = inverse(x0);
    (0..grid.len())
        .map(|idx| {
            let p = GroupPoint { v: grid.v_coords(idx / nz), z: grid.z_coords(idx % nz) };
            let rel = g.multiply(&xinv, &p).expect("grid points match the group");
            Complex64::new(if quasi_norm(&rel) <= r { 1.0 } else { 0.0 }, 0.0)
        })
        .collect()
}

/// Mass of |ψ|² in the quasi-norm ball {|x₀⁻¹x| ≤ r}.
pub fn ball_mass(state: &PhysicalState, g: &GroupStructure, x0: &GroupPoint, r: f64) -> f64 {
    let chi = ball_indicator(&state.grid, g, x0, r);
    state.values.iter().zip(&chi).map(|(x, c)| x.norm_sqr() * c.re).sum::<f64>() * state.grid.cell_volume()
}

fn check_ball_fits(grid: &GridSpec, x0: &GroupPoint, r: f64) -> Result<()> {
    for (k, z) in x0.z.iter().enumerate() {
        if z.abs() + r * r > grid.z_extent {
            return Err(Error::Domain(format!("ball leaves the z-box along axis {k}")));
        }
    }
    Ok(())
}

pub fn dispersion_mass(dynamics: &Dynamics, times: &[f64], x0: &GroupPoint, r: f64) -> Result<Vec<(f64, f64)>> {
    check_ball_fits(&dynamics.gft.grid, x0, r)?;
    Ok(times.par_iter().map(|&t| (t, ball_mass(&dynamics.state_at(t), &dynamics.gft.group, x0, r))).collect())
}

/// ∫θ(t) mass(t) dt, as the time average of multiplication by the ball indicator.
pub fn averaged_ball_mass(dynamics: &Dynamics, window: &Window, x0: &GroupPoint, r: f64) -> Result<f64> {
    let grid = &dynamics.gft.grid;
    check_ball_fits(grid, x0, r)?;
    let chi = Profile::Grid(Arc::new(ball_indicator(grid, &dynamics.gft.group, x0, r)));
    Ok(time_averaged_expectation(dynamics, &Symbol::single(chi, FiberPart::One), window)?.value.re)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OscillationProfile {
    pub high: Vec<(f64, f64)>,
    pub low: Vec<(f64, f64)>,
    /// ‖ψ‖² minus the mass seen by the truncated transform; counted in both tails.
    pub missing: f64,
}

/// High tail: mass with ε²|λ|(2n+d) > R; low tail: mass with ε²|λ|(2n+d) < δ. Both relative to ‖ψ‖².
/// The λ = 0 slot of a grid without carrier is not a fiber of the transform; there −Δ_G acts as
/// |ξ|² on the v-Fourier side, so its mass is placed at ε²|ξ|² directly from the state.
pub fn oscillation_profile(gft: &Gft, field: &FiberField, state: &PhysicalState, eps: f64, rs: &[f64], deltas: &[f64]) -> Result<OscillationProfile> {
    if rs.iter().chain(deltas).any(|x| !(*x > 0.0)) || !rs.is_sorted() || !deltas.is_sorted() {
        return Err(Error::Domain("tail thresholds must be positive and sorted".into()));
    }
    let e2 = eps * eps;
    let d = gft.frame.d;
    let mut spectrum: Vec<(f64, f64)> = Vec::new();
    for (li, m) in field.mats.iter().enumerate() {
        if let Some(m) = m {
            let ln = gft.lambda_norm(li);
            let w = gft.c0 * gft.weight(li);
            for r in 0..m.nrows() {
                let mass = m.row(r).norm_squared() * w;
                if mass > 0.0 {
                    spectrum.push((e2 * ln * (2 * gft.frame.degree(r) + d) as f64, mass));
                }
            }
        }
    }
    let norm_sqr = state.norm_sqr();
    spectrum.extend(zero_slot_spectrum(gft, state, eps, norm_sqr));
    let seen: f64 = spectrum.iter().map(|x| x.1).sum();
    let missing = (norm_sqr - seen).max(0.0);
    let high = rs.iter().map(|&r| (r, (spectrum.iter().filter(|x| x.0 > r).map(|x| x.1).sum::<f64>() + missing) / norm_sqr)).collect();
    let low = deltas.iter().map(|&dl| (dl, (spectrum.iter().filter(|x| x.0 < dl).map(|x| x.1).sum::<f64>() + missing) / norm_sqr)).collect();
    let out = OscillationProfile { high, low, missing: missing / norm_sqr };
    let mono = out.high.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-15) && out.low.windows(2).all(|w| w[1].1 + 1e-15 >= w[0].1);
    if !mono {
        return Err(Error::Domain("tail masses are not monotone".into()));
    }
    Ok(out)
}

fn zero_slot_spectrum(gft: &Gft, state: &PhysicalState, eps: f64, norm_sqr: f64) -> Vec<(f64, f64)> {
    let grid = &gft.grid;
    if grid.carrier().iter().any(|c| *c != 0.0) {
        return Vec::new();
    }
    let fhat = gft.central_fft(state);
    let nz = grid.nz_total();
    let all: f64 = fhat.iter().map(|c| c.norm_sqr()).sum();
    if all == 0.0 {
        return Vec::new();
    }
    // slot 0 is λ = 0; the v-FFT keeps its share of ‖ψ‖² and splits it by frequency
    let mut g: Vec<Complex64> = fhat.iter().step_by(nz).copied().collect();
    let vgrid = GridSpec { n_z: 1, p: 0, z_freq_offset: vec![], ..grid.clone() };
    let axes: Vec<usize> = (0..grid.dim_v()).collect();
    fft_axes(&vgrid, &mut g, &axes, false);
    let scale = norm_sqr / (all * grid.nv_total() as f64);
    let vf = axis_frequencies(grid.n_v, grid.v_extent);
    g.iter()
        .enumerate()
        .filter(|(_, c)| c.norm_sqr() > 0.0)
        .map(|(iv, c)| {
            let xi2: f64 = vgrid.v_index(iv).iter().map(|&k| vf[k] * vf[k]).sum();
            (eps * eps * xi2, c.norm_sqr() * scale)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginalSplit {
    /// ⟨a_j g(ε²|D_z|)ψ, ψ⟩ per probe
    pub zstar: Vec<f64>,
    /// ⟨a_j (1 − g(ε²|D_z|)) c(εD_v)ψ, ψ⟩ per probe
    pub vstar: Vec<f64>,
    pub total: f64,
}

/// Energy marginals against a partition of unity `probes` on the grid. The 𝔷*-probe is the central
/// multiplier g(ε²|λ|) = ψ(ε²|λ|/λ_lo) (equal to Σ_n Π_n g on every fiber); the 𝔳*-probe is the
/// Euclidean multiplier ψ(|εξ|/ω_lo) on the remaining central frequencies.
pub fn marginal_split(state: &PhysicalState, eps: f64, probes: &[Vec<f64>], lambda_lo: f64, omega_lo: f64) -> Result<MarginalSplit> {
    let grid = &state.grid;
    for (idx, _) in state.values.iter().enumerate().step_by(97) {
        let s: f64 = probes.iter().map(|a| a[idx]).sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain("probe set is not a partition of unity".into()));
        }
    }
    let nv = grid.dim_v();
    let nz = grid.nz_total();
    let zf = axis_frequencies(grid.n_z, grid.z_extent);
    let vf = axis_frequencies(grid.n_v, grid.v_extent);
    let carrier = grid.carrier();
    let zaxes: Vec<usize> = (nv..nv + grid.p).collect();
    let vaxes: Vec<usize> = (0..nv).collect();
    let slot_lambda = |slot: usize| -> f64 {
        let mut s = slot;
        let mut acc = 0.0;
        for k in (0..grid.p).rev() {
            let l = zf[s % grid.n_z] + carrier[k];
            acc += l * l;
            s /= grid.n_z;
        }
        acc.sqrt()
    };
    let g: Vec<f64> = (0..nz).map(|s| smooth_step(eps * eps * slot_lambda(s) / lambda_lo)).collect();
    let mut zpart = state.values.clone();
    fft_axes(grid, &mut zpart, &zaxes, false);
    let mut rest = zpart.clone();
    for (row_z, row_r) in zpart.chunks_mut(nz).zip(rest.chunks_mut(nz)) {
        for ((a, b), gi) in row_z.iter_mut().zip(row_r.iter_mut()).zip(&g) {
            *a *= gi / nz as f64;
            *b *= (1.0 - gi) / nz as f64;
        }
    }
    fft_axes(grid, &mut zpart, &zaxes, true);
    fft_axes(grid, &mut rest, &zaxes, true);
    fft_axes(grid, &mut rest, &vaxes, false);
    let nvt = grid.nv_total() as f64;
    for (iv, row) in rest.chunks_mut(nz).enumerate() {
        let xi: f64 = grid.v_index(iv).iter().map(|&k| vf[k] * vf[k]).sum::<f64>().sqrt();
        let c = smooth_step(eps * xi / omega_lo) / nvt;
        for x in row.iter_mut() {
            *x *= c;
        }
    }
    fft_axes(grid, &mut rest, &vaxes, true);
    let cell = grid.cell_volume();
    let pair = |u: &[Complex64], a: &[f64]| -> f64 {
        u.iter().zip(&state.values).zip(a).map(|((x, y), w)| (x * y.conj()).re * w).sum::<f64>() * cell
    };
    Ok(MarginalSplit {
        zstar: probes.iter().map(|a| pair(&zpart, a)).collect(),
        vstar: probes.iter().map(|a| pair(&rest, a)).collect(),
        total: state.norm_sqr(),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct JReport {
    pub lhs: Complex64,
    pub rhs: Complex64,
    pub residual: f64,
}

/// j_ε = 2ℓ(V·π(V)σ₁) + ½ℓ(Δ_Gσ) against iΣ_n ℓ((2n+d)/(2|λ|) Z^{(λ)} Π_nσΠ_n).
pub fn j_eps_diagnostic(dynamics: &Dynamics, sym: &Symbol, window: &Window) -> Result<JReport> {
    let gft = dynamics.gft;
    let vpv = v_pi_v_sigma1(gft, sym)?.scaled(Complex64::new(2.0, 0.0));
    let lap = sublaplacian_symbol(gft, sym)?.scaled(Complex64::new(0.5, 0.0));
    let d = gft.frame.d as f64;
    let mut rhs_sym = Symbol::default();
    for n in dynamics.bands() {
        let banded = Symbol::new(sym.terms.iter().map(|t| Term::banded(t.profile.clone(), t.fiber.clone(), n, n)).collect());
        rhs_sym = rhs_sym.plus(central_symbol(gft, &banded, Complex64::new(0.0, (2.0 * n as f64 + d) / 2.0))?);
    }
    let lhs_sym = vpv.plus(lap);
    let avg = |s: &Symbol| -> Result<Complex64> {
        if s.terms.is_empty() {
            return Ok(Complex64::new(0.0, 0.0));
        }
        Ok(time_averaged_expectation(dynamics, s, window)?.value)
    };
    let lhs = avg(&lhs_sym)?;
    let rhs = avg(&rhs_sym)?;
    Ok(JReport { lhs, rhs, residual: (lhs - rhs).norm() })
}
