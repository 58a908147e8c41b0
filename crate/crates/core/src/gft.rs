//! Discretized group Fourier transform.
//!
//! 𝓕f(λ) = ∫ f(x) (π^λ_x)* dx and f(x) = c₀ Σ_λ Tr(π^λ_x 𝓕f(λ)) |λ|^d Δλ^p, with the
//! central integral done by FFT and the v-integral by the trapezoid rule against
//! the displacement matrices of `fiber`. Matrices act on the left of 𝓕f, so
//! 𝓕(Xf) = π(X)𝓕f.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::fiber::{assemble_product, displacement_1d, CMat, HermiteFrame};
use crate::grid::{fft_z, GridSpec, LambdaPoint, PhysicalState};
use crate::htype::{AdaptedFrame, GroupStructure};
use crate::{Complex64, Error, Result};

/// Slices whose central FFT stays below this fraction of the peak are treated as zero.
pub const SLICE_FLOOR: f64 = 1e-13;

/// Transform context: grid, frame, λ-grid with adapted frames, and c₀.
#[derive(Clone, Debug)]
pub struct Gft {
    pub group: GroupStructure,
    pub grid: GridSpec,
    pub frame: HermiteFrame,
    pub lambdas: Vec<LambdaPoint>,
    pub adapted: Vec<AdaptedFrame>,
    pub c0: f64,
}

/// Per-λ matrices aligned with `Gft::lambdas`; `None` is the zero matrix.
#[derive(Clone, Debug)]
pub struct FiberField {
    pub mats: Vec<Option<CMat>>,
}

/// Mixed (v, λ) representation: slot-major rows of length nz_total per v-point.
#[derive(Clone, Debug)]
pub struct Mixed {
    pub data: Vec<Complex64>,
}

/// (2π)^{−(d+p)}, the value c₀ takes with these transform conventions.
pub fn analytic_c0(d: usize, p: usize) -> f64 {
    (2.0 * PI).powi(-((d + p) as i32))
}

impl Gft {
    /// Builds the context and calibrates c₀ on a reference Gaussian.
    pub fn new(group: &GroupStructure, grid: &GridSpec, a: usize) -> Result<Self> {
        let mut g = Self::uncalibrated(group, grid, a)?;
        g.c0 = calibrate_c0(&g)?;
        Ok(g)
    }

    /// Context with the analytic c₀ in place (used by the calibration itself).
    pub fn uncalibrated(group: &GroupStructure, grid: &GridSpec, a: usize) -> Result<Self> {
        grid.validate()?;
        grid.check_group(group)?;
        let lambdas = grid.lambda_points();
        let adapted = lambdas.iter().map(|l| group.adapted_frame(&l.lambda)).collect::<Result<Vec<_>>>()?;
        Ok(Gft {
            group: group.clone(),
            grid: grid.clone(),
            frame: HermiteFrame::new(group.d, a),
            lambdas,
            adapted,
            c0: analytic_c0(group.d, group.p),
        })
    }

    pub fn n_lambda(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambda_norm(&self, li: usize) -> f64 {
        self.lambdas[li].lambda.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Plancherel weight |λ|^d Δλ^p.
    pub fn weight(&self, li: usize) -> f64 {
        self.lambda_norm(li).powi(self.grid.d as i32) * self.grid.dlambda().powi(self.grid.p as i32)
    }

    /// π^λ_{(v,0)} on the frame.
    pub fn displacement(&self, li: usize, v: &[f64]) -> CMat {
        let s = self.lambda_norm(li).sqrt();
        let (p, q) = self.adapted[li].coords(v);
        let tables: Vec<Vec<Complex64>> = (0..self.frame.d).map(|j| displacement_1d(s * p[j], s * q[j], self.frame.a)).collect();
        assemble_product(&self.frame, &tables, Complex64::new(1.0, 0.0))
    }

    fn tables(&self, li: usize, v: &[f64]) -> Vec<Vec<Complex64>> {
        let s = self.lambda_norm(li).sqrt();
        let (p, q) = self.adapted[li].coords(v);
        (0..self.frame.d).map(|j| displacement_1d(s * p[j], s * q[j], self.frame.a)).collect()
    }

    /// Central FFT: f̂(v, λ) = ∫ f(v, z) e^{−iλ·z} dz per slot.
    pub fn central_fft(&self, f: &PhysicalState) -> Vec<Complex64> {
        let mut data = f.values.clone();
        fft_z(&self.grid, &mut data, false);
        let nz = self.grid.nz_total();
        let dz = self.grid.z_cell();
        let signs: Vec<f64> = (0..nz).map(|s| self.grid.slot_sign(s) * dz).collect();
        for row in data.chunks_mut(nz) {
            for (x, s) in row.iter_mut().zip(&signs) {
                *x *= s;
            }
        }
        data
    }

    pub fn forward(&self, f: &PhysicalState) -> Result<FiberField> {
        if f.grid != self.grid {
            return Err(Error::Dimension("state grid differs from transform grid".into()));
        }
        f.check_finite()?;
        let fhat = self.central_fft(f);
        let nz = self.grid.nz_total();
        let nv = self.grid.nv_total();
        let peak = fhat.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let wv = self.grid.v_cell();
        let n = self.frame.len();
        let s = self.frame.a + 1;
        let mats = (0..self.n_lambda())
            .into_par_iter()
            .map(|li| {
                let slot = self.lambdas[li].slot;
                let col: Vec<Complex64> = (0..nv).map(|iv| fhat[iv * nz + slot]).collect();
                if peak == 0.0 || col.iter().all(|c| c.norm() <= SLICE_FLOOR * peak) {
                    return None;
                }
                let mut acc = CMat::zeros(n, n);
                for (iv, &c) in col.iter().enumerate() {
                    if c == Complex64::new(0.0, 0.0) {
                        continue;
                    }
                    let w = c * wv;
                    let t = self.tables(li, &self.grid.v_coords(iv));
                    if self.frame.d == 1 {
                        // (π*)_{rc} = conj(D_{cr})
                        for r in 0..n {
                            for cc in 0..n {
                                acc[(r, cc)] += w * t[0][cc * s + r].conj();
                            }
                        }
                    } else {
                        let dm = assemble_product(&self.frame, &t, Complex64::new(1.0, 0.0));
                        acc += dm.adjoint() * w;
                    }
                }
                Some(acc)
            })
            .collect();
        Ok(FiberField { mats })
    }

    /// T(v, λ) = c₀ |λ|^d Δλ^p Tr(π^λ_{(v,0)} F(λ)), laid out by z-FFT slot.
    pub fn mixed(&self, field: &FiberField) -> Mixed {
        let nz = self.grid.nz_total();
        let nv = self.grid.nv_total();
        let n = self.frame.len();
        let s = self.frame.a + 1;
        let cols: Vec<Option<Vec<Complex64>>> = (0..self.n_lambda())
            .into_par_iter()
            .map(|li| {
                let f = field.mats[li].as_ref()?;
                // rows of F that are nonzero; Tr(DF) = Σ_{c,r} D_{rc} F_{cr}
                let rows: Vec<usize> = (0..n).filter(|&c| f.row(c).iter().any(|x| *x != Complex64::new(0.0, 0.0))).collect();
                let scale = self.c0 * self.weight(li);
                let out = (0..nv)
                    .map(|iv| {
                        let t = self.tables(li, &self.grid.v_coords(iv));
                        let mut acc = Complex64::new(0.0, 0.0);
                        if self.frame.d == 1 {
                            for &c in &rows {
                                for r in 0..n {
                                    acc += t[0][r * s + c] * f[(c, r)];
                                }
                            }
                        } else {
                            for &c in &rows {
                                let ac = self.frame.alpha(c);
                                for r in 0..n {
                                    let ar = self.frame.alpha(r);
                                    let mut dv = Complex64::new(1.0, 0.0);
                                    for j in 0..self.frame.d {
                                        dv *= t[j][ar[j] * s + ac[j]];
                                    }
                                    acc += dv * f[(c, r)];
                                }
                            }
                        }
                        acc * scale
                    })
                    .collect();
                Some(out)
            })
            .collect();
        let mut data = vec![Complex64::new(0.0, 0.0); nv * nz];
        for (li, col) in cols.into_iter().enumerate() {
            if let Some(col) = col {
                let slot = self.lambdas[li].slot;
                for (iv, x) in col.into_iter().enumerate() {
                    data[iv * nz + slot] = x;
                }
            }
        }
        Mixed { data }
    }

    /// Completes the inversion: sign flip and inverse central FFT.
    pub fn mixed_to_state(&self, m: &Mixed) -> PhysicalState {
        let nz = self.grid.nz_total();
        let mut data = m.data.clone();
        let signs: Vec<f64> = (0..nz).map(|s| self.grid.slot_sign(s)).collect();
        for row in data.chunks_mut(nz) {
            for (x, s) in row.iter_mut().zip(&signs) {
                *x *= s;
            }
        }
        fft_z(&self.grid, &mut data, true);
        PhysicalState { grid: self.grid.clone(), values: data }
    }

    pub fn inverse(&self, field: &FiberField) -> PhysicalState {
        self.mixed_to_state(&self.mixed(field))
    }

    /// Σ_λ ‖F(λ)‖²_HS |λ|^d Δλ^p (so that c₀ times this is ‖f‖²).
    pub fn hs_norm_sqr(&self, field: &FiberField) -> f64 {
        field
            .mats
            .iter()
            .enumerate()
            .filter_map(|(li, m)| m.as_ref().map(|m| m.iter().map(|c| c.norm_sqr()).sum::<f64>() * self.weight(li)))
            .sum()
    }

    pub fn hs_norm(&self, field: &FiberField) -> f64 {
        self.hs_norm_sqr(field).sqrt()
    }

    /// c₀ Σ‖F‖²|λ|^dΔλ^p, the Plancherel side of ‖f‖².
    pub fn plancherel_norm_sqr(&self, field: &FiberField) -> f64 {
        self.c0 * self.hs_norm_sqr(field)
    }

    /// Keeps the rows (left action) where ε²|λ|(2|α|+d) is above (`High`) or below (`Low`) the threshold.
    pub fn spectral_cutoff(&self, field: &FiberField, kind: CutoffKind, threshold: f64, eps: f64) -> Result<FiberField> {
        if !(threshold > 0.0) {
            return Err(Error::Domain("cutoff threshold must be positive".into()));
        }
        let d = self.frame.d;
        let mats = field
            .mats
            .iter()
            .enumerate()
            .map(|(li, m)| {
                m.as_ref().map(|m| {
                    let ln = self.lambda_norm(li);
                    let mut out = m.clone();
                    for r in 0..m.nrows() {
                        let e = eps * eps * ln * (2 * self.frame.degree(r) + d) as f64;
                        let keep = match kind {
                            CutoffKind::High => e > threshold,
                            CutoffKind::Low => e < threshold,
                        };
                        if !keep {
                            out.row_mut(r).fill(Complex64::new(0.0, 0.0));
                        }
                    }
                    out
                })
            })
            .collect();
        Ok(FiberField { mats })
    }

    /// The λ used to centre reference data: the carrier if present, else a value whose
    /// Gaussian v-profile fits the box.
    pub fn reference_lambda(&self) -> Vec<f64> {
        let carrier = self.grid.carrier();
        if carrier.iter().any(|&c| c != 0.0) {
            return carrier;
        }
        let dl = self.grid.dlambda();
        let want = 120.0 / (self.grid.v_extent * self.grid.v_extent);
        let kmax = (self.grid.n_z / 2 - 1) as f64;
        let k = (want / dl).round().clamp(1.0, kmax);
        let mut l = vec![0.0; self.grid.p];
        l[0] = k * dl;
        l
    }

    /// ĝ(λ)|h_row⟩⟨h_col| with ĝ a Gaussian of width `sigma` around `center`; slots
    /// where ĝ < 1e−16 or |λ| < |center|/2 are left empty.
    pub fn gaussian_field(&self, center: &[f64], sigma: f64, row: usize, col: usize) -> FiberField {
        let n = self.frame.len();
        let cn = center.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mats = self
            .lambdas
            .iter()
            .map(|lp| {
                let r2: f64 = lp.lambda.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                let g = (-r2 / (2.0 * sigma * sigma)).exp();
                let ln = lp.lambda.iter().map(|x| x * x).sum::<f64>().sqrt();
                if g < 1e-16 || ln < cn / 2.0 {
                    return None;
                }
                let mut m = CMat::zeros(n, n);
                m[(row, col)] = Complex64::new(g, 0.0);
                Some(m)
            })
            .collect();
        FiberField { mats }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CutoffKind {
    High,
    Low,
}

/// c₀ making Plancherel exact for a reference Gaussian |h₀⟩⟨h₀|ĝ(λ) synthesized on the grid.
pub fn calibrate_c0(gft: &Gft) -> Result<f64> {
    let center = gft.reference_lambda();
    let sigma = (2.5 * gft.grid.dlambda()).min(center.iter().map(|x| x * x).sum::<f64>().sqrt() / 6.0);
    let field = gft.gaussian_field(&center, sigma, 0, 0);
    if field.mats.iter().all(|m| m.is_none()) {
        return Err(Error::Domain("degenerate grid: no λ-slice available for calibration".into()));
    }
    let f = gft.inverse(&field);
    let back = gft.forward(&f)?;
    let hs = gft.hs_norm_sqr(&back);
    if !(hs > 0.0) {
        return Err(Error::Domain("degenerate grid: reference has no Fourier mass".into()));
    }
    Ok(f.norm_sqr() / hs)
}

impl FiberField {
    pub fn zeros(gft: &Gft) -> Self {
        FiberField { mats: vec![None; gft.n_lambda()] }
    }

    pub fn map(&self, f: impl Fn(usize, &CMat) -> CMat + Sync) -> FiberField {
        FiberField { mats: self.mats.iter().enumerate().map(|(li, m)| m.as_ref().map(|m| f(li, m))).collect() }
    }

    pub fn add(&self, other: &FiberField) -> FiberField {
        let mats = self
            .mats
            .iter()
            .zip(&other.mats)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a + b),
                (Some(a), None) => Some(a.clone()),
                (None, Some(b)) => Some(b.clone()),
                (None, None) => None,
            })
            .collect();
        FiberField { mats }
    }

    pub fn scale(&self, c: Complex64) -> FiberField {
        self.map(|_, m| m * c)
    }

    /// max over λ of max |entry| difference.
    pub fn max_diff(&self, other: &FiberField) -> f64 {
        self.mats
            .iter()
            .zip(&other.mats)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => (a - b).camax(),
                (Some(a), None) | (None, Some(a)) => a.camax(),
                (None, None) => 0.0,
            })
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.mats.iter().flatten().map(|m| m.camax()).fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.mats.iter().flatten().all(|m| m.iter().all(|c| *c == Complex64::new(0.0, 0.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::htype::GroupPoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> Gft {
        let g = GroupStructure::heisenberg(1);
        let grid = GridSpec::new(&g, 5.0, PI, 64, 32).unwrap();
        Gft::new(&g, &grid, 12).unwrap()
    }

    /// Random band-limited field: Hermite content ≤ 4, λ ∈ [8, 18] in a smooth window.
    fn random_field(gft: &Gft, seed: u64) -> FiberField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = gft.frame.len();
        let k = gft.frame.count_upto(4);
        let c = 12.0 + rng.random::<f64>() * 2.0;
        FiberField {
            mats: gft
                .lambdas
                .iter()
                .map(|lp| {
                    let l = lp.lambda[0];
                    let g = (-(l - c).powi(2) / 2.0).exp();
                    if !(8.0..=18.0).contains(&l) {
                        return None;
                    }
                    let mut m = CMat::zeros(n, n);
                    for r in 0..k {
                        for cc in 0..k {
                            m[(r, cc)] = Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * g;
                        }
                    }
                    Some(m)
                })
                .collect(),
        }
    }

    #[test]
    fn zero_maps_to_zero() {
        let gft = small();
        let f = PhysicalState::zeros(&gft.grid);
        assert!(gft.forward(&f).unwrap().is_zero());
        let z = FiberField::zeros(&gft);
        assert_eq!(gft.inverse(&z).l2_norm(), 0.0);
        assert_eq!(gft.hs_norm(&z), 0.0);
    }

    #[test]
    fn calibrated_c0_matches_analytic_value() {
        let gft = small();
        assert!(gft.c0 > 0.0);
        let rel = (gft.c0 / analytic_c0(1, 1) - 1.0).abs();
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn plancherel_and_roundtrip_on_random_fields() {
        let gft = small();
        for seed in 0..3 {
            let field = random_field(&gft, seed);
            let f = gft.inverse(&field);
            let back = gft.forward(&f).unwrap();
            let rel = (gft.plancherel_norm_sqr(&back) / f.norm_sqr() - 1.0).abs();
            assert!(rel < 1e-6, "seed {seed}: {rel}");
            let f2 = gft.inverse(&back);
            assert!(f2.rel_distance(&f) < 1e-6);
        }
    }

    #[test]
    fn rank_one_field_gives_gaussian_profile() {
        // Tr(π_x |h0⟩⟨h0|) = e^{iλz} e^{−|λ||v|²/4}
        let gft = small();
        let li = gft.lambdas.iter().position(|l| (l.lambda[0] - 10.0).abs() < 1e-12).unwrap();
        let mut field = FiberField::zeros(&gft);
        let mut m = CMat::zeros(gft.frame.len(), gft.frame.len());
        m[(0, 0)] = Complex64::new(1.0, 0.0);
        field.mats[li] = Some(m);
        let f = gft.inverse(&field);
        let scale = gft.c0 * gft.weight(li);
        let want = PhysicalState::from_fn(&gft.grid, |v, z| {
            Complex64::from_polar(scale * (-10.0 * (v[0] * v[0] + v[1] * v[1]) / 4.0).exp(), 10.0 * z[0])
        });
        assert!(f.rel_distance(&want) < 1e-12);
    }

    #[test]
    fn left_translation_acts_on_the_right() {
        let gft = small();
        let field = random_field(&gft, 7);
        let f = gft.inverse(&field);
        let y = GroupPoint::new(vec![0.3125, -0.46875], vec![0.4]);
        let ty = f.translate_left(&gft.group, &y).unwrap();
        let lhs = gft.forward(&ty).unwrap();
        let base = gft.forward(&f).unwrap();
        let rhs = base.map(|li, m| {
            let rep = crate::fiber::rep_matrix(&gft.group, &gft.lambdas[li].lambda, &gft.frame, &y).unwrap();
            m * rep.adjoint()
        });
        // compare on the Hermite block the field actually populates
        let k = gft.frame.count_upto(6);
        let mut worst: f64 = 0.0;
        for (a, b) in lhs.mats.iter().zip(&rhs.mats) {
            if let (Some(a), Some(b)) = (a, b) {
                worst = worst.max((a - b).view((0, 0), (k, k)).camax());
            }
        }
        assert!(worst < 1e-5 * base.max_abs(), "{worst}");
    }

    #[test]
    fn central_convolution_is_scalar_multiplication() {
        let gft = small();
        let field = random_field(&gft, 3);
        let f = gft.inverse(&field);
        // convolution with δ_v ⊗ h(z), h a normalized Gaussian of width 0.2: ĥ(λ) = e^{−0.02λ²}
        let mut data = f.values.clone();
        fft_z(&gft.grid, &mut data, false);
        let nz = gft.grid.nz_total();
        let freqs = crate::grid::axis_frequencies(gft.grid.n_z, gft.grid.z_extent);
        for row in data.chunks_mut(nz) {
            for (k, x) in row.iter_mut().enumerate() {
                *x *= (-0.02 * freqs[k] * freqs[k]).exp() / nz as f64;
            }
        }
        fft_z(&gft.grid, &mut data, true);
        let conv = PhysicalState { grid: gft.grid.clone(), values: data };
        let lhs = gft.forward(&conv).unwrap();
        let rhs = gft.forward(&f).unwrap().map(|li, m| m * Complex64::new((-0.02 * gft.lambdas[li].lambda[0].powi(2)).exp(), 0.0));
        assert!(lhs.max_diff(&rhs) < 1e-5 * rhs.max_abs());
    }

    #[test]
    fn spectral_cutoff_band_arithmetic() {
        let gft = small();
        let li = gft.lambdas.iter().position(|l| (l.lambda[0] - 3.0).abs() < 1e-12).unwrap();
        let mut field = FiberField::zeros(&gft);
        let n = gft.frame.len();
        let mut m = CMat::zeros(n, n);
        m[(1, 0)] = Complex64::new(1.0, 0.0);
        field.mats[li] = Some(m);
        // band 1 at λ = 3: ε²·3·3 = 1 for ε = 1/3
        let eps = 1.0 / 3.0;
        let hi = gft.spectral_cutoff(&field, CutoffKind::High, 0.5, eps).unwrap();
        assert_eq!(hi.max_diff(&field), 0.0);
        let hi2 = gft.spectral_cutoff(&field, CutoffKind::High, 2.0, eps).unwrap();
        assert!(hi2.is_zero());
        let lo = gft.spectral_cutoff(&field, CutoffKind::Low, 0.5, eps).unwrap();
        let sum = hi.add(&lo);
        assert_eq!(sum.max_diff(&field), 0.0);
        let inf = gft.spectral_cutoff(&field, CutoffKind::High, 1e300, eps).unwrap();
        assert!(inf.is_zero());
        assert!(gft.spectral_cutoff(&field, CutoffKind::High, 0.0, eps).is_err());
    }
}
