//! Periodic sampling boxes on G ≅ R^{2d} × R^p and the states living on them.
//!
//! States are stored demodulated: the physical function is values·e^{iλ_c·z}, with
//! λ_c = π·z_freq_offset/L_z. With a zero offset this is the plain sampling.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::htype::{GroupPoint, GroupStructure};
use crate::{Complex64, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub d: usize,
    pub p: usize,
    /// L_v: v ∈ [−L_v, L_v)^{2d}
    pub v_extent: f64,
    /// L_z: z ∈ [−L_z, L_z)^p
    pub z_extent: f64,
    pub n_v: usize,
    pub n_z: usize,
    /// Integer carrier offset of the central frequency grid (heterodyne), length p or empty.
    #[serde(default)]
    pub z_freq_offset: Vec<i64>,
}

/// One point of the nonzero central-frequency grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaPoint {
    /// Flattened position in the z-FFT array.
    pub slot: usize,
    /// Signed demodulated FFT index.
    pub k: Vec<i64>,
    pub lambda: Vec<f64>,
}

impl GridSpec {
    pub fn new(g: &GroupStructure, v_extent: f64, z_extent: f64, n_v: usize, n_z: usize) -> Result<Self> {
        let s = GridSpec { d: g.d, p: g.p, v_extent, z_extent, n_v, n_z, z_freq_offset: vec![] };
        s.validate()?;
        Ok(s)
    }

    pub fn with_offset(mut self, offset: Vec<i64>) -> Result<Self> {
        self.z_freq_offset = offset;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |n: usize| n >= 8 && n.is_power_of_two();
        if !pow2(self.n_v) || !pow2(self.n_z) {
            return Err(Error::Config(format!("grid counts must be powers of two ≥ 8 (n_v={}, n_z={})", self.n_v, self.n_z)));
        }
        if !(self.v_extent > 0.0 && self.v_extent.is_finite() && self.z_extent > 0.0 && self.z_extent.is_finite()) {
            return Err(Error::Config("grid extents must be positive and finite".into()));
        }
        if self.d == 0 || self.p == 0 {
            return Err(Error::Config("grid needs d ≥ 1 and p ≥ 1".into()));
        }
        if !self.z_freq_offset.is_empty() && self.z_freq_offset.len() != self.p {
            return Err(Error::Config(format!("z_freq_offset needs {} entries", self.p)));
        }
        Ok(())
    }

    pub fn check_group(&self, g: &GroupStructure) -> Result<()> {
        if g.d != self.d || g.p != self.p {
            return Err(Error::Dimension(format!("grid is (d={}, p={}), group is (d={}, p={})", self.d, self.p, g.d, g.p)));
        }
        Ok(())
    }

    pub fn dim_v(&self) -> usize {
        2 * self.d
    }

    pub fn nv_total(&self) -> usize {
        self.n_v.pow(self.dim_v() as u32)
    }

    pub fn nz_total(&self) -> usize {
        self.n_z.pow(self.p as u32)
    }

    pub fn len(&self) -> usize {
        self.nv_total() * self.nz_total()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dv(&self) -> f64 {
        2.0 * self.v_extent / self.n_v as f64
    }

    pub fn dz(&self) -> f64 {
        2.0 * self.z_extent / self.n_z as f64
    }

    pub fn v_cell(&self) -> f64 {
        self.dv().powi(self.dim_v() as i32)
    }

    pub fn z_cell(&self) -> f64 {
        self.dz().powi(self.p as i32)
    }

    pub fn cell_volume(&self) -> f64 {
        self.v_cell() * self.z_cell()
    }

    pub fn dlambda(&self) -> f64 {
        PI / self.z_extent
    }

    fn offset(&self, k: usize) -> i64 {
        self.z_freq_offset.get(k).copied().unwrap_or(0)
    }

    pub fn carrier(&self) -> Vec<f64> {
        (0..self.p).map(|k| self.dlambda() * self.offset(k) as f64).collect()
    }

    pub(crate) fn unflatten(mut i: usize, n: usize, axes: usize) -> Vec<usize> {
        let mut out = vec![0; axes];
        for a in (0..axes).rev() {
            out[a] = i % n;
            i /= n;
        }
        out
    }

    pub fn v_index(&self, iv: usize) -> Vec<usize> {
        Self::unflatten(iv, self.n_v, self.dim_v())
    }

    pub fn v_coords(&self, iv: usize) -> Vec<f64> {
        self.v_index(iv).iter().map(|&i| -self.v_extent + i as f64 * self.dv()).collect()
    }

    pub fn z_coords(&self, iz: usize) -> Vec<f64> {
        Self::unflatten(iz, self.n_z, self.p).iter().map(|&i| -self.z_extent + i as f64 * self.dz()).collect()
    }

    pub fn point(&self, idx: usize) -> GroupPoint {
        let nz = self.nz_total();
        GroupPoint::new(self.v_coords(idx / nz), self.z_coords(idx % nz))
    }

    /// Signed FFT index of each slot of a length-n_z axis.
    pub fn signed(k: usize, n: usize) -> i64 {
        if k >= n / 2 {
            k as i64 - n as i64
        } else {
            k as i64
        }
    }

    /// The nonzero central frequencies λ = π(k + offset)/L_z with |k_i| < n_z/2.
    pub fn lambda_points(&self) -> Vec<LambdaPoint> {
        let nzt = self.nz_total();
        let mut out = Vec::new();
        for slot in 0..nzt {
            let idx = Self::unflatten(slot, self.n_z, self.p);
            let k: Vec<i64> = idx.iter().map(|&i| Self::signed(i, self.n_z)).collect();
            if k.iter().any(|&ki| ki == -(self.n_z as i64) / 2) {
                continue;
            }
            let lambda: Vec<f64> = k.iter().enumerate().map(|(a, &ki)| self.dlambda() * (ki + self.offset(a)) as f64).collect();
            if lambda.iter().all(|&l| l == 0.0) {
                continue;
            }
            out.push(LambdaPoint { slot, k, lambda });
        }
        out
    }

    /// Checkerboard sign (−1)^{Σk} that converts z-FFT slots into transforms centred on the box.
    pub fn slot_sign(&self, slot: usize) -> f64 {
        let s: usize = Self::unflatten(slot, self.n_z, self.p).iter().sum();
        if s.is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }

    /// Quasi-norm ball radius that still fits in the box.
    pub fn max_ball_radius(&self) -> f64 {
        self.v_extent.min(self.z_extent.sqrt())
    }
}

/// In-place FFT of a row-major array along one axis.
pub fn fft_axis(data: &mut [Complex64], shape: &[usize], axis: usize, plan: &Arc<dyn Fft<f64>>) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for k in 0..n {
                line[k] = data[base + k * inner];
            }
            plan.process_with_scratch(&mut line, &mut scratch);
            for k in 0..n {
                data[base + k * inner] = line[k];
            }
        }
    }
}

/// Unnormalized forward (e^{−i}) or inverse (e^{+i}) FFT over the z-block of every v-row.
pub fn fft_z(grid: &GridSpec, data: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::new();
    let plan = if inverse { planner.plan_fft_inverse(grid.n_z) } else { planner.plan_fft_forward(grid.n_z) };
    let shape = vec![grid.n_z; grid.p];
    let nzt = grid.nz_total();
    for row in data.chunks_mut(nzt) {
        for axis in 0..grid.p {
            fft_axis(row, &shape, axis, &plan);
        }
    }
}

/// Unnormalized FFT over the listed axes of the full (v, z) array (v axes first).
pub fn fft_axes(grid: &GridSpec, data: &mut [Complex64], axes: &[usize], inverse: bool) {
    let mut shape = vec![grid.n_v; grid.dim_v()];
    shape.extend(std::iter::repeat_n(grid.n_z, grid.p));
    let mut planner = FftPlanner::new();
    for &axis in axes {
        let plan = if inverse { planner.plan_fft_inverse(shape[axis]) } else { planner.plan_fft_forward(shape[axis]) };
        fft_axis(data, &shape, axis, &plan);
    }
}

/// Angular frequencies of an FFT axis of length n on a box of half-width l.
pub fn axis_frequencies(n: usize, l: f64) -> Vec<f64> {
    (0..n).map(|k| PI / l * GridSpec::signed(k, n) as f64).collect()
}

/// A sampled state; values are the demodulated envelope (see module docs).
#[derive(Clone, Debug)]
pub struct PhysicalState {
    pub grid: GridSpec,
    pub values: Vec<Complex64>,
}

impl PhysicalState {
    pub fn zeros(grid: &GridSpec) -> Self {
        PhysicalState { grid: grid.clone(), values: vec![Complex64::new(0.0, 0.0); grid.len()] }
    }

    /// Samples a physical function f(v, z) and removes the carrier.
    pub fn from_fn(grid: &GridSpec, f: impl Fn(&[f64], &[f64]) -> Complex64) -> Self {
        let nz = grid.nz_total();
        let carrier = grid.carrier();
        let zs: Vec<Vec<f64>> = (0..nz).map(|iz| grid.z_coords(iz)).collect();
        let values = (0..grid.len())
            .map(|idx| {
                let v = grid.v_coords(idx / nz);
                let z = &zs[idx % nz];
                let ph: f64 = carrier.iter().zip(z).map(|(c, zz)| c * zz).sum();
                f(&v, z) * Complex64::from_polar(1.0, -ph)
            })
            .collect();
        PhysicalState { grid: grid.clone(), values }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.values.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
            Ok(())
        } else {
            Err(Error::Domain("state has non-finite entries".into()))
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.values.iter().map(|c| c.norm_sqr()).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn l2_norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// ⟨self, other⟩ = ∫ self · conj(other).
    pub fn inner(&self, other: &PhysicalState) -> Complex64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b.conj()).sum::<Complex64>() * self.grid.cell_volume()
    }

    pub fn scale(&mut self, c: Complex64) {
        for x in &mut self.values {
            *x *= c;
        }
    }

    pub fn axpy(&mut self, c: Complex64, other: &PhysicalState) {
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += c * y;
        }
    }

    /// Relative L² distance ‖self − other‖/‖other‖.
    pub fn rel_distance(&self, other: &PhysicalState) -> f64 {
        let num: f64 = self.values.iter().zip(&other.values).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den: f64 = other.values.iter().map(|b| b.norm_sqr()).sum();
        (num / den).sqrt()
    }

    /// Pointwise product with a physical (carrier-free) profile sampled on the same grid.
    pub fn multiply(&self, profile: &[Complex64]) -> PhysicalState {
        PhysicalState { grid: self.grid.clone(), values: self.values.iter().zip(profile).map(|(a, b)| a * b).collect() }
    }

    /// x ↦ f(y⁻¹x) = f(v − v₀, z − z₀ − ½[v₀, v]); v₀ must sit on grid multiples.
    pub fn translate_left(&self, g: &GroupStructure, y: &GroupPoint) -> Result<PhysicalState> {
        let grid = &self.grid;
        grid.check_group(g)?;
        let dv = grid.dv();
        let shifts: Vec<i64> = y
            .v
            .iter()
            .map(|&x| {
                let s = x / dv;
                if (s - s.round()).abs() > 1e-9 {
                    Err(Error::Domain(format!("v-translation {x} is not a multiple of the spacing {dv}")))
                } else {
                    Ok(s.round() as i64)
                }
            })
            .collect::<Result<_>>()?;
        let nz = grid.nz_total();
        let nv = grid.nv_total();
        let n = grid.n_v as i64;
        let mut out = vec![Complex64::new(0.0, 0.0); grid.len()];
        for iv in 0..nv {
            let idx = grid.v_index(iv);
            let src: usize = idx
                .iter()
                .zip(&shifts)
                .fold(0usize, |acc, (&i, &s)| acc * grid.n_v + (i as i64 - s).rem_euclid(n) as usize);
            out[iv * nz..(iv + 1) * nz].copy_from_slice(&self.values[src * nz..(src + 1) * nz]);
        }
        // central shift w(v) = z₀ + ½[v₀, v], applied exactly in z-Fourier space
        fft_z(grid, &mut out, false);
        let freqs = axis_frequencies(grid.n_z, grid.z_extent);
        let carrier = grid.carrier();
        for iv in 0..nv {
            let v = grid.v_coords(iv);
            let br = g.bracket(&y.v, &v);
            let w: Vec<f64> = (0..grid.p).map(|k| y.z[k] + 0.5 * br[k]).collect();
            let cphase: f64 = carrier.iter().zip(&w).map(|(c, x)| c * x).sum();
            for slot in 0..nz {
                let kk = GridSpec::unflatten(slot, grid.n_z, grid.p);
                let ph: f64 = kk.iter().zip(&w).map(|(&ki, wi)| freqs[ki] * wi).sum();
                out[iv * nz + slot] *= Complex64::from_polar(1.0 / nz as f64, -ph - cphase);
            }
        }
        fft_z(grid, &mut out, true);
        Ok(PhysicalState { grid: grid.clone(), values: out })
    }

    /// Exact translation of the central variable by w (phase shift in z-Fourier space).
    pub fn shift_z(&self, w: &[f64]) -> PhysicalState {
        PhysicalState { grid: self.grid.clone(), values: shift_z_profile(&self.grid, &self.values, w, true) }
    }
}

/// Returns b(v, z) = a(v, z − w); `demodulated` keeps the carrier phase consistent for states.
pub fn shift_z_profile(grid: &GridSpec, values: &[Complex64], w: &[f64], demodulated: bool) -> Vec<Complex64> {
    let nz = grid.nz_total();
    let mut out = values.to_vec();
    fft_z(grid, &mut out, false);
    let freqs = axis_frequencies(grid.n_z, grid.z_extent);
    let cphase: f64 = if demodulated { grid.carrier().iter().zip(w).map(|(c, x)| c * x).sum() } else { 0.0 };
    let phases: Vec<Complex64> = (0..nz)
        .map(|slot| {
            let kk = GridSpec::unflatten(slot, grid.n_z, grid.p);
            let ph: f64 = kk.iter().zip(w).map(|(&ki, wi)| freqs[ki] * wi).sum();
            Complex64::from_polar(1.0 / nz as f64, -ph - cphase)
        })
        .collect();
    for row in out.chunks_mut(nz) {
        for (x, ph) in row.iter_mut().zip(&phases) {
            *x *= ph;
        }
    }
    fft_z(grid, &mut out, true);
    out
}
