//! Step-2 H-type groups in exponential coordinates x = (v, z), v ∈ R^{2d}, z ∈ R^p.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Structure matrices B_k with [U,V]_k = Uᵀ B_k V, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStructure {
    pub d: usize,
    pub p: usize,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroupPoint {
    pub v: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdaptedFrame {
    pub lambda: Vec<f64>,
    /// 2d×2d row-major; columns are P_1..P_d, Q_1..Q_d in the fixed basis.
    pub r: Vec<f64>,
    pub dim: usize,
}

impl GroupPoint {
    pub fn identity(g: &GroupStructure) -> Self {
        GroupPoint { v: vec![0.0; 2 * g.d], z: vec![0.0; g.p] }
    }

    pub fn new(v: Vec<f64>, z: Vec<f64>) -> Self {
        GroupPoint { v, z }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl GroupStructure {
    pub fn new(d: usize, p: usize, b: Vec<Vec<f64>>) -> Result<Self> {
        let g = GroupStructure { d, p, b };
        g.validate()?;
        Ok(g)
    }

    /// Heisenberg group of dimension 2d+1, B = [[0, I], [−I, 0]].
    pub fn heisenberg(d: usize) -> Self {
        let n = 2 * d;
        let mut b = vec![0.0; n * n];
        for j in 0..d {
            b[j * n + d + j] = 1.0;
            b[(d + j) * n + j] = -1.0;
        }
        GroupStructure { d, p: 1, b: vec![b] }
    }

    /// Quaternionic H-type group, d = 2, p = 3 (left multiplication by i, j, k on R⁴).
    pub fn quaternionic() -> Self {
        #[rustfmt::skip]
        let li = vec![
            0.0, -1.0, 0.0, 0.0,
            1.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, -1.0,
            0.0, 0.0, 1.0, 0.0,
        ];
        #[rustfmt::skip]
        let lj = vec![
            0.0, 0.0, -1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
            1.0, 0.0, 0.0, 0.0,
            0.0, -1.0, 0.0, 0.0,
        ];
        #[rustfmt::skip]
        let lk = vec![
            0.0, 0.0, 0.0, -1.0,
            0.0, 0.0, -1.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            1.0, 0.0, 0.0, 0.0,
        ];
        GroupStructure { d: 2, p: 3, b: vec![li, lj, lk] }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "heisenberg1" => Ok(Self::heisenberg(1)),
            "heisenberg2" => Ok(Self::heisenberg(2)),
            "quaternionic23" => Ok(Self::quaternionic()),
            _ => Err(Error::Config(format!("unknown builtin group '{name}'"))),
        }
    }

    pub fn dim_v(&self) -> usize {
        2 * self.d
    }

    /// Homogeneous dimension Q = 2d + 2p.
    pub fn homogeneous_dimension(&self) -> usize {
        2 * self.d + 2 * self.p
    }

    /// Checks shapes, skewness and the H-type condition on a fixed set of λ.
    pub fn validate(&self) -> Result<()> {
        let n = self.dim_v();
        if self.d == 0 || self.p == 0 {
            return Err(Error::Structure("d and p must be positive".into()));
        }
        if self.b.len() != self.p {
            return Err(Error::Structure(format!("expected {} structure matrices, got {}", self.p, self.b.len())));
        }
        for (k, bk) in self.b.iter().enumerate() {
            if bk.len() != n * n {
                return Err(Error::Structure(format!("B_{k} has {} entries, expected {}", bk.len(), n * n)));
            }
            for i in 0..n {
                for j in 0..n {
                    if (bk[i * n + j] + bk[j * n + i]).abs() > 1e-12 {
                        return Err(Error::Structure(format!("B_{k} is not skew-symmetric at ({i},{j})")));
                    }
                }
            }
        }
        let mut probes: Vec<Vec<f64>> = (0..self.p)
            .map(|k| (0..self.p).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
            .collect();
        probes.push((0..self.p).map(|i| 0.3 + 0.7 * i as f64).collect());
        probes.push((0..self.p).map(|i| if i % 2 == 0 { -1.1 } else { 0.45 }).collect());
        for lam in &probes {
            let r = self.htype_residual(lam);
            if r > 1e-12 * (1.0 + dot(lam, lam)) {
                return Err(Error::Structure(format!("H-type condition fails at λ={lam:?} (residual {r:.3e})")));
            }
        }
        Ok(())
    }

    /// B(λ) = Σ_k λ_k B_k, row-major.
    pub fn b_lambda(&self, lambda: &[f64]) -> Vec<f64> {
        let n = self.dim_v();
        let mut out = vec![0.0; n * n];
        for (k, bk) in self.b.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(bk) {
                *o += lambda[k] * x;
            }
        }
        out
    }

    /// Frobenius norm of B(λ)² + |λ|² I.
    pub fn htype_residual(&self, lambda: &[f64]) -> f64 {
        let n = self.dim_v();
        let bl = self.b_lambda(lambda);
        let l2 = dot(lambda, lambda);
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for m in 0..n {
                    acc += bl[i * n + m] * bl[m * n + j];
                }
                if i == j {
                    acc += l2;
                }
                s += acc * acc;
            }
        }
        s.sqrt()
    }

    fn check_point(&self, x: &GroupPoint) -> Result<()> {
        if x.v.len() != self.dim_v() || x.z.len() != self.p {
            return Err(Error::Dimension(format!(
                "point has (|v|,|z|)=({},{}), group expects ({},{})",
                x.v.len(),
                x.z.len(),
                self.dim_v(),
                self.p
            )));
        }
        Ok(())
    }

    /// [u, v]_k = uᵀ B_k v.
    pub fn bracket(&self, u: &[f64], v: &[f64]) -> Vec<f64> {
        let n = self.dim_v();
        self.b
            .iter()
            .map(|bk| {
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        s += u[i] * bk[i * n + j] * v[j];
                    }
                }
                s
            })
            .collect()
    }

    pub fn multiply(&self, x: &GroupPoint, y: &GroupPoint) -> Result<GroupPoint> {
        self.check_point(x)?;
        self.check_point(y)?;
        let br = self.bracket(&x.v, &y.v);
        Ok(GroupPoint {
            v: x.v.iter().zip(&y.v).map(|(a, b)| a + b).collect(),
            z: (0..self.p).map(|k| x.z[k] + y.z[k] + 0.5 * br[k]).collect(),
        })
    }

    /// Left-invariant field V_j = ∂_{v_j} + Σ_k c_k(v) ∂_{z_k}, returned as (e_j, c).
    ///
    /// From d/dt f(x·Exp(tV_j)) with the group law above: c_k = ½ (vᵀ B_k)_j.
    pub fn left_field_coeffs(&self, j: usize, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.dim_v();
        if j >= n {
            return Err(Error::Domain(format!("field index {j} out of range 0..{n}")));
        }
        if v.len() != n {
            return Err(Error::Dimension(format!("v has length {}, expected {n}", v.len())));
        }
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let c = self.b.iter().map(|bk| 0.5 * (0..n).map(|i| v[i] * bk[i * n + j]).sum::<f64>()).collect();
        Ok((e, c))
    }

    /// Orthonormal basis (P_1..P_d, Q_1..Q_d) with Rᵀ B(λ) R = |λ| J.
    ///
    /// P's are picked greedily from the standard basis (largest residual after
    /// projecting out the current span, first index on ties), sign-normalized so the
    /// largest entry is positive; Q_j = −|λ|⁻¹ B(λ) P_j.
    pub fn adapted_frame(&self, lambda: &[f64]) -> Result<AdaptedFrame> {
        if lambda.len() != self.p {
            return Err(Error::Dimension(format!("λ has length {}, expected {}", lambda.len(), self.p)));
        }
        let norm = dot(lambda, lambda).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Domain("adapted frame needs λ ≠ 0".into()));
        }
        let n = self.dim_v();
        let d = self.d;
        let k: Vec<f64> = self.b_lambda(lambda).iter().map(|x| x / norm).collect();
        let apply_k = |x: &[f64]| -> Vec<f64> { (0..n).map(|i| (0..n).map(|j| k[i * n + j] * x[j]).sum()).collect() };
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut ps: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut qs: Vec<Vec<f64>> = Vec::with_capacity(d);
        for _ in 0..d {
            let mut best: Option<(f64, Vec<f64>)> = None;
            for m in 0..n {
                let mut w = vec![0.0; n];
                w[m] = 1.0;
                // two passes of Gram-Schmidt for stability
                for _ in 0..2 {
                    for b in &basis {
                        let c = dot(&w, b);
                        for (wi, bi) in w.iter_mut().zip(b) {
                            *wi -= c * bi;
                        }
                    }
                }
                let r = dot(&w, &w).sqrt();
                if best.as_ref().is_none_or(|(br, _)| r > *br + 1e-12) {
                    best = Some((r, w));
                }
            }
            let (r, mut w) = best.expect("nonempty candidate set");
            if r < 1e-8 {
                return Err(Error::Structure("B(λ)/|λ| is not a complex structure".into()));
            }
            w.iter_mut().for_each(|x| *x /= r);
            let lead = w.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() + 1e-12 { x } else { acc });
            if lead < 0.0 {
                w.iter_mut().for_each(|x| *x = -*x);
            }
            let q: Vec<f64> = apply_k(&w).into_iter().map(|x| -x).collect();
            basis.push(w.clone());
            basis.push(q.clone());
            ps.push(w);
            qs.push(q);
        }
        let mut r = vec![0.0; n * n];
        for (col, vecs) in ps.iter().chain(qs.iter()).enumerate() {
            for row in 0..n {
                r[row * n + col] = vecs[row];
            }
        }
        Ok(AdaptedFrame { lambda: lambda.to_vec(), r, dim: n })
    }
}

/// x⁻¹ = (−v, −z).
pub fn inverse(x: &GroupPoint) -> GroupPoint {
    GroupPoint { v: x.v.iter().map(|a| -a).collect(), z: x.z.iter().map(|a| -a).collect() }
}

/// δ_t(v, z) = (t v, t² z).
pub fn dilate(t: f64, x: &GroupPoint) -> Result<GroupPoint> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("dilation factor must be positive, got {t}")));
    }
    Ok(GroupPoint { v: x.v.iter().map(|a| t * a).collect(), z: x.z.iter().map(|a| t * t * a).collect() })
}

/// (|v|⁴ + |z|²)^{1/4}.
pub fn quasi_norm(x: &GroupPoint) -> f64 {
    let v2 = dot(&x.v, &x.v);
    let z2 = dot(&x.z, &x.z);
    (v2 * v2 + z2).powf(0.25)
}

impl AdaptedFrame {
    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.dim).map(|row| self.r[row * self.dim + c]).collect()
    }

    /// Adapted coordinates (p, q) = Rᵀ v.
    pub fn coords(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim;
        let d = n / 2;
        let mut pq = vec![0.0; n];
        for (c, o) in pq.iter_mut().enumerate() {
            *o = (0..n).map(|row| self.r[row * n + c] * v[row]).sum();
        }
        let q = pq.split_off(d);
        (pq, q)
    }

    /// max |Rᵀ B(λ) R − |λ| J| entrywise.
    pub fn residual(&self, g: &GroupStructure) -> f64 {
        let n = self.dim;
        let d = n / 2;
        let bl = g.b_lambda(&self.lambda);
        let norm = dot(&self.lambda, &self.lambda).sqrt();
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        s += self.r[i * n + a] * bl[i * n + j] * self.r[j * n + b];
                    }
                }
                let target = if a < d && b == a + d {
                    norm
                } else if a >= d && b + d == a {
                    -norm
                } else {
                    0.0
                };
                worst = worst.max((s - target).abs());
            }
        }
        worst
    }

    /// max |RᵀR − I|.
    pub fn orthogonality_residual(&self) -> f64 {
        let n = self.dim;
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                let s: f64 = (0..n).map(|i| self.r[i * n + a] * self.r[i * n + b]).sum();
                worst = worst.max((s - if a == b { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn heis() -> GroupStructure {
        GroupStructure::heisenberg(1)
    }

    fn close(a: &GroupPoint, b: &GroupPoint) -> f64 {
        a.v.iter().zip(&b.v).chain(a.z.iter().zip(&b.z)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn builtins_are_htype() {
        for name in ["heisenberg1", "heisenberg2", "quaternionic23"] {
            GroupStructure::builtin(name).unwrap().validate().unwrap();
        }
        assert!(GroupStructure::builtin("nope").is_err());
    }

    #[test]
    fn non_htype_rejected() {
        let mut g = GroupStructure::heisenberg(1);
        g.b[0] = vec![0.0, 2.0, -2.0, 0.0];
        assert!(g.validate().is_err());
        g.b[0] = vec![0.0, 1.0, 1.0, 0.0];
        assert!(g.validate().is_err());
    }

    #[test]
    fn multiply_identity_and_bch() {
        let g = heis();
        let x = GroupPoint::new(vec![0.3, -1.2], vec![0.7]);
        let e = GroupPoint::identity(&g);
        assert_eq!(g.multiply(&x, &e).unwrap(), x);
        let t = 0.8;
        let xp = GroupPoint::new(vec![t, 0.0], vec![0.0]);
        let xq = GroupPoint::new(vec![0.0, t], vec![0.0]);
        let prod = g.multiply(&xp, &xq).unwrap();
        assert_eq!(prod.v, vec![t, t]);
        assert!((prod.z[0] - t * t / 2.0).abs() < 1e-15);
    }

    #[test]
    fn multiply_dimension_mismatch() {
        let g = heis();
        let bad = GroupPoint::new(vec![1.0], vec![0.0]);
        assert!(matches!(g.multiply(&bad, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn inverse_and_dilate_examples() {
        let g = heis();
        let x = GroupPoint::new(vec![1.0, 2.0], vec![3.0]);
        assert_eq!(inverse(&GroupPoint::identity(&g)), GroupPoint::identity(&g));
        assert_eq!(inverse(&x), GroupPoint::new(vec![-1.0, -2.0], vec![-3.0]));
        assert_eq!(dilate(1.0, &x).unwrap(), x);
        assert_eq!(dilate(2.0, &x).unwrap(), GroupPoint::new(vec![2.0, 4.0], vec![12.0]));
        assert!(dilate(0.0, &x).is_err());
        assert!(dilate(-1.0, &x).is_err());
    }

    #[test]
    fn quasi_norm_examples() {
        let g = heis();
        assert_eq!(quasi_norm(&GroupPoint::identity(&g)), 0.0);
        let x = GroupPoint::new(vec![3.0, 4.0], vec![0.0]);
        assert!((quasi_norm(&x) - 5.0).abs() < 1e-14);
        assert_eq!(g.homogeneous_dimension(), 4);
        assert_eq!(GroupStructure::quaternionic().homogeneous_dimension(), 10);
    }

    /// Oracle: differentiate the (linear) central coefficients by central differences
    /// and read off [V_i, V_j] z = ∂_{v_i} c^{(j)} − ∂_{v_j} c^{(i)}.
    fn commutator_z_coeff(g: &GroupStructure, i: usize, j: usize, k: usize) -> f64 {
        let n = g.dim_v();
        let v0: Vec<f64> = (0..n).map(|m| 0.1 * m as f64 - 0.2).collect();
        let h = 0.5;
        let dc = |field: usize, dir: usize| {
            let mut vp = v0.clone();
            let mut vm = v0.clone();
            vp[dir] += h;
            vm[dir] -= h;
            (g.left_field_coeffs(field, &vp).unwrap().1[k] - g.left_field_coeffs(field, &vm).unwrap().1[k]) / (2.0 * h)
        };
        dc(j, i) - dc(i, j)
    }

    #[test]
    fn left_field_coefficients() {
        let g = heis();
        let (e, c) = g.left_field_coeffs(0, &[0.0, 0.0]).unwrap();
        assert_eq!(e, vec![1.0, 0.0]);
        assert_eq!(c, vec![0.0]);
        // P = ∂_p − ½ q ∂_z, Q = ∂_q + ½ p ∂_z
        let (_, c) = g.left_field_coeffs(0, &[0.4, 1.0]).unwrap();
        assert!((c[0] + 0.5).abs() < 1e-15);
        let (_, c) = g.left_field_coeffs(1, &[1.0, 0.4]).unwrap();
        assert!((c[0] - 0.5).abs() < 1e-15);
        assert!((commutator_z_coeff(&g, 0, 1, 0) - 1.0).abs() < 1e-12);
        assert!(g.left_field_coeffs(2, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn field_commutators_match_structure_matrices() {
        let g = GroupStructure::quaternionic();
        let n = g.dim_v();
        for k in 0..g.p {
            for i in 0..n {
                for j in 0..n {
                    let got = commutator_z_coeff(&g, i, j, k);
                    assert!((got - g.b[k][i * n + j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adapted_frame_examples() {
        let g = heis();
        let f = g.adapted_frame(&[1.0]).unwrap();
        assert_eq!(f.r, vec![1.0, 0.0, 0.0, 1.0]);
        let f = g.adapted_frame(&[-1.0]).unwrap();
        assert_eq!(f.r, vec![1.0, 0.0, 0.0, -1.0]);
        assert!(f.residual(&g) < 1e-14);
        assert!(g.adapted_frame(&[0.0]).is_err());
        let q = GroupStructure::quaternionic();
        let f = q.adapted_frame(&[0.3, -1.4, 0.8]).unwrap();
        assert!(f.residual(&q) < 1e-10);
        assert!(f.orthogonality_residual() < 1e-12);
        let f2 = q.adapted_frame(&[0.3, -1.4, 0.8]).unwrap();
        assert_eq!(f.r, f2.r);
    }

    /// In the adapted frame, [P_i, Q_j] = δ_ij |λ|⁻¹ Z^(λ) paired with λ, all other brackets 0.
    #[test]
    fn adapted_frame_brackets() {
        let g = GroupStructure::quaternionic();
        let lam = [0.5, 0.2, -0.9];
        let norm = (lam.iter().map(|x| x * x).sum::<f64>()).sqrt();
        let f = g.adapted_frame(&lam).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let br = g.bracket(&f.col(a), &f.col(b));
                let paired: f64 = br.iter().zip(&lam).map(|(x, l)| x * l).sum();
                let want = if a < 2 && b == a + 2 {
                    norm
                } else if a >= 2 && b + 2 == a {
                    -norm
                } else {
                    0.0
                };
                assert!((paired - want).abs() < 1e-12, "({a},{b})");
                if a < 2 && b == a + 2 {
                    // central part is |λ|⁻¹ λ
                    for k in 0..3 {
                        assert!((br[k] - lam[k] / norm).abs() < 1e-12);
                    }
                }
            }
        }
    }

    fn point(n: usize, p: usize) -> impl Strategy<Value = GroupPoint> {
        (prop::collection::vec(-3.0f64..3.0, n), prop::collection::vec(-3.0f64..3.0, p))
            .prop_map(|(v, z)| GroupPoint::new(v, z))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn associativity(x in point(4, 3), y in point(4, 3), w in point(4, 3)) {
            let g = GroupStructure::quaternionic();
            let a = g.multiply(&g.multiply(&x, &y).unwrap(), &w).unwrap();
            let b = g.multiply(&x, &g.multiply(&y, &w).unwrap()).unwrap();
            prop_assert!(close(&a, &b) < 1e-12);
        }

        #[test]
        fn inverse_law(x in point(2, 1)) {
            let g = heis();
            let e = g.multiply(&x, &inverse(&x)).unwrap();
            prop_assert!(close(&e, &GroupPoint::identity(&g)) < 1e-14);
            let e = g.multiply(&inverse(&x), &x).unwrap();
            prop_assert!(close(&e, &GroupPoint::identity(&g)) < 1e-14);
        }

        #[test]
        fn dilation_is_automorphism(x in point(4, 3), y in point(4, 3), t in 0.1f64..3.0) {
            let g = GroupStructure::quaternionic();
            let lhs = dilate(t, &g.multiply(&x, &y).unwrap()).unwrap();
            let rhs = g.multiply(&dilate(t, &x).unwrap(), &dilate(t, &y).unwrap()).unwrap();
            prop_assert!(close(&lhs, &rhs) < 1e-12 * (1.0 + t * t * 20.0));
        }

        #[test]
        fn quasi_norm_homogeneous(x in point(2, 1), t in 0.1f64..4.0) {
            let lhs = quasi_norm(&dilate(t, &x).unwrap());
            prop_assert!((lhs - t * quasi_norm(&x)).abs() < 1e-12 * (1.0 + lhs));
        }

        #[test]
        fn bracket_bilinear_antisymmetric(u in prop::collection::vec(-2.0f64..2.0, 4),
                                          w in prop::collection::vec(-2.0f64..2.0, 4),
                                          a in -2.0f64..2.0) {
            let g = GroupStructure::quaternionic();
            let uw = g.bracket(&u, &w);
            let wu = g.bracket(&w, &u);
            let au: Vec<f64> = u.iter().map(|x| a * x).collect();
            let auw = g.bracket(&au, &w);
            for k in 0..3 {
                prop_assert!((uw[k] + wu[k]).abs() < 1e-12);
                prop_assert!((auw[k] - a * uw[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn frame_invariants(l in prop::collection::vec(-2.0f64..2.0, 3)) {
            prop_assume!(l.iter().map(|x| x * x).sum::<f64>() > 1e-4);
            let g = GroupStructure::quaternionic();
            let f = g.adapted_frame(&l).unwrap();
            prop_assert!(f.residual(&g) < 1e-10);
            prop_assert!(f.orthogonality_residual() < 1e-10);
            prop_assert!(g.htype_residual(&l) < 1e-12 * (1.0 + l.iter().map(|x| x * x).sum::<f64>()));
        }
    }

    #[test]
    fn json_roundtrip() {
        let g = GroupStructure::quaternionic();
        let s = serde_json::to_string(&g).unwrap();
        assert!(s.contains("\"B\""));
        let back: GroupStructure = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
    }
}
