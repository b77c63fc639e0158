//! The factored linear operator `B = I + eps * U * V`.
//!
//! `U` is n-by-k and `V` is k-by-n with k much smaller than n, so `B` is a
//! rank-k perturbation of the identity. Everything here works on the factors;
//! `B` itself is only materialized by diagnostics and tests.
//!
//! The two identities that make that possible, specialized to our `A = I`,
//! `C = eps * I_k` case:
//!
//! * Woodbury inverse. `(A + U C V)^-1 = A^-1 - A^-1 U (C^-1 + V A^-1 U)^-1 V A^-1`
//!   with `A = I` and `C = eps I_k` gives
//!   `B^-1 = I - U ((1/eps) I_k + V U)^-1 V`. Multiplying the inner inverse
//!   through by `eps` and writing the capacitance matrix `Ck = I_k + eps V U`
//!   turns this into `B^-1 z = z - eps U (Ck^-1 (V z))`, which is O(n k + k^3)
//!   instead of O(n^3).
//!
//! * Sylvester determinant identity. `det(I_n + U V) = det(I_k + V U)`, so
//!   `det B = det Ck` and the log-determinant costs one k-by-k LU.
//!
//! Both operations therefore share the same k-by-k capacitance matrix; it is
//! recomputed per call so every operation stays a pure function.

use crate::error::{Error, Result};
use crate::linalg::{
    self, dense_inverse, dot, lu_logdet, matmul, matvec, LogDet, Matrix, Vector,
};

/// Largest dimension the dense diagnostics will materialize.
pub const DENSE_DIAGNOSTIC_CAP: usize = 256;

/// The operator `B = I + eps * U * V` held in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct DyadicTransform {
    n: usize,
    k: usize,
    epsilon: f64,
    u: Matrix,
    v: Matrix,
}

/// Gradients of a scalar loss with respect to the factors of a transform.
#[derive(Debug, Clone, PartialEq)]
pub struct DyadicGrads {
    pub d_u: Matrix,
    pub d_v: Matrix,
}

impl DyadicGrads {
    pub fn zeros(n: usize, k: usize) -> DyadicGrads {
        DyadicGrads {
            d_u: Matrix::zeros(n, k),
            d_v: Matrix::zeros(k, n),
        }
    }

    pub fn add_assign(&mut self, other: &DyadicGrads) {
        for (a, b) in self.d_u.data_mut().iter_mut().zip(other.d_u.data()) {
            *a += b;
        }
        for (a, b) in self.d_v.data_mut().iter_mut().zip(other.d_v.data()) {
            *a += b;
        }
    }
}

impl DyadicTransform {
    /// Build a transform from `eps`, an n-by-k `u`, and a k-by-n `v`.
    ///
    /// Requires `1 <= k <= n`. The capacitance matrix is checked lazily by
    /// the operations that need it.
    pub fn new(epsilon: f64, u: Matrix, v: Matrix) -> Result<DyadicTransform> {
        let n = u.rows();
        let k = u.cols();
        if k < 1 || k > n {
            return Err(Error::contract(format!(
                "rank k={k} must satisfy 1 <= k <= n={n}"
            )));
        }
        if v.rows() != k || v.cols() != n {
            return Err(Error::contract(format!(
                "v must be {k}x{n}, got {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        if !epsilon.is_finite() {
            return Err(Error::contract("epsilon must be finite"));
        }
        Ok(DyadicTransform { n, k, epsilon, u, v })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    /// The k-by-k capacitance matrix `Ck = I_k + eps * V * U`.
    pub fn capacitance(&self) -> Matrix {
        let mut c = matmul(&self.v, &self.u).expect("factor shapes fixed at construction");
        for x in c.data_mut().iter_mut() {
            *x *= self.epsilon;
        }
        for i in 0..self.k {
            c.set(i, i, c.get(i, i) + 1.0);
        }
        c
    }

    /// Materialize `B` densely. Diagnostics and tests only; O(n^2 k) work.
    pub fn to_dense(&self) -> Matrix {
        let mut b = matmul(&self.u, &self.v).expect("factor shapes fixed at construction");
        for x in b.data_mut().iter_mut() {
            *x *= self.epsilon;
        }
        for i in 0..self.n {
            b.set(i, i, b.get(i, i) + 1.0);
        }
        b
    }

    fn v_col(&self, j: usize) -> Vec<f64> {
        (0..self.k).map(|c| self.v.get(c, j)).collect()
    }

    /// `z = B y = y + eps * U (V y)`, O(n k).
    pub fn apply(&self, y: &Vector) -> Result<Vector> {
        if y.len() != self.n {
            return Err(Error::contract(format!(
                "apply expects length {}, got {}",
                self.n,
                y.len()
            )));
        }
        let vy = matvec(&self.v, y)?;
        let uvy = matvec(&self.u, &vy)?;
        let out: Vec<f64> = y
            .iter()
            .zip(uvy.iter())
            .map(|(yi, wi)| yi + self.epsilon * wi)
            .collect();
        Ok(Vector::from(out))
    }

    /// `y = B^-1 z = z - eps * U (Ck^-1 (V z))`, O(n k + k^3).
    pub fn apply_inverse(&self, z: &Vector) -> Result<Vector> {
        if z.len() != self.n {
            return Err(Error::contract(format!(
                "apply_inverse expects length {}, got {}",
                self.n,
                z.len()
            )));
        }
        let c = self.capacitance();
        let c_inv = dense_inverse(&c).map_err(|e| match e {
            Error::Singular { .. } => {
                let ld = lu_logdet(&c).expect("capacitance is square");
                Error::SingularCapacitance {
                    det_abs: if ld.sign == 0 { 0.0 } else { ld.log_abs.exp() },
                }
            }
            other => other,
        })?;
        let vz = matvec(&self.v, z)?;
        let w = matvec(&c_inv, &vz)?;
        let uw = matvec(&self.u, &w)?;
        let out: Vec<f64> = z
            .iter()
            .zip(uw.iter())
            .map(|(zi, wi)| zi - self.epsilon * wi)
            .collect();
        Ok(Vector::from(out))
    }

    /// Log-determinant of `B` via the k-by-k capacitance matrix.
    ///
    /// A singular or negative-determinant `B` is a valid return here; callers
    /// that require positive definiteness must reject `sign != +1`.
    pub fn logdet(&self) -> LogDet {
        lu_logdet(&self.capacitance()).expect("capacitance is square")
    }

    /// Squared column norms of `B`: entry j is `||B e_j||^2`, O(n k^2).
    ///
    /// This is both the variance weighting of `trace_bdbt` and the exact
    /// derivative of that trace with respect to each variance entry.
    pub fn col_squared_norms(&self) -> Vector {
        let utu = linalg::matmul_tn(&self.u, &self.u).expect("shapes fixed");
        let mut out = vec![0.0; self.n];
        for (j, o) in out.iter_mut().enumerate() {
            let vj = self.v_col(j);
            let uv_jj = dot(self.u.row(j), &vj);
            // v_j^T (U^T U) v_j
            let mut quad = 0.0;
            for (a, &vja) in vj.iter().enumerate() {
                quad += vja * dot(utu.row(a), &vj);
            }
            *o = 1.0 + 2.0 * self.epsilon * uv_jj + self.epsilon * self.epsilon * quad;
        }
        Vector::from(out)
    }

    /// `Tr(B diag(var) B^T)` without materializing `B`, O(n k^2).
    pub fn trace_bdbt(&self, var: &Vector) -> Result<f64> {
        if var.len() != self.n {
            return Err(Error::contract(format!(
                "trace_bdbt expects length {}, got {}",
                self.n,
                var.len()
            )));
        }
        if var.iter().any(|&v| v <= 0.0) {
            return Err(Error::contract("variances must be positive"));
        }
        let colsq = self.col_squared_norms();
        Ok(var.iter().zip(colsq.iter()).map(|(v, c)| v * c).sum())
    }

    /// `||B mu||^2`, O(n k).
    pub fn transformed_mean_sqnorm(&self, mu: &Vector) -> Result<f64> {
        let bm = self.apply(mu)?;
        Ok(bm.iter().map(|x| x * x).sum())
    }

    /// Gap between exact det/inverse and their first-order expansions in eps.
    ///
    /// Returns `(det_gap, inv_gap)` where
    /// `det_gap = |det B - (1 + eps Tr(UV))|` and `inv_gap` is the max-norm
    /// of `B^-1 - (I - eps U V)`. Both shrink as O(eps^2). Densifies `B`,
    /// so it refuses dimensions above `DENSE_DIAGNOSTIC_CAP`.
    pub fn first_order_diagnostics(&self) -> Result<(f64, f64)> {
        if self.n > DENSE_DIAGNOSTIC_CAP {
            return Err(Error::DiagnosticCap {
                n: self.n,
                cap: DENSE_DIAGNOSTIC_CAP,
            });
        }
        let uv = matmul(&self.u, &self.v)?;
        let mut b = uv.clone();
        for x in b.data_mut().iter_mut() {
            *x *= self.epsilon;
        }
        for i in 0..self.n {
            b.set(i, i, b.get(i, i) + 1.0);
        }

        let ld = lu_logdet(&b)?;
        let det = if ld.sign == 0 {
            0.0
        } else {
            ld.sign as f64 * ld.log_abs.exp()
        };
        let tr_uv = linalg::trace(&uv)?;
        let det_gap = (det - (1.0 + self.epsilon * tr_uv)).abs();

        let b_inv = dense_inverse(&b)?;
        let mut inv_gap = 0.0f64;
        for i in 0..self.n {
            for j in 0..self.n {
                let first_order =
                    (if i == j { 1.0 } else { 0.0 }) - self.epsilon * uv.get(i, j);
                inv_gap = inv_gap.max((b_inv.get(i, j) - first_order).abs());
            }
        }
        Ok((det_gap, inv_gap))
    }

    /// Backward pass of `z = B y` for a scalar loss with upstream `d_z`.
    ///
    /// `d_y = B^T d_z`, `d_U = eps d_z (V y)^T`, `d_V = eps (U^T d_z) y^T`,
    /// all O(n k).
    pub fn apply_backward(&self, y: &Vector, d_z: &Vector) -> Result<(Vector, DyadicGrads)> {
        if y.len() != self.n || d_z.len() != self.n {
            return Err(Error::contract(format!(
                "apply_backward expects length {}, got y={} d_z={}",
                self.n,
                y.len(),
                d_z.len()
            )));
        }
        let eps = self.epsilon;
        let ut_dz = linalg::matvec(&self.u.transposed(), d_z)?;
        let vt_utdz = linalg::matvec(&self.v.transposed(), &ut_dz)?;
        let d_y = d_z
            .iter()
            .zip(vt_utdz.iter())
            .map(|(d, w)| d + eps * w)
            .collect::<Vec<_>>();

        let vy = matvec(&self.v, y)?;
        let mut grads = DyadicGrads::zeros(self.n, self.k);
        for i in 0..self.n {
            let row = grads.d_u.row_mut(i);
            let s = eps * d_z[i];
            for (c, r) in row.iter_mut().enumerate() {
                *r = s * vy[c];
            }
        }
        for c in 0..self.k {
            let row = grads.d_v.row_mut(c);
            let s = eps * ut_dz[c];
            for (j, r) in row.iter_mut().enumerate() {
                *r = s * y[j];
            }
        }
        Ok((Vector::from(d_y), grads))
    }

    /// Exact gradients of
    /// `weight * (trace_bdbt(var) + transformed_mean_sqnorm(mu) - 2 log|det B|)`
    /// with respect to `mu`, `var`, `U`, and `V`.
    ///
    /// The log-determinant gradient is routed through the k-by-k capacitance
    /// matrix using `d log|det C| = Tr(C^-1 dC)`. Cost O(n k^2 + k^3).
    pub fn kl_terms_backward(
        &self,
        mu: &Vector,
        var: &Vector,
        weight: f64,
    ) -> Result<(Vector, Vector, DyadicGrads)> {
        if mu.len() != self.n || var.len() != self.n {
            return Err(Error::contract(format!(
                "kl_terms_backward expects length {}, got mu={} var={}",
                self.n,
                mu.len(),
                var.len()
            )));
        }
        if var.iter().any(|&v| v <= 0.0) {
            return Err(Error::contract("variances must be positive"));
        }
        let eps = self.epsilon;
        let n = self.n;
        let k = self.k;

        let c = self.capacitance();
        let c_inv = dense_inverse(&c).map_err(|e| match e {
            Error::Singular { .. } => {
                let ld = lu_logdet(&c).expect("capacitance is square");
                Error::SingularCapacitance {
                    det_abs: if ld.sign == 0 { 0.0 } else { ld.log_abs.exp() },
                }
            }
            other => other,
        })?;
        let c_inv_t = c_inv.transposed();

        // d/d var is the squared column norms of B (see col_squared_norms).
        let colsq = self.col_squared_norms();
        let d_var = colsq.iter().map(|c| weight * c).collect::<Vec<_>>();

        // Mean term: d/d mu = 2 B^T (B mu).
        let bm = self.apply(mu)?;
        let ut_bm = matvec(&self.u.transposed(), &bm)?;
        let vt_ut_bm = matvec(&self.v.transposed(), &ut_bm)?;
        let d_mu = bm
            .iter()
            .zip(vt_ut_bm.iter())
            .map(|(m, w)| weight * 2.0 * (m + eps * w))
            .collect::<Vec<_>>();

        // Factor gradients, assembled term by term:
        //   trace:  2 eps (D V^T + eps U (V D V^T))   for U
        //           2 eps (U^T D + eps (U^T U) V D)   for V
        //   mean:   2 eps (B mu) (V mu)^T             for U
        //           2 eps (U^T B mu) mu^T             for V
        //   logdet: -2 eps V^T C^-T                   for U
        //           -2 eps C^-T U^T                   for V
        let utu = linalg::matmul_tn(&self.u, &self.u)?;
        // V D and (V D V^T)
        let mut vd = Matrix::zeros(k, n);
        for c_row in 0..k {
            for j in 0..n {
                vd.set(c_row, j, self.v.get(c_row, j) * var[j]);
            }
        }
        let vdvt = linalg::matmul_nt(&vd, &self.v)?;
        let u_vdvt = matmul(&self.u, &vdvt)?;
        let vt_cinvt = linalg::matmul_tn(&self.v, &c_inv_t)?;
        let cinvt_ut = linalg::matmul_nt(&c_inv_t, &self.u)?;
        let utu_vd = matmul(&utu, &vd)?;
        let v_mu = matvec(&self.v, mu)?;

        let two_eps = 2.0 * eps * weight;
        let mut grads = DyadicGrads::zeros(n, k);
        for j in 0..n {
            for c in 0..k {
                let trace_term = var[j] * self.v.get(c, j) + eps * u_vdvt.get(j, c);
                let mean_term = bm[j] * v_mu[c];
                let logdet_term = vt_cinvt.get(j, c);
                grads
                    .d_u
                    .set(j, c, two_eps * (trace_term + mean_term - logdet_term));
            }
        }
        for c in 0..k {
            for j in 0..n {
                let trace_term = self.u.get(j, c) * var[j] + eps * utu_vd.get(c, j);
                let mean_term = ut_bm[c] * mu[j];
                let logdet_term = cinvt_ut.get(c, j);
                grads
                    .d_v
                    .set(c, j, two_eps * (trace_term + mean_term - logdet_term));
            }
        }
        Ok((Vector::from(d_mu), Vector::from(d_var), grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn random_transform(n: usize, k: usize, epsilon: f64, seed: u64) -> DyadicTransform {
        let mut rng = stream(seed, "dyadic-test", 0);
        let u = Matrix::from_vec(n, k, (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let v = Matrix::from_vec(k, n, (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        DyadicTransform::new(epsilon, u, v).unwrap()
    }

    fn random_vector(n: usize, seed: u64) -> Vector {
        let mut rng = stream(seed, "dyadic-test-vec", 0);
        Vector::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn shear() -> DyadicTransform {
        // B = [[1, 0.5], [0, 1]]: U = (1,0)^T, V = (0,1), eps = 0.5.
        let u = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let v = Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        DyadicTransform::new(0.5, u, v).unwrap()
    }

    #[test]
    fn construction_rejects_bad_shapes() {
        let u = Matrix::zeros(4, 2);
        let v = Matrix::zeros(2, 5);
        assert!(DyadicTransform::new(0.1, u.clone(), v).is_err());
        let v_wide = Matrix::zeros(5, 4);
        assert!(DyadicTransform::new(0.1, u, v_wide).is_err());
        // k > n
        let u2 = Matrix::zeros(2, 3);
        let v2 = Matrix::zeros(3, 2);
        assert!(DyadicTransform::new(0.1, u2, v2).is_err());
    }

    #[test]
    fn apply_identity_at_zero_eps() {
        let mut b = random_transform(6, 2, 0.3, 1);
        b.epsilon = 0.0;
        let y = random_vector(6, 1);
        let z = b.apply(&y).unwrap();
        assert_eq!(&z[..], &y[..]);
    }

    #[test]
    fn apply_analytic_shear() {
        let b = shear();
        let z = b.apply(&Vector::from(vec![1.0, 2.0])).unwrap();
        assert_eq!(&z[..], &[2.0, 2.0]);
    }

    #[test]
    fn apply_matches_dense() {
        let b = random_transform(16, 4, 0.7, 2);
        let y = random_vector(16, 2);
        let z = b.apply(&y).unwrap();
        let dense = matvec(&b.to_dense(), &y).unwrap();
        for (a, d) in z.iter().zip(dense.iter()) {
            assert!((a - d).abs() <= 1e-12);
        }
    }

    #[test]
    fn apply_inverse_identity_at_zero_eps() {
        let mut b = random_transform(5, 2, 0.3, 3);
        b.epsilon = 0.0;
        let z = random_vector(5, 3);
        let y = b.apply_inverse(&z).unwrap();
        assert_eq!(&y[..], &z[..]);
    }

    #[test]
    fn apply_inverse_round_trip() {
        let b = random_transform(32, 8, 0.4, 4);
        let y = random_vector(32, 4);
        let z = b.apply(&y).unwrap();
        let back = b.apply_inverse(&z).unwrap();
        for (a, d) in back.iter().zip(y.iter()) {
            assert!((a - d).abs() <= 1e-10);
        }
    }

    #[test]
    fn apply_inverse_matches_dense() {
        let b = random_transform(16, 4, 0.6, 5);
        let z = random_vector(16, 5);
        let y = b.apply_inverse(&z).unwrap();
        let dense = matvec(&dense_inverse(&b.to_dense()).unwrap(), &z).unwrap();
        for (a, d) in y.iter().zip(dense.iter()) {
            assert!((a - d).abs() <= 1e-9);
        }
    }

    #[test]
    fn apply_inverse_singular_capacitance() {
        // k=1: C = 1 + eps v.u; choose eps so C = 0 exactly.
        let u = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let v = Matrix::from_vec(1, 2, vec![-1.0, 0.0]).unwrap();
        let b = DyadicTransform::new(1.0, u, v).unwrap();
        match b.apply_inverse(&Vector::from(vec![1.0, 2.0])) {
            Err(Error::SingularCapacitance { det_abs }) => assert!(det_abs < 1e-10),
            other => panic!("expected singular capacitance, got {other:?}"),
        }
    }

    #[test]
    fn logdet_identity_and_nilpotent() {
        let mut b = random_transform(4, 2, 0.3, 6);
        b.epsilon = 0.0;
        let ld = b.logdet();
        assert_eq!(ld.sign, 1);
        assert_eq!(ld.log_abs, 0.0);

        // The shear dyad is nilpotent (VU = 0), so det B = 1 for any eps.
        let s = shear();
        let ld = s.logdet();
        assert_eq!(ld.sign, 1);
        assert!(ld.log_abs.abs() <= 1e-12);
    }

    #[test]
    fn logdet_matches_dense() {
        for trial in 0..10 {
            let b = random_transform(24, 3, [1e-3, 0.1, 1.0][trial % 3], 100 + trial as u64);
            let ld = b.logdet();
            let dense = lu_logdet(&b.to_dense()).unwrap();
            assert_eq!(ld.sign, dense.sign, "trial {trial}");
            assert!(
                (ld.log_abs - dense.log_abs).abs() <= 1e-9,
                "trial {trial}: {} vs {}",
                ld.log_abs,
                dense.log_abs
            );
        }
    }

    #[test]
    fn nilpotent_dyad_blockwise() {
        // U supported on the first half of coordinates, V on the second half,
        // so VU = 0 and det(I + eps UV) = 1 exactly.
        let n = 10;
        let k = 3;
        let mut rng = stream(7, "dyadic-test", 1);
        let mut u = Matrix::zeros(n, k);
        let mut v = Matrix::zeros(k, n);
        for i in 0..n / 2 {
            for c in 0..k {
                u.set(i, c, rng.gen_range(-1.0..1.0));
            }
        }
        for c in 0..k {
            for j in n / 2..n {
                v.set(c, j, rng.gen_range(-1.0..1.0));
            }
        }
        let b = DyadicTransform::new(0.9, u, v).unwrap();
        let ld = b.logdet();
        assert_eq!(ld.sign, 1);
        assert!(ld.log_abs.abs() <= 1e-12);
    }

    #[test]
    fn trace_bdbt_trivial_and_analytic() {
        let mut b = random_transform(2, 1, 0.0, 8);
        b.epsilon = 0.0;
        let t = b.trace_bdbt(&Vector::from(vec![1.0, 1.0])).unwrap();
        assert_eq!(t, 2.0);

        let s = shear();
        let t = s.trace_bdbt(&Vector::from(vec![1.0, 1.0])).unwrap();
        assert!((t - 2.25).abs() <= 1e-14);
    }

    #[test]
    fn trace_bdbt_matches_dense() {
        let b = random_transform(20, 5, 0.3, 9);
        let mut rng = stream(9, "dyadic-test-var", 0);
        let var =
            Vector::from_vec((0..20).map(|_| rng.gen_range(0.2..2.0)).collect()).unwrap();
        let fast = b.trace_bdbt(&var).unwrap();

        let dense_b = b.to_dense();
        let mut slow = 0.0;
        for i in 0..20 {
            for j in 0..20 {
                slow += dense_b.get(i, j) * dense_b.get(i, j) * var[j];
            }
        }
        assert!((fast - slow).abs() <= 1e-10 * slow.abs());
    }

    #[test]
    fn trace_bdbt_rejects_nonpositive_variance() {
        let b = random_transform(4, 2, 0.1, 10);
        let var = Vector::from(vec![1.0, 0.0, 1.0, 1.0]);
        assert!(matches!(b.trace_bdbt(&var), Err(Error::Contract(_))));
    }

    #[test]
    fn mean_sqnorm_cases() {
        let b = random_transform(16, 4, 0.5, 11);
        assert_eq!(b.transformed_mean_sqnorm(&Vector::zeros(16)).unwrap(), 0.0);

        let mut b0 = b.clone();
        b0.epsilon = 0.0;
        let mu = random_vector(16, 11);
        let plain: f64 = mu.iter().map(|x| x * x).sum();
        assert_eq!(b0.transformed_mean_sqnorm(&mu).unwrap(), plain);

        let fast = b.transformed_mean_sqnorm(&mu).unwrap();
        let dense = matvec(&b.to_dense(), &mu).unwrap();
        let slow: f64 = dense.iter().map(|x| x * x).sum();
        assert!((fast - slow).abs() <= 1e-10 * slow.max(1.0));
    }

    #[test]
    fn first_order_gaps_zero_at_zero_eps() {
        let mut b = random_transform(8, 2, 0.1, 12);
        b.epsilon = 0.0;
        let (dg, ig) = b.first_order_diagnostics().unwrap();
        assert_eq!(dg, 0.0);
        assert_eq!(ig, 0.0);
    }

    #[test]
    fn first_order_gaps_quadratic_in_eps() {
        let base = random_transform(8, 2, 1.0, 13);
        let eps_grid = [1e-2, 1e-3, 1e-4];
        let gaps: Vec<(f64, f64)> = eps_grid
            .iter()
            .map(|&eps| {
                let mut b = base.clone();
                b.epsilon = eps;
                b.first_order_diagnostics().unwrap()
            })
            .collect();
        for w in 0..eps_grid.len() - 1 {
            let dle = eps_grid[w].ln() - eps_grid[w + 1].ln();
            let det_slope = (gaps[w].0.ln() - gaps[w + 1].0.ln()) / dle;
            let inv_slope = (gaps[w].1.ln() - gaps[w + 1].1.ln()) / dle;
            assert!(
                (det_slope - 2.0).abs() <= 0.2,
                "det slope {det_slope} out of range"
            );
            assert!(
                (inv_slope - 2.0).abs() <= 0.2,
                "inv slope {inv_slope} out of range"
            );
        }
    }

    #[test]
    fn first_order_gaps_within_explicit_bound() {
        // eps = 1e-3 with unit-scale factors; bound both gaps by the exact
        // tail sums of the characteristic polynomial / Neumann series.
        let b = random_transform(8, 2, 1e-3, 14);
        let eps = b.epsilon();
        let (det_gap, inv_gap) = b.first_order_diagnostics().unwrap();

        let vu = matmul(b.v(), b.u()).unwrap();
        let vu_fro = vu.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let k = b.k();
        let mut det_bound = 0.0;
        let mut binom = 1.0 * k as f64 * (k as f64 - 1.0) / 2.0;
        let mut pow = (eps * vu_fro).powi(2);
        for j in 2..=k {
            det_bound += binom * pow;
            binom *= (k - j) as f64 / (j + 1) as f64;
            pow *= eps * vu_fro;
        }
        assert!(
            det_gap <= det_bound,
            "det gap {det_gap} exceeds bound {det_bound}"
        );

        let uv = matmul(b.u(), b.v()).unwrap();
        let uv_fro = uv.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let r = eps * uv_fro;
        assert!(r < 1.0);
        let inv_bound = r * r / (1.0 - r);
        assert!(
            inv_gap <= inv_bound,
            "inv gap {inv_gap} exceeds bound {inv_bound}"
        );
    }

    #[test]
    fn diagnostics_refuse_above_cap() {
        let b = random_transform(300, 2, 0.1, 15);
        assert!(matches!(
            b.first_order_diagnostics(),
            Err(Error::DiagnosticCap { .. })
        ));
    }

    #[test]
    fn apply_backward_trivial_cases() {
        let mut b = random_transform(6, 2, 0.4, 16);
        let y = random_vector(6, 16);
        let d_z = random_vector(6, 17);

        b.epsilon = 0.0;
        let (d_y, grads) = b.apply_backward(&y, &d_z).unwrap();
        assert_eq!(&d_y[..], &d_z[..]);
        assert!(grads.d_u.data().iter().all(|&x| x == 0.0));
        assert!(grads.d_v.data().iter().all(|&x| x == 0.0));

        b.epsilon = 0.4;
        let (d_y, grads) = b.apply_backward(&y, &Vector::zeros(6)).unwrap();
        assert!(d_y.iter().all(|&x| x == 0.0));
        assert!(grads.d_u.data().iter().all(|&x| x == 0.0));
        assert!(grads.d_v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn apply_backward_matches_finite_differences() {
        // Scalar loss 0.5 ||B y||^2, so d_z = z.
        let n = 10;
        let k = 3;
        let b = random_transform(n, k, 0.3, 18);
        let y = random_vector(n, 18);
        let loss = |b: &DyadicTransform, y: &Vector| -> f64 {
            let z = b.apply(y).unwrap();
            0.5 * z.iter().map(|x| x * x).sum::<f64>()
        };
        let z = b.apply(&y).unwrap();
        let (d_y, grads) = b.apply_backward(&y, &z).unwrap();

        let h = 1e-6;
        let check = |analytic: f64, fd: f64| {
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic - fd).abs() / denom <= 1e-6,
                "analytic {analytic} vs fd {fd}"
            );
        };
        for i in 0..n {
            let mut yp = y.clone();
            yp[i] += h;
            let mut ym = y.clone();
            ym[i] -= h;
            check(d_y[i], (loss(&b, &yp) - loss(&b, &ym)) / (2.0 * h));
        }
        for i in 0..n {
            for c in 0..k {
                let mut bp = b.clone();
                bp.u.set(i, c, bp.u.get(i, c) + h);
                let mut bm = b.clone();
                bm.u.set(i, c, bm.u.get(i, c) - h);
                check(grads.d_u.get(i, c), (loss(&bp, &y) - loss(&bm, &y)) / (2.0 * h));
            }
        }
        for c in 0..k {
            for j in 0..n {
                let mut bp = b.clone();
                bp.v.set(c, j, bp.v.get(c, j) + h);
                let mut bm = b.clone();
                bm.v.set(c, j, bm.v.get(c, j) - h);
                check(grads.d_v.get(c, j), (loss(&bp, &y) - loss(&bm, &y)) / (2.0 * h));
            }
        }
    }

    fn kl_terms_value(b: &DyadicTransform, mu: &Vector, var: &Vector, weight: f64) -> f64 {
        let ld = b.logdet();
        weight
            * (b.trace_bdbt(var).unwrap() + b.transformed_mean_sqnorm(mu).unwrap()
                - 2.0 * ld.log_abs)
    }

    #[test]
    fn kl_terms_backward_zero_eps_reduction() {
        let mut b = random_transform(6, 2, 0.0, 19);
        b.epsilon = 0.0;
        let mu = random_vector(6, 19);
        let mut rng = stream(19, "dyadic-test-var", 1);
        let var = Vector::from_vec((0..6).map(|_| rng.gen_range(0.3..2.0)).collect()).unwrap();
        let weight = 0.7;
        let (d_mu, d_var, grads) = b.kl_terms_backward(&mu, &var, weight).unwrap();
        for j in 0..6 {
            assert!((d_var[j] - weight).abs() <= 1e-14);
            assert!((d_mu[j] - 2.0 * weight * mu[j]).abs() <= 1e-14);
        }
        assert!(grads.d_u.data().iter().all(|&x| x == 0.0));
        assert!(grads.d_v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kl_terms_backward_zero_weight() {
        let b = random_transform(5, 2, 0.2, 20);
        let mu = random_vector(5, 20);
        let var = Vector::from(vec![1.0; 5]);
        let (d_mu, d_var, grads) = b.kl_terms_backward(&mu, &var, 0.0).unwrap();
        assert!(d_mu.iter().all(|&x| x == 0.0));
        assert!(d_var.iter().all(|&x| x == 0.0));
        assert!(grads.d_u.data().iter().all(|&x| x == 0.0));
        assert!(grads.d_v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kl_terms_backward_matches_finite_differences() {
        let n = 8;
        let k = 2;
        let b = random_transform(n, k, 0.01, 21);
        let mu = random_vector(n, 21);
        let mut rng = stream(21, "dyadic-test-var", 2);
        let var = Vector::from_vec((0..n).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
        let weight = 0.37;
        let (d_mu, d_var, grads) = b.kl_terms_backward(&mu, &var, weight).unwrap();

        let h = 1e-5;
        let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-6);
        for j in 0..n {
            let mut mp = mu.clone();
            mp[j] += h;
            let mut mm = mu.clone();
            mm[j] -= h;
            let fd = (kl_terms_value(&b, &mp, &var, weight)
                - kl_terms_value(&b, &mm, &var, weight))
                / (2.0 * h);
            assert!(rel(d_mu[j], fd) <= 1e-5, "mu[{j}]: {} vs {}", d_mu[j], fd);

            let mut vp = var.clone();
            vp[j] += h;
            let mut vm = var.clone();
            vm[j] -= h;
            let fd = (kl_terms_value(&b, &mu, &vp, weight)
                - kl_terms_value(&b, &mu, &vm, weight))
                / (2.0 * h);
            assert!(rel(d_var[j], fd) <= 1e-5, "var[{j}]: {} vs {}", d_var[j], fd);
        }
        for i in 0..n {
            for c in 0..k {
                let mut bp = b.clone();
                bp.u.set(i, c, bp.u.get(i, c) + h);
                let mut bm = b.clone();
                bm.u.set(i, c, bm.u.get(i, c) - h);
                let fd = (kl_terms_value(&bp, &mu, &var, weight)
                    - kl_terms_value(&bm, &mu, &var, weight))
                    / (2.0 * h);
                assert!(rel(grads.d_u.get(i, c), fd) <= 1e-5);
            }
        }
        for c in 0..k {
            for j in 0..n {
                let mut bp = b.clone();
                bp.v.set(c, j, bp.v.get(c, j) + h);
                let mut bm = b.clone();
                bm.v.set(c, j, bm.v.get(c, j) - h);
                let fd = (kl_terms_value(&bp, &mu, &var, weight)
                    - kl_terms_value(&bm, &mu, &var, weight))
                    / (2.0 * h);
                assert!(rel(grads.d_v.get(c, j), fd) <= 1e-5);
            }
        }
    }
}
