//! Compressible neo-Hookean material.
//!
//! Symmetric pairs use the order (11, 22, 33, 12, 23, 13) with engineering
//! (factor 2) shear strains, so `S_voigt = D · E_voigt`.

use nalgebra::{Matrix3, Matrix6};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaterialError {
    #[error("Poisson ratio {0} gives an incompressible or unstable material")]
    Incompressible(f64),
    #[error("invalid material parameter: {0}")]
    InvalidParameter(String),
    #[error("deformation state has det C = {0}, must be positive")]
    InvalidState(f64),
}

pub type Result<T> = std::result::Result<T, MaterialError>;

pub const VOIGT_PAIRS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (0, 2)];

/// Lamé parameters `(μ, λ)` from Young's modulus and Poisson ratio.
pub fn lame_from_engineering(young: f64, nu: f64) -> Result<(f64, f64)> {
    if !(young > 0.0) || !young.is_finite() {
        return Err(MaterialError::InvalidParameter(format!(
            "Young modulus must be positive, got {young}"
        )));
    }
    if !(nu > -1.0 && nu < 0.5) {
        return Err(MaterialError::Incompressible(nu));
    }
    let mu = young / (2.0 * (1.0 + nu));
    let lambda = young * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    Ok((mu, lambda))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeoHookean {
    pub mu: f64,
    pub lambda_lame: f64,
    pub rho0: f64,
}

/// Kinematic and stress quantities at a material point.
#[derive(Debug, Clone, PartialEq)]
pub struct StressState {
    pub f: Matrix3<f64>,
    pub c: Matrix3<f64>,
    pub j: f64,
    pub s: Matrix3<f64>,
    pub e_green: Matrix3<f64>,
}

impl NeoHookean {
    pub fn new(mu: f64, lambda_lame: f64, rho0: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(MaterialError::InvalidParameter(format!("mu must be positive, got {mu}")));
        }
        if !(rho0 > 0.0) {
            return Err(MaterialError::InvalidParameter(format!(
                "density must be positive, got {rho0}"
            )));
        }
        if !(lambda_lame + 2.0 / 3.0 * mu > 0.0) {
            return Err(MaterialError::InvalidParameter(format!(
                "bulk modulus must be positive (mu = {mu}, lambda = {lambda_lame})"
            )));
        }
        Ok(NeoHookean {
            mu,
            lambda_lame,
            rho0,
        })
    }

    pub fn from_engineering(young: f64, nu: f64, rho0: f64) -> Result<Self> {
        let (mu, lambda) = lame_from_engineering(young, nu)?;
        Self::new(mu, lambda, rho0)
    }

    pub fn bulk_modulus(&self) -> f64 {
        self.lambda_lame + 2.0 / 3.0 * self.mu
    }

    /// Young's modulus and Poisson ratio recovered from the Lamé pair.
    pub fn engineering(&self) -> (f64, f64) {
        let (mu, l) = (self.mu, self.lambda_lame);
        (mu * (3.0 * l + 2.0 * mu) / (l + mu), l / (2.0 * (l + mu)))
    }

    fn invert(c: &Matrix3<f64>) -> Result<(Matrix3<f64>, f64)> {
        let det = c.determinant();
        if !(det > 0.0) || !det.is_finite() {
            return Err(MaterialError::InvalidState(det));
        }
        let inv = c.try_inverse().ok_or(MaterialError::InvalidState(det))?;
        Ok((inv, det))
    }

    /// Second Piola-Kirchhoff stress and strain-energy density.
    pub fn pk2_stress(&self, c: &Matrix3<f64>) -> Result<(Matrix3<f64>, f64)> {
        let (cinv, det) = Self::invert(c)?;
        let ln_j = 0.5 * det.ln();
        let s = (Matrix3::identity() - cinv) * self.mu + cinv * (self.lambda_lame * ln_j);
        let psi = 0.5 * self.mu * (c.trace() - 3.0) - self.mu * ln_j + 0.5 * self.lambda_lame * ln_j * ln_j;
        Ok((s, psi))
    }

    pub fn strain_energy(&self, c: &Matrix3<f64>) -> Result<f64> {
        Ok(self.pk2_stress(c)?.1)
    }

    /// Full material tangent `∂S/∂E` as `t[i][j][k][l]`.
    pub fn tangent_tensor(&self, c: &Matrix3<f64>) -> Result<[[[[f64; 3]; 3]; 3]; 3]> {
        let (ci, det) = Self::invert(c)?;
        let ln_j = 0.5 * det.ln();
        let coef = self.mu - self.lambda_lame * ln_j;
        let mut t = [[[[0.0; 3]; 3]; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        t[i][j][k][l] = self.lambda_lame * ci[(i, j)] * ci[(k, l)]
                            + coef * (ci[(i, k)] * ci[(j, l)] + ci[(i, l)] * ci[(j, k)]);
                    }
                }
            }
        }
        Ok(t)
    }

    /// Material tangent in symmetric-pair form.
    pub fn material_tangent(&self, c: &Matrix3<f64>) -> Result<Matrix6<f64>> {
        let t = self.tangent_tensor(c)?;
        Ok(Matrix6::from_fn(|a, b| {
            let (i, j) = VOIGT_PAIRS[a];
            let (k, l) = VOIGT_PAIRS[b];
            t[i][j][k][l]
        }))
    }

    pub fn state(&self, f: Matrix3<f64>) -> Result<StressState> {
        let c = f.transpose() * f;
        let j = f.determinant();
        if !(j > 0.0) {
            return Err(MaterialError::InvalidState(j * j));
        }
        let (s, _) = self.pk2_stress(&c)?;
        let e_green = (c - Matrix3::identity()) * 0.5;
        Ok(StressState { f, c, j, s, e_green })
    }

    /// First Piola-Kirchhoff stress `P = F S`.
    pub fn pk1_stress(&self, f: &Matrix3<f64>) -> Result<Matrix3<f64>> {
        if !(f.determinant() > 0.0) {
            return Err(MaterialError::InvalidState(f.determinant().powi(2)));
        }
        let (s, _) = self.pk2_stress(&(f.transpose() * f))?;
        Ok(f * s)
    }
}

pub fn voigt_of(m: &Matrix3<f64>, shear_factor: f64) -> [f64; 6] {
    let mut v = [0.0; 6];
    for (a, &(i, j)) in VOIGT_PAIRS.iter().enumerate() {
        v[a] = if i == j { m[(i, j)] } else { shear_factor * m[(i, j)] };
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat() -> NeoHookean {
        NeoHookean::from_engineering(1000.0, 0.3, 1.0).unwrap()
    }

    /// Symmetric unit perturbation for a symmetric-pair component, scaled so
    /// that the engineering strain component moves by one.
    fn unit(a: usize) -> Matrix3<f64> {
        let (i, j) = VOIGT_PAIRS[a];
        let mut m = Matrix3::zeros();
        if i == j {
            m[(i, i)] = 1.0;
        } else {
            m[(i, j)] = 0.5;
            m[(j, i)] = 0.5;
        }
        m
    }

    fn fd_stress(m: &NeoHookean, c: &Matrix3<f64>) -> [f64; 6] {
        let h = 1e-6;
        let mut out = [0.0; 6];
        for (a, o) in out.iter_mut().enumerate() {
            let dc = unit(a) * (2.0 * h);
            let p = m.strain_energy(&(c + dc)).unwrap();
            let q = m.strain_energy(&(c - dc)).unwrap();
            *o = (p - q) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    fn spd_with_spectrum(r: Matrix3<f64>, eig: [f64; 3]) -> Matrix3<f64> {
        let q = r.qr().q();
        q * Matrix3::from_diagonal(&nalgebra::Vector3::from(eig)) * q.transpose()
    }

    #[test]
    fn lame_conversion() {
        let (mu, l) = lame_from_engineering(1000.0, 0.3).unwrap();
        assert!((mu - 384.6153846).abs() < 1e-6);
        assert!((l - 576.9230769).abs() < 1e-6);
        let (mu, l) = lame_from_engineering(10.0, 0.0).unwrap();
        assert_eq!((mu, l), (5.0, 0.0));
        let (mu, _) = lame_from_engineering(500.0, 0.3).unwrap();
        assert!((mu - 192.3076923).abs() < 1e-6);
        assert_eq!(lame_from_engineering(1.0, 0.5), Err(MaterialError::Incompressible(0.5)));
        let (e, nu) = mat().engineering();
        assert!((e - 1000.0).abs() < 1e-9 && (nu - 0.3).abs() < 1e-12);
    }

    #[test]
    fn reference_and_rotation_are_stress_free() {
        let m = mat();
        let (s, psi) = m.pk2_stress(&Matrix3::identity()).unwrap();
        assert!(s.norm() < 1e-14 && psi.abs() < 1e-14);
        let r = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0).into_inner();
        let st = m.state(r).unwrap();
        assert!(st.s.norm() < 1e-11);
        assert!((st.j - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniaxial_stretch_matches_energy_derivative() {
        let m = mat();
        let f = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.1, 1.0, 1.0));
        let c = f.transpose() * f;
        let (s, _) = m.pk2_stress(&c).unwrap();
        assert!(rel_err(&voigt_of(&s, 1.0), &fd_stress(&m, &c)) < 1e-6);
    }

    #[test]
    fn invalid_state_rejected() {
        let m = mat();
        let c = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, -1.0, 1.0));
        assert!(matches!(m.pk2_stress(&c), Err(MaterialError::InvalidState(_))));
        assert!(NeoHookean::new(-1.0, 1.0, 1.0).is_err());
        assert!(NeoHookean::new(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn tangent_at_reference_is_linear_elasticity() {
        let m = mat();
        let d = m.material_tangent(&Matrix3::identity()).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                let mut e = 0.0;
                if a < 3 && b < 3 {
                    e += m.lambda_lame;
                }
                if a == b {
                    e += if a < 3 { 2.0 * m.mu } else { m.mu };
                }
                assert!((d[(a, b)] - e).abs() < 1e-10, "({a},{b})");
            }
        }
    }

    fn check_tangent(m: &NeoHookean, c: &Matrix3<f64>) {
        let d = m.material_tangent(c).unwrap();
        assert!((d - d.transpose()).norm() <= 1e-12 * d.norm());
        let h = 1e-6;
        for b in 0..6 {
            let dc = unit(b) * (2.0 * h);
            let (sp, _) = m.pk2_stress(&(c + dc)).unwrap();
            let (sm, _) = m.pk2_stress(&(c - dc)).unwrap();
            let fd: Vec<f64> = voigt_of(&((sp - sm) / (2.0 * h)), 1.0).to_vec();
            let col: Vec<f64> = (0..6).map(|a| d[(a, b)]).collect();
            assert!(rel_err(&col, &fd) < 1e-6, "column {b}");
        }
    }

    #[test]
    fn tangent_near_reference() {
        let c = Matrix3::new(1.02, 0.01, -0.015, 0.01, 0.97, 0.005, -0.015, 0.005, 1.04);
        check_tangent(&mat(), &c);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn hyperelastic_consistency(
            r in prop::array::uniform9(-1.0f64..1.0),
            eig in prop::array::uniform3(0.5f64..2.0),
        ) {
            let rm = Matrix3::from_row_slice(&r) + Matrix3::identity() * 3.0;
            let c = spd_with_spectrum(rm, eig);
            let m = mat();
            let (s, _) = m.pk2_stress(&c).unwrap();
            prop_assert!(rel_err(&voigt_of(&s, 1.0), &fd_stress(&m, &c)) < 1e-6);
            check_tangent(&m, &c);
        }

        #[test]
        fn energy_nonnegative_near_reference(
            r in prop::array::uniform9(-1.0f64..1.0),
            eig in prop::array::uniform3(0.9f64..1.1),
        ) {
            let rm = Matrix3::from_row_slice(&r) + Matrix3::identity() * 3.0;
            let c = spd_with_spectrum(rm, eig);
            prop_assert!(mat().strain_energy(&c).unwrap() >= -1e-14);
        }
    }
}
