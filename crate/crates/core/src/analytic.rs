//! Analytic velocity fields with closed-form solutions and known Lipschitz
//! constants. These are the oracles the solver is tested against.

use alloc::format;
use alloc::vec::Vec;

use crate::attention::AttentionHook;
use crate::latent::LatentState;
use crate::velocity::{PromptEmbedding, VelocityError, VelocityField};

/// Closed-form fields, applied elementwise over any latent shape.
#[derive(Clone, Debug, PartialEq)]
pub enum AnalyticField {
    /// v = c, solution z0 + c t.
    Constant { value: f64 },
    /// v = lambda z, solution z0 e^{lambda t}.
    LinearScalar { lambda: f64 },
    /// v = sum_k p_k t^k (z-independent), solution z0 + sum_k p_k t^{k+1}/(k+1).
    TimePoly { coeffs: Vec<f64> },
    /// v = z (1 - z), logistic growth; well posed for z0 in (0, 1).
    Logistic,
    /// Marginal rectified-flow field carrying N(mu0, sigma0^2) at t = 0 to
    /// N(0, 1) at t = 1 along the linear interpolation path.
    GaussToGauss { mu0: f64, sigma0: f64 },
}

impl AnalyticField {
    pub fn constant(value: f64) -> Result<Self, VelocityError> {
        if !value.is_finite() {
            return Err(VelocityError::BadParams { message: format!("constant value {value}") });
        }
        Ok(AnalyticField::Constant { value })
    }

    pub fn linear_scalar(lambda: f64) -> Result<Self, VelocityError> {
        if !lambda.is_finite() {
            return Err(VelocityError::BadParams { message: format!("lambda {lambda}") });
        }
        Ok(AnalyticField::LinearScalar { lambda })
    }

    pub fn time_poly(coeffs: Vec<f64>) -> Result<Self, VelocityError> {
        if coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(VelocityError::BadParams {
                message: "time_poly needs at least one finite coefficient".into(),
            });
        }
        Ok(AnalyticField::TimePoly { coeffs })
    }

    pub fn logistic() -> Self {
        AnalyticField::Logistic
    }

    pub fn gauss_to_gauss(mu0: f64, sigma0: f64) -> Result<Self, VelocityError> {
        if !(sigma0.is_finite() && sigma0 > 0.0 && mu0.is_finite()) {
            return Err(VelocityError::BadParams {
                message: format!("gauss_to_gauss needs sigma0 > 0, got mu0 {mu0} sigma0 {sigma0}"),
            });
        }
        Ok(AnalyticField::GaussToGauss { mu0, sigma0 })
    }
}

/// Marginal standard deviation of the interpolation path at time t.
fn gauss_sigma(sigma0: f64, t: f64) -> f64 {
    libm::sqrt(t * t + (1.0 - t) * (1.0 - t) * sigma0 * sigma0)
}

/// d(sigma)/dt at time t.
fn gauss_sigma_dot(sigma0: f64, t: f64) -> f64 {
    (t - (1.0 - t) * sigma0 * sigma0) / gauss_sigma(sigma0, t)
}

impl AnalyticField {
    fn eval_one(&self, z: f64, t: f64) -> f64 {
        match self {
            AnalyticField::Constant { value } => *value,
            AnalyticField::LinearScalar { lambda } => lambda * z,
            AnalyticField::TimePoly { coeffs } => {
                // Horner over t.
                coeffs.iter().rev().fold(0.0, |acc, &p| acc * t + p)
            }
            AnalyticField::Logistic => z * (1.0 - z),
            AnalyticField::GaussToGauss { mu0, sigma0 } => {
                let s = gauss_sigma(*sigma0, t);
                let sd = gauss_sigma_dot(*sigma0, t);
                let mean = (1.0 - t) * mu0;
                -mu0 + (sd / s) * (z - mean)
            }
        }
    }

    fn exact_one(&self, z0: f64, t: f64) -> f64 {
        match self {
            AnalyticField::Constant { value } => z0 + value * t,
            AnalyticField::LinearScalar { lambda } => z0 * libm::exp(lambda * t),
            AnalyticField::TimePoly { coeffs } => {
                let mut acc = z0;
                let mut tk = t;
                for (k, &p) in coeffs.iter().enumerate() {
                    tk *= if k == 0 { 1.0 } else { t };
                    acc += p * tk / (k as f64 + 1.0);
                }
                acc
            }
            AnalyticField::Logistic => {
                let et = libm::exp(t);
                z0 * et / (1.0 + z0 * (et - 1.0))
            }
            AnalyticField::GaussToGauss { mu0, sigma0 } => {
                (1.0 - t) * mu0 + gauss_sigma(*sigma0, t) / sigma0 * (z0 - mu0)
            }
        }
    }
}

impl VelocityField for AnalyticField {
    fn eval(
        &self,
        z: &LatentState,
        t: f64,
        _condition: Option<&PromptEmbedding>,
        _guidance: f64,
        _hook: Option<&mut dyn AttentionHook>,
    ) -> Result<LatentState, VelocityError> {
        Ok(LatentState::from_fn(z.shape(), |i| self.eval_one(z.data()[i], t)))
    }

    fn lipschitz(&self) -> Option<f64> {
        Some(match self {
            AnalyticField::Constant { .. } | AnalyticField::TimePoly { .. } => 0.0,
            AnalyticField::LinearScalar { lambda } => libm::fabs(*lambda),
            // |d/dz z(1-z)| = |1 - 2z| <= 1 on z in [0, 1].
            AnalyticField::Logistic => 1.0,
            AnalyticField::GaussToGauss { sigma0, .. } => {
                // max_t |sigma'(t)/sigma(t)| over the extended stage range.
                let mut best: f64 = 0.0;
                let lo = -0.1;
                let hi = 1.1;
                let n = 24_000;
                for i in 0..=n {
                    let t = lo + (hi - lo) * i as f64 / n as f64;
                    let v = libm::fabs(gauss_sigma_dot(*sigma0, t) / gauss_sigma(*sigma0, t));
                    if v > best {
                        best = v;
                    }
                }
                best
            }
        })
    }

    fn exact_solution(&self, z0: &LatentState, t: f64) -> Option<LatentState> {
        Some(LatentState::from_fn(z0.shape(), |i| self.exact_one(z0.data()[i], t)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::Shape;
    use crate::rng::SeededRng;
    use approx::assert_relative_eq;

    fn eval_scalar(f: &AnalyticField, z: f64, t: f64) -> f64 {
        f.eval(&LatentState::scalar(z), t, None, 1.0, None).unwrap().data()[0]
    }

    #[test]
    fn constant_ignores_state_and_time() {
        let f = AnalyticField::constant(2.0).unwrap();
        assert_eq!(eval_scalar(&f, -7.3, 0.3), 2.0);
        assert_eq!(eval_scalar(&f, 100.0, 0.9), 2.0);
        assert_eq!(f.lipschitz(), Some(0.0));
    }

    #[test]
    fn linear_exact_solution_is_exponential() {
        let f = AnalyticField::linear_scalar(1.0).unwrap();
        let z = f.exact_solution(&LatentState::scalar(1.0), 0.5).unwrap();
        assert_relative_eq!(z.data()[0], libm::exp(0.5), epsilon = 1e-14);
        assert_relative_eq!(z.data()[0], 1.6487, epsilon = 1e-4);
    }

    #[test]
    fn time_poly_antiderivative() {
        // v(t) = 1 + 2t + 3t^2 -> z(t) = z0 + t + t^2 + t^3
        let f = AnalyticField::time_poly(alloc::vec![1.0, 2.0, 3.0]).unwrap();
        assert_relative_eq!(eval_scalar(&f, 0.0, 0.5), 1.0 + 1.0 + 0.75, epsilon = 1e-15);
        let z = f.exact_solution(&LatentState::scalar(2.0), 0.5).unwrap();
        assert_relative_eq!(z.data()[0], 2.0 + 0.5 + 0.25 + 0.125, epsilon = 1e-15);
    }

    #[test]
    fn logistic_closed_form_satisfies_ode() {
        let f = AnalyticField::logistic();
        let z0 = LatentState::scalar(0.3);
        // finite-difference check of dz/dt = z(1-z) along the closed form
        let h = 1e-6;
        for &t in &[0.1, 0.5, 0.9] {
            let z = f.exact_solution(&z0, t).unwrap().data()[0];
            let zp = f.exact_solution(&z0, t + h).unwrap().data()[0];
            let deriv = (zp - z) / h;
            assert_relative_eq!(deriv, z * (1.0 - z), epsilon = 1e-5);
        }
    }

    #[test]
    fn gauss_field_params_validated() {
        assert!(AnalyticField::gauss_to_gauss(0.0, 0.0).is_err());
        assert!(AnalyticField::gauss_to_gauss(0.0, -1.0).is_err());
        assert!(AnalyticField::gauss_to_gauss(1.5, 0.5).is_ok());
    }

    #[test]
    fn gauss_exact_solution_solves_its_own_ode() {
        let f = AnalyticField::gauss_to_gauss(0.7, 1.3).unwrap();
        let z0 = LatentState::scalar(1.9);
        let h = 1e-6;
        for &t in &[0.05, 0.3, 0.6, 0.95] {
            let z = f.exact_solution(&z0, t).unwrap();
            let zp = f.exact_solution(&z0, t + h).unwrap();
            let deriv = (zp.data()[0] - z.data()[0]) / h;
            let v = f.eval(&z, t, None, 1.0, None).unwrap().data()[0];
            assert_relative_eq!(deriv, v, epsilon = 1e-5);
        }
    }

    #[test]
    fn gauss_endpoints_map_data_to_noise() {
        // z(1) = (z0 - mu0) / sigma0: a N(mu0, sigma0^2) sample becomes N(0,1).
        let f = AnalyticField::gauss_to_gauss(2.0, 0.5).unwrap();
        let z1 = f.exact_solution(&LatentState::scalar(2.75), 1.0).unwrap();
        assert_relative_eq!(z1.data()[0], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn gauss_standard_case_lipschitz_is_one() {
        let f = AnalyticField::gauss_to_gauss(0.0, 1.0).unwrap();
        let l = f.lipschitz().unwrap();
        assert!((l - 1.0).abs() < 1e-3, "L = {l}");
    }

    // Monte-Carlo oracle: the field must match a linear regression of
    // (Z1 - Z0) on Z_t over draws of the interpolation path Z_t = t Z1 + (1-t) Z0.
    #[test]
    fn gauss_field_matches_monte_carlo_regression() {
        let mu0 = 0.0;
        let sigma0 = 1.0;
        let f = AnalyticField::gauss_to_gauss(mu0, sigma0).unwrap();
        let t = 0.5;
        let mut rng = SeededRng::new(2024);
        let n = 1_000_000usize;
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let z0 = mu0 + sigma0 * rng.next_normal();
            let z1 = rng.next_normal();
            let zt = t * z1 + (1.0 - t) * z0;
            let y = z1 - z0;
            sx += zt;
            sy += y;
            sxx += zt * zt;
            sxy += zt * y;
        }
        let nf = n as f64;
        let beta = (sxy - sx * sy / nf) / (sxx - sx * sx / nf);
        let alpha = (sy - beta * sx) / nf;
        for &z in &[-1.0, 0.0, 0.7, 1.5] {
            let v = eval_scalar(&f, z, t);
            let mc = alpha + beta * z;
            assert!((v - mc).abs() < 2e-2, "z {z}: field {v} vs regression {mc}");
        }
    }

    #[test]
    fn fields_are_elementwise_over_shapes() {
        let f = AnalyticField::linear_scalar(-2.0).unwrap();
        let z = LatentState::new(alloc::vec![1.0, -1.0, 0.5, 2.0], Shape::new(1, 2, 2)).unwrap();
        let v = f.eval(&z, 0.3, None, 1.0, None).unwrap();
        assert_eq!(v.shape(), z.shape());
        assert_eq!(v.data(), &[-2.0, 2.0, -1.0, -4.0]);
    }
}
