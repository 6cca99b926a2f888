//! Bivariate copulas: Frank, Farlie-Gumbel-Morgenstern, Gaussian and the
//! independence (product) copula.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::normal::{bivariate_normal_cdf, bivariate_normal_pdf, norm_cdf, norm_quantile};

/// Below this |theta| the Frank copula is evaluated by its second-order
/// expansion around independence.
pub const FRANK_SERIES_CUTOFF: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CopulaError {
    #[error("dependence parameter {theta} outside the valid range for the {family} copula")]
    ThetaRange { family: FamilyKind, theta: f64 },
    #[error("invalid probability argument {0}")]
    InvalidProbability(f64),
    #[error("correlation {0} outside (-1, 1)")]
    RhoRange(f64),
    #[error("unknown copula family '{0}'")]
    UnknownFamily(String),
}

/// Copula family tag without a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Frank,
    Fgm,
    Gaussian,
    Product,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 4] = [
        FamilyKind::Frank,
        FamilyKind::Fgm,
        FamilyKind::Gaussian,
        FamilyKind::Product,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Frank => "frank",
            FamilyKind::Fgm => "fgm",
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Product => "product",
        }
    }

    pub fn has_parameter(self) -> bool {
        self != FamilyKind::Product
    }

    /// Closed/open admissible range for theta, as (low, high, inclusive).
    pub fn theta_range(self) -> Option<(f64, f64, bool)> {
        match self {
            FamilyKind::Frank => Some((f64::NEG_INFINITY, f64::INFINITY, false)),
            FamilyKind::Fgm => Some((-1.0, 1.0, true)),
            FamilyKind::Gaussian => Some((-1.0, 1.0, false)),
            FamilyKind::Product => None,
        }
    }

    pub fn with_theta(self, theta: f64) -> Result<Copula, CopulaError> {
        Copula::new(self, theta)
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FamilyKind {
    type Err = CopulaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "frank" => Ok(FamilyKind::Frank),
            "fgm" => Ok(FamilyKind::Fgm),
            "gaussian" | "normal" => Ok(FamilyKind::Gaussian),
            "product" | "independence" => Ok(FamilyKind::Product),
            other => Err(CopulaError::UnknownFamily(other.to_string())),
        }
    }
}

/// A copula family together with a validated dependence parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Copula {
    family: FamilyKind,
    theta: f64,
}

/// `C(u, v)` together with its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CopulaEval {
    pub value: f64,
    pub du: f64,
    pub dv: f64,
    pub dtheta: f64,
}

impl Copula {
    /// Validates `theta` against the family's range. Product ignores theta.
    pub fn new(family: FamilyKind, theta: f64) -> Result<Self, CopulaError> {
        let ok = match family {
            FamilyKind::Frank => theta.is_finite(),
            FamilyKind::Fgm => (-1.0..=1.0).contains(&theta),
            FamilyKind::Gaussian => theta > -1.0 && theta < 1.0,
            FamilyKind::Product => true,
        };
        if !ok {
            return Err(CopulaError::ThetaRange { family, theta });
        }
        let theta = if family == FamilyKind::Product { 0.0 } else { theta };
        Ok(Copula { family, theta })
    }

    pub fn product() -> Self {
        Copula {
            family: FamilyKind::Product,
            theta: 0.0,
        }
    }

    pub fn family(&self) -> FamilyKind {
        self.family
    }

    /// Dependence parameter; `None` for the product copula.
    pub fn theta(&self) -> Option<f64> {
        self.family.has_parameter().then_some(self.theta)
    }

    pub fn cdf(&self, u: f64, v: f64) -> Result<f64, CopulaError> {
        check_prob(u)?;
        check_prob(v)?;
        Ok(self.eval_unchecked(u, v).value)
    }

    /// Value and partials, with inputs already known to lie in [0, 1].
    ///
    /// On the boundary the exact identities `C(u,0)=0`, `C(u,1)=u` and their
    /// mirror images are used, so partials there are those of the boundary
    /// function.
    pub fn eval(&self, u: f64, v: f64) -> Result<CopulaEval, CopulaError> {
        check_prob(u)?;
        check_prob(v)?;
        Ok(self.eval_unchecked(u, v))
    }

    pub(crate) fn eval_unchecked(&self, u: f64, v: f64) -> CopulaEval {
        if u == 0.0 || v == 0.0 {
            return CopulaEval {
                value: 0.0,
                du: if u == 0.0 { v } else { 0.0 },
                dv: if v == 0.0 { u } else { 0.0 },
                dtheta: 0.0,
            };
        }
        if v == 1.0 {
            return CopulaEval {
                value: u,
                du: 1.0,
                dv: 0.0,
                dtheta: 0.0,
            };
        }
        if u == 1.0 {
            return CopulaEval {
                value: v,
                du: 0.0,
                dv: 1.0,
                dtheta: 0.0,
            };
        }
        let e = match self.family {
            FamilyKind::Product => CopulaEval {
                value: u * v,
                du: v,
                dv: u,
                dtheta: 0.0,
            },
            FamilyKind::Fgm => fgm(self.theta, u, v),
            FamilyKind::Frank => frank(self.theta, u, v),
            FamilyKind::Gaussian => gaussian(self.theta, u, v),
        };
        CopulaEval {
            value: e.value.clamp(0.0, u.min(v)),
            ..e
        }
    }
}

/// Convenience wrapper: `C_theta(u, v)` for a family and parameter.
pub fn copula_cdf(family: FamilyKind, theta: f64, u: f64, v: f64) -> Result<f64, CopulaError> {
    Copula::new(family, theta)?.cdf(u, v)
}

fn check_prob(p: f64) -> Result<(), CopulaError> {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        Err(CopulaError::InvalidProbability(p))
    } else {
        Ok(())
    }
}

fn fgm(theta: f64, u: f64, v: f64) -> CopulaEval {
    let (a, b) = (1.0 - u, 1.0 - v);
    CopulaEval {
        value: u * v * (1.0 + theta * a * b),
        du: v * (1.0 + theta * b * (1.0 - 2.0 * u)),
        dv: u * (1.0 + theta * a * (1.0 - 2.0 * v)),
        dtheta: u * v * a * b,
    }
}

fn frank(theta: f64, u: f64, v: f64) -> CopulaEval {
    if theta.abs() < FRANK_SERIES_CUTOFF {
        // C = uv + t/2 uv(1-u)(1-v) + t^2/12 uv(1-u)(1-2u)(1-v)(1-2v) + O(t^3)
        let (a, b) = (1.0 - u, 1.0 - v);
        let (a2, b2) = (1.0 - 2.0 * u, 1.0 - 2.0 * v);
        let t = theta;
        let first = u * v * a * b;
        let second = first * a2 * b2;
        // d/du [u(1-u)] = 1-2u ; d/du [u(1-u)(1-2u)] = 1 - 6u + 6u^2
        let gu1 = a2;
        let gu2 = 1.0 - 6.0 * u + 6.0 * u * u;
        let gv1 = b2;
        let gv2 = 1.0 - 6.0 * v + 6.0 * v * v;
        return CopulaEval {
            value: u * v + t / 2.0 * first + t * t / 12.0 * second,
            du: v + t / 2.0 * gu1 * v * b + t * t / 12.0 * gu2 * v * b * b2,
            dv: u + t / 2.0 * gv1 * u * a + t * t / 12.0 * gv2 * u * a * a2,
            dtheta: first / 2.0 + t / 6.0 * second,
        };
    }
    let a = (-theta * u).exp_m1();
    let b = (-theta * v).exp_m1();
    let d = (-theta).exp_m1();
    let denom = d + a * b;
    let log_term = (a * b / d).ln_1p();
    let value = -log_term / theta;
    let du = (-theta * u).exp() * b / denom;
    let dv = (-theta * v).exp() * a / denom;
    // dL/dtheta with L = ln(1 + ab/d)
    let a_t = -u * (-theta * u).exp();
    let b_t = -v * (-theta * v).exp();
    let d_t = -(-theta).exp();
    let dl = ((a_t * b + a * b_t) * d - a * b * d_t) / (d * denom);
    let dtheta = log_term / (theta * theta) - dl / theta;
    CopulaEval {
        value,
        du,
        dv,
        dtheta,
    }
}

fn gaussian(rho: f64, u: f64, v: f64) -> CopulaEval {
    let x = norm_quantile(u);
    let y = norm_quantile(v);
    let value = bivariate_normal_cdf(x, y, rho).expect("rho validated at construction");
    let sd = (1.0 - rho * rho).sqrt();
    CopulaEval {
        value,
        du: norm_cdf((y - rho * x) / sd),
        dv: norm_cdf((x - rho * y) / sd),
        dtheta: bivariate_normal_pdf(x, y, rho),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n: usize) -> Vec<f64> {
        (0..=n).map(|i| i as f64 / n as f64).collect()
    }

    fn families() -> Vec<Copula> {
        vec![
            Copula::new(FamilyKind::Frank, -0.738).unwrap(),
            Copula::new(FamilyKind::Frank, 7.5).unwrap(),
            Copula::new(FamilyKind::Frank, -12.0).unwrap(),
            Copula::new(FamilyKind::Fgm, 0.9).unwrap(),
            Copula::new(FamilyKind::Fgm, -1.0).unwrap(),
            Copula::new(FamilyKind::Gaussian, 0.6).unwrap(),
            Copula::new(FamilyKind::Gaussian, -0.95).unwrap(),
            Copula::product(),
        ]
    }

    #[test]
    fn boundary_conditions() {
        for c in families() {
            let tol = if c.family() == FamilyKind::Gaussian { 1e-8 } else { 1e-10 };
            for u in grid(40) {
                assert!(c.cdf(u, 0.0).unwrap().abs() <= tol);
                assert!(c.cdf(0.0, u).unwrap().abs() <= tol);
                assert!((c.cdf(u, 1.0).unwrap() - u).abs() <= tol);
                assert!((c.cdf(1.0, u).unwrap() - u).abs() <= tol);
            }
        }
    }

    #[test]
    fn frank_independence_limit() {
        let c = Copula::new(FamilyKind::Frank, 1e-8).unwrap();
        assert!((c.cdf(0.5, 0.5).unwrap() - 0.25).abs() < 1e-9);
        let c = Copula::new(FamilyKind::Frank, -1e-9).unwrap();
        assert!((c.cdf(0.5, 0.5).unwrap() - 0.25).abs() < 1e-9);
    }

    #[test]
    fn frank_series_is_continuous_at_cutoff() {
        for t in [FRANK_SERIES_CUTOFF, -FRANK_SERIES_CUTOFF] {
            let below = Copula::new(FamilyKind::Frank, t * (1.0 - 1e-9)).unwrap();
            let above = Copula::new(FamilyKind::Frank, t * (1.0 + 1e-9)).unwrap();
            for &(u, v) in &[(0.2, 0.7), (0.5, 0.5), (0.9, 0.05)] {
                let (l, r) = (below.eval(u, v).unwrap(), above.eval(u, v).unwrap());
                assert!((l.value - r.value).abs() < 1e-13);
                assert!((l.du - r.du).abs() < 1e-10);
                assert!((l.dv - r.dv).abs() < 1e-10);
                assert!((l.dtheta - r.dtheta).abs() < 1e-8, "{} {}", l.dtheta, r.dtheta);
            }
        }
    }

    #[test]
    fn partials_match_finite_differences() {
        let h = 1e-6;
        for c in families() {
            for &(u, v) in &[(0.13, 0.71), (0.5, 0.42), (0.88, 0.09), (0.3, 0.3)] {
                let e = c.eval(u, v).unwrap();
                let fu = (c.cdf(u + h, v).unwrap() - c.cdf(u - h, v).unwrap()) / (2.0 * h);
                let fv = (c.cdf(u, v + h).unwrap() - c.cdf(u, v - h).unwrap()) / (2.0 * h);
                assert!((e.du - fu).abs() < 1e-7, "{c:?} du {} vs {fu}", e.du);
                assert!((e.dv - fv).abs() < 1e-7, "{c:?} dv {} vs {fv}", e.dv);
                if let Some(t) = c.theta() {
                    let ht = 1e-6;
                    let (Ok(plus), Ok(minus)) =
                        (Copula::new(c.family(), t + ht), Copula::new(c.family(), t - ht))
                    else {
                        continue;
                    };
                    let ft = (plus.cdf(u, v).unwrap() - minus.cdf(u, v).unwrap()) / (2.0 * ht);
                    assert!((e.dtheta - ft).abs() < 1e-7, "{c:?} dtheta {} vs {ft}", e.dtheta);
                }
            }
        }
    }

    #[test]
    fn theta_range_errors() {
        assert!(matches!(
            Copula::new(FamilyKind::Fgm, 1.2),
            Err(CopulaError::ThetaRange { .. })
        ));
        assert!(Copula::new(FamilyKind::Gaussian, 1.0).is_err());
        assert!(Copula::new(FamilyKind::Frank, f64::INFINITY).is_err());
        assert!(Copula::new(FamilyKind::Fgm, -1.0).is_ok());
    }

    #[test]
    fn nan_rejected() {
        let c = Copula::new(FamilyKind::Frank, 2.0).unwrap();
        assert!(matches!(c.cdf(f64::NAN, 0.5), Err(CopulaError::InvalidProbability(_))));
        assert!(c.cdf(0.5, 1.5).is_err());
    }

    #[test]
    fn family_names_round_trip() {
        for f in FamilyKind::ALL {
            assert_eq!(f.name().parse::<FamilyKind>().unwrap(), f);
        }
        assert!("clayton".parse::<FamilyKind>().is_err());
    }

    fn family_theta() -> impl Strategy<Value = Copula> {
        prop_oneof![
            (-30.0f64..30.0).prop_map(|t| Copula::new(FamilyKind::Frank, t).unwrap()),
            (-1.0f64..=1.0).prop_map(|t| Copula::new(FamilyKind::Fgm, t).unwrap()),
            (-0.95f64..0.95).prop_map(|t| Copula::new(FamilyKind::Gaussian, t).unwrap()),
            Just(Copula::product()),
        ]
    }

    proptest! {
        #[test]
        fn symmetric_and_within_frechet_bounds(c in family_theta(), u in 0f64..=1.0, v in 0f64..=1.0) {
            let a = c.cdf(u, v).unwrap();
            prop_assert!((a - c.cdf(v, u).unwrap()).abs() < 1e-9);
            prop_assert!(a >= (u + v - 1.0).max(0.0) - 1e-9);
            prop_assert!(a <= u.min(v) + 1e-9);
        }

        #[test]
        fn rectangles_have_nonnegative_mass(
            c in family_theta(),
            u in (0f64..=1.0, 0f64..=1.0),
            v in (0f64..=1.0, 0f64..=1.0),
        ) {
            let (u1, u2) = (u.0.min(u.1), u.0.max(u.1));
            let (v1, v2) = (v.0.min(v.1), v.0.max(v.1));
            let mass = c.cdf(u2, v2).unwrap() - c.cdf(u1, v2).unwrap() - c.cdf(u2, v1).unwrap()
                + c.cdf(u1, v1).unwrap();
            prop_assert!(mass >= -1e-9, "{c:?} mass {mass}");
        }

        #[test]
        fn dependence_sign_orders_against_independence(
            c in family_theta(),
            u in 0f64..=1.0,
            v in 0f64..=1.0,
        ) {
            let gap = c.cdf(u, v).unwrap() - u * v;
            match c.theta() {
                Some(t) if t > 0.0 => prop_assert!(gap >= -1e-9, "{c:?} gap {gap}"),
                Some(t) if t < 0.0 => prop_assert!(gap <= 1e-9, "{c:?} gap {gap}"),
                _ => prop_assert!(gap.abs() <= 1e-9),
            }
        }
    }
}
