//! Univariate and bivariate standard normal distribution functions.
//!
//! The bivariate CDF follows Genz's `BVND` (Drezner & Wesolowsky with
//! double-precision modifications for |rho| close to 1). Strongly negative
//! correlations are reflected onto the positive branch, which avoids the
//! low-accuracy path of the original routine.
#![allow(clippy::excessive_precision)]

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use libm::erfc;

use crate::copula::CopulaError;

const TWO_PI: f64 = 2.0 * PI;
const SQRT_2_PI: f64 = 2.506_628_274_631_000_5;

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2_PI
}

/// Standard normal quantile.
///
/// Wichura's AS 241 (PPND16) rational approximation followed by one Newton
/// step on `norm_cdf`. Returns `-inf`/`+inf` at 0 and 1 and NaN outside [0, 1].
pub fn norm_quantile(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let x = ppnd16(p);
    if !x.is_finite() {
        return x;
    }
    // Newton polish; skipped far in the tails where the density underflows.
    let pdf = norm_pdf(x);
    if pdf > 1e-300 {
        let err = if x > 0.0 {
            // compare upper tails to keep relative precision
            (1.0 - p) - norm_cdf(-x)
        } else {
            norm_cdf(x) - p
        };
        x - err / pdf
    } else {
        x
    }
}

fn ppnd16(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.0809287301226727 * r + 33430.575583588128105) * r
                + 67265.770927008700853)
                * r
                + 45921.953931549871457)
                * r
                + 13731.693765509461125)
                * r
                + 1971.5909503065514427)
                * r
                + 133.14166789178437745)
                * r
                + 3.387132872796366608)
            / (((((((5226.495278852545925 * r + 28729.085735721942674) * r
                + 39307.89580009271061)
                * r
                + 21213.794301586595867)
                * r
                + 5394.1960214247511077)
                * r
                + 687.1870074920579083)
                * r
                + 42.313330701600911252)
                * r
                + 1.0);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
            + 0.24178072517745061177)
            * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734)
            / (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
                + 0.0151986665636164571966)
                * r
                + 0.14810397642748007459)
                * r
                + 0.68976733498510000455)
                * r
                + 1.6763848301838038494)
                * r
                + 2.05319162663775882187)
                * r
                + 1.0)
    } else {
        r -= 5.0;
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 0.0012426609473880784386)
            * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772)
            / (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
                + 1.8463183175100546818e-5)
                * r
                + 7.868691311456132591e-4)
                * r
                + 0.0148753612908506148525)
                * r
                + 0.13692988092273580531)
                * r
                + 0.59983220655588793769)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

// Gauss-Legendre weights and (negative) abscissae from tvpack, N = 6, 12, 20.
const GL6: [(f64, f64); 3] = [
    (0.1713244923791705e+00, -0.9324695142031522e+00),
    (0.3607615730481384e+00, -0.6612093864662647e+00),
    (0.4679139345726904e+00, -0.2386191860831970e+00),
];
const GL12: [(f64, f64); 6] = [
    (0.4717533638651177e-01, -0.9815606342467191e+00),
    (0.1069393259953183e+00, -0.9041172563704750e+00),
    (0.1600783285433464e+00, -0.7699026741943050e+00),
    (0.2031674267230659e+00, -0.5873179542866171e+00),
    (0.2334925365383547e+00, -0.3678314989981802e+00),
    (0.2491470458134029e+00, -0.1252334085114692e+00),
];
const GL20: [(f64, f64); 10] = [
    (0.1761400713915212e-01, -0.9931285991850949e+00),
    (0.4060142980038694e-01, -0.9639719272779138e+00),
    (0.6267204833410906e-01, -0.9122344282513259e+00),
    (0.8327674157670475e-01, -0.8391169718222188e+00),
    (0.1019301198172404e+00, -0.7463319064601508e+00),
    (0.1181945319615184e+00, -0.6360536807265150e+00),
    (0.1316886384491766e+00, -0.5108670019508271e+00),
    (0.1420961093183821e+00, -0.3737060887154196e+00),
    (0.1491729864726037e+00, -0.2277858511416451e+00),
    (0.1527533871307259e+00, -0.7652652113349733e-01),
];

/// `P(X <= x, Y <= y)` for a standard bivariate normal with correlation `rho`.
pub fn bivariate_normal_cdf(x: f64, y: f64, rho: f64) -> Result<f64, CopulaError> {
    if rho.is_nan() || rho.abs() >= 1.0 {
        return Err(CopulaError::RhoRange(rho));
    }
    if x.is_nan() || y.is_nan() {
        return Err(CopulaError::InvalidProbability(f64::NAN));
    }
    if x == f64::NEG_INFINITY || y == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    if x == f64::INFINITY {
        return Ok(norm_cdf(y));
    }
    if y == f64::INFINITY {
        return Ok(norm_cdf(x));
    }
    let p = if rho < -0.925 {
        norm_cdf(x) - upper_orthant(-x, y, -rho)
    } else {
        upper_orthant(-x, -y, rho)
    };
    Ok(p.clamp(0.0, 1.0))
}

/// Genz `BVND`: `P(X > h, Y > k)`, valid for `rho > -0.925`.
fn upper_orthant(h: f64, k: f64, r: f64) -> f64 {
    let hk = h * k;
    let ra = r.abs();
    if ra <= 0.925 {
        let mut bvn = 0.0;
        if ra > 0.0 {
            let quad: &[(f64, f64)] = if ra < 0.3 {
                &GL6
            } else if ra < 0.75 {
                &GL12
            } else {
                &GL20
            };
            let hs = (h * h + k * k) / 2.0;
            let asr = 0.5 * r.asin();
            for &(w, x) in quad {
                for is in [-1.0, 1.0] {
                    let sn = (asr * (is * x + 1.0)).sin();
                    bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
                }
            }
            bvn *= asr / TWO_PI;
        }
        return bvn + norm_cdf(-h) * norm_cdf(-k);
    }

    // 0.925 < r < 1
    let mut bvn = 0.0;
    let a_s = (1.0 - r) * (1.0 + r);
    let mut a = a_s.sqrt();
    let b_s = (h - k) * (h - k);
    let c = (4.0 - hk) / 8.0;
    let d = (12.0 - hk) / 16.0;
    let asr = -0.5 * (b_s / a_s + hk);
    if asr > -100.0 {
        bvn = a
            * asr.exp()
            * (1.0 - c * (b_s - a_s) * (1.0 - d * b_s / 5.0) / 3.0 + c * d * a_s * a_s / 5.0);
    }
    if -hk < 100.0 {
        let b = b_s.sqrt();
        bvn -= (-0.5 * hk).exp()
            * SQRT_2_PI
            * norm_cdf(-b / a)
            * b
            * (1.0 - c * b_s * (1.0 - d * b_s / 5.0) / 3.0);
    }
    a /= 2.0;
    for &(w, x) in &GL20 {
        for is in [-1.0, 1.0] {
            let xi = a * (is * x + 1.0);
            let xs = xi * xi;
            let rs = (1.0 - xs).sqrt();
            let asr = -0.5 * (b_s / xs + hk);
            if asr > -100.0 {
                bvn += a
                    * w
                    * asr.exp()
                    * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                        - (1.0 + c * xs * (1.0 + d * xs)));
            }
        }
    }
    -bvn / TWO_PI + norm_cdf(-h.max(k))
}

/// Standard bivariate normal density with correlation `rho`.
pub fn bivariate_normal_pdf(x: f64, y: f64, rho: f64) -> f64 {
    let one_m = 1.0 - rho * rho;
    let q = (x * x - 2.0 * rho * x * y + y * y) / one_m;
    (-0.5 * q).exp() / (TWO_PI * one_m.sqrt())
}
