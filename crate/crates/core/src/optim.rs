//! Quasi-Newton minimization (BFGS with a strong-Wolfe line search) and the
//! small dense linear algebra needed for observed-information standard errors.

use ndarray::{Array1, Array2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Converged when the gradient max-norm drops below this.
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iterations: 500,
            grad_tol: 1e-6,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Array1<f64>,
    pub value: f64,
    pub grad: Array1<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

pub fn max_norm(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `f`, which returns the value and gradient. Points where `f` is
/// not finite are treated as infeasible and the line search retreats.
pub fn minimize<F>(mut f: F, x0: Array1<f64>, opts: &BfgsOptions) -> BfgsResult
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut evals = 1;
    let mut h = Array2::<f64>::eye(n);
    let mut first_step = true;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        if max_norm(&g) < opts.grad_tol {
            return BfgsResult {
                x,
                value: fx,
                grad: g,
                iterations,
                evaluations: evals,
                converged: true,
            };
        }
        iterations += 1;

        let mut dir = -h.dot(&g);
        let mut slope = dir.dot(&g);
        if !(slope < 0.0) {
            h = Array2::eye(n);
            first_step = true;
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        // keep the first trial step modest when the scale is unknown
        let alpha0 = if first_step {
            (1.0 / max_norm(&dir)).min(1.0)
        } else {
            1.0
        };

        let step = line_search(&mut f, &x, fx, slope, &dir, alpha0, opts, &mut evals).or_else(|| {
            // retry along steepest descent with a fresh metric
            let sd = -g.clone();
            let sd_slope = sd.dot(&g);
            let a0 = (1.0 / max_norm(&sd)).min(1.0);
            line_search(&mut f, &x, fx, sd_slope, &sd, a0, opts, &mut evals).inspect(|_| {
                h = Array2::eye(n);
                first_step = true;
            })
        });
        let Some((x_new, f_new, g_new)) = step else {
            break;
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * (s.dot(&s).sqrt() * y.dot(&y).sqrt()).max(f64::MIN_POSITIVE) {
            if first_step {
                h = Array2::eye(n) * (sy / y.dot(&y));
                first_step = false;
            }
            let rho = 1.0 / sy;
            let hy = h.dot(&y);
            let yhy = y.dot(&hy);
            // H += rho^2 (y'Hy) ss' + rho ss' - rho (Hy s' + s y'H)
            for i in 0..n {
                for j in 0..n {
                    h[[i, j]] += (rho * rho * yhy + rho) * s[i] * s[j]
                        - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }

    let converged = max_norm(&g) < opts.grad_tol;
    BfgsResult {
        x,
        value: fx,
        grad: g,
        iterations,
        evaluations: evals,
        converged,
    }
}

type Point = (Array1<f64>, f64, Array1<f64>);

/// Strong-Wolfe bracketing and zoom.
#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    f: &mut F,
    x: &Array1<f64>,
    f0: f64,
    slope0: f64,
    dir: &Array1<f64>,
    alpha0: f64,
    opts: &BfgsOptions,
    evals: &mut usize,
) -> Option<Point>
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    if !(slope0 < 0.0) {
        return None;
    }
    let mut eval = |a: f64, evals: &mut usize| {
        let xa = x + &(dir * a);
        let (fa, ga) = f(&xa);
        *evals += 1;
        let da = if fa.is_finite() { ga.dot(dir) } else { f64::NAN };
        (xa, fa, ga, da)
    };

    let mut a_prev = 0.0;
    let mut f_prev = f0;
    let mut d_prev = slope0;
    let mut a = alpha0;
    let mut best: Option<Point> = None;

    for i in 0..40 {
        let (xa, fa, ga, da) = eval(a, evals);
        if !fa.is_finite() {
            // infeasible: shrink towards the last good point
            a = a_prev + 0.1 * (a - a_prev);
            continue;
        }
        if approx_wolfe(f0, slope0, fa, da, opts) {
            return Some((xa, fa, ga));
        }
        if best.as_ref().is_none_or(|b| fa < b.1) {
            best = Some((xa.clone(), fa, ga.clone()));
        }
        if fa > f0 + opts.c1 * a * slope0 || (i > 0 && fa >= f_prev) {
            return zoom(&mut eval, f0, slope0, (a_prev, f_prev, d_prev), (a, fa, da), opts, evals)
                .or(best.filter(|b| b.1 < f0));
        }
        if da.abs() <= -opts.c2 * slope0 {
            return Some((xa, fa, ga));
        }
        if da >= 0.0 {
            return zoom(&mut eval, f0, slope0, (a, fa, da), (a_prev, f_prev, d_prev), opts, evals)
                .or(best.filter(|b| b.1 < f0));
        }
        a_prev = a;
        f_prev = fa;
        d_prev = da;
        a *= 2.0;
    }
    best.filter(|b| b.1 < f0)
}

fn zoom<E>(
    eval: &mut E,
    f0: f64,
    slope0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    opts: &BfgsOptions,
    evals: &mut usize,
) -> Option<Point>
where
    E: FnMut(f64, &mut usize) -> (Array1<f64>, f64, Array1<f64>, f64),
{
    let mut best: Option<Point> = None;
    for _ in 0..40 {
        let (a_lo, f_lo, d_lo) = lo;
        let (a_hi, f_hi, _) = hi;
        // quadratic interpolation from (a_lo, f_lo, d_lo) and (a_hi, f_hi),
        // safeguarded to the middle 80% of the bracket
        let width = a_hi - a_lo;
        let mut a = if f_hi.is_finite() {
            let denom = 2.0 * (f_hi - f_lo - d_lo * width);
            if denom > 0.0 {
                a_lo - d_lo * width * width / denom
            } else {
                a_lo + 0.5 * width
            }
        } else {
            a_lo + 0.5 * width
        };
        let (lo_b, hi_b) = if a_lo < a_hi { (a_lo, a_hi) } else { (a_hi, a_lo) };
        let margin = 0.1 * (hi_b - lo_b);
        if !(a > lo_b + margin && a < hi_b - margin) {
            a = 0.5 * (a_lo + a_hi);
        }
        if (hi_b - lo_b) < 1e-16 * a_lo.abs().max(1.0) {
            break;
        }
        let (xa, fa, ga, da) = eval(a, evals);
        if fa.is_finite() && approx_wolfe(f0, slope0, fa, da, opts) {
            return Some((xa, fa, ga));
        }
        if fa.is_finite() && best.as_ref().is_none_or(|b| fa < b.1) {
            best = Some((xa.clone(), fa, ga.clone()));
        }
        if !fa.is_finite() || fa > f0 + opts.c1 * a * slope0 || fa >= f_lo {
            hi = (a, fa, da);
        } else {
            if da.abs() <= -opts.c2 * slope0 {
                return Some((xa, fa, ga));
            }
            if da * (a_hi - a_lo) >= 0.0 {
                hi = lo;
            }
            lo = (a, fa, da);
        }
    }
    let _ = evals;
    best.filter(|b| b.1 < f0)
}

/// Wolfe conditions with the decrease test relaxed to the rounding level of
/// `f0`. Near an optimum of a large sum the exact decrease is below the noise
/// in `f`, while the directional derivative is still accurate.
fn approx_wolfe(f0: f64, slope0: f64, fa: f64, da: f64, opts: &BfgsOptions) -> bool {
    let eps = 1e-10 * f0.abs().max(1.0);
    fa <= f0 + eps && da >= opts.c2 * slope0 && da <= (2.0 * opts.c1 - 1.0) * slope0 && da.abs() <= -opts.c2 * slope0
}

/// Central-difference Jacobian of a gradient function, symmetrized.
pub fn fd_hessian<G>(mut grad: G, x: &Array1<f64>, rel_step: f64) -> Array2<f64>
where
    G: FnMut(&Array1<f64>) -> Array1<f64>,
{
    let n = x.len();
    let mut hess = Array2::zeros((n, n));
    for j in 0..n {
        let h = rel_step * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let gp = grad(&xp);
        let gm = grad(&xm);
        for i in 0..n {
            hess[[i, j]] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    let t = hess.t().to_owned();
    (hess + t) * 0.5
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Inverse of a symmetric positive definite matrix, or `None` if it is not
/// positive definite.
pub fn spd_inverse(a: &Array2<f64>) -> Option<Array2<f64>> {
    let l = cholesky(a)?;
    let n = a.nrows();
    let mut inv = Array2::zeros((n, n));
    for col in 0..n {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[[i, k]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[[k, i]] * inv[[k, col]];
            }
            inv[[i, col]] = s / l[[i, i]];
        }
    }
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rosenbrock() {
        let f = |x: &Array1<f64>| {
            let (a, b) = (1.0, 100.0);
            let v = (a - x[0]).powi(2) + b * (x[1] - x[0] * x[0]).powi(2);
            let g = array![
                -2.0 * (a - x[0]) - 4.0 * b * (x[1] - x[0] * x[0]) * x[0],
                2.0 * b * (x[1] - x[0] * x[0])
            ];
            (v, g)
        };
        let r = minimize(f, array![-1.2, 1.0], &BfgsOptions::default());
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn quadratic_with_infeasible_region() {
        // minimum at 2 but values beyond 3 are infeasible
        let f = |x: &Array1<f64>| {
            if x[0] > 3.0 {
                (f64::INFINITY, array![0.0])
            } else {
                ((x[0] - 2.0).powi(2), array![2.0 * (x[0] - 2.0)])
            }
        };
        let r = minimize(f, array![-40.0], &BfgsOptions::default());
        assert!(r.converged);
        assert!((r.x[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn hits_iteration_cap() {
        let f = |x: &Array1<f64>| {
            let v = (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
            let g = array![
                -2.0 * (1.0 - x[0]) - 400.0 * (x[1] - x[0] * x[0]) * x[0],
                200.0 * (x[1] - x[0] * x[0])
            ];
            (v, g)
        };
        let opts = BfgsOptions {
            max_iterations: 3,
            ..Default::default()
        };
        let r = minimize(f, array![-1.2, 1.0], &opts);
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
        assert!(r.value < 24.2);
    }

    #[test]
    fn spd_inverse_and_hessian() {
        let a = array![[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let inv = spd_inverse(&a).unwrap();
        let eye = a.dot(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((eye[[i, j]] - e).abs() < 1e-14);
            }
        }
        assert!(spd_inverse(&array![[1.0, 2.0], [2.0, 1.0]]).is_none());

        let h = fd_hessian(|x| a.dot(x), &array![0.3, -1.0, 2.0], 1e-5);
        for i in 0..3 {
            for j in 0..3 {
                assert!((h[[i, j]] - a[[i, j]]).abs() < 1e-9);
            }
        }
    }
}
