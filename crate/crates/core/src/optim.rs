//! Small deterministic optimizers: Brent's scalar minimizer, bisection, and a
//! box-constrained BFGS driven by central-difference gradients.

use nalgebra::{DMatrix, DVector};

const GOLDEN: f64 = 0.381_966_011_250_105_1;

/// Brent's method (golden section with parabolic interpolation) on `[a, b]`.
/// Returns `(argmin, min)`.
pub fn brent_minimize<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> (f64, f64) {
    let (mut a, mut b) = (a.min(b), a.max(b));
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..500 {
        let xm = 0.5 * (a + b);
        let tol1 = 1e-12 * x.abs() + tol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Bisection for a sign change of `f` on `[a, b]`. Returns `None` when the
/// endpoints do not bracket a root.
pub fn bisect<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> Option<f64> {
    let mut fa = f(a);
    let fb = f(b);
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa.signum() == fb.signum() || fa.is_nan() || fb.is_nan() {
        return None;
    }
    for _ in 0..400 {
        let m = 0.5 * (a + b);
        if (b - a).abs() <= tol * (1.0 + m.abs()) {
            return Some(m);
        }
        let fm = f(m);
        if fm == 0.0 {
            return Some(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Some(0.5 * (a + b))
}

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Convergence when the projected gradient's infinity norm drops below this.
    pub grad_tol: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BfgsOptions {
    pub fn unbounded(n: usize) -> Self {
        BfgsOptions {
            max_iter: 500,
            grad_tol: 1e-6,
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn clamp_into(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Central-difference gradient with step `1e-5 * (1 + |x_i|)`, switching to a
/// one-sided difference at an active bound.
pub fn numeric_gradient<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x: &[f64],
    lower: &[f64],
    upper: &[f64],
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xt = x.to_vec();
    let f0 = sanitize(f(x));
    for i in 0..x.len() {
        let h = 1e-5 * (1.0 + x[i].abs());
        let up = x[i] + h <= upper[i];
        let down = x[i] - h >= lower[i];
        g[i] = if up && down {
            xt[i] = x[i] + h;
            let fp = sanitize(f(&xt));
            xt[i] = x[i] - h;
            let fm = sanitize(f(&xt));
            (fp - fm) / (2.0 * h)
        } else if up {
            xt[i] = x[i] + h;
            (sanitize(f(&xt)) - f0) / h
        } else {
            xt[i] = x[i] - h;
            (f0 - sanitize(f(&xt))) / h
        };
        xt[i] = x[i];
    }
    g
}

fn projected_grad_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut n: f64 = 0.0;
    for i in 0..x.len() {
        let at_lo = x[i] <= lo[i] && g[i] > 0.0;
        let at_hi = x[i] >= hi[i] && g[i] < 0.0;
        if !(at_lo || at_hi) {
            n = n.max(g[i].abs());
        }
    }
    n
}

/// Box-constrained BFGS minimization with numeric gradients.
pub fn bfgs<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Minimum {
    let n = x0.len();
    let (lo, hi) = (&opts.lower, &opts.upper);
    let mut x = x0.to_vec();
    clamp_into(&mut x, lo, hi);
    let mut fx = sanitize(f(&x));
    let mut g = numeric_gradient(&mut f, &x, lo, hi);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut stalls = 0;
    for iter in 0..opts.max_iter {
        let gnorm = projected_grad_norm(&x, &g, lo, hi);
        if gnorm < opts.grad_tol {
            return Minimum {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations: iter,
                converged: true,
            };
        }
        let gv = DVector::from_column_slice(&g);
        let mut dir = -(&h_inv * &gv);
        // coordinates pinned at a bound with the gradient pushing outward stay put
        for i in 0..n {
            if (x[i] <= lo[i] && dir[i] < 0.0) || (x[i] >= hi[i] && dir[i] > 0.0) {
                dir[i] = 0.0;
            }
        }
        let mut slope = gv.dot(&dir);
        if slope >= 0.0 || !slope.is_finite() {
            h_inv = DMatrix::identity(n, n);
            dir = -gv.clone();
            for i in 0..n {
                if (x[i] <= lo[i] && dir[i] < 0.0) || (x[i] >= hi[i] && dir[i] > 0.0) {
                    dir[i] = 0.0;
                }
            }
            slope = gv.dot(&dir);
            if slope >= 0.0 {
                return Minimum {
                    x,
                    value: fx,
                    grad_norm: gnorm,
                    iterations: iter,
                    converged: gnorm < opts.grad_tol,
                };
            }
        }
        // backtracking line search (Armijo)
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut xn: Vec<f64> = x
                .iter()
                .zip(dir.iter())
                .map(|(a, d)| a + step * d)
                .collect();
            clamp_into(&mut xn, lo, hi);
            let fnew = sanitize(f(&xn));
            let actual: f64 = xn
                .iter()
                .zip(&x)
                .zip(&g)
                .map(|((a, b), gi)| (a - b) * gi)
                .sum();
            if fnew <= fx + 1e-4 * actual.min(0.0) && fnew.is_finite() {
                accepted = Some((xn, fnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            // no descent possible along the quasi-Newton direction; reset once
            if stalls > 0 {
                return Minimum {
                    x,
                    value: fx,
                    grad_norm: gnorm,
                    iterations: iter,
                    converged: gnorm < opts.grad_tol,
                };
            }
            stalls += 1;
            h_inv = DMatrix::identity(n, n);
            continue;
        };
        stalls = 0;
        let gn = numeric_gradient(&mut f, &xn, lo, hi);
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let yv = DVector::from_iterator(n, gn.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&yv);
        let df = (fx - fnew).abs();
        x = xn;
        fx = fnew;
        g = gn;
        if sy > 1e-12 * s.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - rho * &s * yv.transpose();
            let b = &i - rho * &yv * s.transpose();
            h_inv = &a * &h_inv * &b + rho * &s * s.transpose();
        }
        if df <= 1e-15 * (1.0 + fx.abs()) && s.amax() <= 1e-12 {
            let gnorm = projected_grad_norm(&x, &g, lo, hi);
            return Minimum {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations: iter + 1,
                converged: gnorm < opts.grad_tol,
            };
        }
    }
    let gnorm = projected_grad_norm(&x, &g, lo, hi);
    Minimum {
        x,
        value: fx,
        grad_norm: gnorm,
        iterations: opts.max_iter,
        converged: gnorm < opts.grad_tol,
    }
}

/// Central-difference Hessian.
pub fn numeric_hessian<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let steps: Vec<f64> = x.iter().map(|v| 1e-4 * (1.0 + v.abs())).collect();
    let f0 = f(x);
    let mut xt = x.to_vec();
    for i in 0..n {
        for j in i..n {
            let v = if i == j {
                xt[i] = x[i] + steps[i];
                let fp = f(&xt);
                xt[i] = x[i] - steps[i];
                let fm = f(&xt);
                xt[i] = x[i];
                (fp - 2.0 * f0 + fm) / (steps[i] * steps[i])
            } else {
                let mut eval = |si: f64, sj: f64| {
                    xt[i] = x[i] + si * steps[i];
                    xt[j] = x[j] + sj * steps[j];
                    let r = f(&xt);
                    xt[i] = x[i];
                    xt[j] = x[j];
                    r
                };
                (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                    / (4.0 * steps[i] * steps[j])
            };
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}
