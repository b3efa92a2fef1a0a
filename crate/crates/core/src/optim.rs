//! Unconstrained minimizers: a Nelder–Mead simplex and BFGS with a
//! strong-Wolfe line search.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NelderMeadOptions {
    pub max_iterations: usize,
    /// Stop once (f_worst − f_best) ≤ rel_tol · (|f_best| + rel_tol).
    pub rel_tol: f64,
    /// Initial simplex edge: max(step_fraction · |x0_k|, min_step).
    pub step_fraction: f64,
    pub min_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { max_iterations: 500, rel_tol: 1e-10, step_fraction: 0.1, min_step: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Converged once the gradient sup-norm is at or below this.
    pub gradient_tol: f64,
    /// When the line search can no longer decrease the objective, accept
    /// the point if the gradient sup-norm is at or below this floor.
    pub stall_gradient_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iterations: 1000, gradient_tol: 1e-8, stall_gradient_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Gradient sup-norm at `x` (NaN for derivative-free runs).
    pub gradient_norm: f64,
    pub message: String,
}

fn finite_or_inf(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Minimizes `f` with the Nelder–Mead simplex (reflection 1, expansion 2,
/// contraction ½, shrink ½). Non-finite objective values count as +∞.
pub fn nelder_mead<F>(f: F, x0: &[f64], opts: &NelderMeadOptions) -> OptimResult
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64]| {
        evals += 1;
        finite_or_inf(f(x))
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for k in 0..n {
        let mut v = x0.to_vec();
        v[k] += (opts.step_fraction * x0[k].abs()).max(opts.min_step);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v)).collect();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let best = values[0];
        let worst = values[n];
        if worst.is_finite() && worst - best <= opts.rel_tol * (best.abs() + opts.rel_tol) {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (w - c)).collect() };

        let reflected = along(-1.0);
        let f_r = eval(&reflected);
        if f_r < values[0] {
            let expanded = along(-2.0);
            let f_e = eval(&expanded);
            if f_e < f_r {
                simplex[n] = expanded;
                values[n] = f_e;
            } else {
                simplex[n] = reflected;
                values[n] = f_r;
            }
            continue;
        }
        if f_r < values[n - 1] {
            simplex[n] = reflected;
            values[n] = f_r;
            continue;
        }
        let (contracted, f_c) = if f_r < values[n] {
            let c = along(-0.5);
            let fc = eval(&c);
            (c, fc)
        } else {
            let c = along(0.5);
            let fc = eval(&c);
            (c, fc)
        };
        if f_c < values[n].min(f_r) {
            simplex[n] = contracted;
            values[n] = f_c;
            continue;
        }
        // shrink toward the best vertex
        let best_v = simplex[0].clone();
        for i in 1..=n {
            for (x, b) in simplex[i].iter_mut().zip(&best_v) {
                *x = b + 0.5 * (*x - b);
            }
            values[i] = eval(&simplex[i]);
        }
    }

    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    OptimResult {
        x: simplex[best].clone(),
        value: values[best],
        iterations,
        evaluations: evals,
        converged,
        gradient_norm: f64::NAN,
        message: if converged { "simplex stalled".into() } else { "iteration limit".into() },
    }
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

struct LineSearch {
    step: f64,
    value: f64,
    gradient: DVector<f64>,
}

/// Strong-Wolfe line search (bracketing + bisection/cubic zoom).
fn wolfe_search<G>(
    fg: &mut G,
    x: &DVector<f64>,
    f0: f64,
    g0: &DVector<f64>,
    dir: &DVector<f64>,
    initial: f64,
) -> Option<LineSearch>
where
    G: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let d0 = g0.dot(dir);
    if !(d0 < 0.0) {
        return None;
    }
    let mut eval = |a: f64| {
        let (f, g) = fg(&(x + dir * a));
        let f = finite_or_inf(f);
        let d = if f.is_finite() { g.dot(dir) } else { f64::NAN };
        (f, g, d)
    };

    let zoom = |eval: &mut dyn FnMut(f64) -> (f64, DVector<f64>, f64),
                mut lo: (f64, f64, f64),
                mut hi: (f64, f64, f64)|
     -> Option<LineSearch> {
        // tuples are (step, value, directional derivative)
        for _ in 0..60 {
            let (a_lo, f_lo, d_lo) = lo;
            let (a_hi, f_hi, d_hi) = hi;
            let width = a_hi - a_lo;
            let mut a = a_lo + 0.5 * width;
            if f_hi.is_finite() && d_hi.is_finite() {
                // cubic interpolation, kept well inside the bracket
                let d1 = d_lo + d_hi - 3.0 * (f_lo - f_hi) / (a_lo - a_hi);
                let disc = d1 * d1 - d_lo * d_hi;
                if disc >= 0.0 {
                    let d2 = width.signum() * disc.sqrt();
                    let cand = a_hi - (a_hi - a_lo) * (d_hi + d2 - d1) / (d_hi - d_lo + 2.0 * d2);
                    let (lo_b, hi_b) = if a_lo < a_hi { (a_lo, a_hi) } else { (a_hi, a_lo) };
                    let margin = 0.1 * (hi_b - lo_b);
                    if cand.is_finite() && cand > lo_b + margin && cand < hi_b - margin {
                        a = cand;
                    }
                }
            }
            let (f, g, d) = eval(a);
            if !f.is_finite() || f > f0 + C1 * a * d0 || f >= f_lo {
                hi = (a, f, d);
            } else {
                if d.abs() <= -C2 * d0 {
                    return Some(LineSearch { step: a, value: f, gradient: g });
                }
                if d * (a_hi - a_lo) >= 0.0 {
                    hi = lo;
                }
                lo = (a, f, d);
            }
            if (hi.0 - lo.0).abs() < 1e-16 * lo.0.abs().max(1e-16) {
                break;
            }
        }
        // accept the best sufficient-decrease point found, if any
        if lo.0 > 0.0 {
            let (f, g, _) = eval(lo.0);
            return Some(LineSearch { step: lo.0, value: f, gradient: g });
        }
        None
    };

    let mut prev = (0.0, f0, d0);
    let mut a = initial;
    for i in 0..40 {
        let (f, g, d) = eval(a);
        if !f.is_finite() || f > f0 + C1 * a * d0 || (i > 0 && f >= prev.1) {
            return zoom(&mut eval, prev, (a, f, d));
        }
        if d.abs() <= -C2 * d0 {
            return Some(LineSearch { step: a, value: f, gradient: g });
        }
        if d >= 0.0 {
            return zoom(&mut eval, (a, f, d), prev);
        }
        prev = (a, f, d);
        a *= 2.0;
    }
    None
}

/// Minimizes a function given jointly with its gradient by BFGS.
pub fn bfgs<G>(mut fg: G, x0: &[f64], opts: &BfgsOptions) -> OptimResult
where
    G: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut counted = |x: &DVector<f64>| {
        evals += 1;
        fg(x)
    };
    let mut x = DVector::from_column_slice(x0);
    let (mut f, mut g) = counted(&x);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut iterations = 0;
    let mut message = String::from("iteration limit");
    let mut converged = false;

    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return OptimResult {
            x: x0.to_vec(),
            value: f,
            iterations: 0,
            evaluations: evals,
            converged: false,
            gradient_norm: f64::NAN,
            message: "non-finite objective at start".into(),
        };
    }

    while iterations < opts.max_iterations {
        let gnorm = sup_norm(&g);
        if gnorm <= opts.gradient_tol {
            converged = true;
            message = "gradient tolerance reached".into();
            break;
        }
        iterations += 1;
        let mut dir = -(&h_inv * &g);
        if !(dir.dot(&g) < 0.0) {
            h_inv = DMatrix::identity(n, n);
            first = true;
            dir = -g.clone();
        }
        let initial = if first { (1.0 / sup_norm(&dir)).min(1.0) } else { 1.0 };
        let Some(ls) = wolfe_search(&mut counted, &x, f, &g, &dir, initial) else {
            if gnorm <= opts.stall_gradient_tol {
                converged = true;
                message = format!("line search stalled at gradient {gnorm:.3e}");
            } else {
                message = format!("line search failed at gradient {gnorm:.3e}");
            }
            break;
        };
        let s = &dir * ls.step;
        let y = &ls.gradient - &g;
        let sy = s.dot(&y);
        let improved = ls.value < f;
        x += &s;
        f = ls.value;
        g = ls.gradient;
        if sy > 1e-14 * s.norm() * y.norm() {
            if first {
                h_inv *= sy / y.dot(&y);
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            h_inv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        if !improved && sup_norm(&g) > opts.gradient_tol {
            let gn = sup_norm(&g);
            if gn <= opts.stall_gradient_tol {
                converged = true;
                message = format!("objective stalled at gradient {gn:.3e}");
            } else {
                message = format!("objective stalled at gradient {gn:.3e}");
            }
            break;
        }
    }

    OptimResult {
        x: x.iter().copied().collect(),
        value: f,
        iterations,
        evaluations: evals,
        converged,
        gradient_norm: sup_norm(&g),
        message,
    }
}
