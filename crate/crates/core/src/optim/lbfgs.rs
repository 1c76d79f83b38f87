//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    /// Number of stored (s, y) correction pairs.
    pub history_m: usize,
    pub max_iters: usize,
    /// Stop once the gradient max-norm falls to this value.
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Step shrink factor per rejected trial.
    pub backtrack: f64,
    pub max_trials: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history_m: 10,
            max_iters: 500,
            grad_tol: 1e-6,
            c1: 1e-4,
            backtrack: 0.5,
            max_trials: 30,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history_m < 1 {
            return Err(Error::InvalidParameter("history_m must be >= 1".into()));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidParameter("grad_tol must be > 0".into()));
        }
        if !(self.c1 > 0.0 && self.c1 < 1.0) {
            return Err(Error::InvalidParameter("c1 must lie in (0, 1)".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::InvalidParameter("backtrack must lie in (0, 1)".into()));
        }
        if self.max_trials == 0 {
            return Err(Error::InvalidParameter("max_trials must be >= 1".into()));
        }
        Ok(())
    }
}

/// Snapshot handed to the per-iteration callback.
#[derive(Debug)]
pub struct IterationState<'a> {
    /// 1-based count of completed iterations.
    pub iteration: usize,
    pub value: f64,
    pub x: &'a [f64],
    pub grad_max_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    Callback,
    Stalled,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    /// Objective value at the start and after every accepted iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub stalled: bool,
    pub stop: StopReason,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

struct History {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

impl History {
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        let scale = dot(&s, &s).sqrt() * dot(&y, &y).sqrt();
        // curvature condition; skip the pair otherwise
        if sy <= 1e-12 * scale || !sy.is_finite() {
            return;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// Two-loop recursion: returns -H * g.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        for qi in q.iter_mut() {
            *qi = -*qi;
        }
        q
    }
}

/// Minimizes `objective`, which returns the value and gradient at a point.
///
/// `callback` runs after every accepted iteration and may stop the run early;
/// the returned point is then the last accepted iterate.
pub fn lbfgs_minimize<F, C>(
    mut objective: F,
    x0: &[f64],
    cfg: &LbfgsConfig,
    mut callback: C,
) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
    C: FnMut(&IterationState<'_>) -> Control,
{
    cfg.validate()?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("x0 must be finite".into()));
    }
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective(&x);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective);
    }
    let mut trace = vec![f];
    let mut history = History {
        pairs: VecDeque::with_capacity(cfg.history_m),
        capacity: cfg.history_m,
    };
    let done = |x: Vec<f64>, f, trace, iterations, stop| {
        Ok(LbfgsOutcome {
            x,
            value: f,
            trace,
            iterations,
            stalled: stop == StopReason::Stalled,
            stop,
        })
    };
    if max_norm(&g) <= cfg.grad_tol {
        return done(x, f, trace, 0, StopReason::GradientTolerance);
    }

    let mut iteration = 0;
    while iteration < cfg.max_iters {
        let mut accepted = None;
        // second attempt falls back to steepest descent with a cleared memory
        for attempt in 0..2 {
            let mut d = if history.pairs.is_empty() {
                g.iter().map(|v| -v).collect()
            } else {
                history.direction(&g)
            };
            let mut slope = dot(&g, &d);
            if !(slope < 0.0) {
                history.pairs.clear();
                d = g.iter().map(|v| -v).collect();
                slope = dot(&g, &d);
            }
            let mut step = if history.pairs.is_empty() {
                (1.0 / dot(&d, &d).sqrt()).min(1.0)
            } else {
                1.0
            };
            let mut trial = vec![0.0; x.len()];
            for _ in 0..cfg.max_trials {
                for ((t, xi), di) in trial.iter_mut().zip(&x).zip(&d) {
                    *t = xi + step * di;
                }
                let (ft, gt) = objective(&trial);
                if ft.is_nan() {
                    return Err(Error::NonFiniteObjective);
                }
                if ft.is_finite() && ft <= f + cfg.c1 * step * slope {
                    if gt.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFiniteObjective);
                    }
                    accepted = Some((trial, ft, gt));
                    break;
                }
                step *= cfg.backtrack;
            }
            if accepted.is_some() || attempt == 1 || history.pairs.is_empty() {
                break;
            }
            history.pairs.clear();
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            return done(x, f, trace, iteration, StopReason::Stalled);
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        history.push(s, y);
        x = x_new;
        f = f_new;
        g = g_new;
        trace.push(f);
        iteration += 1;

        let gnorm = max_norm(&g);
        let state = IterationState {
            iteration,
            value: f,
            x: &x,
            grad_max_norm: gnorm,
        };
        if callback(&state) == Control::Stop {
            return done(x, f, trace, iteration, StopReason::Callback);
        }
        if gnorm <= cfg.grad_tol {
            return done(x, f, trace, iteration, StopReason::GradientTolerance);
        }
    }
    done(x, f, trace, iteration, StopReason::MaxIterations)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &[f64]) -> (f64, Vec<f64>) {
        (x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect())
    }

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        (f, g)
    }

    #[test]
    fn quadratic_converges_quickly() {
        let cfg = LbfgsConfig {
            grad_tol: 1e-10,
            ..Default::default()
        };
        let out = lbfgs_minimize(sphere, &[3.0, -4.0], &cfg, |_| Control::Continue).unwrap();
        let norm = out.x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "norm {norm}");
        assert!(out.iterations <= 5, "{} iterations", out.iterations);
    }

    #[test]
    fn rosenbrock_reaches_minimum() {
        let cfg = LbfgsConfig {
            grad_tol: 1e-9,
            max_iters: 100,
            ..Default::default()
        };
        let out = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &cfg, |_| Control::Continue).unwrap();
        assert!(out.value < 1e-10, "value {}", out.value);
        assert!(out.iterations <= 100);
        // direct evaluation at the returned point
        assert!(rosenbrock(&out.x).0 < 1e-10);
    }

    #[test]
    fn start_at_minimum_takes_no_steps() {
        let out =
            lbfgs_minimize(sphere, &[0.0, 0.0], &LbfgsConfig::default(), |_| Control::Continue)
                .unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.x, vec![0.0, 0.0]);
        assert_eq!(out.stop, StopReason::GradientTolerance);
    }

    #[test]
    fn trace_is_monotone() {
        let cfg = LbfgsConfig {
            grad_tol: 1e-12,
            max_iters: 60,
            ..Default::default()
        };
        let out = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &cfg, |_| Control::Continue).unwrap();
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn callback_can_stop() {
        let cfg = LbfgsConfig::default();
        let out = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &cfg, |s| {
            if s.iteration == 3 {
                Control::Stop
            } else {
                Control::Continue
            }
        })
        .unwrap();
        assert_eq!(out.iterations, 3);
        assert_eq!(out.stop, StopReason::Callback);
        assert_eq!(out.trace.len(), 4);
    }

    #[test]
    fn nan_objective_is_an_error() {
        let r = lbfgs_minimize(
            |_x: &[f64]| (f64::NAN, vec![0.0]),
            &[1.0],
            &LbfgsConfig::default(),
            |_| Control::Continue,
        );
        assert!(matches!(r, Err(Error::NonFiniteObjective)));
    }

    #[test]
    fn inconsistent_gradient_stalls() {
        // gradient points the wrong way, so no step can decrease f
        let out = lbfgs_minimize(
            |x: &[f64]| (x[0] * x[0], vec![-2.0 * x[0]]),
            &[1.0],
            &LbfgsConfig::default(),
            |_| Control::Continue,
        )
        .unwrap();
        assert!(out.stalled);
        assert_eq!(out.x, vec![1.0]);
    }
}
