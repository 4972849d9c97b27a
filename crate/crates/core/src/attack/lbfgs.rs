//! Limited-memory BFGS with the two-loop recursion and a backtracking Armijo
//! line search.
//!
//! The optimizer keeps its curvature history between calls to
//! [`Lbfgs::step`], so an outer loop can call it once per attack iteration
//! with a bounded number of inner iterations each time.

use std::collections::VecDeque;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsConfig {
    /// Initial trial step of every line search.
    pub lr: f64,
    /// Number of curvature pairs kept; 0 gives steepest descent.
    pub history: usize,
    /// Inner iterations per call to [`Lbfgs::step`].
    pub max_iter: usize,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
    /// Halvings tried before a line search is declared exhausted.
    pub max_backtracks: usize,
    /// Stop when the gradient's max-norm falls to this value.
    pub tolerance_grad: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            history: 100,
            max_iter: 20,
            armijo: 1e-4,
            max_backtracks: 20,
            tolerance_grad: 0.0,
        }
    }
}

/// How a call to [`Lbfgs::step`] ended.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Objective value at the returned point.
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// Line searches that found no acceptable step.
    pub stalls: usize,
    /// Progress is impossible from the returned point: either the gradient
    /// vanished or even a steepest-descent search failed.
    pub stuck: bool,
}

#[derive(Clone, Debug)]
pub struct Lbfgs {
    config: LbfgsConfig,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Lbfgs {
    pub fn new(config: LbfgsConfig) -> Self {
        Self {
            config,
            pairs: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &LbfgsConfig {
        &self.config
    }

    pub fn history_len(&self) -> usize {
        self.pairs.len()
    }

    pub fn reset(&mut self) {
        self.pairs.clear();
    }

    /// Search direction `-H g` from the stored curvature pairs.
    fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = grad.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let scale = match self.pairs.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            // Without curvature information the first step is bounded by the
            // gradient's l1 norm.
            None => (1.0 / grad.iter().map(|v| v.abs()).sum::<f64>()).min(1.0),
        };
        q.iter_mut().for_each(|v| *v *= scale);
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    /// Run up to `max_iter` iterations from `x`, updating it in place.
    ///
    /// `objective` returns the value and gradient at a point. An error at a
    /// line-search trial point is treated as an infinite value; an error at
    /// the starting point is returned.
    pub fn step<F>(&mut self, x: &mut Vec<f64>, mut objective: F) -> Result<StepOutcome>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let (mut f, mut g) = objective(x)?;
        let mut out = StepOutcome {
            value: f,
            iterations: 0,
            evaluations: 1,
            stalls: 0,
            stuck: false,
        };
        let mut trial = vec![0.0; x.len()];
        while out.iterations < self.config.max_iter {
            let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gmax <= self.config.tolerance_grad {
                out.stuck = true;
                break;
            }
            let mut d = self.direction(&g);
            let mut gtd = dot(&g, &d);
            if !(gtd < 0.0) {
                self.reset();
                d = self.direction(&g);
                gtd = dot(&g, &d);
            }

            let mut t = self.config.lr;
            let mut accepted = None;
            for _ in 0..=self.config.max_backtracks {
                for ((ti, xi), di) in trial.iter_mut().zip(x.iter()).zip(&d) {
                    *ti = xi + t * di;
                }
                out.evaluations += 1;
                if let Ok((fv, gv)) = objective(&trial) {
                    if fv.is_finite() && fv <= f + self.config.armijo * t * gtd {
                        accepted = Some((fv, gv));
                        break;
                    }
                }
                t *= 0.5;
            }

            let Some((f_new, g_new)) = accepted else {
                out.stalls += 1;
                if self.pairs.is_empty() {
                    out.stuck = true;
                    break;
                }
                // Retry from the same point along steepest descent.
                self.reset();
                continue;
            };

            let s: Vec<f64> = trial.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if self.config.history > 0 && sy > f64::EPSILON * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                if self.pairs.len() == self.config.history {
                    self.pairs.pop_front();
                }
                self.pairs.push_back((s, y, 1.0 / sy));
            }
            x.copy_from_slice(&trial);
            f = f_new;
            g = g_new;
            out.value = f;
            out.iterations += 1;
        }
        Ok(out)
    }
}

/// Minimize `objective` from `x0` with `config.max_iter` total iterations.
/// Returns the best point seen and its value.
pub fn lbfgs_minimize<F>(objective: F, x0: &[f64], config: &LbfgsConfig) -> Result<(Vec<f64>, StepOutcome)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0.to_vec();
    let mut opt = Lbfgs::new(config.clone());
    let outcome = opt.step(&mut x, objective)?;
    Ok((x, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        Ok((f, g))
    }

    #[test]
    fn quadratic_is_solved_exactly() {
        let target = [3.0, -1.0, 0.5, 2.0];
        let quad = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let g: Vec<f64> = x.iter().zip(&target).map(|(a, b)| a - b).collect();
            Ok((0.5 * dot(&g, &g), g))
        };
        for start in [[0.0; 4], [10.0, -7.0, 1e3, 0.1]] {
            let cfg = LbfgsConfig {
                max_iter: 5,
                ..Default::default()
            };
            let (x, out) = lbfgs_minimize(quad, &start, &cfg).unwrap();
            for (a, b) in x.iter().zip(&target) {
                assert!((a - b).abs() < 1e-10);
            }
            assert!(out.iterations <= 5);
        }
    }

    #[test]
    fn rosenbrock_converges() {
        let cfg = LbfgsConfig {
            max_iter: 200,
            ..Default::default()
        };
        let (x, out) = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert!(out.value < 1e-8, "value {} after {} iterations", out.value, out.iterations);
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn gradient_descent_oracle_reaches_the_same_basin() {
        // Plain fixed-step gradient descent, slow but independent of the
        // quasi-Newton machinery.
        let mut x = [-1.2, 1.0];
        for _ in 0..200_000 {
            let (_, g) = rosenbrock(&x).unwrap();
            x[0] -= 1e-3 * g[0];
            x[1] -= 1e-3 * g[1];
        }
        let cfg = LbfgsConfig {
            max_iter: 200,
            ..Default::default()
        };
        let (y, _) = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert!((x[0] - y[0]).abs() < 1e-2 && (x[1] - y[1]).abs() < 1e-2);
    }

    #[test]
    fn zero_history_is_steepest_descent_with_line_search() {
        let cfg = LbfgsConfig {
            history: 0,
            max_iter: 1,
            lr: 1.0,
            ..Default::default()
        };
        // f = 2 x^2 from x = 1: the direction is -g / |g|_1 = -1, so the
        // unit trial step lands on the minimum.
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((2.0 * x[0] * x[0], vec![4.0 * x[0]])) };
        let mut opt = Lbfgs::new(cfg.clone());
        let mut x = vec![1.0];
        let out = opt.step(&mut x, f).unwrap();
        assert_eq!(x[0], 0.0);
        assert_eq!(opt.history_len(), 0);
        assert_eq!(out.evaluations, 2);

        // Every iteration is a fresh scaled steepest-descent step: from
        // x = 0.3 (|g| = 1.2 > 1) the direction is -1 and t = 1 overshoots to
        // -0.7 (f rises), t = 0.5 reaches 0.3 - 0.5 = -0.2.
        let mut opt = Lbfgs::new(cfg);
        let mut x = vec![0.3];
        opt.step(&mut x, f).unwrap();
        assert!((x[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn exhausted_line_search_takes_no_step() {
        // Reported gradient points uphill of the real slope.
        let liar = |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((x[0], vec![-1.0])) };
        let mut x = vec![0.0];
        let mut opt = Lbfgs::new(LbfgsConfig::default());
        let out = opt.step(&mut x, liar).unwrap();
        assert_eq!(x, vec![0.0]);
        assert_eq!(out.stalls, 1);
        assert!(out.stuck);
    }

    #[test]
    fn values_never_increase_across_iterations() {
        let mut x = vec![-1.2, 1.0];
        let mut opt = Lbfgs::new(LbfgsConfig {
            max_iter: 1,
            ..Default::default()
        });
        let mut last = f64::INFINITY;
        for _ in 0..60 {
            let out = opt.step(&mut x, rosenbrock).unwrap();
            assert!(out.value <= last);
            last = out.value;
        }
    }
}
