//! Limited-memory BFGS with an Armijo backtracking line search.
//!
//! The search direction comes from the standard two-loop recursion over the
//! last `memory` curvature pairs. Step lengths start at 1 (scaled on the
//! very first iteration, where no curvature information exists) and are
//! halved until the sufficient-decrease condition holds. Only accepted
//! points enter the trace, so it never increases.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Sufficient-decrease constant.
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 20;
/// Pairs with `⟨s, y⟩` at or below this are not stored.
const CURVATURE_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    pub memory: usize,
    /// Stop once `‖grad‖∞` falls below this.
    pub tolerance: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iters: 200,
            memory: 10,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    MaxIterations,
    Converged,
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    /// Energy at `x0`, then at every accepted iterate.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

/// Energy and gradient source for [`minimize`].
pub trait Problem {
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Called after every accepted step with the iteration number (from 1)
    /// and the energy at the accepted point, which is also the point most
    /// recently passed to [`Problem::evaluate`].
    fn accepted(&mut self, _iteration: usize, _energy: f64) {}
}

impl<F> Problem for F
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(x)
    }
}

/// History of curvature pairs.
#[derive(Clone, Debug, Default)]
pub struct LbfgsState {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    memory: usize,
    /// Scaling `⟨s,y⟩/⟨y,y⟩` from the latest accepted pair.
    gamma: Option<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl LbfgsState {
    pub fn new(memory: usize) -> Self {
        LbfgsState {
            pairs: VecDeque::with_capacity(memory),
            memory,
            gamma: None,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stores `(s, y)` if it satisfies the curvature condition. Returns
    /// whether it was kept.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        if !(sy > CURVATURE_EPS) {
            return false;
        }
        let yy = dot(&y, &y);
        self.gamma = Some(sy / yy);
        if self.memory == 0 {
            return true;
        }
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
        true
    }

    pub fn reset(&mut self) {
        self.pairs.clear();
        self.gamma = None;
    }

    /// `-H·grad` via the two-loop recursion.
    pub fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = self.gamma.unwrap_or(1.0);
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

fn checked(iteration: usize, (f, g): (f64, Vec<f64>), n: usize) -> Result<(f64, Vec<f64>)> {
    if g.len() != n {
        return Err(Error::config(format!(
            "gradient has {} entries, expected {n}",
            g.len()
        )));
    }
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { iteration });
    }
    Ok((f, g))
}

/// Minimizes `problem` from `x0`.
pub fn minimize<P: Problem + ?Sized>(
    problem: &mut P,
    x0: Vec<f64>,
    opts: &LbfgsOptions,
) -> Result<LbfgsResult> {
    if opts.max_iters == 0 {
        return Err(Error::config("max_iters must be at least 1"));
    }
    let n = x0.len();
    let mut x = x0;
    let (mut f, mut g) = checked(0, problem.evaluate(&x)?, n)?;
    let mut evaluations = 1;
    let mut trace = vec![f];
    let mut state = LbfgsState::new(opts.memory);
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    for iter in 1..=opts.max_iters {
        if inf_norm(&g) < opts.tolerance {
            termination = Termination::Converged;
            break;
        }
        let mut d = state.direction(&g);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            // Curvature history produced an ascent direction; start over.
            state.reset();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = if state.gamma.is_none() {
            (1.0 / dot(&g, &g).sqrt()).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let (ft, gt) = checked(iter, problem.evaluate(&trial)?, n)?;
            evaluations += 1;
            if ft <= f + ARMIJO_C1 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            termination = Termination::LineSearchFailed;
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        state.push(s, y);
        x = x_new;
        f = f_new;
        g = g_new;
        iterations = iter;
        trace.push(f);
        problem.accepted(iter, f);
    }
    if termination == Termination::MaxIterations && inf_norm(&g) < opts.tolerance {
        termination = Termination::Converged;
    }

    Ok(LbfgsResult {
        x,
        trace,
        iterations,
        evaluations,
        termination,
    })
}
