//! Levenberg–Marquardt on the window problem with a banded Cholesky solve.

use nalgebra::DVector;

use super::problem::{PoseProblem, Residual};

/// Symmetric band matrix, lower triangle stored row-major as
/// `data[i·(b+1) + (i-j)]` for `i-b ≤ j ≤ i`.
#[derive(Clone, Debug)]
pub struct BandMatrix {
    n: usize,
    b: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, b: usize) -> Self {
        Self { n, b, data: vec![0.0; n * (b + 1)] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Adds `v` at `(i, j)`; entries outside the band panic.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(i - j <= self.b, "entry ({i},{j}) outside bandwidth {}", self.b);
        self.data[i * (self.b + 1) + (i - j)] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.b {
            0.0
        } else {
            self.data[i * (self.b + 1) + (i - j)]
        }
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.n {
            self.data[i * (self.b + 1)] += v;
        }
    }

    /// Solves `A·x = rhs`; `None` if `A` is not positive definite.
    pub fn cholesky_solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        let (n, b, w) = (self.n, self.b, self.b + 1);
        let mut l = self.data.clone();
        for i in 0..n {
            let lo = i.saturating_sub(b);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(b));
                let mut s = l[i * w + (i - j)];
                for k in klo..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    l[i * w] = s.sqrt();
                } else {
                    l[i * w + (i - j)] = s / l[j * w];
                }
            }
        }
        let mut y = rhs.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(b)..i {
                s -= l[i * w + (i - k)] * y[k];
            }
            y[i] = s / l[i * w];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + b + 1).min(n) {
                s -= l[k * w + (k - i)] * y[k];
            }
            y[i] = s / l[i * w];
        }
        Some(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Converged once a step's largest component is below this, rad.
    pub step_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            step_tolerance: 1e-8,
            initial_damping: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
    pub last_step: f64,
}

fn normal_equations(residuals: &[Residual], n: usize) -> (BandMatrix, DVector<f64>) {
    let b = residuals
        .iter()
        .flat_map(|r| {
            let lo = r.blocks.iter().map(|b| b.0).min();
            let hi = r.blocks.iter().map(|b| b.0).max();
            lo.zip(hi).map(|(lo, hi)| hi + 2 - lo)
        })
        .max()
        .unwrap_or(2);
    let mut h = BandMatrix::zeros(n, b);
    let mut g = DVector::zeros(n);
    for r in residuals {
        for (p, (cp, jp)) in r.blocks.iter().enumerate() {
            let v = jp.transpose() * r.r;
            for a in 0..3 {
                g[cp + a] += v[a];
            }
            for (q, (cq, jq)) in r.blocks[..=p].iter().enumerate() {
                let mut m = jp.transpose() * jq;
                if cp == cq && p != q {
                    let mt = m.transpose();
                    m += mt;
                }
                for a in 0..3 {
                    for c in 0..3 {
                        // a diagonal block is stored once, lower triangle only
                        if cp == cq && c > a {
                            continue;
                        }
                        h.add(cp + a, cq + c, m[(a, c)]);
                    }
                }
            }
        }
    }
    (h, g)
}

/// Minimizes `Σ‖r‖²` from `x0`. Accepted steps never increase the objective.
pub fn solve(problem: &PoseProblem<'_>, x0: DVector<f64>, opts: &SolverOptions) -> SolveReport {
    let n = x0.len();
    let mut x = x0;
    let mut residuals = problem.residuals(&x, true);
    let mut cost: f64 = residuals.iter().map(|r| r.r.norm_squared()).sum();
    let mut history = vec![cost];
    let mut lambda = opts.initial_damping;
    let mut last_step = f64::INFINITY;
    if n == 0 {
        return SolveReport { x, iterations: 0, converged: true, history, last_step: 0.0 };
    }
    for it in 0..opts.max_iterations {
        let (h, g) = normal_equations(&residuals, n);
        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = h.clone();
            damped.add_diagonal(lambda);
            let Some(step) = damped.cholesky_solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            last_step = step.amax();
            if last_step < opts.step_tolerance {
                if problem.objective(&(&x + &step)) <= cost {
                    x += step;
                }
                return SolveReport { x, iterations: it + 1, converged: true, history, last_step };
            }
            let candidate = &x + &step;
            let c = problem.objective(&candidate);
            if c <= cost {
                x = candidate;
                cost = c;
                history.push(c);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no descent direction left at any damping
            return SolveReport { x, iterations: it + 1, converged: true, history, last_step };
        }
        residuals = problem.residuals(&x, true);
    }
    SolveReport { x, iterations: opts.max_iterations, converged: false, history, last_step }
}
