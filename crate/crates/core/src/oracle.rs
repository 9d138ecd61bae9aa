//! Small-instance optimal transport solvers used to check the dual
//! estimator: log-domain Sinkhorn for the entropic problem and exact
//! transport between equal-size uniform measures by enumeration.

use crate::error::{Error, Result};
use crate::numerics::{lse, sq_dist, Tensor};

/// Largest support size accepted by [`exact_ot_uniform`].
pub const EXACT_MAX_ATOMS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Tensor,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// `atoms` holds one atom per row.
    pub fn new(atoms: Tensor, weights: Vec<f64>) -> Result<Self> {
        if atoms.rows() != weights.len() || weights.is_empty() {
            return Err(Error::Shape(format!(
                "{} atoms with {} weights",
                atoms.rows(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Data("measure weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Data(format!("measure weights sum to {total}, not 1")));
        }
        Ok(Self { atoms, weights })
    }

    pub fn uniform(atoms: Tensor) -> Result<Self> {
        let n = atoms.rows();
        Self::new(atoms, vec![1.0 / n as f64; n])
    }

    pub fn atoms(&self) -> &Tensor {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|x| (x - w).abs() <= 1e-12)
    }
}

fn cost_matrix(p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<Vec<Vec<f64>>> {
    if p.atoms.cols() != q.atoms.cols() {
        return Err(Error::Shape(format!(
            "atoms of dimension {} and {}",
            p.atoms.cols(),
            q.atoms.cols()
        )));
    }
    Ok((0..p.len())
        .map(|i| (0..q.len()).map(|j| sq_dist(p.atoms.row(i), q.atoms.row(j))).collect())
        .collect())
}

#[derive(Clone, Debug)]
pub struct SinkhornSolution {
    /// `<C, gamma> + eps * KL(gamma | p x q)`.
    pub value: f64,
    /// `|P| x |Q|` transport plan.
    pub coupling: Tensor,
    pub iterations: usize,
}

/// Sinkhorn sweeps run before switching to Newton steps on the row
/// potential; near-deterministic plans make plain sweeps converge very
/// slowly at small `eps`.
const SINKHORN_SWEEPS: usize = 500;

struct Problem<'a> {
    c: Vec<Vec<f64>>,
    log_p: Vec<f64>,
    log_q: Vec<f64>,
    p: &'a [f64],
    q: &'a [f64],
    eps: f64,
}

impl Problem<'_> {
    /// Column potential that makes the column marginals exact for `f`.
    fn c_transform(&self, f: &[f64], g: &mut [f64]) {
        let mut buf = vec![0.0; f.len()];
        for (j, gj) in g.iter_mut().enumerate() {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = self.log_p[i] + (f[i] - self.c[i][j]) / self.eps;
            }
            *gj = -self.eps * lse(&buf);
        }
    }

    fn log_plan(&self, f: &[f64], g: &[f64], i: usize, j: usize) -> f64 {
        self.log_p[i] + self.log_q[j] + (f[i] + g[j] - self.c[i][j]) / self.eps
    }

    fn row_error(&self, f: &[f64], g: &[f64]) -> Vec<f64> {
        (0..f.len())
            .map(|i| {
                let row: f64 = (0..g.len()).map(|j| self.log_plan(f, g, i, j).exp()).sum();
                row - self.p[i]
            })
            .collect()
    }

    /// Semi-dual objective `<p, f> + <q, g(f)>`.
    fn semi_dual(&self, f: &[f64]) -> f64 {
        let mut g = vec![0.0; self.q.len()];
        self.c_transform(f, &mut g);
        f.iter().zip(self.p).map(|(a, b)| a * b).sum::<f64>()
            + g.iter().zip(self.q).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Damped Newton ascent step on the semi-dual.
    fn newton_step(&self, f: &mut [f64], g: &mut [f64]) {
        let (n, m) = (f.len(), g.len());
        // s[j][i]: share of column j's mass on row i.
        let s: Vec<Vec<f64>> = (0..m)
            .map(|j| (0..n).map(|i| self.log_plan(f, g, i, j).exp() / self.q[j]).collect())
            .collect();
        let grad: Vec<f64> = (0..n)
            .map(|i| self.p[i] - (0..m).map(|j| self.q[j] * s[j][i]).sum::<f64>())
            .collect();
        // Negated Hessian plus a rank-one term fixing the shift direction.
        let h = nalgebra::DMatrix::from_fn(n, n, |a, b| {
            let mut v = 0.0;
            for j in 0..m {
                let diag = if a == b { s[j][a] } else { 0.0 };
                v += self.q[j] * (diag - s[j][a] * s[j][b]);
            }
            v / self.eps + 1.0 / (n as f64 * self.eps)
        });
        let rhs = nalgebra::DVector::from_column_slice(&grad);
        let Some(step) = h.lu().solve(&rhs) else {
            return;
        };
        let base = self.semi_dual(f);
        let mut t = 1.0;
        let mut trial = vec![0.0; n];
        for _ in 0..50 {
            for i in 0..n {
                trial[i] = f[i] + t * step[i];
            }
            if self.semi_dual(&trial) >= base {
                break;
            }
            t *= 0.5;
        }
        f.copy_from_slice(&trial);
        self.c_transform(f, g);
    }
}

/// Solves `min_gamma <C, gamma> + eps * KL(gamma | p x q)` with squared
/// Euclidean cost, stopping once the row marginal's L1 error is at most
/// `tol`.
///
/// Runs log-domain Sinkhorn sweeps, then finishes with damped Newton steps
/// on the row potential if the sweeps have not converged. `max_iter` bounds
/// sweeps plus Newton steps.
pub fn sinkhorn_distance(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    eps: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornSolution> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
    }
    let prob = Problem {
        c: cost_matrix(p, q)?,
        log_p: p.weights.iter().map(|w| w.ln()).collect(),
        log_q: q.weights.iter().map(|w| w.ln()).collect(),
        p: &p.weights,
        q: &q.weights,
        eps,
    };
    let (n, m) = (p.len(), q.len());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut buf = vec![0.0; m];
    let mut residual = f64::INFINITY;

    for it in 1..=max_iter {
        if it <= SINKHORN_SWEEPS {
            for i in 0..n {
                for j in 0..m {
                    buf[j] = prob.log_q[j] + (g[j] - prob.c[i][j]) / eps;
                }
                f[i] = -eps * lse(&buf);
            }
            prob.c_transform(&f, &mut g);
        } else {
            prob.newton_step(&mut f, &mut g);
        }
        residual = prob.row_error(&f, &g).iter().map(|e| e.abs()).sum();
        if residual <= tol {
            let mut plan = Vec::with_capacity(n * m);
            let mut value = 0.0;
            for i in 0..n {
                for j in 0..m {
                    let lg = prob.log_plan(&f, &g, i, j);
                    let gamma = lg.exp();
                    plan.push(gamma);
                    if gamma > 0.0 {
                        let kl = lg - prob.log_p[i] - prob.log_q[j];
                        value += gamma * (prob.c[i][j] + eps * kl);
                    }
                }
            }
            return Ok(SinkhornSolution {
                value,
                coupling: Tensor::matrix(n, m, plan)?,
                iterations: it,
            });
        }
    }
    Err(Error::SinkhornNotConverged {
        iters: max_iter,
        residual,
    })
}

/// Exact transport cost between equal-size uniform measures: the minimum
/// over permutations `s` of `(1/n) sum_i d(p_i, q_s(i))`.
pub fn exact_ot_uniform(p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<f64> {
    let n = p.len();
    if q.len() != n || n > EXACT_MAX_ATOMS {
        return Err(Error::Config(format!(
            "exact transport needs equal sizes of at most {EXACT_MAX_ATOMS}, got {} and {}",
            n,
            q.len()
        )));
    }
    if !p.is_uniform() || !q.is_uniform() {
        return Err(Error::Config("exact transport needs uniform weights".into()));
    }
    let c = cost_matrix(p, q)?;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permutations(&mut perm, n, &mut |s| {
        let cost: f64 = s.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
        best = best.min(cost);
    });
    Ok(best / n as f64)
}

/// Heap's algorithm over the first `k` entries.
fn permutations(a: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k <= 1 {
        visit(a);
        return;
    }
    for i in 0..k - 1 {
        permutations(a, k - 1, visit);
        if k % 2 == 0 {
            a.swap(i, k - 1);
        } else {
            a.swap(0, k - 1);
        }
    }
    permutations(a, k - 1, visit);
}
