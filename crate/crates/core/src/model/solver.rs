//! Dual coordinate descent for the squared-hinge (L2-loss) linear SVM.
//!
//! Minimizes `½‖w‖² + ½b² + C Σ max(0, 1 − yᵢ(w·xᵢ + b))²`; the bias is an
//! extra feature fixed at 1 and is regularized like any other weight.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Rows of a problem in local feature space.
pub struct Rows<'a> {
    pub indptr: &'a [usize],
    pub indices: &'a [u32],
    pub values: &'a [f64],
    pub dim: usize,
}

impl Rows<'_> {
    pub fn len(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    #[inline]
    fn margin(&self, i: usize, w: &[f64], bias: f64) -> f64 {
        let (idx, val) = self.row(i);
        idx.iter().zip(val).map(|(&j, &v)| w[j as usize] * v).sum::<f64>() + bias
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SolverParams {
    pub c: f64,
    pub tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub w: Vec<f64>,
    pub bias: f64,
    pub epochs: usize,
    pub primal: f64,
    pub dual: f64,
}

pub fn primal_objective(rows: &Rows<'_>, y: &[f64], w: &[f64], bias: f64, c: f64) -> f64 {
    let reg = 0.5 * (w.iter().map(|v| v * v).sum::<f64>() + bias * bias);
    let loss: f64 = (0..rows.len())
        .map(|i| {
            let xi = (1.0 - y[i] * rows.margin(i, w, bias)).max(0.0);
            xi * xi
        })
        .sum();
    reg + c * loss
}

/// Runs epochs until the relative duality gap falls below `tol` or
/// `max_epochs` is reached. `y` holds ±1.
pub fn solve(rows: &Rows<'_>, y: &[f64], p: &SolverParams) -> Solution {
    let n = rows.len();
    let d_ii = 0.5 / p.c;
    let mut w = vec![0.0f64; rows.dim];
    let mut bias = 0.0f64;
    let mut alpha = vec![0.0f64; n];
    let qd: Vec<f64> = (0..n)
        .map(|i| rows.row(i).1.iter().map(|v| v * v).sum::<f64>() + 1.0 + d_ii)
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut epochs = 0;
    let (mut primal, mut dual) = (p.c * n as f64, 0.0);
    while epochs < p.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        for &i in &order {
            let g = y[i] * rows.margin(i, &w, bias) - 1.0 + d_ii * alpha[i];
            let pg = if alpha[i] == 0.0 { g.min(0.0) } else { g };
            if pg == 0.0 {
                continue;
            }
            let old = alpha[i];
            alpha[i] = (old - g / qd[i]).max(0.0);
            let step = (alpha[i] - old) * y[i];
            let (idx, val) = rows.row(i);
            for (&j, &v) in idx.iter().zip(val) {
                w[j as usize] += step * v;
            }
            bias += step;
        }
        let wsq = w.iter().map(|v| v * v).sum::<f64>() + bias * bias;
        primal = primal_objective(rows, y, &w, bias, p.c);
        dual = alpha.iter().sum::<f64>() - 0.5 * wsq - 0.5 * d_ii * alpha.iter().map(|a| a * a).sum::<f64>();
        if primal - dual <= p.tol * primal.abs() {
            break;
        }
    }
    Solution {
        w,
        bias,
        epochs,
        primal,
        dual,
    }
}
