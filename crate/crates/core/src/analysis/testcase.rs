use rand::seq::SliceRandom;

use crate::error::{ApexError, Result};
use crate::numerics::{matmul, rng, Tensor};

/// `[W_P, W_N]` with controlled ranks and overlap, plus a transform `M`
/// that pushes selected columns of `W_N + W_P M` out of `span(W_P)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankTestCase {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub rho: usize,
    pub delta: usize,
    pub s_cols: usize,
    /// `[W_P, W_N]`, `m x n`.
    pub base: Tensor<f64>,
    /// `[W_P, W_N + W_P M]`, `m x n`.
    pub augmented: Tensor<f64>,
    /// `k x (n - k)`; `None` when either side is empty.
    pub transform: Option<Tensor<f64>>,
    /// Columns of `W_N` (0-based within `W_N`) rewritten by `M`.
    pub s_set: Vec<usize>,
}

impl RankTestCase {
    /// `k + rho - delta`.
    pub fn base_rank(&self) -> usize {
        self.k + self.rho - self.delta
    }

    pub fn w_p(&self) -> Option<Tensor<f64>> {
        (self.k > 0).then(|| self.base.gather_cols(&(0..self.k).collect::<Vec<_>>()).expect("in range"))
    }

    pub fn w_n(&self) -> Option<Tensor<f64>> {
        (self.n > self.k).then(|| self.base.gather_cols(&(self.k..self.n).collect::<Vec<_>>()).expect("in range"))
    }
}

/// `cols` orthonormal columns in `R^rows` (Gram-Schmidt, twice, on Gaussians).
pub fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if cols > rows {
        return Err(ApexError::Config(format!("{cols} orthonormal columns do not fit in R^{rows}")));
    }
    let g = rng::gaussian::<f64>(&mut rng::seeded(seed), &[rows.max(1), cols.max(1)], 1.0);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut v: Vec<f64> = (0..rows).map(|i| g.at(i, j)).collect();
        for _ in 0..2 {
            for u in &q {
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return Err(ApexError::Numeric("degenerate draw while orthogonalising".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }
    Ok(q)
}

fn from_columns(rows: usize, cols: &[Vec<f64>]) -> Tensor<f64> {
    let mut data = vec![0.0; rows * cols.len()];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..rows {
            data[i * cols.len() + j] = c[i];
        }
    }
    Tensor::matrix(rows, cols.len(), data).expect("non-empty")
}

/// Build `W_P` from `k` orthonormal columns and `W_N` from `delta` columns
/// inside `span(W_P)`, `rho - delta` fresh orthonormal directions and zero
/// columns, shuffled. `M` sets `M[:, j] = -W_P^T W_N[:, j]` on `s_cols`
/// columns (fresh directions first, then in-span ones, then zeros), which
/// leaves those columns of `W_N + W_P M` orthogonal to `span(W_P)`.
pub fn construct_rank_testcase(
    m: usize,
    n: usize,
    k: usize,
    rho: usize,
    delta: usize,
    s_cols: usize,
    seed: u64,
) -> Result<RankTestCase> {
    let infeasible = |why: &str| {
        Err(ApexError::Config(format!(
            "infeasible rank test case m={m} n={n} k={k} rho={rho} delta={delta} s={s_cols}: {why}"
        )))
    };
    if m == 0 || n == 0 || k > n {
        return infeasible("need m, n >= 1 and k <= n");
    }
    if delta > rho || rho > n - k {
        return infeasible("need delta <= rho <= n - k");
    }
    if delta > k {
        return infeasible("an overlap of delta needs delta <= k");
    }
    if k + rho - delta > m {
        return infeasible("need k + rho - delta <= m");
    }
    if s_cols > (n - k).min(m - k) {
        return infeasible("need s_cols <= min(n - k, m - k)");
    }
    let fresh = rho - delta;
    let basis = orthonormal_columns(m, k + fresh, seed)?;
    let (wp_cols, fresh_cols) = basis.split_at(k);
    let mix = orthonormal_columns(k, delta, seed ^ 0x5bd1_e995)?;
    let mut wn_cols: Vec<(u8, Vec<f64>)> = Vec::with_capacity(n - k);
    for g in &mix {
        let v = (0..m).map(|i| (0..k).map(|a| wp_cols[a][i] * g[a]).sum()).collect();
        wn_cols.push((1, v));
    }
    wn_cols.extend(fresh_cols.iter().map(|c| (0, c.clone())));
    wn_cols.extend((0..n - k - rho).map(|_| (2, vec![0.0; m])));
    wn_cols.shuffle(&mut rng::derive(seed, 1));

    let mut order: Vec<usize> = (0..wn_cols.len()).collect();
    order.sort_by_key(|&j| (wn_cols[j].0, j));
    let mut s_set: Vec<usize> = order[..s_cols].to_vec();
    s_set.sort_unstable();

    let mut cols: Vec<Vec<f64>> = wp_cols.to_vec();
    cols.extend(wn_cols.iter().map(|(_, c)| c.clone()));
    let base = from_columns(m, &cols);

    let (transform, augmented) = if k > 0 && n > k {
        let wp = from_columns(m, wp_cols);
        let wn = from_columns(m, &wn_cols.iter().map(|(_, c)| c.clone()).collect::<Vec<_>>());
        let mut mt = Tensor::zeros(&[k, n - k]);
        for &j in &s_set {
            for a in 0..k {
                let dot: f64 = (0..m).map(|i| wp.at(i, a) * wn.at(i, j)).sum();
                mt.set(a, j, -dot);
            }
        }
        let u = matmul(&wp, &mt)?;
        let mut aug = base.clone();
        for i in 0..m {
            for j in 0..n - k {
                aug.set(i, k + j, wn.at(i, j) + u.at(i, j));
            }
        }
        (Some(mt), aug)
    } else {
        (None, base.clone())
    };
    Ok(RankTestCase { m, n, k, rho, delta, s_cols, base, augmented, transform, s_set })
}
