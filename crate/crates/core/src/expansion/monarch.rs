use crate::error::{shape_err, Result};
use crate::numerics::{rng, CustomBackward, Real, Tape, Tensor, Var};

const D_INIT_STD: f64 = 0.02;

/// Storage of a transform `M` (`n x n`).
#[derive(Debug, Clone, PartialEq)]
pub enum MonarchRepr<T> {
    /// `n = d^2`. `d_factor` is `[d, d, d]`: the diagonal of block `(i, j)`
    /// of the left factor at `[i, j, :]`. `r_factor` is `[d, d]`: the
    /// diagonal of the `j`-th block of the block-diagonal right factor.
    Structured { blocks: usize, d_factor: Tensor<T>, r_factor: Tensor<T> },
    /// Fallback when `n` is not a perfect square.
    Dense(Tensor<T>),
}

/// Two-factor Monarch matrix: a `d x d` grid of diagonal blocks times a
/// block-diagonal of diagonal blocks.
///
/// Block `(i, j)` of the product is `diag(D_ij) * diag(R_j)`, so
/// `M[i*d + t, j*d + t] = D[i, j, t] * R[j, t]` and every other entry is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MonarchMatrix<T> {
    n: usize,
    repr: MonarchRepr<T>,
}

fn exact_sqrt(n: usize) -> Option<usize> {
    let d = (n as f64).sqrt().round() as usize;
    (d * d == n).then_some(d)
}

impl<T: Real> MonarchMatrix<T> {
    /// Random `D` (std 0.02), zero `R`: materialises to exactly zero.
    ///
    /// Non-square `n` falls back to a zero dense matrix (see [`Self::is_fallback`]).
    pub fn init_zero(n: usize, seed: u64) -> Self {
        assert!(n >= 1, "monarch side must be positive");
        let repr = match exact_sqrt(n) {
            Some(d) => MonarchRepr::Structured {
                blocks: d,
                d_factor: rng::gaussian(&mut rng::seeded(seed), &[d, d, d], D_INIT_STD),
                r_factor: Tensor::zeros(&[d, d]),
            },
            None => MonarchRepr::Dense(Tensor::zeros(&[n, n])),
        };
        Self { n, repr }
    }

    pub fn from_factors(d_factor: Tensor<T>, r_factor: Tensor<T>) -> Result<Self> {
        let d = r_factor.dims()[0];
        if r_factor.dims() != [d, d] || d_factor.dims() != [d, d, d] {
            return Err(shape_err!(
                "monarch factors {:?} / {:?}",
                d_factor.dims(),
                r_factor.dims()
            ));
        }
        Ok(Self { n: d * d, repr: MonarchRepr::Structured { blocks: d, d_factor, r_factor } })
    }

    pub fn from_dense(m: Tensor<T>) -> Result<Self> {
        let (r, c) = m.shape2()?;
        if r != c {
            return Err(shape_err!("dense transform must be square, got {r}x{c}"));
        }
        Ok(Self { n: r, repr: MonarchRepr::Dense(m) })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn repr(&self) -> &MonarchRepr<T> {
        &self.repr
    }

    pub fn repr_mut(&mut self) -> &mut MonarchRepr<T> {
        &mut self.repr
    }

    /// True when `n` was not a perfect square and a dense matrix is used.
    pub fn is_fallback(&self) -> bool {
        matches!(self.repr, MonarchRepr::Dense(_))
    }

    /// `d^3 + d^2` structured, `n^2` dense.
    pub fn cast<U: Real>(&self) -> MonarchMatrix<U> {
        let repr = match &self.repr {
            MonarchRepr::Structured { blocks, d_factor, r_factor } => {
                MonarchRepr::Structured { blocks: *blocks, d_factor: d_factor.cast(), r_factor: r_factor.cast() }
            }
            MonarchRepr::Dense(m) => MonarchRepr::Dense(m.cast()),
        };
        MonarchMatrix { n: self.n, repr }
    }

    pub fn param_count(&self) -> usize {
        match &self.repr {
            MonarchRepr::Structured { d_factor, r_factor, .. } => d_factor.len() + r_factor.len(),
            MonarchRepr::Dense(m) => m.len(),
        }
    }

    /// Dense `n x n` equivalent.
    pub fn materialize(&self) -> Tensor<T> {
        match &self.repr {
            MonarchRepr::Structured { blocks, d_factor, r_factor } => {
                materialize_factors(*blocks, d_factor.data(), r_factor.data())
            }
            MonarchRepr::Dense(m) => m.clone(),
        }
    }

    /// `x * M` for `x: [rows x n]` using the factored form.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, n) = x.shape2()?;
        if n != self.n {
            return Err(shape_err!("apply: {n} columns for a side of {}", self.n));
        }
        match &self.repr {
            MonarchRepr::Dense(m) => crate::numerics::matmul(x, m),
            MonarchRepr::Structured { blocks: d, d_factor, r_factor } => {
                let (d, df, rf) = (*d, d_factor.data(), r_factor.data());
                let mut out = vec![T::zero(); rows * n];
                for (xr, or) in x.data().chunks(n).zip(out.chunks_mut(n)) {
                    for j in 0..d {
                        for t in 0..d {
                            let mut acc = T::zero();
                            for i in 0..d {
                                acc = acc + xr[i * d + t] * df[(i * d + j) * d + t];
                            }
                            or[j * d + t] = acc * rf[j * d + t];
                        }
                    }
                }
                Tensor::matrix(rows, n, out)
            }
        }
    }

    /// Register the parameters on `tape` and return `(M, param vars)`.
    pub fn record(&self, tape: &mut Tape<T>, trainable: bool) -> (Var, Vec<Var>) {
        match &self.repr {
            MonarchRepr::Structured { blocks, d_factor, r_factor } => {
                let dv = tape.leaf(d_factor.clone().with_grad(trainable));
                let rv = tape.leaf(r_factor.clone().with_grad(trainable));
                (record_materialize(tape, *blocks, dv, rv), vec![dv, rv])
            }
            MonarchRepr::Dense(m) => {
                let v = tape.leaf(m.clone().with_grad(trainable));
                (v, vec![v])
            }
        }
    }

    /// Parameter tensors in the order returned by [`Self::record`].
    pub fn params(&self) -> Vec<&Tensor<T>> {
        match &self.repr {
            MonarchRepr::Structured { d_factor, r_factor, .. } => vec![d_factor, r_factor],
            MonarchRepr::Dense(m) => vec![m],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match &mut self.repr {
            MonarchRepr::Structured { d_factor, r_factor, .. } => vec![d_factor, r_factor],
            MonarchRepr::Dense(m) => vec![m],
        }
    }
}

/// Record `M` built from factor vars `dv` (`[d,d,d]`) and `rv` (`[d,d]`).
pub(crate) fn record_materialize<T: Real>(tape: &mut Tape<T>, blocks: usize, dv: Var, rv: Var) -> Var {
    let value = materialize_factors(blocks, tape.value(dv).data(), tape.value(rv).data());
    tape.custom(&[dv, rv], value, Box::new(MaterializeRule { blocks }))
}

fn materialize_factors<T: Real>(d: usize, df: &[T], rf: &[T]) -> Tensor<T> {
    let n = d * d;
    let mut out = vec![T::zero(); n * n];
    for i in 0..d {
        for j in 0..d {
            for t in 0..d {
                out[(i * d + t) * n + j * d + t] = df[(i * d + j) * d + t] * rf[j * d + t];
            }
        }
    }
    Tensor::from_parts(vec![n, n], out)
}

struct MaterializeRule {
    blocks: usize,
}

impl<T: Real> CustomBackward<T> for MaterializeRule {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let d = self.blocks;
        let n = d * d;
        let (df, rf, g) = (inputs[0].data(), inputs[1].data(), grad.data());
        let mut dd = vec![T::zero(); d * d * d];
        let mut dr = vec![T::zero(); d * d];
        for i in 0..d {
            for j in 0..d {
                for t in 0..d {
                    let gij = g[(i * d + t) * n + j * d + t];
                    dd[(i * d + j) * d + t] = gij * rf[j * d + t];
                    dr[j * d + t] = dr[j * d + t] + gij * df[(i * d + j) * d + t];
                }
            }
        }
        Ok(vec![
            Some(Tensor::from_parts(vec![d, d, d], dd)),
            Some(Tensor::from_parts(vec![d, d], dr)),
        ])
    }
}
