//! Finite-difference verification of reverse-mode gradients (64-bit).

use rand::Rng;

use crate::error::Result;

use super::{rng, Tape, Tensor, Var};

/// Which coordinates [`grad_check`] probes.
#[derive(Debug, Clone, Copy)]
pub enum CoordSample {
    All,
    Random { count: usize, seed: u64 },
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Compare reverse-mode gradients against central differences.
///
/// Returns the max over probed coordinates of
/// `|g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64, sample: CoordSample) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let coords: Vec<(usize, usize)> = match sample {
        CoordSample::All => params
            .iter()
            .enumerate()
            .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
            .collect(),
        CoordSample::Random { count, seed } => {
            let total: usize = params.iter().map(Tensor::len).sum();
            let mut r = rng::seeded(seed);
            (0..count)
                .map(|_| {
                    let mut flat = r.random_range(0..total);
                    let mut i = 0;
                    while flat >= params[i].len() {
                        flat -= params[i].len();
                        i += 1;
                    }
                    (i, flat)
                })
                .collect()
        }
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for (i, j) in coords {
        let ad = grads.get(vars[i]).map_or(0.0, |g| g.data()[j]);
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let plus = evaluate(&f, &work)?;
        work[i].data_mut()[j] = orig - h;
        let minus = evaluate(&f, &work)?;
        work[i].data_mut()[j] = orig;
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max((ad - fd).abs() / (ad.abs() + fd.abs() + 1e-12));
    }
    Ok(worst)
}
