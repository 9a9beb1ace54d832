//! Central-difference gradient checking.
//!
//! `finite_diff_check` runs a deterministic scalar function twice per probed
//! coordinate and compares the numeric slope against the analytic gradient
//! from the tape. The returned figure is the worst relative error over all
//! probed coordinates:
//!
//! ```text
//! err = |analytic - numeric| / max(1, |numeric|)
//! ```
//!
//! Small graphs should be swept exhaustively (`coords: All`); deep ones can
//! probe a seeded random subset per tensor to stay inside a time budget
//! without giving up coverage of every parameter tensor.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub enum CoordPlan {
    /// Probe every coordinate of every parameter.
    All,
    /// Probe at most this many seeded-random coordinates per parameter.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    pub eps: f64,
    pub coords: CoordPlan,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            eps: 1e-5,
            coords: CoordPlan::All,
        }
    }
}

/// Max relative error between analytic and central-difference gradients.
///
/// `build` must construct the same scalar loss every time it is called with
/// the same parameter values; any internal randomness has to be frozen.
pub fn finite_diff_check<F>(build: F, params: &[Tensor], cfg: &FdConfig) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(params.len());
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = params
            .iter()
            .map(|p| {
                let mut p = p.clone();
                p.set_requires_grad(true);
                g.leaf(&p)
            })
            .collect();
        let loss = build(&mut g, &vars)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::shape("finite_diff_check", "loss must be scalar"));
        }
        g.backward(loss)?;
        for &v in &vars {
            let n = g.value(v).numel();
            grads.push(match g.grad(v) {
                Some(gr) => gr.to_vec(),
                None => vec![0.0; n],
            });
        }
    }

    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params
            .iter()
            .map(|p| {
                let mut p = p.clone();
                p.set_requires_grad(false);
                g.leaf(&p)
            })
            .collect();
        let loss = build(&mut g, &vars)?;
        let v = g.data(loss)[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("finite_diff_check loss".into()));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_err = 0.0f64;
    for (ti, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = match cfg.coords {
            CoordPlan::All => (0..n).collect(),
            CoordPlan::Sample { per_tensor, seed } => {
                if n <= per_tensor {
                    (0..n).collect()
                } else {
                    let rng = Rng::new(seed);
                    let mut picked = Vec::with_capacity(per_tensor);
                    let mut draw = 0u64;
                    while picked.len() < per_tensor {
                        let c = (rng.uniform_at(&[ti as u64, draw]) * n as f64) as usize;
                        let c = c.min(n - 1);
                        if !picked.contains(&c) {
                            picked.push(c);
                        }
                        draw += 1;
                    }
                    picked
                }
            }
        };
        for c in coords {
            let orig = work[ti].data()[c];
            work[ti].data_mut()[c] = orig + cfg.eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[c] = orig - cfg.eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let err = (grads[ti][c] - numeric).abs() / numeric.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
