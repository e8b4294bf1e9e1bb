//! Adam with global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;
pub const MAX_GRAD_NORM: f64 = 1.0;

/// Adam state for a fixed list of parameters. Slots are matched to
/// parameters by index; the caller owns the ordering and must keep it
/// stable across steps.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(shapes: &[Vec<usize>]) -> Result<Self> {
        let zero = |s: &Vec<usize>| Tensor::zeros(s.clone());
        Ok(Self {
            m: shapes.iter().map(zero).collect::<Result<_>>()?,
            v: shapes.iter().map(zero).collect::<Result<_>>()?,
            t: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over the whole parameter list. Slots whose gradient is
    /// `None` (parameters off the loss path this step) are left untouched,
    /// moments included. Gradients are assumed already clipped.
    pub fn step(
        &mut self,
        lr: f64,
        params: &mut [(String, &mut Tensor)],
        grads: &[Option<Tensor>],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters but got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = p.data_mut();
            for (((p_k, g_k), m_k), v_k) in
                p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *m_k = BETA1 * *m_k + (1.0 - BETA1) * g_k;
                *v_k = BETA2 * *v_k + (1.0 - BETA2) * g_k * g_k;
                let m_hat = *m_k / bc1;
                let v_hat = *v_k / bc2;
                *p_k -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}

/// Scales all gradients in place so their joint L2 norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for x in g.data() {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
