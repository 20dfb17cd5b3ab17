//! Graph-level building blocks shared by the encoders.

use ndarray::Array2;
use rand::{Rng, RngCore};

use super::{BoundParams, Mode, ModelConfig};
use crate::autograd::{Graph, Var};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Everything a forward pass needs besides its inputs.
pub(crate) struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub p: &'a BoundParams,
    pub cfg: &'a ModelConfig,
    pub mode: Mode,
    pub rng: &'a mut dyn RngCore,
}

/// Output of one multihead attention call.
pub(crate) struct Attended {
    pub out: Var,
    /// Row-stochastic attention matrix per head, `L_query × L_key`.
    pub probs: Vec<Var>,
}

impl Ctx<'_> {
    pub fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p.get(&format!("{prefix}.weight"));
        let b = self.p.get(&format!("{prefix}.bias"));
        let y = self.g.matmul(x, w);
        self.g.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let gain = self.p.get(&format!("{prefix}.gain"));
        let bias = self.p.get(&format!("{prefix}.bias"));
        let n = self.g.normalize_rows(x, NORM_EPS);
        let n = self.g.mul_row(n, gain);
        self.g.add_row(n, bias)
    }

    /// Inverted dropout; identity in eval mode or at rate zero.
    pub fn dropout(&mut self, x: Var) -> Var {
        let rate = self.cfg.dropout;
        if self.mode == Mode::Eval || rate == 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let shape = self.g.shape(x);
        let rng = &mut *self.rng;
        let mask = Array2::from_shape_simple_fn(shape, || {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.g.mask(x, mask)
    }

    /// Multihead attention of `queries` over `keys_values`, with scale
    /// `sqrt(d_model / h)`.
    pub fn attention(&mut self, queries: Var, keys_values: Var, prefix: &str) -> Attended {
        let q = self.linear(queries, &format!("{prefix}.query"));
        let k = self.linear(keys_values, &format!("{prefix}.key"));
        let v = self.linear(keys_values, &format!("{prefix}.value"));
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut probs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = self.g.slice_cols(q, h * dh, dh);
            let kh = self.g.slice_cols(k, h * dh, dh);
            let vh = self.g.slice_cols(v, h * dh, dh);
            let scores = self.g.matmul_bt(qh, kh);
            let scores = self.g.scale(scores, scale);
            let p = self.g.softmax_rows(scores);
            heads.push(self.g.matmul(p, vh));
            probs.push(p);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            self.g.concat_cols(&heads)
        };
        let out = self.linear(joined, &format!("{prefix}.out"));
        Attended { out, probs }
    }

    /// Post-norm encoder block: attention, residual, norm, two-layer ReLU
    /// feed-forward, residual, norm.
    pub fn block(&mut self, x: Var, context: Var, prefix: &str) -> (Var, Vec<Var>) {
        let att = self.attention(x, context, &format!("{prefix}.attn"));
        let a = self.dropout(att.out);
        let h = self.g.add(x, a);
        let h = self.layer_norm(h, &format!("{prefix}.norm1"));
        let f = self.linear(h, &format!("{prefix}.ff1"));
        let f = self.g.relu(f);
        let f = self.linear(f, &format!("{prefix}.ff2"));
        let f = self.dropout(f);
        let y = self.g.add(h, f);
        let y = self.layer_norm(y, &format!("{prefix}.norm2"));
        (y, att.probs)
    }
}
