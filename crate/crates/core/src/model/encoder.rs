use ndarray::Array2;

use super::layers::Ctx;
use super::GuidanceLayer;
use crate::autograd::Var;

/// Graph handles for one example's cross-modal features.
#[derive(Clone, Copy, Debug)]
pub struct CrossModalVars {
    /// `L_q × d_model`
    pub words: Var,
    /// `L_v × d_model`
    pub frames: Var,
    /// `1 × L_v` word- and head-averaged query→video attention.
    pub guidance: Var,
}

/// One direction of a GRU layer over `inputs` (`L × in`). Returns the
/// hidden state per position in original order, each `1 × hidden`.
fn gru_direction(ctx: &mut Ctx<'_>, inputs: Var, prefix: &str, reverse: bool) -> Vec<Var> {
    let hidden = ctx.cfg.d_model / 2;
    let len = ctx.g.shape(inputs).0;
    let w_in = ctx.p.get(&format!("{prefix}.w_input"));
    let w_hid = ctx.p.get(&format!("{prefix}.w_hidden"));
    let b_in = ctx.p.get(&format!("{prefix}.b_input"));
    let b_hid = ctx.p.get(&format!("{prefix}.b_hidden"));

    let projected = ctx.g.matmul(inputs, w_in);
    let projected = ctx.g.add_row(projected, b_in);
    let mut h = ctx.g.constant(Array2::zeros((1, hidden)));
    let mut states = vec![h; len];
    let order: Vec<usize> = if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for t in order {
        let x = ctx.g.slice_rows(projected, t, 1);
        let hh = ctx.g.matmul(h, w_hid);
        let hh = ctx.g.add_row(hh, b_hid);

        let xr = ctx.g.slice_cols(x, 0, hidden);
        let hr = ctx.g.slice_cols(hh, 0, hidden);
        let r = ctx.g.add(xr, hr);
        let r = ctx.g.sigmoid(r);

        let xz = ctx.g.slice_cols(x, hidden, hidden);
        let hz = ctx.g.slice_cols(hh, hidden, hidden);
        let z = ctx.g.add(xz, hz);
        let z = ctx.g.sigmoid(z);

        let xn = ctx.g.slice_cols(x, 2 * hidden, hidden);
        let hn = ctx.g.slice_cols(hh, 2 * hidden, hidden);
        let gated = ctx.g.mul(r, hn);
        let n = ctx.g.add(xn, gated);
        let n = ctx.g.tanh(n);

        // h' = (1 - z) n + z h = n + z (h - n)
        let diff = ctx.g.sub(h, n);
        let zd = ctx.g.mul(z, diff);
        h = ctx.g.add(n, zd);
        states[t] = h;
    }
    states
}

/// Stacked bidirectional GRU; row `i` is `[forward_i ; backward_i]`.
pub(crate) fn encode_query(ctx: &mut Ctx<'_>, embeddings: Var) -> Var {
    let mut x = embeddings;
    for layer in 0..ctx.cfg.layers {
        let fwd = gru_direction(ctx, x, &format!("query.gru{layer}.fwd"), false);
        let bwd = gru_direction(ctx, x, &format!("query.gru{layer}.bwd"), true);
        let rows: Vec<Var> = fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| ctx.g.concat_cols(&[f, b]))
            .collect();
        x = if rows.len() == 1 {
            rows[0]
        } else {
            ctx.g.concat_rows(&rows)
        };
    }
    x
}

/// Feature projection, learned position embedding, then stacked
/// self-attention blocks.
pub(crate) fn encode_video(ctx: &mut Ctx<'_>, features: Var) -> (Var, Vec<Vec<Var>>) {
    let len = ctx.g.shape(features).0;
    let x = ctx.linear(features, "video.proj");
    let table = ctx.p.get("video.position");
    let pos = ctx.g.slice_rows(table, 0, len);
    let mut x = ctx.g.add(x, pos);
    let mut all_probs = Vec::with_capacity(ctx.cfg.layers);
    for layer in 0..ctx.cfg.layers {
        let (y, probs) = ctx.block(x, x, &format!("video.layer{layer}"));
        x = y;
        all_probs.push(probs);
    }
    (x, all_probs)
}

/// Bidirectional cross-modal layers: words attend over frames and frames
/// attend over words, each through its own block.
pub(crate) fn cross_encode(ctx: &mut Ctx<'_>, words: Var, frames: Var) -> CrossModalVars {
    let (mut q, mut v) = (words, frames);
    let pick = match ctx.cfg.guidance_layer {
        GuidanceLayer::First => 0,
        GuidanceLayer::Last => ctx.cfg.layers - 1,
    };
    let mut guidance = None;
    for layer in 0..ctx.cfg.layers {
        let (q_next, q2v_probs) = ctx.block(q, v, &format!("cross{layer}.q2v"));
        let (v_next, _) = ctx.block(v, q, &format!("cross{layer}.v2q"));
        if layer == pick {
            let mut sum = q2v_probs[0];
            for &p in &q2v_probs[1..] {
                sum = ctx.g.add(sum, p);
            }
            let per_head = ctx.g.scale(sum, 1.0 / q2v_probs.len() as f64);
            guidance = Some(ctx.g.mean_rows(per_head));
        }
        q = q_next;
        v = v_next;
    }
    CrossModalVars {
        words: q,
        frames: v,
        guidance: guidance.expect("at least one layer"),
    }
}
