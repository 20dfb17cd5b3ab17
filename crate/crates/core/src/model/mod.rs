//! Cross-modal representation: a bidirectional GRU over word embeddings,
//! a self-attention encoder over projected frame features, and stacked
//! bidirectional cross-modal attention producing joint-space word and
//! frame features plus the query→video guidance attention.

mod encoder;
mod layers;
mod params;

use ndarray::Array2;
use rand::RngCore;
use thiserror::Error;

pub use encoder::CrossModalVars;
pub use params::{
    init_params, param_specs, to_storage, BoundParams, GuidanceLayer, Init, ModelConfig, Param,
    ParamSpec, Parameters,
};

use crate::autograd::{Graph, Var};
use crate::data::{QueryTokens, VideoFeatures};
use layers::Ctx;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty {0} sequence")]
    Empty(&'static str),
    #[error("{what} dimension {found} does not match config ({expected})")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("parameter set does not match config: {0}")]
    ParamMismatch(String),
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active.
    Train,
    Eval,
}

/// Joint-space features of one (query, video) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossModalOutput {
    pub word_features: Array2<f64>,
    pub frame_features: Array2<f64>,
    /// Probability vector over frames.
    pub guidance_attention: Vec<f64>,
}

fn check_query(tokens: &QueryTokens, cfg: &ModelConfig) -> Result<(), ModelError> {
    let (len, dim) = tokens.embeddings.dim();
    if len == 0 {
        return Err(ModelError::Empty("query"));
    }
    if len > cfg.max_positions {
        return Err(ModelError::TooLong {
            len,
            max: cfg.max_positions,
        });
    }
    if dim != cfg.d_word {
        return Err(ModelError::DimMismatch {
            what: "word embedding",
            expected: cfg.d_word,
            found: dim,
        });
    }
    Ok(())
}

fn check_video(feats: &VideoFeatures, cfg: &ModelConfig) -> Result<(), ModelError> {
    let (len, dim) = feats.features.dim();
    if len == 0 {
        return Err(ModelError::Empty("video"));
    }
    if len > cfg.max_positions {
        return Err(ModelError::TooLong {
            len,
            max: cfg.max_positions,
        });
    }
    if dim != cfg.d_feat {
        return Err(ModelError::DimMismatch {
            what: "video feature",
            expected: cfg.d_feat,
            found: dim,
        });
    }
    Ok(())
}

fn video_input(feats: &VideoFeatures) -> Array2<f64> {
    feats.features.mapv(f64::from)
}

/// Records the full forward pass of one example on `graph`.
pub fn forward_example(
    graph: &mut Graph,
    bound: &BoundParams,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut dyn RngCore,
    tokens: &QueryTokens,
    video: &VideoFeatures,
) -> Result<CrossModalVars, ModelError> {
    check_query(tokens, cfg)?;
    check_video(video, cfg)?;
    let words = graph.constant(tokens.embeddings.clone());
    let frames = graph.constant(video_input(video));
    let mut ctx = Ctx {
        g: graph,
        p: bound,
        cfg,
        mode,
        rng,
    };
    let q = encoder::encode_query(&mut ctx, words);
    let (v, _) = encoder::encode_video(&mut ctx, frames);
    Ok(encoder::cross_encode(&mut ctx, q, v))
}

/// `L_q × d_model` word features from the bidirectional GRU.
pub fn encode_query(
    tokens: &QueryTokens,
    params: &Parameters,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Array2<f64>, ModelError> {
    check_query(tokens, cfg)?;
    let mut g = Graph::new();
    let bound = BoundParams::frozen(&mut g, params);
    let words = g.constant(tokens.embeddings.clone());
    let mut ctx = Ctx {
        g: &mut g,
        p: &bound,
        cfg,
        mode,
        rng,
    };
    let q = encoder::encode_query(&mut ctx, words);
    Ok(g.value(q).clone())
}

/// Video encoding plus every self-attention matrix, indexed
/// `[layer][head]`.
pub fn encode_video_with_attention(
    feats: &VideoFeatures,
    params: &Parameters,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(Array2<f64>, Vec<Vec<Array2<f64>>>), ModelError> {
    check_video(feats, cfg)?;
    let mut g = Graph::new();
    let bound = BoundParams::frozen(&mut g, params);
    let frames = g.constant(video_input(feats));
    let mut ctx = Ctx {
        g: &mut g,
        p: &bound,
        cfg,
        mode,
        rng,
    };
    let (v, probs) = encoder::encode_video(&mut ctx, frames);
    let probs = probs
        .into_iter()
        .map(|layer| layer.into_iter().map(|p| g.value(p).clone()).collect())
        .collect();
    Ok((g.value(v).clone(), probs))
}

/// `L_v × d_model` frame features from the self-attention encoder.
pub fn encode_video(
    feats: &VideoFeatures,
    params: &Parameters,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Array2<f64>, ModelError> {
    encode_video_with_attention(feats, params, cfg, mode, rng).map(|(v, _)| v)
}

/// Cross-encodes precomputed uni-modal features.
pub fn cross_encode(
    q_self: &Array2<f64>,
    v_self: &Array2<f64>,
    params: &Parameters,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<CrossModalOutput, ModelError> {
    for (what, m) in [("query", q_self), ("video", v_self)] {
        if m.nrows() == 0 {
            return Err(ModelError::Empty(what));
        }
        if m.ncols() != cfg.d_model {
            return Err(ModelError::DimMismatch {
                what: "uni-modal feature",
                expected: cfg.d_model,
                found: m.ncols(),
            });
        }
    }
    let mut g = Graph::new();
    let bound = BoundParams::frozen(&mut g, params);
    let q = g.constant(q_self.clone());
    let v = g.constant(v_self.clone());
    let mut ctx = Ctx {
        g: &mut g,
        p: &bound,
        cfg,
        mode,
        rng,
    };
    let out = encoder::cross_encode(&mut ctx, q, v);
    Ok(read_output(&g, out))
}

pub fn read_output(g: &Graph, out: CrossModalVars) -> CrossModalOutput {
    CrossModalOutput {
        word_features: g.value(out.words).clone(),
        frame_features: g.value(out.frames).clone(),
        guidance_attention: g.value(out.guidance).row(0).to_vec(),
    }
}

/// Runs every example through the model independently.
pub fn forward(
    batch: &[(&QueryTokens, &VideoFeatures)],
    params: &Parameters,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Vec<CrossModalOutput>, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut out = Vec::with_capacity(batch.len());
    for (tokens, video) in batch {
        let mut g = Graph::new();
        let bound = BoundParams::frozen(&mut g, params);
        let vars = forward_example(&mut g, &bound, cfg, mode, rng, tokens, video)?;
        out.push(read_output(&g, vars));
    }
    Ok(out)
}

/// Exact reverse-mode gradient of the scalar `loss` for every bound
/// parameter; parameters the loss does not reach get zeros.
pub fn gradients(
    graph: &Graph,
    loss: Var,
    bound: &BoundParams,
    params: &Parameters,
) -> Result<Parameters, ModelError> {
    let value = graph.scalar(loss);
    if !value.is_finite() {
        return Err(ModelError::NonFiniteLoss(value));
    }
    let mut grads = graph.backward(loss);
    let mut out = params.zeros_like();
    for (name, &var) in bound.iter() {
        if let (Some(g), Some(slot)) = (grads.take(var), out.get_mut(name)) {
            slot.value = g;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            layers: 2,
            d_ff: 16,
            dropout: 0.1,
            d_feat: 5,
            d_word: 3,
            max_positions: 10,
            guidance_layer: GuidanceLayer::Last,
        }
    }

    fn tokens(n: usize, seed: u64) -> QueryTokens {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        QueryTokens {
            tokens: (0..n).map(|i| format!("w{i}")).collect(),
            embeddings: Array2::from_shape_simple_fn((n, 3), || rng.gen_range(-1.0..1.0)),
        }
    }

    fn video(n: usize, seed: u64) -> VideoFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        VideoFeatures::new(
            "v",
            Array2::from_shape_simple_fn((n, 5), || rng.gen_range(-1.0f32..1.0)),
            n as f64,
        )
        .unwrap()
    }

    fn params() -> Parameters {
        init_params(&tiny(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn query_shape_single_word() {
        let q = encode_query(&tokens(1, 1), &params(), &tiny(), Mode::Eval, &mut rng()).unwrap();
        assert_eq!(q.dim(), (1, 8));
    }

    #[test]
    fn zero_is_gru_fixed_point() {
        let cfg = tiny();
        let zero = params().zeros_like();
        let t = QueryTokens {
            tokens: vec!["a".into(), "b".into()],
            embeddings: Array2::zeros((2, 3)),
        };
        let q = encode_query(&t, &zero, &cfg, Mode::Eval, &mut rng()).unwrap();
        assert!(q.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn query_too_long_is_error() {
        assert!(matches!(
            encode_query(&tokens(11, 1), &params(), &tiny(), Mode::Eval, &mut rng()),
            Err(ModelError::TooLong { len: 11, max: 10 })
        ));
    }

    #[test]
    fn eval_is_repeatable_train_is_not() {
        let (p, c) = (params(), tiny());
        let t = tokens(3, 2);
        let a = encode_query(&t, &p, &c, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = encode_query(&t, &p, &c, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        let v = video(6, 3);
        let x = encode_video(&v, &p, &c, Mode::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let y = encode_video(&v, &p, &c, Mode::Train, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(x, y);
    }

    #[test]
    fn video_single_frame_attention_is_one() {
        let (out, probs) =
            encode_video_with_attention(&video(1, 4), &params(), &tiny(), Mode::Eval, &mut rng())
                .unwrap();
        assert_eq!(out.dim(), (1, 8));
        for layer in probs {
            for p in layer {
                assert_eq!(p.dim(), (1, 1));
                assert_eq!(p[[0, 0]], 1.0);
            }
        }
    }

    #[test]
    fn video_attention_rows_are_stochastic() {
        let (out, probs) =
            encode_video_with_attention(&video(7, 5), &params(), &tiny(), Mode::Eval, &mut rng())
                .unwrap();
        assert_eq!(out.dim(), (7, 8));
        for p in probs.iter().flatten() {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn video_dim_mismatch() {
        let v = VideoFeatures::new("v", Array2::zeros((3, 4)), 3.0).unwrap();
        assert!(matches!(
            encode_video(&v, &params(), &tiny(), Mode::Eval, &mut rng()),
            Err(ModelError::DimMismatch { .. })
        ));
    }

    #[test]
    fn cross_single_frame_guidance() {
        let (p, c) = (params(), tiny());
        let q = Array2::from_elem((3, 8), 0.3);
        let v = Array2::from_elem((1, 8), -0.2);
        let out = cross_encode(&q, &v, &p, &c, Mode::Eval, &mut rng()).unwrap();
        assert_eq!(out.guidance_attention, vec![1.0]);
    }

    #[test]
    fn guidance_is_distribution_and_word_order_invariant() {
        let (p, c) = (params(), tiny());
        let mut r = ChaCha8Rng::seed_from_u64(9);
        use rand::Rng;
        let q = Array2::from_shape_simple_fn((4, 8), || r.gen_range(-1.0..1.0));
        let v = Array2::from_shape_simple_fn((6, 8), || r.gen_range(-1.0..1.0));
        let out = cross_encode(&q, &v, &p, &c, Mode::Eval, &mut rng()).unwrap();
        let s: f64 = out.guidance_attention.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(out.guidance_attention.iter().all(|&a| a >= 0.0));

        let perm = [2usize, 0, 3, 1];
        let q_perm = ndarray::stack(ndarray::Axis(0), &perm.map(|i| q.row(i))).unwrap();
        let out_perm = cross_encode(&q_perm, &v, &p, &c, Mode::Eval, &mut rng()).unwrap();
        for (a, b) in out
            .guidance_attention
            .iter()
            .zip(&out_perm.guidance_attention)
        {
            assert!((a - b).abs() < 1e-6);
        }
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in out_perm
                .word_features
                .row(k)
                .iter()
                .zip(out.word_features.row(i))
            {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn forward_composes_and_is_equivariant() {
        let (p, c) = (params(), tiny());
        let (t1, v1, t2, v2) = (tokens(2, 1), video(5, 1), tokens(4, 2), video(3, 2));
        let batch = [(&t1, &v1), (&t2, &v2)];
        let out = forward(&batch, &p, &c, Mode::Eval, &mut rng()).unwrap();
        let swapped = forward(&[(&t2, &v2), (&t1, &v1)], &p, &c, Mode::Eval, &mut rng()).unwrap();
        assert_eq!(out[0], swapped[1]);
        assert_eq!(out[1], swapped[0]);

        let q = encode_query(&t1, &p, &c, Mode::Eval, &mut rng()).unwrap();
        let v = encode_video(&v1, &p, &c, Mode::Eval, &mut rng()).unwrap();
        let composed = cross_encode(&q, &v, &p, &c, Mode::Eval, &mut rng()).unwrap();
        let single = forward(&[(&t1, &v1)], &p, &c, Mode::Eval, &mut rng()).unwrap();
        assert_eq!(single[0], composed);
        assert_eq!(single[0], out[0]);
        assert!(matches!(
            forward(&[], &p, &c, Mode::Eval, &mut rng()),
            Err(ModelError::EmptyBatch)
        ));
    }

    #[test]
    fn first_layer_guidance_option() {
        let mut c = tiny();
        c.guidance_layer = GuidanceLayer::First;
        let p = params();
        let (t, v) = (tokens(3, 5), video(4, 5));
        let first = forward(&[(&t, &v)], &p, &c, Mode::Eval, &mut rng()).unwrap();
        let last = forward(&[(&t, &v)], &p, &tiny(), Mode::Eval, &mut rng()).unwrap();
        assert_eq!(first[0].frame_features, last[0].frame_features);
        assert_ne!(first[0].guidance_attention, last[0].guidance_attention);
    }

    #[test]
    fn unreachable_parameter_has_zero_gradient() {
        let (p, c) = (params(), tiny());
        let mut g = Graph::new();
        let bound = BoundParams::trainable(&mut g, &p);
        let t = tokens(2, 1);
        let mut r = rng();
        let mut ctx = Ctx {
            g: &mut g,
            p: &bound,
            cfg: &c,
            mode: Mode::Eval,
            rng: &mut r,
        };
        let words = ctx.g.constant(t.embeddings.clone());
        let q = encoder::encode_query(&mut ctx, words);
        let loss = g.sum_all(q);
        let grads = gradients(&g, loss, &bound, &p).unwrap();
        assert!(grads
            .get("video.proj.weight")
            .unwrap()
            .value
            .iter()
            .all(|&x| x == 0.0));
        assert!(grads
            .get("query.gru0.fwd.w_input")
            .unwrap()
            .value
            .iter()
            .any(|&x| x != 0.0));
    }

    #[test]
    fn linear_path_gradient_doubles() {
        let (p, c) = (params(), tiny());
        let (t, v) = (tokens(2, 1), video(3, 1));
        let grad_for = |k: f64| {
            let mut g = Graph::new();
            let bound = BoundParams::trainable(&mut g, &p);
            let out = forward_example(&mut g, &bound, &c, Mode::Eval, &mut rng(), &t, &v).unwrap();
            let s = g.sum_all(out.frames);
            let loss = g.scale(s, k);
            gradients(&g, loss, &bound, &p).unwrap()
        };
        let (one, two) = (grad_for(1.0), grad_for(2.0));
        for (name, a) in one.iter() {
            let b = two.get(name).unwrap();
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{name}");
            }
        }
    }

    #[test]
    fn non_finite_loss_rejected() {
        let p = params();
        let mut g = Graph::new();
        let bound = BoundParams::trainable(&mut g, &p);
        let bad = g.constant(Array2::from_elem((1, 1), f64::NAN));
        assert!(matches!(
            gradients(&g, bad, &bound, &p),
            Err(ModelError::NonFiniteLoss(_))
        ));
    }
}
