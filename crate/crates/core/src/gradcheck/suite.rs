//! Randomized finite-difference checks of every differentiable block.
//!
//! Each instance draws small random shapes and inputs, back-propagates a fixed
//! random projection `L = Σ R ⊙ y` (or the loss itself for NT-Xent and the
//! full model), and compares every parameter and input coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::finite_diff_check;
use crate::audio::AudioEncoder;
use crate::error::{Error, Result};
use crate::fusion::{GatedEmbedding, MidFusion};
use crate::model::{FusionMode, HybridModel, ModelConfig, PairBatch};
use crate::nn::{EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention, SeqLayout, TransformerStack};
use crate::similarity::{cosine_backward, cosine_forward};
use crate::tensor::{Module, Parameter, Tensor2D};
use crate::text::{BlockShape, TextEncoder, TokenSequence, Vocabulary, CLS};
use crate::train::nt_xent_loss;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Operations covered by [`check_op`].
pub const OPS: [&str; 15] = [
    "linear",
    "layer_norm",
    "attention",
    "feed_forward",
    "encoder_layer",
    "transformer_stack",
    "gated_embedding",
    "cosine",
    "nt_xent",
    "mid_fusion_score",
    "text_encoder",
    "audio_encoder",
    "model_content",
    "model_late",
    "model_mid",
];

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub coordinates: usize,
    /// Largest relative error over all instances and coordinates.
    pub worst: f64,
}

fn nth<M: Module>(m: &mut M, i: usize) -> &mut Parameter {
    m.params_mut().swap_remove(i)
}

fn selector<M, F: Fn(&mut M) -> &mut Parameter>(f: F) -> F {
    f
}

/// Fills gradients via `analytic`, then finite-differences every coordinate
/// of every parameter of `m`. Returns the worst relative error.
pub fn check_module<M: Module>(
    m: &mut M,
    analytic: impl FnOnce(&mut M) -> Result<()>,
    loss: impl Fn(&M) -> Result<f64>,
    h: f64,
) -> Result<f64> {
    m.zero_grad();
    analytic(m)?;
    let n = m.params_mut().len();
    let mut worst = 0.0_f64;
    for i in 0..n {
        worst = worst.max(finite_diff_check(m, selector(move |m: &mut M| nth(m, i)), &loss, h)?);
    }
    Ok(worst)
}

/// A layer together with its differentiable inputs.
struct Harness<L> {
    layer: L,
    inputs: Vec<Parameter>,
}

impl<L: Module> Module for Harness<L> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.layer.visit_params(f);
        for p in &self.inputs {
            f(p);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Parameter)) {
        self.layer.visit_params_mut(f);
        for p in &mut self.inputs {
            f(p);
        }
    }
}

impl<L> Harness<L> {
    fn new(layer: L, inputs: Vec<Tensor2D>) -> Self {
        let inputs = inputs
            .into_iter()
            .enumerate()
            .map(|(i, t)| Parameter::new(format!("input{i}"), t))
            .collect();
        Self { layer, inputs }
    }

    fn x(&self, i: usize) -> &Tensor2D {
        &self.inputs[i].value
    }
}

fn project(y: &Tensor2D, r: &Tensor2D) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn randomize<M: Module, R: Rng>(m: &mut M, std: f64, rng: &mut R) {
    m.visit_params_mut(&mut |p| {
        let (r, c) = p.shape();
        p.value = Tensor2D::randn(r, c, std, rng);
    });
}

fn layer_check<L: Module>(
    layer: L,
    inputs: Vec<Tensor2D>,
    forward: impl Fn(&Harness<L>) -> Result<Tensor2D>,
    backward: impl FnOnce(&mut Harness<L>, &Tensor2D) -> Result<()>,
    rng: &mut ChaCha8Rng,
    h: f64,
) -> Result<(f64, usize)> {
    let mut harness = Harness::new(layer, inputs);
    let y = forward(&harness)?;
    let r = Tensor2D::randn(y.rows(), y.cols(), 1.0, rng);
    let coords = harness.num_params();
    let worst = check_module(
        &mut harness,
        |m| backward(m, &r),
        |m| Ok(project(&forward(m)?, &r)),
        h,
    )?;
    Ok((worst, coords))
}

fn random_layout(rng: &mut ChaCha8Rng, batch: usize, max_len: usize) -> SeqLayout {
    let lengths: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=max_len)).collect();
    SeqLayout::from_lengths(&lengths)
}

fn small_shape(rng: &mut ChaCha8Rng) -> BlockShape {
    BlockShape {
        width: 4,
        depth: rng.random_range(1..=2),
        heads: 2,
        ff_hidden: 6,
    }
}

fn random_sequences(rng: &mut ChaCha8Rng, batch: usize, vocab: usize) -> Result<Vec<TokenSequence>> {
    (0..batch)
        .map(|_| {
            let len = rng.random_range(0..=4);
            let ids = std::iter::once(CLS)
                .chain((0..len).map(|_| rng.random_range(1..vocab)))
                .collect();
            TokenSequence::new(ids)
        })
        .collect()
}

fn random_frames(rng: &mut ChaCha8Rng, batch: usize, width: usize) -> Vec<Tensor2D> {
    (0..batch)
        .map(|_| Tensor2D::randn(rng.random_range(1..=4), width, 1.0, rng))
        .collect()
}

fn one_instance(op: &str, rng: &mut ChaCha8Rng, h: f64) -> Result<(f64, usize)> {
    match op {
        "linear" => {
            let (i, o, n) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=4));
            let layer = Linear::new("lin", i, o, rng);
            let x = Tensor2D::randn(n, i, 1.0, rng);
            layer_check(
                layer,
                vec![x],
                |m| m.layer.forward(m.x(0)),
                |m, r| {
                    let x = m.inputs[0].value.clone();
                    let dx = m.layer.backward(&x, r);
                    m.inputs[0].grad.add_assign(&dx);
                    Ok(())
                },
                rng,
                h,
            )
        }
        "layer_norm" => {
            let (d, n) = (rng.random_range(2..=6), rng.random_range(1..=4));
            let mut layer = LayerNorm::new("ln", d);
            randomize(&mut layer, 1.0, rng);
            let x = Tensor2D::randn(n, d, 2.0, rng);
            layer_check(
                layer,
                vec![x],
                |m| Ok(m.layer.forward(m.x(0))?.0),
                |m, r| {
                    let (_, cache) = m.layer.forward(m.x(0))?;
                    let dx = m.layer.backward(&cache, r);
                    m.inputs[0].grad.add_assign(&dx);
                    Ok(())
                },
                rng,
                h,
            )
        }
        "attention" => {
            let d = 2 * rng.random_range(1..=3);
            let layer = MultiHeadAttention::new("attn", d, 2, rng)?;
            let batch = rng.random_range(1..=3);
            let layout = random_layout(rng, batch, 4);
            let x = Tensor2D::randn(layout.rows(), d, 1.0, rng);
            layer_check(
                layer,
                vec![x],
                |m| Ok(m.layer.forward(m.x(0), &layout)?.0),
                |m, r| {
                    let (_, cache) = m.layer.forward(m.x(0), &layout)?;
                    let dx = m.layer.backward(&cache, r);
                    m.inputs[0].grad.add_assign(&dx);
                    Ok(())
                },
                rng,
                h,
            )
        }
        "feed_forward" => {
            let (d, hid, n) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=4));
            let layer = FeedForward::new("ff", d, hid, rng);
            let x = Tensor2D::randn(n, d, 1.0, rng);
            layer_check(
                layer,
                vec![x],
                |m| Ok(m.layer.forward(m.x(0))?.0),
                |m, r| {
                    let (_, cache) = m.layer.forward(m.x(0))?;
                    let dx = m.layer.backward(&cache, r);
                    m.inputs[0].grad.add_assign(&dx);
                    Ok(())
                },
                rng,
                h,
            )
        }
        "encoder_layer" => {
            let mut layer = EncoderLayer::new("enc", 4, 2, 6, rng)?;
            randomize(&mut layer.norm_attn, 1.0, rng);
            let layout = random_layout(rng, 2, 4);
            let x = Tensor2D::randn(layout.rows(), 4, 1.0, rng);
            layer_check(
                layer,
                vec![x],
                |m| Ok(m.layer.forward(m.x(0), &layout)?.0),
                |m, r| {
                    let (_, cache) = m.layer.forward(m.x(0), &layout)?;
                    let dx = m.layer.backward(&cache, r);
                    m.inputs[0].grad.add_assign(&dx);
                    Ok(())
                },
                rng,
                h,
            )
        }
        "transformer_stack" => {
            let layer = TransformerStack::new("stack", 2, 4, 2, 6, rng)?;
            let layout = random_layout(rng, 2, 3);
            let x = Tensor2D::randn(layout.rows(), 4, 1.0, rng);
            layer_check(
                layer,
                vec![x],
                |m| Ok(m.layer.forward(m.x(0), &layout)?.0),
                |m, r| {
                    let (_, caches) = m.layer.forward(m.x(0), &layout)?;
                    let dx = m.layer.backward(&caches, r);
                    m.inputs[0].grad.add_assign(&dx);
                    Ok(())
                },
                rng,
                h,
            )
        }
        "gated_embedding" => {
            let (d, n) = (rng.random_range(2..=5), rng.random_range(1..=3));
            let layer = GatedEmbedding::new("gem", d, rng);
            let q = Tensor2D::randn(n, d, 1.0, rng);
            layer_check(
                layer,
                vec![q],
                |m| Ok(m.layer.forward(m.x(0))?.0),
                |m, r| {
                    let (_, cache) = m.layer.forward(m.x(0))?;
                    let dq = m.layer.backward(&cache, r);
                    m.inputs[0].grad.add_assign(&dq);
                    Ok(())
                },
                rng,
                h,
            )
        }
        "cosine" => {
            let d = rng.random_range(2..=5);
            let a = Tensor2D::randn(rng.random_range(1..=3), d, 1.0, rng);
            let b = Tensor2D::randn(rng.random_range(1..=3), d, 1.0, rng);
            layer_check(
                Parameter::zeros("unused", 0, 0),
                vec![a, b],
                |m| Ok(cosine_forward(m.x(0), m.x(1))?.0),
                |m, r| {
                    let (_, cache) = cosine_forward(m.x(0), m.x(1))?;
                    let (da, db) = cosine_backward(&cache, r);
                    m.inputs[0].grad.add_assign(&da);
                    m.inputs[1].grad.add_assign(&db);
                    Ok(())
                },
                rng,
                h,
            )
        }
        "nt_xent" => {
            let b = rng.random_range(2..=5);
            let tau = rng.random_range(0.05..1.0);
            let sim = Tensor2D::randn(b, b, 0.5, rng).map(|v| v.clamp(-1.0, 1.0));
            let mut harness = Harness::new(Parameter::zeros("unused", 0, 0), vec![sim]);
            let coords = harness.num_params();
            let worst = check_module(
                &mut harness,
                |m| {
                    let (_, g) = nt_xent_loss(m.x(0), tau)?;
                    m.inputs[0].grad.add_assign(&g);
                    Ok(())
                },
                |m| Ok(nt_xent_loss(m.x(0), tau)?.0),
                h,
            )?;
            Ok((worst, coords))
        }
        "mid_fusion_score" => {
            let shape = small_shape(rng);
            let frame_width = 3;
            let audio = AudioEncoder::new("audio", frame_width, shape, rng)?;
            let mut mid = MidFusion::new("mid", shape, rng)?;
            randomize(&mut mid.gem_audio, 0.5, rng);
            randomize(&mut mid.gem_meta, 0.5, rng);
            let items = rng.random_range(1..=3);
            let frames = random_frames(rng, items, frame_width);
            let q = Tensor2D::randn(rng.random_range(1..=3), shape.width, 1.0, rng);
            let meta = Tensor2D::randn(items, shape.width, 1.0, rng);
            let forward = |m: &Harness<(AudioEncoder, MidFusion)>| -> Result<Tensor2D> {
                let refs: Vec<&Tensor2D> = frames.iter().collect();
                let (out, _) = m.layer.0.forward(&refs)?;
                let (tokens, _) = m.layer.1.item_tokens(&out, m.x(1))?;
                let (views, _) = m.layer.1.query_views(m.x(0))?;
                Ok(MidFusion::score_matrix(&views, &tokens)?.0)
            };
            layer_check(
                (audio, mid),
                vec![q, meta],
                forward,
                |m, r| {
                    let refs: Vec<&Tensor2D> = frames.iter().collect();
                    let (out, audio_cache) = m.layer.0.forward(&refs)?;
                    let (tokens, tokens_cache) = m.layer.1.item_tokens(&out, m.x(1))?;
                    let (views, views_cache) = m.layer.1.query_views(m.x(0))?;
                    let (_, score_cache) = MidFusion::score_matrix(&views, &tokens)?;
                    let g = MidFusion::score_matrix_backward(&score_cache, r);
                    let dq = m.layer.1.query_views_backward(&views_cache, &g.query_audio, &g.query_meta, &g.weights);
                    let (d_seq, d_meta) = m.layer.1.item_tokens_backward(&tokens_cache, &g.item_audio, &g.item_meta);
                    m.layer.0.backward(&audio_cache, None, Some(&d_seq));
                    m.inputs[0].grad.add_assign(&dq);
                    m.inputs[1].grad.add_assign(&d_meta);
                    Ok(())
                },
                rng,
                h,
            )
        }
        "text_encoder" => {
            let vocab = 7;
            let enc = TextEncoder::new("text", vocab, small_shape(rng), rng)?;
            let batch = rng.random_range(1..=3);
            let seqs = random_sequences(rng, batch, vocab)?;
            let forward = |m: &Harness<TextEncoder>| -> Result<Tensor2D> {
                let refs: Vec<&TokenSequence> = seqs.iter().collect();
                Ok(m.layer.forward(&refs)?.0)
            };
            layer_check(
                enc,
                vec![],
                forward,
                |m, r| {
                    let refs: Vec<&TokenSequence> = seqs.iter().collect();
                    let (_, cache) = m.layer.forward(&refs)?;
                    m.layer.backward(&cache, r);
                    Ok(())
                },
                rng,
                h,
            )
        }
        "audio_encoder" => {
            let frame_width = rng.random_range(1..=4);
            let enc = AudioEncoder::new("audio", frame_width, small_shape(rng), rng)?;
            let mut enc = enc;
            randomize(&mut enc.global_bias, 0.5, rng);
            let batch = rng.random_range(1..=3);
            let frames = random_frames(rng, batch, frame_width);
            let forward = |m: &Harness<AudioEncoder>| -> Result<Tensor2D> {
                let refs: Vec<&Tensor2D> = frames.iter().collect();
                Ok(m.layer.forward(&refs)?.0.pooled)
            };
            layer_check(
                enc,
                vec![],
                forward,
                |m, r| {
                    let refs: Vec<&Tensor2D> = frames.iter().collect();
                    let (_, cache) = m.layer.forward(&refs)?;
                    m.layer.backward(&cache, Some(r), None);
                    Ok(())
                },
                rng,
                h,
            )
        }
        "model_content" | "model_late" | "model_mid" => {
            let mode = match op {
                "model_content" => FusionMode::Content,
                "model_late" => FusionMode::Late,
                _ => FusionMode::Mid,
            };
            let config = ModelConfig {
                mode,
                width: 4,
                heads: 2,
                text_depth: 1,
                audio_depth: 1,
                fusion_depth: 1,
                ff_mult: 2,
                frame_width: 3,
                shared_text_encoder: rng.random_bool(0.5),
                late_unit_norm: rng.random_bool(0.5),
            };
            let vocab = Vocabulary::build(["a b c d e"]);
            let mut model = HybridModel::new(config, vocab.clone(), rng.random())?;
            let b = rng.random_range(2..=3);
            let batch = PairBatch {
                queries: random_sequences(rng, b, vocab.len())?,
                frames: random_frames(rng, b, 3),
                metadata: random_sequences(rng, b, vocab.len())?,
            };
            let tau = rng.random_range(0.1..1.0);
            let coords = model.num_params();
            let worst = check_module(
                &mut model,
                |m| {
                    let (s, cache) = m.forward_batch(&batch)?;
                    let (_, ds) = nt_xent_loss(&s, tau)?;
                    m.backward_batch(&cache, &ds);
                    Ok(())
                },
                |m| nt_xent_loss(&m.forward_batch(&batch)?.0, tau).map(|(l, _)| l),
                h,
            )?;
            Ok((worst, coords))
        }
        other => Err(Error::Config(format!("unknown gradient-check op `{other}`"))),
    }
}

/// Runs `instances` random instances of `op`; instance `i` is seeded with
/// `seed + i`.
pub fn check_op(op: &str, instances: usize, seed: u64, h: f64) -> Result<OpReport> {
    let name = OPS
        .iter()
        .copied()
        .find(|o| *o == op)
        .ok_or_else(|| Error::Config(format!("unknown gradient-check op `{op}`")))?;
    let mut worst = 0.0_f64;
    let mut coordinates = 0;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let (w, c) = one_instance(name, &mut rng, h)?;
        worst = worst.max(w);
        coordinates += c;
    }
    Ok(OpReport {
        op: name,
        instances,
        coordinates,
        worst,
    })
}

pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<OpReport>> {
    OPS.iter().map(|op| check_op(op, instances, seed, DEFAULT_STEP)).collect()
}
