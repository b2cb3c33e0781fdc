use fusebed::audio::{embed_frames, pool_with_global_token, AudioEncoder, FrameSequence};
use fusebed::eval::ranked_positions;
use fusebed::fusion::{mid_fuse_score, MidFusion};
use fusebed::nn::{layer_norm, multi_head_attention, softmax_rows, MultiHeadAttention};
use fusebed::similarity::cosine_sim_matrix;
use fusebed::tensor::{Parameter, Tensor2D};
use fusebed::text::{encode_text, tokenize, BlockShape, TextEncoder, Vocabulary, MAX_CONTENT_TOKENS};
use fusebed::train::nt_xent_loss;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor2D> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |v| Tensor2D::from_vec(rows, cols, v).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize, scale: f64) -> impl Strategy<Value = Tensor2D> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| matrix(r, c, scale))
}

fn naive_matmul(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
    let mut out = Tensor2D::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

fn shape(width: usize, depth: usize) -> BlockShape {
    BlockShape {
        width,
        depth,
        heads: 2,
        ff_hidden: 2 * width,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(x in sized_matrix(4, 6, 30.0), shift in -50.0..50.0f64) {
        let p = softmax_rows(&x);
        let q = softmax_rows(&x.map(|v| v + shift));
        for r in 0..p.rows() {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(p.max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn cosine_is_scale_invariant_and_symmetric(
        (a, b) in (1..4usize, 1..4usize, 1..6usize).prop_flat_map(|(n, m, d)| (matrix(n, d, 5.0), matrix(m, d, 5.0))),
        c in 0.01..100.0f64,
        row in 0..4usize,
    ) {
        prop_assume!(a.data().iter().any(|v| *v != 0.0) && b.data().iter().any(|v| *v != 0.0));
        let base = match cosine_sim_matrix(&a, &b) {
            Ok(s) => s,
            Err(_) => return Ok(()),
        };
        let mut scaled = a.clone();
        let r = row % a.rows();
        scaled.row_mut(r).iter_mut().for_each(|v| *v *= c);
        prop_assert!(cosine_sim_matrix(&scaled, &b).unwrap().max_abs_diff(&base) < 1e-12);
        prop_assert_eq!(cosine_sim_matrix(&b, &a).unwrap(), base.transpose());
    }

    #[test]
    fn layer_norm_standardizes_rows(x in sized_matrix(4, 8, 100.0)) {
        prop_assume!(x.cols() >= 2);
        let d = x.cols();
        let gamma = Parameter::new("g", Tensor2D::filled(1, d, 1.0));
        let beta = Parameter::zeros("b", 1, d);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            // eps/var bounds the deviation of the output variance from 1.
            prop_assume!(var >= 10.0);
            let out = y.row(r);
            let m = out.iter().sum::<f64>() / d as f64;
            let v = out.iter().map(|o| (o - m).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(m.abs() < 1e-6);
            prop_assert!((v - 1.0).abs() < 1e-6, "variance {v}");
        }
    }

    #[test]
    fn matmul_matches_triple_loop(
        (a, b) in (1..7usize, 1..7usize, 1..7usize).prop_flat_map(|(n, k, m)| (matrix(n, k, 3.0), matrix(k, m, 3.0)))
    ) {
        prop_assert!(a.matmul(&b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        prop_assert!(a.transpose().matmul_tn(&b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        prop_assert!(a.matmul_nt(&b.transpose()).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn nt_xent_is_non_negative(sim in (2..6usize).prop_flat_map(|b| matrix(b, b, 1.0)), tau in 0.05..2.0f64) {
        let (loss, _) = nt_xent_loss(&sim, tau).unwrap();
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn uniform_similarities_give_ln_b(b in 2..8usize, v in -1.0..1.0f64) {
        let (loss, _) = nt_xent_loss(&Tensor2D::filled(b, b, v), 0.05).unwrap();
        prop_assert!((loss - (b as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ranking_ignores_query_and_item_scale(
        (q, items) in (1..30usize, 1..6usize).prop_flat_map(|(n, d)| (matrix(1, d, 2.0), matrix(n, d, 2.0))),
        c in 0.001..1000.0f64,
    ) {
        prop_assume!(q.data().iter().any(|v| *v != 0.0));
        prop_assume!((0..items.rows()).all(|r| items.row(r).iter().any(|v| *v != 0.0)));
        let base = ranked_positions(cosine_sim_matrix(&q, &items).unwrap().row(0));
        let by_query = ranked_positions(cosine_sim_matrix(&q.scale(c), &items).unwrap().row(0));
        let by_items = ranked_positions(cosine_sim_matrix(&q, &items.scale(c)).unwrap().row(0));
        prop_assert_eq!(&base, &by_query);
        prop_assert_eq!(&base, &by_items);
    }
}

/// Multi-head attention written out independently: masked keys are dropped
/// from the sum rather than given a large negative logit.
fn naive_attention(x: &Tensor2D, mha: &MultiHeadAttention, mask: &[bool]) -> Tensor2D {
    let lin = |w: &Tensor2D, b: &Tensor2D| {
        let mut y = naive_matmul(x, w);
        for r in 0..y.rows() {
            for c in 0..y.cols() {
                y.set(r, c, y.get(r, c) + b.get(0, c));
            }
        }
        y
    };
    let q = lin(&mha.query.weight.value, &mha.query.bias.value);
    let k = lin(&mha.key.weight.value, &mha.key.bias.value);
    let v = lin(&mha.value.weight.value, &mha.value.bias.value);
    let (n, d) = x.shape();
    let dh = d / mha.heads;
    let mut concat = Tensor2D::zeros(n, d);
    for h in 0..mha.heads {
        for i in 0..n {
            let logits: Vec<Option<f64>> = (0..n)
                .map(|j| {
                    mask[j].then(|| (0..dh).map(|c| q.get(i, h * dh + c) * k.get(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                })
                .collect();
            let z: f64 = logits.iter().flatten().map(|l| l.exp()).sum();
            for c in 0..dh {
                let mut acc = 0.0;
                for (j, l) in logits.iter().enumerate() {
                    if let Some(l) = l {
                        acc += l.exp() / z * v.get(j, h * dh + c);
                    }
                }
                concat.set(i, h * dh + c, acc);
            }
        }
    }
    let mut out = naive_matmul(&concat, &mha.output.weight.value);
    for r in 0..n {
        for c in 0..d {
            out.set(r, c, out.get(r, c) + mha.output.bias.value.get(0, c));
        }
    }
    out
}

#[test]
fn attention_matches_naive_oracle() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2 * (1 + seed as usize % 3);
        let n = 1 + seed as usize % 5;
        let mha = MultiHeadAttention::new("a", d, 2, &mut rng).unwrap();
        let x = Tensor2D::randn(n, d, 1.0, &mut rng);
        let mut mask: Vec<bool> = (0..n).map(|i| (seed as usize + i) % 3 != 0).collect();
        mask[0] = true;
        let got = multi_head_attention(&x, &mha, &mask).unwrap();
        let want = naive_attention(&x, &mha, &mask);
        assert!(got.max_abs_diff(&want) < 1e-10, "seed {seed}");
    }
}

#[test]
fn text_encoding_ignores_tokens_after_the_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::build([words.join(" ")]);
    let enc = TextEncoder::new("t", vocab.len(), shape(8, 1), &mut rng).unwrap();
    let head = words[..MAX_CONTENT_TOKENS].join(" ");
    let a = tokenize(&format!("{head} w33 w34"), &vocab);
    let b = tokenize(&format!("{head} w39 w38 w37 w36"), &vocab);
    assert_eq!(a.len(), MAX_CONTENT_TOKENS + 1);
    assert_eq!(encode_text(&a, &enc).unwrap(), encode_text(&b, &enc).unwrap());
}

fn identity_audio(frame_width: usize, width: usize, seed: u64) -> AudioEncoder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = AudioEncoder::new("audio", frame_width, shape(width, 2), &mut rng).unwrap();
    enc.stack.make_identity();
    enc
}

#[test]
fn degenerate_pooling_is_the_projected_mean() {
    for seed in 0..10 {
        let enc = identity_audio(3, 6, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let t = 1 + seed as usize % 6;
        let frames = Tensor2D::randn(t, 3, 1.0, &mut rng);
        // Oracle: x·W + b + PE, averaged over time, then projected.
        let w = &enc.frame_projection.weight.value;
        let b = &enc.frame_projection.bias.value;
        let mut mean = vec![0.0; 6];
        for p in 0..t {
            for c in 0..6 {
                let i = (c / 2) as f64;
                let angle = p as f64 / 10000f64.powf(2.0 * i / 6.0);
                let pe = if c % 2 == 0 { angle.sin() } else { angle.cos() };
                let e: f64 = (0..3).map(|k| frames.get(p, k) * w.get(k, c)).sum::<f64>() + b.get(0, c) + pe;
                mean[c] += e / t as f64;
            }
        }
        let want = naive_matmul(&Tensor2D::row_vector(&mean), &enc.projection.weight.value)
            .add(&enc.projection.bias.value)
            .unwrap();
        let pooled = enc.forward(&[&frames]).unwrap().0.pooled;
        assert!(pooled.max_abs_diff(&want) < 1e-10, "seed {seed}");
    }
}

#[test]
fn last_transformed_row_projects_to_pooled() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let enc = AudioEncoder::new("audio", 4, shape(8, 2), &mut rng).unwrap();
    for t in 1..6 {
        let frames = FrameSequence::new(Tensor2D::randn(t, 4, 1.0, &mut rng)).unwrap();
        let (pooled, seq) = pool_with_global_token(&embed_frames(&frames, &enc).unwrap(), &enc).unwrap();
        assert_eq!(seq.rows(), t + 1);
        let projected = enc.projection.forward(&seq.select_rows(&[t])).unwrap();
        assert!(projected.max_abs_diff(&pooled) < 1e-12);
    }
}

#[test]
fn frame_order_matters() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let enc = AudioEncoder::new("audio", 4, shape(8, 1), &mut rng).unwrap();
    let frames = Tensor2D::randn(5, 4, 1.0, &mut rng);
    let reversed = frames.select_rows(&[4, 3, 2, 1, 0]);
    let a = enc.forward(&[&frames]).unwrap().0.pooled;
    let b = enc.forward(&[&reversed]).unwrap().0.pooled;
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn mid_score_is_bounded_and_flat_without_metadata_signal() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let width = 6;
    let enc = AudioEncoder::new("audio", 3, shape(width, 1), &mut rng).unwrap();
    let mut mid = MidFusion::new("mid", shape(width, 1), &mut rng).unwrap();
    // Weights pinned to (0, 1): zero weight matrix, bias favoring metadata.
    mid.modality_weights.weight.value.fill(0.0);
    mid.modality_weights.bias.value = Tensor2D::from_rows(&[[-1e3, 1e3]]).unwrap();
    let q = Tensor2D::randn(1, width, 1.0, &mut rng);
    let (wa, wm) = fusebed::fusion::query_modality_weights(&q, &mid).unwrap();
    assert_eq!((wa, wm), (0.0, 1.0));
    let meta = Tensor2D::randn(1, width, 1.0, &mut rng);
    for t in 1..8 {
        let frames = Tensor2D::randn(t, 3, 1.0, &mut rng);
        let out = enc.forward(&[&frames]).unwrap().0;
        assert!(mid_fuse_score(&out.sequence(0), &meta, &q, &mid).unwrap().abs() <= 1.0);
    }
    // The joint stack mixes audio into the metadata token, so the score is
    // only flat once that stack is the identity.
    mid.stack.make_identity();
    let mut scores = Vec::new();
    for t in 1..8 {
        let frames = Tensor2D::randn(t, 3, 1.0, &mut rng);
        let out = enc.forward(&[&frames]).unwrap().0;
        scores.push(mid_fuse_score(&out.sequence(0), &meta, &q, &mid).unwrap());
    }
    assert!(scores.iter().all(|s| *s == scores[0]), "{scores:?}");
}
