use fusebed::data::{generate_synthetic, metadata_to_text, Item, MetadataKind, SynthConfig};
use fusebed::eval::{
    build_index, evaluate_items, map_at_k, queries_for, rank_items, rank_of, ranked_positions, recall_at_k,
    score_all, Metrics,
};
use fusebed::fusion::late_fuse;
use fusebed::model::{FusionMode, HybridModel, ItemRepr, ModelConfig};
use fusebed::similarity::cosine_sim_matrix;
use fusebed::tensor::Tensor2D;
use fusebed::train::build_vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(mode: FusionMode) -> ModelConfig {
    ModelConfig {
        mode,
        width: 8,
        heads: 2,
        text_depth: 1,
        audio_depth: 1,
        fusion_depth: 1,
        ff_mult: 2,
        frame_width: 4,
        ..ModelConfig::default()
    }
}

fn corpus() -> Vec<Item> {
    let cfg = SynthConfig {
        n_items: 24,
        test_items: 12,
        n_topics: 4,
        frame_width: 4,
        min_frames: 2,
        max_frames: 5,
        captions_per_item: 3,
        seed: 8,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg).unwrap().items().to_vec()
}

fn model(mode: FusionMode, items: &[Item], seed: u64) -> HybridModel {
    let refs: Vec<&Item> = items.iter().collect();
    HybridModel::new(config(mode), build_vocabulary(&refs, mode), seed).unwrap()
}

/// Rank by sorting (score desc, position asc) pairs.
fn oracle_rank(scores: &[f64], target: usize) -> usize {
    let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    1 + pairs.iter().position(|p| p.1 == target).unwrap()
}

#[test]
fn ranks_match_a_sorting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..300 {
        let n = rng.random_range(1..40);
        // Small integer scores force frequent ties.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
        let order = ranked_positions(&scores);
        for target in 0..n {
            let want = oracle_rank(&scores, target);
            assert_eq!(rank_of(&scores, target), want, "case {case}");
            assert_eq!(order[want - 1], target, "case {case}");
        }
    }
}

#[test]
fn single_item_and_self_match() {
    assert_eq!(rank_of(&[0.3], 0), 1);
    assert_eq!(map_at_k(&[1], 10).unwrap(), 1.0);
    // The target wins ties against later items and loses them to earlier ones.
    assert_eq!(rank_of(&[0.5, 0.5, 0.5], 0), 1);
    assert_eq!(rank_of(&[0.5, 0.5, 0.5], 2), 3);

    let items = corpus();
    let m = model(FusionMode::Content, &items, 1);
    let one = vec![&items[0]];
    let run = evaluate_items(&m, &one, MetadataKind::Cs, 10).unwrap();
    assert_eq!(run.n_items, 1);
    assert_eq!(run.metrics.map, 1.0);
    assert_eq!(run.metrics.r1, 1.0);
}

#[test]
fn metric_chain_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let ranks: Vec<usize> = (0..rng.random_range(1..30)).map(|_| rng.random_range(1..25)).collect();
        let m = Metrics::from_ranks(&ranks, 10).unwrap();
        assert!(m.r1 <= m.r5 && m.r5 <= m.r10);
        assert!(m.map <= m.r10 + 1e-15);
        assert!(m.map >= m.r1 - 1e-15);
        assert_eq!(m.r10, recall_at_k(&ranks, 10).unwrap());
    }
}

#[test]
fn rebuilding_the_index_is_bitwise_identical() {
    let items = corpus();
    let refs: Vec<&Item> = items.iter().collect();
    for mode in FusionMode::ALL {
        let m = model(mode, &items, 4);
        let a = build_index(&refs, &m, MetadataKind::Cs).unwrap();
        let b = build_index(&refs, &m, MetadataKind::Cs).unwrap();
        assert_eq!(a.ids(), b.ids());
        assert!(a.entries() == b.entries(), "mode {mode}");
        let q = &items[3].captions[0];
        let (x, y) = (score_all(&a, &m, q).unwrap(), score_all(&b, &m, q).unwrap());
        assert!(x.iter().zip(&y).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn late_entries_are_the_fused_sum() {
    let items = corpus();
    let refs: Vec<&Item> = items.iter().collect();
    let m = model(FusionMode::Late, &items, 5);
    let index = build_index(&refs, &m, MetadataKind::Cs).unwrap();
    let audio = m.audio.as_ref().unwrap();
    for (item, entry) in items.iter().zip(index.entries()) {
        let a = audio.forward(&[&item.frames]).unwrap().0.pooled;
        let meta = m.tokenize(&metadata_to_text(item, MetadataKind::Cs).unwrap());
        let t = m.meta_encoder().forward(&[&meta]).unwrap().0;
        assert_eq!(entry, &ItemRepr::Vector(late_fuse(&a, &t).unwrap()));
    }
}

/// Scores every (query, item) pair from encoder outputs directly.
fn direct_scores(m: &HybridModel, items: &[&Item], query: &str, kind: MetadataKind) -> Vec<f64> {
    let q = m.text.forward(&[&m.tokenize(query)]).unwrap().0;
    items
        .iter()
        .map(|item| {
            let audio = || m.audio.as_ref().unwrap().forward(&[&item.frames]).unwrap().0.pooled;
            let meta = || {
                let seq = m.tokenize(&metadata_to_text(item, kind).unwrap());
                m.meta_encoder().forward(&[&seq]).unwrap().0
            };
            let v: Tensor2D = match m.mode() {
                FusionMode::Content => audio(),
                FusionMode::Metadata => meta(),
                FusionMode::Late => audio().add(&meta()).unwrap(),
                FusionMode::Mid => {
                    let out = m.audio.as_ref().unwrap().forward(&[&item.frames]).unwrap().0;
                    return fusebed::fusion::mid_fuse_score(&out.sequence(0), &meta(), &q, m.mid.as_ref().unwrap())
                        .unwrap();
                }
            };
            cosine_sim_matrix(&q, &v).unwrap().get(0, 0)
        })
        .collect()
}

#[test]
fn evaluation_matches_an_index_free_oracle() {
    let items = corpus();
    let ds_test: Vec<&Item> = items[12..].iter().collect();
    for mode in FusionMode::ALL {
        for kind in [MetadataKind::Cs, MetadataKind::Fs] {
            let m = model(mode, &items, 6);
            let mut ranks = Vec::new();
            for (pos, item) in ds_test.iter().enumerate() {
                for c in item.query_captions(kind) {
                    let scores = direct_scores(&m, &ds_test, c, kind);
                    ranks.push(oracle_rank(&scores, pos));
                }
            }
            let run = evaluate_items(&m, &ds_test, kind, 10).unwrap();
            assert_eq!(run.n_queries, queries_for(&ds_test, kind).len());
            let want = Metrics::from_ranks(&ranks, 10).unwrap();
            assert!((run.metrics.map - want.map).abs() < 1e-12, "{mode} {kind}");
            assert_eq!((run.metrics.r1, run.metrics.r5, run.metrics.r10), (want.r1, want.r5, want.r10));
        }
    }
}

#[test]
fn fs_queries_skip_the_metadata_caption() {
    let items = corpus();
    let refs: Vec<&Item> = items.iter().take(4).collect();
    let cs = queries_for(&refs, MetadataKind::Cs);
    let fs = queries_for(&refs, MetadataKind::Fs);
    assert_eq!(cs.len(), 12);
    assert_eq!(fs.len(), 8);
    for item in &refs {
        let last = item.captions.last().unwrap();
        assert!(!fs.iter().any(|q| &q.text == last && q.target == item.id));
    }
}

#[test]
fn rank_items_returns_the_top_k() {
    let items = corpus();
    let refs: Vec<&Item> = items.iter().collect();
    let m = model(FusionMode::Late, &items, 7);
    let index = build_index(&refs, &m, MetadataKind::Cs).unwrap();
    let q = "t1k2 t1k3";
    let all = score_all(&index, &m, q).unwrap();
    let top = rank_items(&index, q, &m, 5).unwrap();
    assert_eq!(top.len(), 5);
    for (r, hit) in top.iter().enumerate() {
        let pos = index.position(&hit.id).unwrap();
        assert_eq!(rank_of(&all, pos), r + 1);
        assert_eq!(hit.score, all[pos]);
    }
    assert_eq!(rank_items(&index, q, &m, 1000).unwrap().len(), items.len());
    assert!(rank_items(&index, q, &m, 0).is_err());
}

#[test]
fn content_index_ignores_tags() {
    let items = corpus();
    let m = model(FusionMode::Content, &items, 9);
    let mut scrambled = items.clone();
    for it in &mut scrambled {
        it.tags = vec!["something".into(), "else".into()];
    }
    let a: Vec<&Item> = items.iter().collect();
    let b: Vec<&Item> = scrambled.iter().collect();
    let x = build_index(&a, &m, MetadataKind::Cs).unwrap();
    let y = build_index(&b, &m, MetadataKind::Cs).unwrap();
    assert!(x.entries() == y.entries());
}
