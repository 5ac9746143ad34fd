mod common;

use bimatch_core::crossmodal::{
    apply_image_mask, draw_image_mask, draw_text_mask, mask_text, unmask_text, CmeConfig, CrossModal, ImageMask,
    MimMethod, TextMask, CME_PREFIX,
};
use bimatch_core::encoders::{EncoderConfig, EncoderOutput, Special};
use bimatch_core::numkernel::{Graph, ParamStore, Tensor};
use bimatch_core::synthdata::{caption_words, tokenize, Vocab};
use bimatch_core::trainer::model::ID_PREFIX;
use bimatch_core::trainer::{prepare, split_similarity, train, BatchItem, Model};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 16;
const TEXT_LEN: usize = 8;
const EOS: usize = 5;

fn enc_cfg() -> EncoderConfig {
    EncoderConfig {
        hidden_dim: D,
        num_layers: 1,
        num_heads: 2,
        patch_size: 8,
        image_height: 16,
        image_width: 16,
        max_text_len: TEXT_LEN,
        vocab_size: Vocab::captions().len(),
    }
}

fn build(seed: u64) -> (CrossModal, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cme_cfg = CmeConfig {
        num_layers: 2,
        num_heads: 2,
        mim_method: MimMethod::Semantic,
        mlm_head: true,
    };
    let cme = CrossModal::new(&mut store, &cme_cfg, &enc_cfg(), 8, &mut rng).unwrap();
    (cme, store)
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..D).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Image tokens (5 rows, CLS first) and text tokens (EOS at row 5, padding after).
fn inputs(seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (random_rows(&mut rng, 5), random_rows(&mut rng, TEXT_LEN))
}

fn text_out(g: &Graph, t: &Tensor) -> EncoderOutput {
    EncoderOutput {
        tokens: g.constant(t.clone()),
        kind: Special::Text { eos: EOS },
    }
}

fn image_out(g: &Graph, v: &Tensor) -> EncoderOutput {
    EncoderOutput {
        tokens: g.constant(v.clone()),
        kind: Special::Image,
    }
}

fn text_mask() -> TextMask {
    TextMask {
        positions: vec![2, 4],
        labels: vec![7, 9],
    }
}

fn image_mask() -> ImageMask {
    ImageMask { positions: vec![1, 3] }
}

fn mlm_logits(cme: &CrossModal, store: &ParamStore, v: &Tensor, t: &Tensor) -> Tensor {
    let g = Graph::with_params(store);
    let (out, off) = cme.mlm_pass(&g, &image_out(&g, v), &text_out(&g, t)).unwrap();
    let l = cme.mlm_logits(&g, out, off, &text_mask()).unwrap();
    let x = g.value(l).clone();
    x
}

fn mim_logits(cme: &CrossModal, store: &ParamStore, v: &Tensor, t: &Tensor) -> Tensor {
    let g = Graph::with_params(store);
    let masked = apply_image_mask(&g, g.constant(v.clone()), g.param(cme.mask_token), &image_mask()).unwrap();
    let (out, off) = cme.mim_pass(&g, &text_out(&g, t), masked).unwrap();
    let l = cme.mim_logits(&g, out, off, &image_mask()).unwrap();
    let x = g.value(l).clone();
    x
}

/// Adds `by·(k mod 3 − 1)` to entry `k` of a row; a uniform shift would be
/// erased by layer normalization.
fn perturb_row(t: &Tensor, row: usize, by: f64) -> Tensor {
    let mut t = t.clone();
    let d = t.cols();
    for (k, x) in t.data_mut()[row * d..(row + 1) * d].iter_mut().enumerate() {
        *x += by * ((k % 3) as f64 - 1.0);
    }
    t
}

fn differs(a: &Tensor, b: &Tensor) -> bool {
    a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 1e-9)
}

#[test]
fn head_outputs_have_expected_shapes() {
    let (cme, store) = build(0);
    let (v, t) = inputs(1);
    assert_eq!(mlm_logits(&cme, &store, &v, &t).shape(), &[2, Vocab::captions().len()]);
    assert_eq!(mim_logits(&cme, &store, &v, &t).shape(), &[2, 8]);

    let g = Graph::with_params(&store);
    let (out, off) = cme.mlm_pass(&g, &image_out(&g, &v), &text_out(&g, &t)).unwrap();
    assert_eq!(g.shape(out), vec![5 + TEXT_LEN, D]);
    assert_eq!(off, 5);
    let one = TextMask {
        positions: vec![3],
        labels: vec![4],
    };
    let l = cme.mlm_logits(&g, out, off, &one).unwrap();
    assert_eq!(g.shape(l), vec![1, Vocab::captions().len()]);
    let bad = TextMask {
        positions: vec![TEXT_LEN + 3],
        labels: vec![4],
    };
    assert!(cme.mlm_logits(&g, out, off, &bad).is_err());
}

#[test]
fn text_content_reaches_image_predictions() {
    let (cme, store) = build(2);
    let (v, t) = inputs(3);
    let base = mim_logits(&cme, &store, &v, &t);
    for row in 0..=EOS {
        assert!(differs(&base, &mim_logits(&cme, &store, &v, &perturb_row(&t, row, 0.5))), "text row {row}");
    }
    // padding rows are hidden keys
    assert_eq!(base, mim_logits(&cme, &store, &v, &perturb_row(&t, EOS + 1, 0.5)));
}

#[test]
fn image_content_reaches_word_predictions() {
    let (cme, store) = build(4);
    let (v, t) = inputs(5);
    let base = mlm_logits(&cme, &store, &v, &t);
    for row in 0..5 {
        assert!(differs(&base, &mlm_logits(&cme, &store, &perturb_row(&v, row, 0.5), &t)), "image row {row}");
    }
}

#[test]
fn mask_embedding_only_enters_masked_rows() {
    let (cme, mut store) = build(6);
    let (v, t) = inputs(7);
    let masked_input = |store: &ParamStore| {
        let g = Graph::with_params(store);
        let m = apply_image_mask(&g, g.constant(v.clone()), g.param(cme.mask_token), &image_mask()).unwrap();
        let x = g.value(m).clone();
        x
    };
    let before_in = masked_input(&store);
    let before_out = mim_logits(&cme, &store, &v, &t);
    *store.get_mut(cme.mask_token) = perturb_row(store.get(cme.mask_token), 0, 0.3);
    let after_in = masked_input(&store);
    for r in 0..5 {
        let changed = before_in.row(r) != after_in.row(r);
        assert_eq!(changed, image_mask().positions.contains(&r), "row {r}");
    }
    assert!(differs(&before_out, &mim_logits(&cme, &store, &v, &t)));
}

#[test]
fn both_passes_share_blocks() {
    let (cme, mut store) = build(8);
    let (v, t) = inputs(9);
    let (mlm0, mim0) = (mlm_logits(&cme, &store, &v, &t), mim_logits(&cme, &store, &v, &t));
    store.get_mut(cme.blocks[0].fc_in.weight).data_mut()[0] += 0.5;
    assert!(differs(&mlm0, &mlm_logits(&cme, &store, &v, &t)));
    assert!(differs(&mim0, &mim_logits(&cme, &store, &v, &t)));
}

#[test]
fn zeroed_projection_gives_zero_logits() {
    let (cme, mut store) = build(10);
    let (v, t) = inputs(11);
    let head = cme.mlm_head.as_ref().unwrap();
    store.get_mut(head.proj.weight).data_mut().fill(0.0);
    store.get_mut(head.proj.bias).data_mut().fill(0.0);
    assert!(mlm_logits(&cme, &store, &v, &t).data().iter().all(|&x| x == 0.0));
}

#[test]
fn overlong_sequence_is_rejected() {
    let (cme, store) = build(12);
    let g = Graph::with_params(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let seq = g.constant(random_rows(&mut rng, 5 + TEXT_LEN + 1));
    assert!(cme.forward(&g, seq, &[true; 5 + TEXT_LEN + 1]).is_err());
}

/// `[SOS]` + 20 caption words + `[EOS]` + padding.
fn twenty_word_caption(vocab: &Vocab) -> Vec<usize> {
    let words = caption_words();
    let text: Vec<&str> = (0..20).map(|i| words[i % words.len()]).collect();
    tokenize(&text.join(" "), vocab, 24).unwrap()
}

#[test]
fn text_mask_rate_matches_configuration() {
    let vocab = Vocab::captions();
    let ids = twenty_word_caption(&vocab);
    for m_t in [0.15, 0.5] {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut masked = 0;
        for _ in 0..10_000 {
            masked += draw_text_mask(&ids, &vocab, m_t, &mut rng).unwrap().positions.len();
        }
        let rate = masked as f64 / (20.0 * 10_000.0);
        assert!((rate - m_t).abs() <= 0.01, "m_t {m_t}: {rate}");
    }
}

#[test]
fn image_mask_rate_matches_configuration() {
    for m_p in [0.15, 0.3, 0.75] {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut masked = 0;
        for _ in 0..10_000 {
            masked += draw_image_mask(33, m_p, &mut rng).unwrap().positions.len();
        }
        let rate = masked as f64 / (32.0 * 10_000.0);
        assert!((rate - m_p).abs() <= 0.01, "m_p {m_p}: {rate}");
    }
}

#[test]
fn mask_rate_extremes() {
    let vocab = Vocab::captions();
    let ids = twenty_word_caption(&vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..50 {
        assert_eq!(draw_text_mask(&ids, &vocab, 0.0, &mut rng).unwrap().positions.len(), 1);
        assert_eq!(draw_image_mask(33, 0.0, &mut rng).unwrap().positions.len(), 1);
    }
    let all = draw_image_mask(33, 1.0, &mut rng).unwrap();
    assert_eq!(all.positions, (1..33).collect::<Vec<_>>());
    let (masked, plan) = mask_text(&ids, &vocab, 1.0, &mut rng).unwrap();
    assert_eq!(plan.positions, (1..21).collect::<Vec<_>>());
    assert_eq!((masked[0], masked[21]), (vocab.sos(), vocab.eos()));
    assert!(masked[22..].iter().all(|&t| t == vocab.pad()));

    // every non-CLS row equals the mask embedding at m_p = 1
    let g = Graph::new();
    let h = g.constant(random_rows(&mut rng, 33));
    let token = g.constant(Tensor::full(&[1, D], 0.25));
    let out = apply_image_mask(&g, h, token, &all).unwrap();
    let out = g.value(out);
    assert!((1..33).all(|r| out.row(r).iter().all(|&x| x == 0.25)));
    assert_ne!(out.row(0), &[0.25; D]);
}

proptest! {
    #[test]
    fn text_masks_respect_specials_and_round_trip(seed in any::<u64>(), n in 1usize..20, m_t in 0.0f64..=1.0) {
        let vocab = Vocab::captions();
        let words = caption_words();
        let text: Vec<&str> = (0..n).map(|i| words[(i * 7 + seed as usize % 5) % words.len()]).collect();
        let ids = tokenize(&text.join(" "), &vocab, 24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (masked, plan) = mask_text(&ids, &vocab, m_t, &mut rng).unwrap();
        prop_assert!(!plan.positions.is_empty());
        for &p in &plan.positions {
            prop_assert!(p >= 1 && p <= n);
            prop_assert_eq!(masked[p], vocab.mask());
        }
        prop_assert_eq!(unmask_text(&masked, &plan), ids);
    }

    #[test]
    fn image_masks_never_touch_cls(seed in any::<u64>(), n in 2usize..40, m_p in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = draw_image_mask(n, m_p, &mut rng).unwrap();
        prop_assert!(!mask.positions.is_empty());
        prop_assert!(mask.positions.iter().all(|&p| p >= 1 && p < n));
    }
}

#[test]
fn pass_order_does_not_change_losses() {
    let ds = common::small_dataset();
    let cfg = common::small_config();
    let split = prepare(&ds, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (model, store) = Model::new(&cfg, &ds.vocab, ds.scheme.num_classes, 24, &mut rng).unwrap();
    let items: Vec<BatchItem> = (0..4)
        .map(|c| {
            let img = &split.images[split.caption_image[c]];
            BatchItem {
                patches: &img.patches[0],
                patch_labels: &img.patch_labels[0],
                token_ids: &split.token_ids[c],
                class: c % 3,
            }
        })
        .collect();
    let plans: Vec<_> = items.iter().map(|it| model.draw_plan(&cfg, it, &mut rng).unwrap()).collect();
    let run = |mim_first: bool| {
        let g = Graph::with_params(&store);
        let (loss, bundle) = model.batch_loss(&g, &cfg, &items, &plans, mim_first).unwrap();
        g.backward(loss).unwrap();
        (bundle, g.param_grads())
    };
    let ((a, ga), (b, gb)) = (run(false), run(true));
    assert_eq!(a, b);
    assert!(a.mlm > 0.0 && a.mim > 0.0);
    for ((ia, ta), (ib, tb)) in ga.iter().zip(&gb) {
        assert_eq!(ia, ib);
        for (x, y) in ta.data().iter().zip(tb.data()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

#[test]
fn retrieval_ignores_training_only_parameters() {
    let ds = common::small_dataset();
    let cfg = common::small_config();
    let run = train(&cfg, &ds, &cfg.to_text()).unwrap();
    let (_, test_ds) = ds.split_by_identity(cfg.num_test_identities).unwrap();
    let split = prepare(&test_ds, &cfg).unwrap();
    let before = split_similarity(&run.model, &run.store, &split).unwrap();

    let mut store = run.store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let redrawn = store.reinitialize(&[CME_PREFIX, ID_PREFIX], &mut rng);
    assert!(redrawn > 0);
    assert_ne!(store, run.store);
    assert_eq!(before, split_similarity(&run.model, &store, &split).unwrap());

    // a model built without the cross-modal encoder scores identically
    let mut bare_cfg = cfg.clone();
    bare_cfg.mlm_enabled = false;
    bare_cfg.mim_method = MimMethod::None;
    let (bare, mut bare_store) =
        Model::new(&bare_cfg, &ds.vocab, ds.scheme.num_classes, run.report.train_identities, &mut rng).unwrap();
    assert!(bare.cme.is_none());
    let ids: Vec<_> = bare_store.ids().collect();
    for id in ids {
        let name = bare_store.name(id).to_string();
        let src = run.store.find(&name).unwrap();
        *bare_store.get_mut(id) = run.store.get(src).clone();
    }
    assert_eq!(before, split_similarity(&bare, &bare_store, &split).unwrap());
}
