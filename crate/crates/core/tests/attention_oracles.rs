use mqa_core::attention::{
    attention_forward, build_mask, dot_product_attention, multihead_attention_batched,
    multihead_attention_single, multiquery_attention_batched,
};
use mqa_core::reference::{attend_rows, attention_head_loop, attention_position_loop};
use mqa_core::{
    AttentionDims, AttentionKind, AttentionWeights, Error, MaskKind, MaskShape, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = t.shape()[t.rank() - 1];
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

fn random_weights(rng: &mut ChaCha8Rng, kind: AttentionKind) -> AttentionWeights {
    let dims = AttentionDims::new(
        rng.gen_range(1..5),
        rng.gen_range(1..7),
        rng.gen_range(1..5),
        rng.gen_range(1..5),
    )
    .unwrap();
    AttentionWeights::random(kind, dims, 0.7, rng)
}

fn batched(
    kind: AttentionKind,
    x: &Tensor,
    m: &Tensor,
    sig: &MaskShape,
    w: &AttentionWeights,
) -> Tensor {
    match kind {
        AttentionKind::MultiHead => multihead_attention_batched(x, m, sig, w).unwrap(),
        AttentionKind::MultiQuery => multiquery_attention_batched(x, m, sig, w).unwrap(),
    }
}

#[test]
fn dot_product_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (m, k, v) = (
            rng.gen_range(1..6),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        let q = Tensor::uniform([k], 1.0, &mut rng);
        let keys = Tensor::uniform([m, k], 1.0, &mut rng);
        let values = Tensor::uniform([m, v], 1.0, &mut rng);
        let got = dot_product_attention(&q, &keys, &values).unwrap();
        let want = attend_rows(q.data(), &rows(&keys), &rows(&values));
        assert!(got.max_abs_diff(&Tensor::from_vec(want)) <= 1e-12);
    }
}

#[test]
fn dot_product_output_is_convex_combination() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = Tensor::uniform([3], 4.0, &mut rng);
    let keys = Tensor::uniform([7, 3], 4.0, &mut rng);
    let values = Tensor::uniform([7, 2], 1.0, &mut rng);
    let out = dot_product_attention(&q, &keys, &values).unwrap();
    for (j, &o) in out.data().iter().enumerate() {
        let col: Vec<f64> = rows(&values).iter().map(|r| r[j]).collect();
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &c| {
                (a.min(c), b.max(c))
            });
        assert!(lo - 1e-12 <= o && o <= hi + 1e-12);
    }
    let empty = Tensor::zeros([0, 3]);
    assert!(matches!(
        dot_product_attention(&q, &empty, &Tensor::zeros([0, 2])),
        Err(Error::EmptyMemory)
    ));
}

#[test]
fn single_query_matches_head_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let w = random_weights(&mut rng, AttentionKind::MultiHead);
        let d = w.dims().model_dim;
        let m = rng.gen_range(1..6);
        let x = Tensor::uniform([d], 1.0, &mut rng);
        let mem = Tensor::uniform([m, d], 1.0, &mut rng);
        let got = multihead_attention_single(&x, &mem, &w).unwrap();
        let want = attention_head_loop(x.data(), &rows(&mem), &w);
        assert!(got.max_abs_diff(&Tensor::from_vec(want)) <= 1e-12);
    }
}

#[test]
fn batched_matches_position_loop_for_every_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in [AttentionKind::MultiHead, AttentionKind::MultiQuery] {
        for trial in 0..10 {
            let w = random_weights(&mut rng, kind);
            let AttentionDims {
                heads,
                model_dim: d,
                ..
            } = w.dims();
            let (b, n) = (rng.gen_range(1..4), rng.gen_range(1..6));
            let mask = match trial % 3 {
                0 => MaskKind::None,
                1 => MaskKind::Causal,
                _ => MaskKind::Local {
                    window: rng.gen_range(1..4),
                },
            };
            let m = if mask == MaskKind::None {
                rng.gen_range(1..6)
            } else {
                n
            };
            let x = Tensor::uniform([b, n, d], 1.0, &mut rng);
            let mem = Tensor::uniform([b, m, d], 1.0, &mut rng);
            let sig = MaskShape::new(mask, b, heads, n, m);
            let got = batched(kind, &x, &mem, &sig, &w);
            let want = attention_position_loop(&x, &mem, &sig, &w);
            assert!(got.max_abs_diff(&want) <= 1e-12, "{kind} {mask:?}");
        }
    }
}

#[test]
fn batched_rejects_wrong_kind_and_mask_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dims = AttentionDims::new(2, 4, 2, 2).unwrap();
    let w = AttentionWeights::random(AttentionKind::MultiQuery, dims, 1.0, &mut rng);
    let x = Tensor::zeros([1, 3, 4]);
    let sig = MaskShape::new(MaskKind::Causal, 1, 2, 3, 3);
    assert!(multihead_attention_batched(&x, &x, &sig, &w).is_err());
    let wrong = MaskShape::new(MaskKind::Causal, 1, 2, 2, 3);
    assert!(multiquery_attention_batched(&x, &x, &wrong, &w).is_err());
    let bad = MaskShape::new(MaskKind::Local { window: 0 }, 1, 2, 3, 3);
    assert!(matches!(
        multiquery_attention_batched(&x, &x, &bad, &w),
        Err(Error::Config(_))
    ));
}

#[test]
fn multi_query_equals_replicated_multi_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let w = random_weights(&mut rng, AttentionKind::MultiQuery);
        let d = w.dims().model_dim;
        let x = Tensor::uniform([2, 3, d], 1.0, &mut rng);
        let mem = Tensor::uniform([2, 4, d], 1.0, &mut rng);
        let mq = attention_forward(&x, &mem, None, &w).unwrap().y;
        let mh = attention_forward(&x, &mem, None, &w.replicate_heads().unwrap())
            .unwrap()
            .y;
        assert!(mq.max_abs_diff(&mh) <= 1e-12);
        assert_eq!(w.replicate_heads().unwrap().collapse_heads().unwrap(), w);
    }
}

#[test]
fn causal_outputs_ignore_future_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for kind in [AttentionKind::MultiHead, AttentionKind::MultiQuery] {
        let w = random_weights(&mut rng, kind);
        let AttentionDims {
            heads,
            model_dim: d,
            ..
        } = w.dims();
        let n = 5;
        let x = Tensor::uniform([1, n, d], 1.0, &mut rng);
        let sig = MaskShape::new(MaskKind::Causal, 1, heads, n, n);
        let base = batched(kind, &x, &x, &sig, &w);
        for j in 0..n {
            let mut y = x.clone();
            for c in 0..d {
                y.set(&[0, j, c], 10.0 * rng.gen::<f64>());
            }
            let out = batched(kind, &y, &y, &sig, &w);
            let before = |t: &Tensor| t.slice_axis(1, 0..j).unwrap();
            assert!(before(&out).max_abs_diff(&before(&base)) <= 1e-12);
        }
    }
}

#[test]
fn batch_rows_are_independent_and_permutable() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = random_weights(&mut rng, AttentionKind::MultiQuery);
    let AttentionDims {
        heads,
        model_dim: d,
        ..
    } = w.dims();
    let x = Tensor::uniform([3, 4, d], 1.0, &mut rng);
    let sig = MaskShape::new(MaskKind::Causal, 3, heads, 4, 4);
    let all = batched(AttentionKind::MultiQuery, &x, &x, &sig, &w);
    let perm = [2, 0, 1];
    let px = x.select_rows(&perm).unwrap();
    let pout = batched(AttentionKind::MultiQuery, &px, &px, &sig, &w);
    assert!(pout.max_abs_diff(&all.select_rows(&perm).unwrap()) <= 1e-12);
    let one = x.slice_axis(0, 1..2).unwrap();
    let single = batched(
        AttentionKind::MultiQuery,
        &one,
        &one,
        &MaskShape::new(MaskKind::Causal, 1, heads, 4, 4),
        &w,
    );
    assert!(single.max_abs_diff(&all.slice_axis(0, 1..2).unwrap()) <= 1e-12);
}

#[test]
fn local_window_covering_sequence_equals_causal() {
    for n in 1..8 {
        let causal = build_mask(&MaskShape::new(MaskKind::Causal, 1, 2, n, n)).unwrap();
        for window in n..n + 3 {
            let local =
                build_mask(&MaskShape::new(MaskKind::Local { window }, 1, 2, n, n)).unwrap();
            assert_eq!(local, causal);
        }
    }
}
