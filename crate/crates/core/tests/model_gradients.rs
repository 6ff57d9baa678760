use mqa_core::model::gradcheck::check_gradients;
use mqa_core::model::{forward, loss_and_grads, make_batch, Batch, ModelMode, SiteKinds, Task};
use mqa_core::{AttentionKind, Error, ModelConfig, ModelParams};

fn config(mode: ModelMode, kinds: SiteKinds, seed: u64) -> ModelConfig {
    ModelConfig {
        mode,
        layers: 1,
        d_model: 6,
        d_ff: 10,
        heads: 2,
        d_k: 3,
        d_v: 2,
        vocab_size: 7,
        max_len: 9,
        attention: kinds,
        local_window: None,
        seed,
    }
}

fn sequences() -> Vec<Vec<u32>> {
    vec![vec![2, 5, 3, 6], vec![4, 4, 2, 5], vec![6, 3, 3, 2]]
}

#[test]
fn analytic_gradients_match_finite_differences() {
    use AttentionKind::{MultiHead as H, MultiQuery as Q};
    let mut total = 0;
    for (mode, kinds) in [
        (
            ModelMode::EncoderDecoder,
            SiteKinds {
                encoder_self: H,
                decoder_self: Q,
                cross: H,
            },
        ),
        (
            ModelMode::EncoderDecoder,
            SiteKinds {
                encoder_self: Q,
                decoder_self: H,
                cross: Q,
            },
        ),
        (ModelMode::DecoderOnly, SiteKinds::uniform(Q)),
        (ModelMode::DecoderOnly, SiteKinds::uniform(H)),
    ] {
        let mut cfg = config(mode, kinds, 3);
        if mode == ModelMode::DecoderOnly {
            cfg.local_window = Some(3);
        }
        let params = ModelParams::init(&cfg).unwrap();
        let batch = make_batch(&cfg, Task::Reverse, &sequences());
        let report = check_gradients(&params, &batch, 4, 1e-5, 17).unwrap();
        for site in [
            "encoder.0.attn.p_k",
            "encoder.0.attn.p_v",
            "self_attn.p_k",
            "cross.attn.p_v",
        ] {
            if mode == ModelMode::EncoderDecoder || site.starts_with("self") {
                assert!(report.matching(site).count() > 0, "{site} not sampled");
            }
        }
        let worst = report.worst().unwrap();
        assert!(
            worst.relative_error() < 1e-6,
            "{mode:?}: {} [{}] analytic {} numeric {}",
            worst.tensor,
            worst.index,
            worst.analytic,
            worst.numeric
        );
        total += report.checks.len();
    }
    assert!(total >= 200, "{total} coordinates");
}

#[test]
fn zero_parameters_give_uniform_loss() {
    let cfg = config(
        ModelMode::EncoderDecoder,
        SiteKinds::uniform(AttentionKind::MultiQuery),
        1,
    );
    let params = ModelParams::init(&cfg).unwrap().zeros_like();
    let out = forward(&params, &make_batch(&cfg, Task::Copy, &sequences())).unwrap();
    assert!(out.logits.data().iter().all(|&v| v == 0.0));
    assert_eq!(out.loss, (7f64).ln());
}

#[test]
fn rows_are_independent_of_the_batch() {
    let cfg = config(
        ModelMode::EncoderDecoder,
        SiteKinds::uniform(AttentionKind::MultiHead),
        2,
    );
    let params = ModelParams::init(&cfg).unwrap();
    let seqs = sequences();
    let all = forward(&params, &make_batch(&cfg, Task::Copy, &seqs))
        .unwrap()
        .logits;
    for (i, s) in seqs.iter().enumerate() {
        let one = forward(
            &params,
            &make_batch(&cfg, Task::Copy, std::slice::from_ref(s)),
        )
        .unwrap()
        .logits;
        assert!(one.max_abs_diff(&all.slice_axis(0, i..i + 1).unwrap()) <= 1e-12);
    }
}

#[test]
fn gradients_are_invariant_to_batch_order() {
    let cfg = config(
        ModelMode::DecoderOnly,
        SiteKinds::uniform(AttentionKind::MultiQuery),
        4,
    );
    let params = ModelParams::init(&cfg).unwrap();
    let seqs = sequences();
    let mut reversed = seqs.clone();
    reversed.reverse();
    let (la, ga) = loss_and_grads(&params, &make_batch(&cfg, Task::Copy, &seqs)).unwrap();
    let (lb, gb) = loss_and_grads(&params, &make_batch(&cfg, Task::Copy, &reversed)).unwrap();
    assert!((la - lb).abs() <= 1e-12);
    for ((name, a), (_, b)) in ga.tensors().into_iter().zip(gb.tensors()) {
        assert!(a.max_abs_diff(b) <= 1e-12, "{name}");
    }
}

#[test]
fn unused_position_rows_get_zero_gradient() {
    let cfg = config(
        ModelMode::EncoderDecoder,
        SiteKinds::uniform(AttentionKind::MultiQuery),
        5,
    );
    let params = ModelParams::init(&cfg).unwrap();
    let (_, grads) = loss_and_grads(&params, &make_batch(&cfg, Task::Copy, &sequences())).unwrap();
    let d = cfg.d_model;
    let used = sequences()[0].len();
    assert!(grads.positions.data()[used * d..].iter().all(|&g| g == 0.0));
    assert!(grads.positions.data()[..used * d].iter().any(|&g| g != 0.0));
}

#[test]
fn gradients_are_deterministic() {
    let cfg = config(
        ModelMode::EncoderDecoder,
        SiteKinds::uniform(AttentionKind::MultiHead),
        6,
    );
    let params = ModelParams::init(&cfg).unwrap();
    let batch = make_batch(&cfg, Task::Reverse, &sequences());
    let a = loss_and_grads(&params, &batch).unwrap();
    let b = loss_and_grads(&params, &batch).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}

#[test]
fn non_finite_parameters_are_named() {
    let cfg = config(
        ModelMode::DecoderOnly,
        SiteKinds::uniform(AttentionKind::MultiHead),
        7,
    );
    let mut params = ModelParams::init(&cfg).unwrap();
    params.decoder[0].ff.w1.data_mut()[0] = f64::NAN;
    let batch = make_batch(&cfg, Task::Copy, &sequences());
    match loss_and_grads(&params, &batch) {
        Err(Error::Numeric { tensor }) => assert!(!tensor.is_empty()),
        other => panic!("expected a numeric error, got {other:?}"),
    }
    assert!(
        matches!(params.check_finite("parameter"), Err(Error::Numeric { tensor }) if tensor.contains("decoder.0.ff.w1"))
    );
}

#[test]
fn out_of_range_tokens_are_input_errors() {
    let cfg = config(
        ModelMode::DecoderOnly,
        SiteKinds::uniform(AttentionKind::MultiHead),
        8,
    );
    let params = ModelParams::init(&cfg).unwrap();
    let batch = Batch {
        source: None,
        inputs: vec![vec![0, 7]],
        targets: vec![vec![1, 2]],
        loss_start: 0,
    };
    assert!(matches!(forward(&params, &batch), Err(Error::Input(_))));
    let too_long = Batch {
        source: None,
        inputs: vec![vec![0; 10]],
        targets: vec![vec![0; 10]],
        loss_start: 0,
    };
    assert!(matches!(forward(&params, &too_long), Err(Error::Input(_))));
}
