use mqa_core::bench::{
    emit_report, parse_csv, run_benchmark, BenchReport, BenchRow, Environment, Phases,
    ReportFormat, Variant, Workload, CSV_HEADER,
};
use mqa_core::model::{ModelMode, SiteKinds};
use mqa_core::{AttentionKind, Error, ModelConfig};

fn environment() -> Environment {
    Environment {
        cpu_model: "Test CPU @ 1.00GHz".into(),
        available_threads: 8,
        threads_used: 1,
    }
}

fn row(variant: &str, times: [Option<f64>; 5], kv: u64, flops: u64) -> BenchRow {
    BenchRow {
        variant: variant.into(),
        training_us: times[0],
        encoder_us: times[1],
        decoder_us: times[2],
        beam_encoder_us: times[3],
        beam_decoder_us: times[4],
        kv_words_per_step: kv,
        flops_per_step: flops,
    }
}

fn sample() -> BenchReport {
    BenchReport {
        environment: environment(),
        rows: vec![
            row(
                "multi-head",
                [Some(13.2), Some(1.7), Some(46.0), Some(2.0), Some(203.0)],
                2048,
                91264,
            ),
            row(
                "multi-query",
                [Some(13.0), None, None, Some(1.5), Some(6.25)],
                256,
                68000,
            ),
            row(
                "multi-query local",
                [None, None, Some(5.125), None, None],
                32,
                1,
            ),
        ],
        notes: vec!["timer resolution raised repetitions".into()],
    }
}

#[test]
fn empty_report_is_header_only() {
    let report = BenchReport {
        environment: environment(),
        rows: Vec::new(),
        notes: Vec::new(),
    };
    let csv = emit_report(&report, ReportFormat::Csv);
    let body: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body, [CSV_HEADER]);
    assert_eq!(parse_csv(&csv).unwrap(), report);
}

#[test]
fn csv_round_trips() {
    let report = sample();
    let parsed = parse_csv(&emit_report(&report, ReportFormat::Csv)).unwrap();
    assert_eq!(parsed.environment, report.environment);
    assert_eq!(parsed.rows, report.rows);
    assert!(parsed.notes.is_empty());
}

#[test]
fn markdown_matches_golden_file() {
    let golden = include_str!("fixtures/report_golden.md");
    assert_eq!(emit_report(&sample(), ReportFormat::Markdown), golden);
}

#[test]
fn malformed_csv_is_a_parse_error() {
    for text in [
        "",
        "multi-head,1,2,3,4,5,6,7",
        &format!("{CSV_HEADER}\nmulti-head,1,2"),
        "# colour: red",
    ] {
        assert!(matches!(parse_csv(text), Err(Error::Parse(_))), "{text:?}");
    }
}

#[test]
fn unknown_format_is_a_usage_error() {
    assert!(matches!(
        "html".parse::<ReportFormat>(),
        Err(Error::Usage(_))
    ));
    assert_eq!(
        "md".parse::<ReportFormat>().unwrap(),
        ReportFormat::Markdown
    );
}

fn workload(mode: ModelMode) -> Workload {
    Workload {
        batch: 3,
        source_len: 5,
        target_len: 6,
        model: ModelConfig {
            mode,
            layers: 2,
            d_model: 8,
            d_ff: 16,
            heads: 4,
            d_k: 2,
            d_v: 2,
            vocab_size: 10,
            max_len: 8,
            attention: SiteKinds::uniform(AttentionKind::MultiHead),
            local_window: None,
            seed: 4,
        },
        repetitions: 3,
        warmup_reps: 1,
        beam_size: 2,
    }
}

#[test]
fn counted_cache_words_shrink_by_h() {
    let none = Phases {
        training: false,
        greedy: false,
        beam: false,
    };
    for mode in [ModelMode::DecoderOnly, ModelMode::EncoderDecoder] {
        let w = workload(mode);
        let variants = [
            Variant {
                kind: AttentionKind::MultiHead,
                local_window: None,
            },
            Variant {
                kind: AttentionKind::MultiQuery,
                local_window: None,
            },
        ];
        let report = run_benchmark(&w, &variants, none).unwrap();
        let (mh, mq) = (&report.rows[0], &report.rows[1]);
        assert!(mh.training_us.is_none() && mh.decoder_us.is_none());
        // Padded self caches read the whole horizon every step.
        let (b, h, k, layers, n) = (3u64, 4u64, 2u64, 2u64, 6u64);
        let mut want = layers * 2 * b * h * k * n;
        if mode == ModelMode::EncoderDecoder {
            want += layers * 2 * b * h * k * 5;
        }
        assert_eq!(mh.kv_words_per_step, want, "{mode:?}");
        assert_eq!(mh.kv_words_per_step, h * mq.kv_words_per_step);
        assert!(mq.flops_per_step < mh.flops_per_step);
    }
}

#[test]
fn timed_phases_fill_their_columns() {
    let w = workload(ModelMode::EncoderDecoder);
    let report = run_benchmark(
        &w,
        &[Variant {
            kind: AttentionKind::MultiQuery,
            local_window: Some(2),
        }],
        Phases::all(),
    )
    .unwrap();
    let r = &report.rows[0];
    assert_eq!(r.variant, "multi-query local");
    for t in [
        r.training_us,
        r.encoder_us,
        r.decoder_us,
        r.beam_encoder_us,
        r.beam_decoder_us,
    ] {
        assert!(t.unwrap() >= 0.0);
    }
    let w = workload(ModelMode::DecoderOnly);
    let report = run_benchmark(
        &w,
        &[Variant {
            kind: AttentionKind::MultiHead,
            local_window: None,
        }],
        Phases::all(),
    )
    .unwrap();
    assert!(report.rows[0].encoder_us.is_none());
    assert!(report.rows[0].decoder_us.is_some());
}

#[test]
fn workload_validation() {
    let ok = workload(ModelMode::EncoderDecoder);
    assert!(ok.validate().is_ok());
    let cases: [fn(&mut Workload); 5] = [
        |w| w.repetitions = 2,
        |w| w.warmup_reps = 0,
        |w| w.batch = 0,
        |w| w.target_len = 9,
        |w| w.source_len = 0,
    ];
    for change in cases {
        let mut w = ok.clone();
        change(&mut w);
        assert!(matches!(w.validate(), Err(Error::Config(_))));
    }
}
