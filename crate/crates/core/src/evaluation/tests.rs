use super::*;
use crate::error::Error;
use crate::positional::{scale_encoding, Encoding, RopeParams};
use crate::training::{Document, TokenStream, TrainConfig};
use crate::transformer::{ForwardOptions, Model, ModelConfig};

fn cfg(encoding: Encoding) -> ModelConfig {
    ModelConfig {
        seq_len: 8,
        d_model: 32,
        n_heads: 2,
        head_size: 16,
        n_layers: 2,
        ffn_mult: 2,
        encoding,
        ..ModelConfig::default()
    }
}

fn expe() -> Encoding {
    Encoding::default_expe(32, 8)
}

fn stream() -> TokenStream {
    let docs: Vec<Document> = (0..3)
        .map(|i| Document {
            name: format!("d{i}"),
            bytes: (0..600).map(|j| b"abcdefghij"[(j * (i + 3)) % 10]).collect(),
        })
        .collect();
    TokenStream::from_documents(&docs)
}

fn meta() -> ReportMeta {
    ReportMeta {
        git_describe: "test".into(),
        config_hash: "0".into(),
        timestamp_unix: 0,
    }
}

fn sweep_opts() -> SweepOptions {
    SweepOptions {
        model_tag: "m".into(),
        n_windows: 4,
        seed: 3,
        metadata: meta(),
    }
}

#[test]
fn untrained_model_scores_near_uniform() {
    let m = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
    let text: Vec<u8> = (0..20_000u32).map(|i| (i.wrapping_mul(2_654_435_761) >> 24) as u8).collect();
    let s = TokenStream::from_text(&text);
    let e = eval_loss(&m, &s, 64, 8, 0).unwrap();
    assert!((e.mean - 257f64.ln()).abs() < 0.05, "{}", e.mean);
    assert_eq!(e.tokens, 512);
    assert_eq!(e.windows, 8);
}

#[test]
fn eval_is_deterministic_per_seed() {
    let m = Model::<f64>::new(cfg(expe()), 1).unwrap();
    let s = stream();
    let a = eval_loss(&m, &s, 16, 4, 9).unwrap();
    let b = eval_loss(&m, &s, 16, 4, 9).unwrap();
    assert_eq!(a.mean.to_bits(), b.mean.to_bits());
    let c = eval_loss(&m, &s, 16, 4, 10).unwrap();
    assert_ne!(a.mean, c.mean);
}

#[test]
fn eval_reports_missing_data() {
    let m = Model::<f64>::new(cfg(expe()), 1).unwrap();
    let s = TokenStream::from_text(b"short text");
    match eval_loss(&m, &s, 64, 4, 0) {
        Err(Error::InsufficientData { required, available }) => {
            assert_eq!(required, 65);
            assert_eq!(available, 11);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn eval_windows_come_from_one_document() {
    let s = stream();
    for start in eval_windows(&s, 64, 50, 1).unwrap() {
        let doc = (0..3).map(|i| s.document(i)).find(|r| r.contains(&start)).unwrap();
        assert!(start + 65 <= doc.end);
    }
}

#[test]
fn degenerate_sweep_equals_eval_loss() {
    let m = Model::<f64>::new(cfg(expe()), 2).unwrap();
    let s = stream();
    let r = extrapolation_sweep(&m, &s, &[1], &[1.0], &sweep_opts()).unwrap();
    assert_eq!(r.rows.len(), 1);
    let e = eval_loss(&m, &s, 8, 4, 3).unwrap();
    assert_eq!(r.rows[0].loss_nats, Some(e.mean));
    assert_eq!(r.rows[0].tokens, 32);
}

#[test]
fn full_grid_shape_and_lengths() {
    let m = Model::<f32>::new(cfg(expe()), 2).unwrap();
    let r = extrapolation_sweep(&m, &stream(), &ALLOWED_MULTIPLES, &[1.0, 0.5], &sweep_opts()).unwrap();
    assert_eq!(r.rows.len(), 10);
    let lens: Vec<usize> = r.rows.iter().map(|r| r.eval_len).collect();
    assert!(lens.windows(2).all(|w| w[0] <= w[1]));
    for row in &r.rows {
        assert_eq!(row.eval_len, row.multiple * 8);
        assert!(row.tokens > 0);
        assert!(row.loss_nats.is_some_and(f64::is_finite));
    }
}

#[test]
fn sweep_scaling_leaves_weights_untouched() {
    let m = Model::<f64>::new(cfg(expe()), 4).unwrap();
    let before = m.checksum();
    let s = stream();
    let r = extrapolation_sweep(&m, &s, &[2], &[1.0, 0.5], &sweep_opts()).unwrap();
    assert_eq!(m.checksum(), before);
    assert_ne!(r.rows[0].loss_nats, r.rows[1].loss_nats);
    // The scaled row equals evaluating a copy whose encoding was scaled.
    let mut scaled = m.clone();
    scaled.set_scheme(scale_encoding(&m.config().scheme(), 0.5).unwrap()).unwrap();
    let e = eval_loss(&scaled, &s, 16, 4, 3).unwrap();
    assert_eq!(r.rows[1].loss_nats, Some(e.mean));
}

#[test]
fn sweep_rejects_bad_grid() {
    let m = Model::<f64>::new(cfg(expe()), 1).unwrap();
    assert!(matches!(
        extrapolation_sweep(&m, &stream(), &[3], &[1.0], &sweep_opts()),
        Err(Error::Config { .. })
    ));
    assert!(extrapolation_sweep(&m, &stream(), &[1], &[0.0], &sweep_opts()).is_err());
    assert!(extrapolation_sweep(&m, &stream(), &[], &[1.0], &sweep_opts()).is_err());
}

#[test]
fn learned_absolute_beyond_table_is_a_sentinel_row() {
    let m = Model::<f64>::new(cfg(Encoding::LearnedAbsolute { max_len: 8 }), 1).unwrap();
    let r = extrapolation_sweep(&m, &stream(), &[1, 2], &[1.0], &sweep_opts()).unwrap();
    assert!(r.rows[0].loss_nats.is_some());
    assert_eq!(r.rows[1].loss_nats, None);
    assert!(r.rows[1].error.as_deref().unwrap().contains("exceeds"));
    let csv = r.to_csv();
    assert!(!csv.contains("NaN"));
    assert!(csv.lines().nth(2).unwrap().contains(",16,,,0,"));
}

#[test]
fn non_exact_scaling_is_reported_per_row() {
    let m = Model::<f64>::new(cfg(Encoding::Rope(RopeParams::default())), 1).unwrap();
    let r = extrapolation_sweep(&m, &stream(), &[1], &[1.0, 0.5], &sweep_opts()).unwrap();
    assert!(r.rows[0].loss_nats.is_some());
    assert!(r.rows[1].error.as_deref().unwrap().contains("not supported"));
}

#[test]
fn sinusoidal_sweep_matches_direct_offset_evaluation() {
    let m = Model::<f64>::new(cfg(Encoding::Sinusoidal), 5).unwrap();
    let s = stream();
    let r = extrapolation_sweep(&m, &s, &[1, 2], &[1.0], &sweep_opts()).unwrap();
    for (row, len) in r.rows.iter().zip([8usize, 16]) {
        let starts = eval_windows(&s, len, 4, 3).unwrap();
        let toks = s.tokens();
        let mean = starts
            .iter()
            .map(|&st| {
                let inp: Vec<usize> = toks[st..st + len].iter().map(|&t| t as usize).collect();
                let tgt: Vec<usize> = toks[st + 1..st + len + 1].iter().map(|&t| t as usize).collect();
                m.loss(&inp, &tgt, 1, &ForwardOptions::default()).unwrap()
            })
            .sum::<f64>()
            / 4.0;
        assert_eq!(row.loss_nats, Some(mean));
    }
    // The first half of a 2x window is scored exactly as a 1x window at offset 0.
    let toks: Vec<usize> = s.tokens()[..16].iter().map(|&t| t as usize).collect();
    let long = m.logits(&toks, 1, 0).unwrap();
    let short = m.logits(&toks[..8], 1, 0).unwrap();
    assert_eq!(&long.data()[..8 * 257], short.data());
}

fn row(model: &str, multiple: usize, scale: f64) -> EvalRow {
    EvalRow {
        model: model.into(),
        encoding: "expe".into(),
        scale,
        multiple,
        eval_len: multiple * 8,
        loss_nats: Some(3.0 + multiple as f64 * 0.1 - scale),
        stderr: Some(0.01),
        tokens: 64,
        seed: 0,
        diverged: false,
        error: None,
    }
}

#[test]
fn single_report_round_trips() {
    let r = EvalReport::new(8, vec![row("a", 1, 1.0), row("a", 2, 1.0)], meta());
    let merged = compare_report(std::slice::from_ref(&r)).unwrap();
    assert_eq!(merged.rows, r.rows);
    assert_eq!(merged.csv.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(merged.csv, r.to_csv());
    let back: Vec<EvalRow> = serde_json::from_value(merged.json["rows"].clone()).unwrap();
    assert_eq!(back, r.rows);
}

#[test]
fn merge_sorts_by_model_multiple_scale() {
    let a = EvalReport::new(8, vec![row("b", 2, 1.0), row("a", 4, 1.0)], meta());
    let b = EvalReport::new(8, vec![row("a", 1, 1.0), row("b", 2, 0.5), row("a", 4, 0.5)], meta());
    let m1 = compare_report(&[a.clone(), b.clone()]).unwrap();
    let keys: Vec<(String, usize, f64)> = m1.rows.iter().map(|r| (r.model.clone(), r.multiple, r.scale)).collect();
    assert_eq!(
        keys,
        [
            ("a".into(), 1, 1.0),
            ("a".into(), 4, 0.5),
            ("a".into(), 4, 1.0),
            ("b".into(), 2, 0.5),
            ("b".into(), 2, 1.0)
        ]
    );
    let m2 = compare_report(&[b, a]).unwrap();
    assert_eq!(m1.csv, m2.csv);
}

#[test]
fn merge_rejects_schema_mismatch_and_empty_input() {
    let a = EvalReport::new(8, vec![row("a", 1, 1.0)], meta());
    let mut b = a.clone();
    b.schema_version = 2;
    assert!(matches!(compare_report(&[a, b]), Err(Error::Merge(_))));
    assert!(matches!(compare_report(&[]), Err(Error::Merge(_))));
}

#[test]
fn svg_is_well_formed() {
    let mut rows = vec![row("a<&>", 1, 1.0), row("a<&>", 2, 1.0), row("a<&>", 4, 0.5), row("b", 16, 1.0)];
    rows[1].loss_nats = None;
    let svg = loss_curve_svg(&rows);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count() >= 2);
    roxmltree::Document::parse(&loss_curve_svg(&[])).unwrap();
}

#[test]
fn csv_quotes_awkward_names() {
    let r = EvalReport::new(8, vec![row("a,b", 1, 1.0)], meta());
    assert!(r.to_csv().lines().nth(1).unwrap().starts_with("\"a,b\",expe,1,1,8,"));
}

#[test]
fn config_hash_is_stable() {
    let v = serde_json::json!({"a": 1, "b": [1, 2]});
    assert_eq!(config_hash(&v), config_hash(&v.clone()));
    assert_eq!(config_hash(&v).len(), 16);
    assert_ne!(config_hash(&v), config_hash(&serde_json::json!({"a": 2})));
}

#[test]
fn variant_set_matches_ablation_table() {
    let tags: std::collections::BTreeSet<&str> = AblationVariant::ALL.iter().map(|v| v.tag()).collect();
    let want: std::collections::BTreeSet<&str> =
        ["baseline", "stable_p", "l1", "learned_initialized", "learned", "once"].into_iter().collect();
    assert_eq!(tags, want);
    let base = cfg(expe());
    assert_eq!(AblationVariant::L1.apply(&base).unwrap().encoding.width(), Some(1));
    assert!(AblationVariant::Once.apply(&base).unwrap().ablation.apply_once);
    assert!(matches!(
        AblationVariant::Baseline.apply(&cfg(Encoding::Sinusoidal)),
        Err(Error::UnsupportedScheme { .. })
    ));
}

#[test]
fn ablation_suite_runs_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let mut tc = TrainConfig::default().with_steps(3);
    tc.batch_size = 2;
    tc.min_doc_multiple = 1;
    let s = stream();
    let opts = AblationOptions {
        multiples: vec![1, 2],
        n_windows: 2,
        out: Some(dir.path().to_path_buf()),
        reuse: true,
        metadata: meta(),
        ..Default::default()
    };
    let runs = ablation_suite(&cfg(expe()), &tc, &s, &s, &opts).unwrap();
    assert_eq!(runs.len(), 6);
    assert_eq!(runs[0].variant, AblationVariant::Baseline);
    assert_eq!(runs[0].relative_time, 1.0);
    for r in &runs {
        assert_eq!(r.report.rows.len(), 2);
        assert!(r.relative_time > 0.0);
        assert!(dir.path().join(r.variant.tag()).join("final.bin").exists());
    }
    // A second call reuses the finished runs.
    let again = ablation_suite(&cfg(expe()), &tc, &s, &s, &opts).unwrap();
    for (a, b) in runs.iter().zip(&again) {
        assert_eq!(a.wall_ms, b.wall_ms);
        assert_eq!(a.report.rows, b.report.rows);
    }
}
