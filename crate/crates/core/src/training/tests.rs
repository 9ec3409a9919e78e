use std::path::PathBuf;

use rand::Rng;

use super::*;
use crate::error::Error;
use crate::numerics::seeded_rng;
use crate::positional::Encoding;
use crate::transformer::{ForwardOptions, Model, ModelConfig};

fn small_model() -> ModelConfig {
    ModelConfig {
        seq_len: 16,
        d_model: 32,
        n_heads: 2,
        head_size: 16,
        n_layers: 2,
        ffn_mult: 2,
        encoding: Encoding::default_expe(32, 16),
        ..ModelConfig::default()
    }
}

fn repetitive_corpus(bytes: usize) -> TokenStream {
    let unit = b"the quick brown fox jumps over the lazy dog. ";
    let text: Vec<u8> = unit.iter().cycle().take(bytes).copied().collect();
    TokenStream::from_text(&text)
}

fn docs(n: usize, len: usize) -> Vec<Document> {
    let mut rng = seeded_rng(3);
    (0..n)
        .map(|i| Document {
            name: format!("doc{i:03}"),
            bytes: (0..len + i * 7).map(|_| rng.gen_range(b'a'..=b'z')).collect(),
        })
        .collect()
}

fn quick_train(steps: usize) -> TrainConfig {
    let mut tc = TrainConfig::default().with_steps(steps);
    tc.batch_size = 4;
    tc.min_doc_multiple = 1;
    tc.schedule.peak_lr = 3e-3;
    tc
}

#[test]
fn stream_invariants() {
    let d = docs(3, 50);
    let s = TokenStream::from_documents(&d);
    s.validate().unwrap();
    assert_eq!(s.num_documents(), 3);
    assert_eq!(s.boundaries(), &[0, 51, 109]);
    assert_eq!(s.document(1), 51..109);
    assert_eq!(s.tokens()[51] as usize, BOS);
    assert_eq!(s.len(), 51 + 58 + 65);
    assert_ne!(s.corpus_id, TokenStream::from_documents(&docs(2, 50)).corpus_id);
}

#[test]
fn split_by_document() {
    let d = docs(40, 30);
    let s = split_documents(&d);
    assert!(!s.split_by_position);
    assert_eq!(s.train.num_documents(), 36);
    assert_eq!(s.val.num_documents(), 2);
    assert_eq!(s.test.num_documents(), 2);
    // no document appears twice
    let total: usize = [&s.train, &s.val, &s.test].iter().map(|t| t.len()).sum();
    assert_eq!(total, TokenStream::from_documents(&d).len());
}

#[test]
fn few_documents_split_by_position() {
    let d = docs(1, 1000);
    let s = split_documents(&d);
    assert!(s.split_by_position);
    assert_eq!(s.train.len(), 901);
    assert_eq!(s.val.len(), 51);
    assert_eq!(s.test.len(), 51);
}

#[test]
fn load_documents_walks_directories() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("sub")).unwrap();
    std::fs::write(dir.path().join("b.txt"), b"bb").unwrap();
    std::fs::write(dir.path().join("sub/a.txt"), b"a").unwrap();
    let d = load_documents(&[dir.path().to_path_buf()]).unwrap();
    assert_eq!(d.len(), 2);
    assert!(d[0].name.ends_with("b.txt"));
    let missing = load_documents(&[PathBuf::from("/nonexistent/corpus")]);
    assert!(matches!(missing, Err(Error::Config { .. })));
}

#[test]
fn batches_are_deterministic_and_shifted() {
    let s = repetitive_corpus(5000);
    let a = batch_sampler(&s, 16, 4, 7, 3, 0).unwrap();
    let b = batch_sampler(&s, 16, 4, 7, 3, 0).unwrap();
    assert_eq!(a, b);
    let c = batch_sampler(&s, 16, 4, 7, 4, 0).unwrap();
    assert_ne!(a.inputs, c.inputs);
    for r in 0..4 {
        let inp = &a.inputs[r * 16..(r + 1) * 16];
        let tgt = &a.targets[r * 16..(r + 1) * 16];
        assert_eq!(&inp[1..], &tgt[..15]);
    }
}

#[test]
fn windows_stay_inside_long_documents() {
    let mut d = docs(5, 20);
    d[3].bytes = vec![b'x'; 400];
    let s = TokenStream::from_documents(&d);
    let sampler = WindowSampler::new(&s, 16, 200).unwrap();
    assert!(!sampler.fallback());
    let doc = s.document(3);
    for row in 0..200 {
        let start = sampler.draw(1, 0, row);
        assert!(start >= doc.start && start + 17 <= doc.end);
    }
    let fb = WindowSampler::new(&s, 16, 10_000).unwrap();
    assert!(fb.fallback());
    assert!(batch_sampler(&s, 16, 2, 0, 0, 10_000).unwrap().fallback);
}

#[test]
fn short_stream_is_insufficient() {
    let s = TokenStream::from_text(b"tiny");
    assert!(matches!(
        WindowSampler::new(&s, 16, 0),
        Err(Error::InsufficientData { required: 17, available: 5 })
    ));
}

#[test]
fn window_starts_cover_the_corpus() {
    // chi-square over 20 equal bins of start positions, 10k draws
    let s = repetitive_corpus(20_017);
    let sampler = WindowSampler::new(&s, 16, 0).unwrap();
    let n = sampler.num_starts();
    let bins = 20;
    let mut counts = vec![0f64; bins];
    let draws = 10_000;
    for i in 0..draws {
        let st = sampler.draw(11, i / 8, i % 8);
        counts[st * bins / n] += 1.0;
    }
    let expect = |b: usize| {
        let lo = (b * n).div_ceil(bins);
        let hi = ((b + 1) * n).div_ceil(bins);
        draws as f64 * (hi - lo) as f64 / n as f64
    };
    let chi2: f64 = counts.iter().enumerate().map(|(b, &c)| (c - expect(b)).powi(2) / expect(b)).sum();
    // 19 degrees of freedom: the 0.999 quantile is 43.8
    assert!(chi2 < 43.8, "chi2 = {chi2}");
    assert!(counts.iter().all(|&c| c > 0.0));
}

#[test]
fn zero_steps_returns_init() {
    let m = Model::<f32>::new(small_model(), 5).unwrap();
    let before = m.checksum();
    let run = train(TrainState::new(m, 5), &quick_train(0), &repetitive_corpus(3000), None, None).unwrap();
    assert_eq!(run.state.model.checksum(), before);
    assert!(run.metrics.is_empty());
}

#[test]
fn init_loss_is_near_uniform() {
    let m = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    let s = repetitive_corpus(10_000);
    let b = batch_sampler(&s, 64, 8, 0, 0, 0).unwrap();
    let l = m.loss(&b.inputs, &b.targets, 8, &ForwardOptions::default()).unwrap() as f64;
    assert!((l - (VOCAB_SIZE as f64).ln()).abs() < 0.05, "{l}");
}

#[test]
fn loss_drops_on_repetitive_text() {
    let m = Model::<f32>::new(small_model(), 2).unwrap();
    let run = train(TrainState::new(m, 2), &quick_train(150), &repetitive_corpus(100_000), None, None).unwrap();
    let first = run.metrics[0].train_loss;
    let last = run.metrics.last().unwrap().train_loss;
    assert!((first - 5.549).abs() < 0.05, "{first}");
    assert!(last < 2.0, "{last}");
}

#[test]
fn full_run_is_deterministic() {
    let data = repetitive_corpus(20_000);
    let run = || {
        let mut cfg = small_model();
        cfg.dropout = 0.1;
        let m = Model::<f32>::new(cfg, 9).unwrap();
        let r = train(TrainState::new(m, 9), &quick_train(12), &data, None, None).unwrap();
        let ckpt = r.state.to_checkpoint(&quick_train(12));
        ckpt.to_bytes().unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn gradient_accumulation_matches_large_batch() {
    let data = repetitive_corpus(20_000);
    let mut cfg = small_model();
    cfg.init_std = 0.1;
    let base = Model::<f64>::new(cfg, 4).unwrap();
    let step_with = |batch: usize, accum: usize| {
        let mut tc = quick_train(1);
        tc.batch_size = batch;
        tc.grad_accum_steps = accum;
        tc.schedule.warmup_ratio = 0.0;
        tc.grad_clip = 0.0;
        // a huge epsilon makes the first update lr·g/eps, linear in the gradient
        tc.adamw.eps = 1e3;
        tc.adamw.weight_decay = 0.0;
        let mut state = TrainState::new(base.clone(), 4);
        let sampler = WindowSampler::new(&data, 16, 0).unwrap();
        train_step(&mut state, &tc, &sampler).unwrap();
        state.model
    };
    let worst_rel = |a: &Model<f64>, b: &Model<f64>| {
        let mut worst = 0.0f64;
        for ((pa, pb), p0) in a.params().iter().zip(b.params()).zip(base.params()) {
            for ((&x, &y), &z) in pa.tensor.data().iter().zip(pb.tensor.data()).zip(p0.tensor.data()) {
                let (da, db) = (x - z, y - z);
                let m = da.abs().max(db.abs());
                if m > 0.0 {
                    worst = worst.max((da - db).abs() / m);
                }
            }
        }
        worst
    };
    let full = step_with(8, 1);
    assert!(worst_rel(&full, &step_with(2, 4)) < 1e-10);
    // a different batch must be visible at this tolerance
    assert!(worst_rel(&full, &step_with(4, 1)) > 1e-3);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = repetitive_corpus(10_000);
    let tc = quick_train(3);
    let m = Model::<f32>::new(small_model(), 6).unwrap();
    let run = train(TrainState::new(m, 6), &tc, &data, None, Some(dir.path())).unwrap();
    let path = dir.path().join("final.bin");
    let loaded = load_checkpoint(&path).unwrap();
    let original = run.state.to_checkpoint(&tc);
    assert_eq!(loaded, original);
    for (a, b) in loaded.model.params().iter().zip(run.state.model.params()) {
        let bits = |t: &[f32]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.tensor.data()), bits(b.tensor.data()));
    }
    let toks: Vec<usize> = (0..16).map(|i| (i * 7) % 257).collect();
    let la = loaded.model.logits(&toks, 1, 0).unwrap();
    let lb = run.state.model.logits(&toks, 1, 0).unwrap();
    assert_eq!(la, lb);
    assert_eq!(loaded.step, 3);
    assert_eq!(loaded.optimizer.len(), loaded.model.params().len());
    assert!(dir.path().join("metrics.csv").exists());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let data = repetitive_corpus(10_000);
    let tc = quick_train(6);
    let m = Model::<f32>::new(small_model(), 8).unwrap();
    let full = train(TrainState::new(m.clone(), 8), &tc, &data, None, None).unwrap();
    let mut half = TrainState::new(m, 8);
    let sampler = WindowSampler::new(&data, 16, 16).unwrap();
    for _ in 0..3 {
        train_step(&mut half, &tc, &sampler).unwrap();
    }
    let bytes = half.to_checkpoint(&tc).to_bytes().unwrap();
    let resumed = TrainState::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let rest = train(resumed, &tc, &data, None, None).unwrap();
    assert_eq!(rest.state.model.checksum(), full.state.model.checksum());
}

#[test]
fn truncated_checkpoint_is_corrupt() {
    let m = Model::<f32>::new(small_model(), 1).unwrap();
    let bytes = TrainState::new(m, 1).to_checkpoint(&quick_train(1)).to_bytes().unwrap();
    for cut in [0, 10, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Corrupt(_))));
    let mut ver = bytes.clone();
    ver[4..8].copy_from_slice(&9u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&ver), Err(Error::Version { found: 9, expected: 1 })));
}

#[test]
fn mismatched_width_names_the_tensor() {
    let m = Model::<f32>::new(small_model(), 1).unwrap();
    let ckpt = TrainState::new(m, 1).to_checkpoint(&quick_train(1));
    let mut wider = small_model();
    wider.d_model = 64;
    wider.head_size = 32;
    wider.encoding = Encoding::default_expe(64, 16);
    let mut target = Model::<f32>::new(wider.clone(), 1).unwrap();
    match ckpt.load_into(&mut target) {
        Err(Error::TensorShape { name, expected, found }) => {
            assert_eq!(name, "tok_emb");
            assert_eq!(expected, vec![257, 64]);
            assert_eq!(found, vec![257, 32]);
        }
        other => panic!("{other:?}"),
    }
    // A header whose config disagrees with its tensors.
    let bytes = ckpt.to_bytes().unwrap();
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
    header["model_config"] = serde_json::to_value(&wider).unwrap();
    let json = serde_json::to_vec(&header).unwrap();
    let mut forged = bytes[..8].to_vec();
    forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
    forged.extend_from_slice(&json);
    forged.extend_from_slice(&bytes[16 + hlen..]);
    assert!(matches!(Checkpoint::from_bytes(&forged), Err(Error::TensorShape { ref name, .. }) if name == "tok_emb"));
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let mut tc = quick_train(20);
    tc.schedule.peak_lr = 1e30;
    tc.schedule.end_lr = 1e29;
    tc.grad_clip = 0.0;
    tc.schedule.warmup_ratio = 0.0;
    let mut cfg = small_model();
    cfg.init_std = 1.0;
    let m = Model::<f32>::new(cfg, 1).unwrap();
    let err = train(TrainState::new(m, 1), &tc, &repetitive_corpus(5000), None, Some(dir.path())).unwrap_err();
    match err {
        Error::NonFinite { step, last_finite_loss, .. } => {
            assert!(step >= 1);
            assert!(last_finite_loss.is_some_and(f64::is_finite));
        }
        other => panic!("{other:?}"),
    }
    assert!(dir.path().join("divergence.json").exists());
}

#[test]
fn train_config_validation() {
    let mut tc = TrainConfig::default();
    tc.batch_size = 0;
    tc.grad_accum_steps = 0;
    tc.schedule.total_steps = 5;
    let keys: Vec<String> = tc
        .validate("training")
        .into_iter()
        .map(|e| match e {
            Error::Config { key, .. } => key,
            other => panic!("{other:?}"),
        })
        .collect();
    assert_eq!(keys, ["training.batch_size", "training.grad_accum_steps", "training.schedule.total_steps"]);
    assert!(TrainConfig::default().validate("training").is_empty());
}

#[test]
fn metrics_csv_has_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::<f32>::new(small_model(), 3).unwrap();
    let mut tc = quick_train(5);
    tc.checkpoint_every = 2;
    let run = train(TrainState::new(m, 3), &tc, &repetitive_corpus(5000), None, Some(dir.path())).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,lr,train_loss,wall_ms");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0,0e0,"));
    let names: Vec<String> = run
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["checkpoint-2.bin", "checkpoint-4.bin", "final.bin"]);
}
