use chanloc::checkpoint;
use chanloc::data::{synthetic, AugmentConfig, LabeledBatch};
use chanloc::model::{build_model, ArchName, ArchSpec, AttentionKind, Model};
use chanloc::params::{ParamKind, ParamMut};
use chanloc::train::{adam_step, evaluate, train, AdamState, RunRecorder, TrainConfig, CSV_HEADER};
use chanloc::{Error, Shape4, Tensor4};

fn plane(attn: AttentionKind, seed: u64) -> Model<f32> {
    build_model(&ArchSpec::new(ArchName::Plane, attn), seed).unwrap()
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        augment: AugmentConfig::off(),
        ..TrainConfig::default()
    }
}

/// Dark images labelled 0, bright images labelled 1.
fn two_class(n: usize) -> LabeledBatch<f32> {
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let bright = i % 2 == 1;
        let level = if bright { 0.7 } else { 0.3 };
        data.extend((0..3072).map(|p| level + 0.1 * (((i * 31 + p * 7) % 13) as f32 / 13.0 - 0.5)));
        labels.push(bright as u8);
    }
    LabeledBatch::new(Tensor4::from_vec(Shape4::new(n, 3, 32, 32), data).unwrap(), labels).unwrap()
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let mut m = plane(AttentionKind::CLocal, 1);
    let before = m.clone();
    let data = synthetic::<f32>(20, 0).unwrap();
    let out = train(&mut m, &data, &data, &quick_cfg(0), &mut ()).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(m, before);
}

#[test]
fn separable_two_class_set_is_learned_completely() {
    let data = two_class(64);
    let mut m = plane(AttentionKind::CLocal, 3);
    let out = train(&mut m, &data, &data, &quick_cfg(20), &mut ()).unwrap();
    let last = out.history.last().unwrap();
    assert_eq!(last.train_acc, 1.0);
    // 40 updates leave the BN running averages far from the batch statistics,
    // so inference mode is not expected to agree yet
    let (_, acc) = evaluate(&m, &data, 64).unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = synthetic::<f32>(48, 4).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let mut a = plane(AttentionKind::Se, 2);
    let mut b = plane(AttentionKind::Se, 2);
    let ha = train(&mut a, &data, &data, &cfg, &mut ()).unwrap().history;
    let hb = train(&mut b, &data, &data, &cfg, &mut ()).unwrap().history;
    assert_eq!(a, b);
    let strip = |h: &[chanloc::train::EpochMetrics]| {
        h.iter().map(|m| (m.train_loss, m.train_acc, m.test_loss, m.test_acc)).collect::<Vec<_>>()
    };
    assert_eq!(strip(&ha), strip(&hb));
}

#[test]
fn weight_decay_alone_shrinks_weights() {
    let cfg = TrainConfig::default();
    let mut w = vec![0.5f64, -1.5, 2.0];
    let mut state = AdamState::new([3]);
    for _ in 0..5 {
        let before = w.clone();
        let g: Vec<f64> = w.iter().map(|&v| cfg.l2 * 2.0 * v).collect();
        let mut slot = [ParamMut {
            name: "weight",
            kind: ParamKind::ConvWeight,
            dims: vec![3],
            data: &mut w,
        }];
        adam_step(&mut slot, &[&g], &mut state, 0.01, &cfg).unwrap();
        assert!(w.iter().zip(&before).all(|(a, b)| a.abs() < b.abs()));
    }
}

#[test]
fn recorder_writes_config_header_and_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let best = dir.path().join("best.clkb");
    let data = synthetic::<f32>(40, 5).unwrap();
    let cfg = quick_cfg(2);
    let mut rec = RunRecorder::new(Vec::new(), &cfg, "arch=plane attn=clocal", Some(&best)).unwrap();
    let mut m = plane(AttentionKind::CLocal, 0);
    let out = train(&mut m, &data, &data, &cfg, &mut rec).unwrap();
    assert_eq!(out.history.len(), 2);
    let csv = String::from_utf8(rec.into_inner()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# arch=plane attn=clocal lr0=0.01"));
    assert_eq!(lines[1], CSV_HEADER);
    assert_eq!(lines.len(), 4);
    for (row, m) in lines[2..].iter().zip(&out.history) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 7);
        assert_eq!(cols[0], m.epoch.to_string());
        let acc: f64 = cols[5].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    assert!(best.is_file());
}

#[test]
fn non_finite_loss_reports_where_it_happened() {
    let mut m = plane(AttentionKind::None, 0);
    for (name, p) in m.named_params_mut() {
        if name == "fc.bias" {
            p.data[0] = f32::NAN;
        }
    }
    let data = synthetic::<f32>(40, 5).unwrap();
    let err = train(&mut m, &data, &data, &quick_cfg(1), &mut ()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 0 }), "{err}");
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.clkb");
    let mut m = plane(AttentionKind::CLocal, 9);
    let x = synthetic::<f32>(4, 1).unwrap().images;
    m.forward_train(&x).unwrap();
    checkpoint::save(&m, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"CLKB");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(checkpoint::read_fingerprint(&path).unwrap(), m.fingerprint());

    let mut restored = plane(AttentionKind::CLocal, 123);
    checkpoint::load(&mut restored, &path).unwrap();
    assert_eq!(restored, m);
    assert_eq!(restored.infer(&x).unwrap().data(), m.infer(&x).unwrap().data());

    let mut wide: Model<f64> = build_model(&ArchSpec::new(ArchName::Plane, AttentionKind::CLocal), 0).unwrap();
    checkpoint::load(&mut wide, &path).unwrap();
    for ((_, a), (_, b)) in wide.named_params().iter().zip(m.named_params()) {
        assert!(a.data.iter().zip(b.data).all(|(&a, &b)| a == b as f64));
    }
}

#[test]
fn checkpoint_errors() {
    let m = plane(AttentionKind::CLocal, 0);
    let bytes = checkpoint::encode(&m);

    let mut other = plane(AttentionKind::Se, 0);
    assert!(matches!(checkpoint::restore(&mut other, &bytes), Err(Error::FingerprintMismatch { .. })));

    let mut same = plane(AttentionKind::CLocal, 1);
    let err = checkpoint::restore(&mut same, &bytes[..bytes.len() - 3]).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    let err = checkpoint::restore(&mut same, &bad).unwrap_err();
    assert!(err.to_string().contains("magic"), "{err}");
    assert_eq!(same, plane(AttentionKind::CLocal, 1));
}
