use s2m_core::data::{gen_corpus, hash_split, Sample, ShapeKind};
use s2m_core::masl::MaslWeights;
use s2m_core::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use s2m_core::train::{train, MetricsRow, TrainConfig};
use s2m_core::{Error, Tensor};

fn small_corpus(count: usize) -> (Vec<Sample>, Vec<Sample>) {
    let samples = gen_corpus(&ShapeKind::ALL, count, (32, 32), 5)
        .unwrap()
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    hash_split(samples)
}

fn small_model() -> Model {
    Model::build(&ModelConfig {
        stage_channels: vec![2, 3, 4, 4, 6],
        k: 8,
        ..ModelConfig::tiny()
    })
    .unwrap()
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs: 3,
        early_stop_patience: 3,
        batch_size: 2,
        seed: 9,
        ..Default::default()
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Everything except wall time.
fn comparable(rows: &[MetricsRow]) -> Vec<String> {
    rows.iter()
        .map(|r| {
            let mut rec = r.record();
            rec.pop();
            rec.join(",")
        })
        .collect()
}

#[test]
fn same_seed_runs_are_bit_identical() {
    let (tr, va) = small_corpus(16);
    let run = || {
        let mut m = small_model();
        let out = train(&mut m, &tr, &va, &quick_cfg(), |_| true).unwrap();
        (m, out)
    };
    let (m1, o1) = run();
    let (m2, o2) = run();
    assert_eq!(comparable(&o1.history), comparable(&o2.history));
    assert_eq!(o1.final_weights, o2.final_weights);
    for (a, b) in m1.params.entries().iter().zip(m2.params.entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
}

#[test]
fn every_step_respects_clip_and_weight_bounds() {
    let (tr, va) = small_corpus(16);
    let mut m = small_model();
    let cfg = TrainConfig {
        lr: 5e-2,
        ..quick_cfg()
    };
    let mut steps = 0;
    train(&mut m, &tr, &va, &cfg, |s| {
        steps += 1;
        assert!(s.clipped_norm <= cfg.grad_clip_norm + 1e-6, "step {}: {}", s.step, s.clipped_norm);
        assert!(s.weights.in_bounds(), "step {}: {:?}", s.step, s.weights);
        true
    })
    .unwrap();
    assert!(steps > 0);
}

#[test]
fn trained_checkpoint_reloads_exactly() {
    let (tr, va) = small_corpus(12);
    let mut m = small_model();
    let out = train(&mut m, &tr, &va, &quick_cfg(), |_| true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    save_checkpoint(&path, &out.best_model, Some(&out.best_weights)).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.model, out.best_model);
    assert_eq!(ck.masl_weights, Some(out.best_weights));

    let x = va[0].image.clone().reshape([1, 3, 32, 32]).unwrap();
    let (p1, b1) = out.best_model.predict(&x).unwrap();
    let (p2, b2) = ck.model.predict(&x).unwrap();
    assert_eq!(bits(&p1), bits(&p2));
    for (a, b) in b1.iter().zip(&b2) {
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn poisoned_input_aborts_with_step() {
    let (mut tr, va) = small_corpus(12);
    for s in &mut tr {
        s.image.data_mut()[0] = f64::NAN;
    }
    let mut m = small_model();
    match train(&mut m, &tr, &va, &quick_cfg(), |_| true) {
        Err(Error::Numeric { step, msg }) => {
            assert_eq!(step, 0);
            assert!(msg.contains("last finite metrics"), "{msg}");
        }
        other => panic!("expected a numeric abort, got {other:?}"),
    }
}

#[test]
fn default_weights_start_inside_the_box() {
    assert!(MaslWeights::default().in_bounds());
}
