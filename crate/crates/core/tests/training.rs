use spanproto::synthetic::generate_splits;
use spanproto::{train, EncoderConfig, EpisodeDataset, GeneratorConfig, StepReport, TrainConfig};

fn data() -> EpisodeDataset {
    let gen = GeneratorConfig {
        episodes: 10,
        ..Default::default()
    };
    generate_splits(&gen, 2, 5).unwrap().swap_remove(0)
}

fn small(total_steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps,
        pretrain_steps: 200,
        encoder: EncoderConfig {
            dim: 16,
            mixing_layers: 1,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn check_terms(r: &StepReport) {
    for e in &r.episodes {
        assert!((e.total - e.assembled(r.lambda)).abs() <= 1e-10, "step {}", r.step);
    }
    let mean = r.episodes.iter().map(|e| e.total).sum::<f64>() / r.episodes.len() as f64;
    assert!((r.total - mean).abs() <= 1e-10);
}

#[test]
fn schedule_switches_at_pretraining_boundary() {
    let (_, reports) = train(&data(), &small(230)).unwrap();
    assert_eq!(reports.len(), 230);
    for r in &reports {
        check_terms(r);
        let e = &r.episodes[0];
        if r.step < 200 {
            assert_eq!(r.lambda, 0.0);
            assert!((r.total - e.span_loss / e.support_size as f64).abs() <= 1e-10);
        } else {
            assert_eq!(r.lambda, 1.0);
        }
    }
}

#[test]
fn same_seed_gives_identical_reports() {
    let config = small(210);
    let (m1, a) = train(&data(), &config).unwrap();
    let (m2, b) = train(&data(), &config).unwrap();
    assert_eq!(a, b);
    for id in m1.params.ids() {
        assert_eq!(m1.params.value(id), m2.params.value(id));
    }
    let other = TrainConfig { seed: 43, ..config };
    let (_, c) = train(&data(), &other).unwrap();
    assert_ne!(a, c);
}

#[test]
fn disabled_margin_contributes_nothing() {
    let mut config = small(240);
    config.margin.margin_loss = false;
    let (_, reports) = train(&data(), &config).unwrap();
    for r in &reports {
        check_terms(r);
        assert!(r.episodes.iter().all(|e| e.margin_loss == 0.0));
    }
}

#[test]
fn batches_average_episode_objectives() {
    let mut config = small(205);
    config.batch_size = 3;
    let (_, reports) = train(&data(), &config).unwrap();
    for r in &reports {
        assert_eq!(r.episodes.len(), 3);
        check_terms(r);
    }
}
