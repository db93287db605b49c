use hyperphm::analysis::{count_params, BudgetReport};
use hyperphm::data::{make_synthetic, ChannelStats};
use hyperphm::layers::InitSpec;
use hyperphm::models::{build_model, ArchitectureSpec, Model};
use hyperphm::tensor::{Mode, Tensor};
use hyperphm::training::{evaluate, train, RunDir, TrainConfig};
use hyperphm::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(arch: &str) -> ArchitectureSpec {
    let mut spec = ArchitectureSpec::preset(arch, 10).unwrap().narrowed(16);
    spec.multipliers = vec![1, 1, 1, 1];
    spec.input_size = 16;
    spec
}

fn short_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        warmup_epochs: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn every_family_builds_and_runs_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::rand_uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng);
    for family in ["resnet", "rphm", "quat", "qphm", "vect", "vphm"] {
        for depth in [18, 50] {
            let spec = tiny(&format!("{family}{depth}"));
            let mut m = build_model::<f32>(&spec, &InitSpec::new(1)).unwrap();
            let y = m.logits(&x, Mode::Train).unwrap();
            assert_eq!(y.shape(), &[2, 10], "{}", spec.name);
            assert!(y.all_finite());
            assert_eq!(count_params(&m).total, m.params.numel());
        }
    }
}

#[test]
fn training_writes_run_directory_and_checkpoints_reload() {
    let (tr, va) = make_synthetic(10, 2, 16, 3).unwrap();
    let stats = ChannelStats::compute(&tr);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::create(dir.path().join("run")).unwrap();
    let mut m = build_model::<f32>(&tiny("qphm18"), &InitSpec::new(2)).unwrap();
    let mut seen = 0;
    let out = train(&mut m, &tr, &va, &stats, &short_config(2), Some(&run), |_| seen += 1).unwrap();
    assert_eq!(seen, 2);
    assert_eq!(out.history.len(), 2);

    let logged = RunDir::read_metrics(&run.path).unwrap();
    let as_json = |h: &[hyperphm::training::EpochMetrics]| serde_json::to_string(h).unwrap();
    assert_eq!(as_json(&logged), as_json(&out.history));
    assert!(run.path.join(RunDir::TIMINGS).exists());

    let (mut last, meta) = Model::<f32>::load(run.path.join(RunDir::LAST)).unwrap();
    assert_eq!(meta["epoch"], 2);
    let a = evaluate(&mut m, &va, &stats, 8).unwrap();
    let b = evaluate(&mut last, &va, &stats, 8).unwrap();
    assert_eq!(a, b);
    assert!(run.path.join(RunDir::BEST).exists());
}

#[test]
fn identical_seeds_give_identical_histories() {
    let (tr, va) = make_synthetic(10, 2, 16, 9).unwrap();
    let stats = ChannelStats::compute(&tr);
    let run = |seed| {
        let mut m = build_model::<f32>(&tiny("vphm18"), &InitSpec::new(seed)).unwrap();
        let cfg = TrainConfig {
            seed,
            ..short_config(2)
        };
        let history = train(&mut m, &tr, &va, &stats, &cfg, None, |_| {}).unwrap().history;
        serde_json::to_string(&history).unwrap()
    };
    assert_eq!(run(5), run(5));
}

#[test]
fn invalid_widths_are_rejected_before_building() {
    let mut spec = tiny("quat18");
    spec.widths[1] = 30;
    let err = build_model::<f32>(&spec, &InitSpec::new(0)).unwrap_err();
    assert!(matches!(err, Error::Divisibility { .. }), "{err}");
    assert!(err.to_string().contains("stage2"), "{err}");
}

#[test]
fn budget_report_of_narrow_model() {
    let m = build_model::<f32>(&tiny("qphm50"), &InitSpec::new(0)).unwrap();
    let r = BudgetReport::new(&m, Some(2)).unwrap();
    assert_eq!(r.flops, 2 * r.macs);
    assert!(r.latency.as_ref().unwrap().median_ms > 0.0);
    assert!(r.render(true).contains("head"));
}
