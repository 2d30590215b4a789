use lorae::data::{synth_lowrank, Dataset};
use lorae::experiments::{
    convergence_check, lambda_sweep, minmax_check, probe_sweep, sha256_hex, ConvergenceProblem, DeskConfig, Manifest,
};
use lorae::model::{LoraeParams, ModelConfig};
use lorae::optim::{train, TrainConfig};
use lorae::probe::ProbeConfig;

fn small_config() -> DeskConfig {
    DeskConfig {
        train_size: 120,
        latent_dim: 4,
        hidden: vec![8],
        epochs: 2,
        batch_size: 16,
        gmm_k: 2,
        fid_samples: 64,
        feature_dim: 6,
        ..DeskConfig::default()
    }
}

fn split() -> (Dataset, Dataset) {
    let all = synth_lowrank(160, 12, 3, 0.01, 1).unwrap();
    (
        all.select(&(0..120).collect::<Vec<_>>()),
        all.select(&(120..160).collect::<Vec<_>>()),
    )
}

#[test]
fn repeated_lambda_gives_identical_rows() {
    let (train, test) = split();
    let res = lambda_sweep(&train, &test, &[1e-3, 1e-3, 0.0], &small_config(), None).unwrap();
    assert_eq!(res.rows[0], res.rows[1]);
    assert_eq!(res.rows.len(), 3);
    assert!(res.to_csv().lines().count() == 4);
    assert!(res.model_for(0.0).is_some());
}

#[test]
fn sweep_writes_run_directories_with_manifests() {
    let (train, test) = split();
    let tmp = tempfile::tempdir().unwrap();
    lambda_sweep(&train, &test, &[0.0, 0.1], &small_config(), Some(tmp.path())).unwrap();
    for name in ["lambda_0e0", "lambda_1e-1"] {
        let dir = tmp.path().join(name);
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
        for file in [
            "config.json",
            "metrics.csv",
            "checkpoint",
            "spectrum.csv",
            "samples_gmm.pgm",
            "samples_mvg.pgm",
        ] {
            let bytes = std::fs::read(dir.join(file)).unwrap();
            assert_eq!(manifest.outputs[file], sha256_hex(&bytes), "{name}/{file}");
        }
        let (cfg, _) = LoraeParams::load(dir.join("checkpoint")).unwrap();
        assert_eq!(cfg.latent_dim, 4);
    }
}

#[test]
fn sweep_needs_two_lambdas() {
    let (train, test) = split();
    assert!(lambda_sweep(&train, &test, &[0.0], &small_config(), None).is_err());
}

#[test]
fn convergence_check_is_reproducible_and_shrinks() {
    let p = ConvergenceProblem::default();
    let a = convergence_check(&p, &[50, 200]).unwrap();
    let b = convergence_check(&p, &[50, 200]).unwrap();
    assert_eq!(a, b);
    assert!(a.gamma > 0.0 && a.lipschitz > 0.0);
    assert!((a.rows[1].alpha - a.rows[0].alpha / 2.0).abs() <= 1e-15 * a.rows[0].alpha);
    assert!(a.non_increasing());
    assert_eq!(a.to_csv().lines().next(), Some("horizon,alpha,min_grad_norm"));
}

fn trained_toy(lambda: f64) -> (LoraeParams, Dataset) {
    let ds = synth_lowrank(200, 12, 3, 0.01, 2).unwrap();
    let labels: Vec<u8> = (0..200).map(|i| (i % 10) as u8).collect();
    let ds = Dataset::new(ds.images, Some(labels), 1, 12).unwrap();
    let cfg = ModelConfig {
        input_dim: 12,
        latent_dim: 4,
        hidden: vec![8],
        lambda,
        seed: 3,
    };
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 20,
        lambda,
        ..TrainConfig::default()
    };
    (train(LoraeParams::init(&cfg).unwrap(), &ds, &tc).unwrap().0, ds)
}

#[test]
fn minmax_ratios_are_positive() {
    let (model, ds) = trained_toy(1e-2);
    let ratios = minmax_check(&model, &ds, 10, 100, 0).unwrap();
    assert_eq!(ratios.len(), 10);
    assert!(ratios.iter().all(|&r| r > 0.0 && r.is_finite()));
    assert!(minmax_check(&model, &ds, 150, 100, 0).is_err());
}

#[test]
fn probe_sweep_covers_every_combination() {
    let (model, ds) = trained_toy(0.0);
    let cfg = ProbeConfig {
        epochs: 2,
        ..ProbeConfig::default()
    };
    let recs = probe_sweep(
        &[("a", 0.0, &model), ("b", 0.0, &model)],
        &ds,
        &ds,
        &[20, 100],
        &[0, 1],
        &cfg,
    )
    .unwrap();
    assert_eq!(recs.len(), 8);
    assert_eq!(recs[0].accuracy, recs[4].accuracy);
    assert!(recs.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
}
