use geomano::config::RunConfig;
use geomano::darcy::{gen_dataset, DarcySet, GenOptions};
use geomano::model::{GeoMaNO, ModelConfig};
use geomano::train::{evaluate, input_features, load_checkpoint, save_checkpoint, train_loop, RunOutput, TrainConfig};
use geomano::verify::{scan_check, ScanWorkload};
use geomano::scan::{scan2d_naive, tiled_scan2d};
use geomano::Rng;

fn small_data() -> geomano::darcy::Generated {
    gen_dataset(&GenOptions { n_train: 6, n_test: 3, size: 16, seed: 11, ..GenOptions::default() }).unwrap()
}

#[test]
fn dataset_files_round_trip() {
    let g = small_data();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.gmno");
    g.train.save(&path).unwrap();
    let back = DarcySet::load(&path).unwrap();
    assert_eq!(back, g.train);
    assert!(DarcySet::load(dir.path().join("missing.gmno")).is_err());
}

#[test]
fn model_predicts_on_dataset_grid() {
    let g = small_data();
    let cfg = ModelConfig { depth: 2, embed_dim: 8, n_dstates: 2, grid: (16, 16), patches: (4, 4), ..ModelConfig::default() };
    let model = GeoMaNO::new(cfg, &mut Rng::new(0)).unwrap();
    let x = input_features(&g.test.a, &g.test.stats).unwrap();
    let y = model.predict(&x).unwrap();
    assert_eq!(y.shape(), &[3, 16, 16, 1]);
    assert!(y.is_finite());
}

#[test]
fn checkpoint_reproduces_metric() {
    let g = small_data();
    let mut cfg = RunConfig::parse("depth = 1\nembed_dim = 8\nn_dstates = 2\npatches = 4x4\ngrid = 16x16\nepochs = 1").unwrap();
    cfg.train = TrainConfig { batch_size: 3, ..cfg.train };
    let outcome = train_loop(&cfg.model, &cfg.train, &g.train, &g.test, &RunOutput::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.gmno");
    save_checkpoint(&path, &outcome.best, &g.train.stats, outcome.best_test_rel_l2).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    let mut model = GeoMaNO::new(cfg.model.clone(), &mut Rng::new(99)).unwrap();
    model.params.load_from(&ckpt.params).unwrap();
    assert_eq!(ckpt.stats, g.train.stats);
    assert!((evaluate(&model, &g.test, 3).unwrap() - ckpt.test_rel_l2).abs() <= 1e-10);
}

#[test]
fn tiled_matches_naive_on_batched_grid() {
    let work = ScanWorkload::random(&mut Rng::new(5), 3, 19, 11, 3, 2);
    let naive = scan2d_naive(&work.inputs()).unwrap();
    for tile in [1, 4, 7, 19, 40] {
        assert!(tiled_scan2d(&work.inputs(), tile).unwrap().max_abs_diff(&naive).unwrap() <= 1e-12);
    }
    assert!(scan_check(20, 8, 1).unwrap().max_deviation() <= 1e-12);
}
