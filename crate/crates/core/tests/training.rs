use glasskit::data::{generate_dataset, Dataset, DatasetManifest, SceneConfig};
use glasskit::network::{GlassNet, NetworkConfig};
use glasskit::neural::checkpoint::Checkpoint;
use glasskit::par;
use glasskit::trainer::{evaluate_checkpoint, train, TrainConfig, TrainSetup, FINAL_CHECKPOINT};

fn dataset(dir: &std::path::Path, count: usize, size: usize, seed: u64) -> Dataset {
    let cfg = SceneConfig {
        size,
        seed,
        ..SceneConfig::default()
    };
    let manifest = generate_dataset(dir, count, &cfg).unwrap();
    Dataset::load(&manifest, size, true).unwrap()
}

fn small(size: usize) -> NetworkConfig {
    NetworkConfig {
        input_size: size,
        encoder_channels: [4, 4, 8, 8, 8],
        decoder_width: 4,
        ..NetworkConfig::default()
    }
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let net = GlassNet::<f32>::new(NetworkConfig::default(), 9).unwrap();
    let bytes = net.to_checkpoint().to_bytes();
    let back = GlassNet::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    assert_eq!(back.config(), net.config());
}

#[test]
fn fixed_batch_loss_falls_over_fifty_iterations() {
    let tmp = tempfile::tempdir().unwrap();
    let mut falls = 0;
    for seed in 0..5 {
        let data = dataset(&tmp.path().join(seed.to_string()), 4, 64, seed);
        let cfg = TrainConfig {
            max_iters: 50,
            eval_every: 50,
            seed,
            ..TrainConfig::desk()
        };
        let mut net = GlassNet::<f32>::new(NetworkConfig::default(), cfg.init_seed()).unwrap();
        let setup = TrainSetup {
            train: &data,
            val: None,
            out_dir: None,
            augment: false,
        };
        let out = train(&mut net, &setup, &cfg, &mut |_| {}).unwrap();
        assert_eq!(out.losses.len(), 50);
        if out.losses[49].total < out.losses[0].total {
            falls += 1;
        }
    }
    assert!(falls >= 4, "loss fell in {falls} of 5 seeds");
}

#[test]
fn streamless_network_still_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 4, 32, 2);
    let net_cfg = NetworkConfig {
        enable_boundary_stream: false,
        enable_interior_stream: false,
        ..small(32)
    };
    let cfg = TrainConfig {
        max_iters: 3,
        eval_every: 3,
        batch_size: 2,
        ..TrainConfig::desk()
    };
    let mut net = GlassNet::<f32>::new(net_cfg, 0).unwrap();
    let setup = TrainSetup {
        train: &data,
        val: Some(&data),
        out_dir: None,
        augment: true,
    };
    let out = train(&mut net, &setup, &cfg, &mut |_| {}).unwrap();
    assert_eq!(out.losses.len(), 3);
    for l in &out.losses {
        assert_eq!((l.l_inner, l.l_boundary), (0.0, 0.0));
        assert!(l.l_glass > 0.0 && l.l_final > 0.0);
    }
    assert_eq!(out.evals.len(), 1);
}

#[test]
fn evaluation_is_repeatable_and_untrained_baseline_is_pinned() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("d"), 8, 32, 1);
    let cfg = TrainConfig {
        max_iters: 1,
        eval_every: 1,
        base_lr: 1e-12,
        ..TrainConfig::desk()
    };
    let out_dir = tmp.path().join("run");
    let mut net = GlassNet::<f32>::new(small(32), cfg.init_seed()).unwrap();
    let setup = TrainSetup {
        train: &data,
        val: None,
        out_dir: Some(&out_dir),
        augment: false,
    };
    train(&mut net, &setup, &cfg, &mut |_| {}).unwrap();
    let ckpt = out_dir.join(FINAL_CHECKPOINT);
    let a = evaluate_checkpoint(&ckpt, &data, 4).unwrap();
    let b = evaluate_checkpoint(&ckpt, &data, 4).unwrap();
    assert_eq!(a, b);
    let seq = par::sequential(|| evaluate_checkpoint(&ckpt, &data, 4).unwrap());
    assert_eq!(a, seq);

    // An untrained network predicts close to 0.5 everywhere, so MAE sits
    // near 0.5 and IoU cannot exceed the foreground prior by much.
    let prior: f64 = data
        .samples
        .iter()
        .map(|s| s.mask.foreground_count() as f64 / s.mask.len() as f64)
        .sum::<f64>()
        / data.len() as f64;
    assert!(a.iou <= prior + 0.05, "iou {} prior {prior}", a.iou);
    assert!((a.iou - BASELINE_IOU).abs() < 1e-3, "baseline {a:?}");
    assert!((a.mae - BASELINE_MAE).abs() < 1e-3, "baseline {a:?}");

    let other = dataset(&tmp.path().join("e"), 2, 64, 1);
    assert!(evaluate_checkpoint(&ckpt, &other, 4).is_err());
}

const BASELINE_IOU: f64 = 0.0;
const BASELINE_MAE: f64 = 0.4978;

#[test]
fn manifest_split_is_tail_fraction() {
    let tmp = tempfile::tempdir().unwrap();
    generate_dataset(tmp.path(), 10, &SceneConfig { size: 16, ..SceneConfig::default() }).unwrap();
    let m = DatasetManifest::load(tmp.path()).unwrap();
    let (train, val) = m.split(0.2).unwrap();
    assert_eq!((train.len(), val.len()), (8, 2));
    assert_eq!(val.entries[..], m.entries[8..]);
}
