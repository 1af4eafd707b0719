use std::collections::BTreeSet;

use glasskit::losses::total_loss;
use glasskit::gradcheck::random_supervision;
use glasskit::network::{GlassNet, Mid, NetworkConfig};
use glasskit::neural::{NormMode, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> NetworkConfig {
    NetworkConfig {
        input_size: 32,
        encoder_channels: [4, 4, 8, 8, 8],
        decoder_width: 4,
        ..NetworkConfig::default()
    }
}

fn names(cfg: NetworkConfig) -> BTreeSet<String> {
    let net = GlassNet::<f32>::new(cfg, 1).unwrap();
    net.store().params().iter().map(|p| p.name.clone()).collect()
}

fn removed(full: &BTreeSet<String>, cfg: NetworkConfig) -> BTreeSet<String> {
    let part = names(cfg);
    assert!(part.is_subset(full));
    full.difference(&part).cloned().collect()
}

#[test]
fn impulse_reaches_dilated_radius() {
    let mut store = ParamStore::<f64>::new(11);
    let rates = [2, 4, 8, 16];
    let mid = Mid::new(&mut store, "mid", 2, &rates, true).unwrap();
    let (n, c) = (129, 64);
    let mut x = vec![0.0; 2 * n * n];
    x[c * n + c] = 1.0;
    let y = mid.forward_linear(&Tensor::new(&[1, 2, n, n], x).unwrap()).unwrap();
    let y = y.to_f64_vec();
    let row: Vec<usize> = (0..n).filter(|&x| y[c * n + x] != 0.0).collect();
    let col: Vec<usize> = (0..n).filter(|&r| y[r * n + c] != 0.0).collect();
    let reach = 1 + rates.iter().sum::<usize>();
    for hits in [&row, &col] {
        assert_eq!(hits.first(), Some(&(c - reach)));
        assert_eq!(hits.last(), Some(&(c + reach)));
        let span = hits.last().unwrap() - hits.first().unwrap() + 1;
        assert!(span >= 1 + 2 * rates.iter().sum::<usize>(), "span {span}");
    }
}

#[test]
fn disabled_mid_is_one_conv() {
    let mut store = ParamStore::<f32>::new(0);
    let mid = Mid::new(&mut store, "m", 4, &[2, 4], false).unwrap();
    let p: Vec<&str> = store.params().iter().map(|p| p.name.as_str()).collect();
    assert!(p.iter().all(|n| n.starts_with("m.local.")), "{p:?}");
    let x = Tensor::<f32>::full(&[1, 4, 8, 8], 0.5);
    assert_eq!(mid.forward(&x, NormMode::Train).unwrap().shape(), &[1, 4, 8, 8]);
}

#[test]
fn each_switch_removes_only_its_parameters() {
    let full = names(small());
    let nob = removed(&full, NetworkConfig { enable_boundary_stream: false, ..small() });
    assert!(!nob.is_empty() && nob.iter().all(|n| n.starts_with("boundary.")));
    assert_eq!(nob.len(), full.iter().filter(|n| n.starts_with("boundary.")).count());

    let noi = removed(&full, NetworkConfig { enable_interior_stream: false, ..small() });
    assert!(!noi.is_empty() && noi.iter().all(|n| n.starts_with("interior.")));
    assert_eq!(noi.len(), full.iter().filter(|n| n.starts_with("interior.")).count());

    let nobfm = removed(&full, NetworkConfig { enable_bfm: false, ..small() });
    let expect: BTreeSet<String> = full
        .iter()
        .filter(|n| n.starts_with("bfm.") || n.starts_with("boundary.fuse."))
        .cloned()
        .collect();
    assert_eq!(nobfm, expect);

    let nomid = removed(&full, NetworkConfig { enable_mid: false, ..small() });
    assert!(!nomid.is_empty());
    assert!(nomid.iter().all(|n| n.contains(".mid.b") || n.contains(".mid.fuse.")), "{nomid:?}");
}

#[test]
fn each_switch_removes_only_its_loss_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sup = random_supervision(&mut rng, 2, 32, 32);
    let image = Tensor::<f64>::full(&[2, 3, 32, 32], 0.3);
    for (b, i, terms) in [(true, true, 4), (false, true, 3), (true, false, 3), (false, false, 2)] {
        for bfm in [true, false] {
            let cfg = NetworkConfig {
                enable_boundary_stream: b,
                enable_interior_stream: i,
                enable_bfm: bfm,
                ..small()
            };
            let net = GlassNet::<f64>::new(cfg.clone(), 2).unwrap();
            let bundle = net.forward(&image, NormMode::Train).unwrap();
            assert_eq!(bundle.supervised_maps().len(), 1 + 3 + usize::from(i) + 5 * usize::from(b));
            let loss = total_loss(&bundle, &sup, cfg.glass_branches(), cfg.boundary_branches()).unwrap();
            assert_eq!(loss.active_terms, terms);
            assert_eq!(loss.breakdown.l_boundary == 0.0, !b);
            assert_eq!(loss.breakdown.l_inner == 0.0, !i);
            assert!(loss.total.item().is_finite());
        }
    }
}

#[test]
fn default_bundle_arity() {
    let net = GlassNet::<f32>::new(NetworkConfig::default(), 0).unwrap();
    let bundle = net.forward(&Tensor::full(&[1, 3, 64, 64], 0.5), NormMode::Eval).unwrap();
    assert!(bundle.interior_map.is_some());
    assert_eq!(bundle.boundary_maps.len(), 5);
    assert_eq!(bundle.glass_maps.len(), 3);
    let maps = bundle.supervised_maps();
    assert_eq!(maps.len(), 10);
    assert!(maps.iter().all(|m| m.shape() == [1, 1, 64, 64]));
}
