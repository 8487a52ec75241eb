mod common;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use squant::io::{gen_synthetic, DatasetHandle, SyntheticSpec};
use squant::nn::{ModelSpec, Network};
use squant::optim::{sgd_step, SgdConfig, SgdState};
use squant::trainer::{
    finalize, train, train_with_observer, OrderMode, Phase, SQuantConfig, SHUFFLE_SALT,
};
use squant::{Error, Graph, ParamStore, Tensor};

fn dataset(n: usize, seed: u64) -> DatasetHandle {
    let mut d = gen_synthetic(&SyntheticSpec::new(4, 8, 8, n), seed).unwrap();
    let norm = d.fit_normalization();
    d.normalize(norm).unwrap();
    d
}

fn spec() -> ModelSpec {
    ModelSpec::Cnn {
        channels: vec![4, 8, 8],
        pool: 2,
    }
}

fn network(k_act: u32, seed: u64) -> Network {
    Network::build(&spec(), &[1, 8, 8], 4, k_act, seed).unwrap()
}

fn config(k_weight: u32, k_act: u32, total: usize) -> SQuantConfig {
    let mut c = SQuantConfig::new(k_weight, k_act, 0.0, total);
    c.batch_size = 16;
    c.seed = 5;
    c.lr_schedule = vec![(0, 0.05)];
    c
}

#[test]
fn baseline_matches_plain_sgd() {
    let data = dataset(96, 1);
    let mut cfg = config(32, 32, 20);
    cfg.order_mode = OrderMode::Baseline;
    let mut net = network(32, 2);
    let report = train(&mut net, &data, None, &cfg).unwrap();

    // the same run written out by hand
    let mut plain = network(32, 2);
    let mut sgd = SgdState::new(SgdConfig {
        lr: 0.05,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        nesterov: cfg.nesterov,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::new();
    let mut cursor = 0;
    for _ in 0..cfg.total_iters {
        if cursor == 0 {
            order.shuffle(&mut rng);
        }
        let end = (cursor + cfg.batch_size).min(data.len());
        let (x, y) = data.batch(&order[cursor..end]).unwrap();
        cursor = if end == data.len() { 0 } else { end };
        let mut g = Graph::new();
        let xn = g.input(x);
        let logits = plain.forward(&mut g, xn, true).unwrap();
        let l = g.softmax_xent(logits, &y).unwrap();
        losses.push(g.value(l).data()[0]);
        g.backward(l, &mut plain.params).unwrap();
        sgd_step(&mut plain.params, &mut sgd).unwrap();
    }
    assert_eq!(report.losses.len(), losses.len());
    for (i, (a, b)) in report.losses.iter().zip(&losses).enumerate() {
        assert!((a - b).abs() <= 1e-6, "iteration {i}: {a} vs {b}");
    }
}

#[test]
fn delay_equal_to_total_leaves_weights_dense() {
    let data = dataset(64, 3);
    let mut cfg = config(4, 4, 12);
    cfg.delay_iters = Some(12);
    let mut net = network(4, 4);
    let mut phases = Vec::new();
    train_with_observer(&mut net, &data, None, &cfg, &mut |r| {
        phases.push(r.phase);
        assert_eq!(r.overall_sparsity, 0.0);
        Ok(())
    })
    .unwrap();
    assert!(phases.iter().all(|p| *p == Phase::QuantizeActivation));
    assert!(net.layers().iter().all(|l| l.compression.is_none()));
    let packed = finalize(&net).unwrap();
    assert!(packed.records.iter().all(|r| r.is_full_precision()));
    // activation sites are still quantized and stored
    assert!(packed.get("conv2.weight").unwrap().act.is_some());
}

#[test]
fn squantized_training_is_deterministic() {
    let data = dataset(64, 5);
    let test = dataset(32, 6);
    let mut cfg = config(4, 4, 15);
    cfg.delay_iters = Some(5);
    let run = || {
        let mut net = network(4, 7);
        let r = train(&mut net, &data, Some(&test), &cfg).unwrap();
        (
            serde_json::to_string(&r).unwrap(),
            finalize(&net).unwrap().to_bytes().unwrap(),
        )
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn exempt_layers_stay_full_precision() {
    let data = dataset(64, 8);
    let mut cfg = config(2, 4, 10);
    cfg.delay_iters = Some(2);
    let mut net = network(4, 9);
    let before = net.params.get(net.layer("conv1").unwrap().weight).clone();
    train(&mut net, &data, None, &cfg).unwrap();
    for name in ["conv1", "fc"] {
        let l = net.layer(name).unwrap();
        assert!(l.exempt && l.compression.is_none());
    }
    for name in ["conv2", "conv3"] {
        assert!(net.layer(name).unwrap().compression.is_some());
    }
    // the first conv trained through its full, unmasked gradient
    let after = net.params.get(net.layer("conv1").unwrap().weight);
    let changed = before
        .data()
        .iter()
        .zip(after.data())
        .filter(|(a, b)| a != b)
        .count();
    assert_eq!(changed, after.numel());
    let stats = net.weight_stats();
    assert_eq!(stats[0].n_nonzero, stats[0].n_total);
    assert_eq!(stats[0].k_bits, 32);
    let packed = finalize(&net).unwrap();
    assert!(packed.get("conv1.weight").unwrap().is_full_precision());
    assert!(!packed.get("conv2.weight").unwrap().is_full_precision());
}

#[test]
fn explicit_exemptions_and_fc_toggle() {
    let data = dataset(32, 10);
    let mut cfg = config(4, 32, 4);
    cfg.delay_iters = Some(0);
    cfg.exempt_layers = Some(vec!["conv3".into()]);
    let mut net = network(32, 11);
    train(&mut net, &data, None, &cfg).unwrap();
    let exempt: Vec<bool> = net.layers().iter().map(|l| l.exempt).collect();
    assert_eq!(exempt, vec![false, false, true, false]);

    let mut cfg = config(4, 32, 4);
    cfg.delay_iters = Some(0);
    cfg.sparsify_last_fc = true;
    let mut net = network(32, 11);
    train(&mut net, &data, None, &cfg).unwrap();
    assert!(net.layer("fc").unwrap().compression.is_some());

    cfg.exempt_layers = Some(vec!["conv9".into()]);
    let mut net = network(32, 11);
    assert!(matches!(
        train(&mut net, &data, None, &cfg),
        Err(Error::Config(_))
    ));
}

#[test]
fn fully_masked_layer_is_reported_by_name() {
    let data = dataset(32, 12);
    let mut cfg = config(4, 4, 3);
    cfg.delay_iters = Some(0);
    cfg.sigma = 1e6;
    let mut net = network(4, 13);
    match train(&mut net, &data, None, &cfg) {
        Err(Error::DegenerateLayer { layer, .. }) => assert_eq!(layer, "conv2"),
        other => panic!("expected a degenerate-layer error, got {other:?}"),
    }
}

#[test]
fn finalize_decodes_to_the_last_projection() {
    let data = dataset(64, 14);
    let mut cfg = config(3, 4, 9);
    cfg.delay_iters = Some(3);
    let mut net = network(4, 15);
    train(&mut net, &data, None, &cfg).unwrap();
    let bytes = finalize(&net).unwrap().to_bytes().unwrap();
    let packed = squant::io::load_packed(&bytes).unwrap();
    for (name, eff) in net.effective_weights() {
        let dec = packed
            .get(&format!("{name}.weight"))
            .unwrap()
            .decode()
            .unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&dec), bits(&eff), "layer {name}");
    }
    // a network loaded from the artifact predicts like the trained one
    let mut fresh = network(4, 99);
    fresh.load(&packed).unwrap();
    let (x, _) = data.batch(&[0, 1, 2, 3]).unwrap();
    let mut trained = net.clone();
    trained.clear_compression();
    for (name, eff) in net.effective_weights() {
        let id = trained.layer(&name).unwrap().weight;
        trained.params.assign(id, eff.data()).unwrap();
    }
    assert_eq!(fresh.predict(&x).unwrap(), trained.predict(&x).unwrap());
}

#[test]
fn reported_sparsity_is_the_element_weighted_mean() {
    let data = dataset(64, 16);
    let mut cfg = config(4, 4, 8);
    cfg.delay_iters = Some(2);
    let mut net = network(4, 17);
    let r = train(&mut net, &data, None, &cfg).unwrap();
    for e in &r.epochs {
        let (mut n, mut z) = (0.0, 0.0);
        for l in &e.layers {
            n += l.n_total as f64;
            z += l.n_total as f64 * l.sparsity;
        }
        assert!((e.sparsity_all - z / n).abs() <= 1e-9);
    }
    assert!((r.compression.sparsity_all - r.final_sparsity()).abs() <= 1e-9);
}

/// A masked weight whose shadow value is pushed past the threshold is
/// admitted again by the next projection.
#[test]
fn masked_weight_is_spliced_back() {
    let mut r = common::rng(18);
    let mut params = ParamStore::new();
    let w = params.add("w", Tensor::randn(&[64], 1.0, &mut r));
    let policy = squant::trainer::WeightPolicy {
        order: OrderMode::QonS,
        k: 4,
        sigma: 0.0,
        clamp_2bit: false,
    };
    let first = squant::trainer::apply_order_mode(params.get(w), &policy).unwrap();
    let i = (0..64).find(|&i| !first.mask.get(i)).unwrap();
    let wi = params.get(w).data()[i];
    assert!(wi.abs() < first.threshold);

    // a gradient that drives only the masked element outward
    let mut grad = vec![0.0f32; 64];
    grad[i] = -wi.signum() * 40.0;
    params.get_mut(w).set_grad(Some(grad)).unwrap();
    let mut sgd = SgdState::new(SgdConfig {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
        nesterov: true,
    })
    .unwrap();
    sgd_step(&mut params, &mut sgd).unwrap();
    let next = squant::trainer::apply_order_mode(params.get(w), &policy).unwrap();
    assert!(params.get(w).data()[i].abs() >= next.threshold);
    assert!(next.mask.get(i), "element {i} stayed masked");
    assert_ne!(next.effective.data()[i], 0.0);
}

/// Within training, momentum keeps moving a weight after the mask has
/// zeroed its gradient, so it can cross the threshold on its own.
#[test]
fn momentum_carries_a_masked_weight_back() {
    let mut r = common::rng(19);
    let mut params = ParamStore::new();
    let w = params.add("w", Tensor::randn(&[64], 1.0, &mut r));
    let policy = squant::trainer::WeightPolicy {
        order: OrderMode::QonS,
        k: 4,
        sigma: 0.0,
        clamp_2bit: false,
    };
    let first = squant::trainer::apply_order_mode(params.get(w), &policy).unwrap();
    let i = (0..64).find(|&i| !first.mask.get(i)).unwrap();
    let wi = params.get(w).data()[i];
    let mut sgd = SgdState::new(SgdConfig {
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 0.0,
        nesterov: false,
    })
    .unwrap();
    // one step with a dense gradient builds momentum on element i
    let mut grad = vec![0.0f32; 64];
    grad[i] = -wi.signum() * 5.0;
    params.get_mut(w).set_grad(Some(grad)).unwrap();
    sgd_step(&mut params, &mut sgd).unwrap();

    let mut readmitted = false;
    for _ in 0..50 {
        let s = squant::trainer::apply_order_mode(params.get(w), &policy).unwrap();
        if s.mask.get(i) {
            readmitted = true;
            break;
        }
        // the straight-through gradient of a masked element is zero
        let g = squant::squantize_backward(&Tensor::full(&[64], 0.0), &s.mask).unwrap();
        params.get_mut(w).set_grad(Some(g.into_data())).unwrap();
        sgd_step(&mut params, &mut sgd).unwrap();
    }
    assert!(readmitted);
}

#[test]
fn threshold_reuse_between_refreshes() {
    let data = dataset(64, 20);
    let mut cfg = config(4, 4, 10);
    cfg.delay_iters = Some(2);
    cfg.threshold_refresh_every = 4;
    let mut net = network(4, 21);
    let r = train(&mut net, &data, None, &cfg).unwrap();
    assert_eq!(r.losses.len(), 10);
    assert!(r.final_sparsity() > 0.0);
    cfg.threshold_refresh_every = 0;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn other_orders_train() {
    let data = dataset(64, 22);
    for (mode, k) in [
        (OrderMode::SonQ, 4),
        (OrderMode::QuantizeOnly, 4),
        (OrderMode::SparsifyOnly, 32),
        (OrderMode::QonS, 32),
    ] {
        let mut cfg = config(k, 4, 6);
        cfg.order_mode = mode;
        cfg.delay_iters = Some(2);
        let mut net = network(4, 23);
        let r = train(&mut net, &data, None, &cfg).unwrap();
        let conv2 = net.layer("conv2").unwrap().compression.as_ref().unwrap();
        match mode {
            OrderMode::QuantizeOnly => assert_eq!(conv2.mask.count_pruned(), 0),
            _ => assert!(conv2.mask.count_pruned() > 0),
        }
        assert_eq!(conv2.quant.is_some(), k < 32, "{mode:?}");
        assert!(r.losses.iter().all(|l| l.is_finite()));
    }
}

#[test]
fn divergence_is_reported() {
    let data = dataset(32, 24);
    let mut cfg = config(32, 32, 30);
    cfg.order_mode = OrderMode::Baseline;
    cfg.lr_schedule = vec![(0, 1e8)];
    let mut net = network(32, 25);
    assert!(matches!(
        train(&mut net, &data, None, &cfg),
        Err(Error::Divergence { .. })
    ));
}

#[test]
fn activation_width_must_match_the_network() {
    let data = dataset(32, 26);
    let cfg = config(4, 4, 2);
    let mut net = network(32, 27);
    assert!(matches!(
        train(&mut net, &data, None, &cfg),
        Err(Error::Config(_))
    ));
}
