//! Training-loop contracts: route equivalence, determinism, the sampling
//! gate, and checkpoint persistence.

use diffcast_core::checkpoint;
use diffcast_core::data::{make_windows, split, CovariateSpec, Scaler, WindowSpec};
use diffcast_core::diffusion::ConvMode;
use diffcast_core::model::{evaluate, Forecaster, ModelConfig};
use diffcast_core::optim::{clip_global_norm, Adam};
use diffcast_core::synth::synth_generate;
use diffcast_core::tape::Tape;
use diffcast_core::train::{train, GRAD_CLIP_NORM};

fn synth_setup(
    nodes: usize,
    steps: usize,
    hubs: usize,
    seed: u64,
    spec: WindowSpec,
    batch: usize,
) -> (
    Vec<diffcast_core::data::ForecastBatch>,
    Vec<diffcast_core::data::ForecastBatch>,
    Scaler,
) {
    let (dataset, _) = synth_generate(nodes, steps, hubs, seed).unwrap();
    let ranges = split(&dataset).unwrap();
    let scaler = Scaler::fit(&dataset, ranges.train.clone()).unwrap();
    let cov = CovariateSpec::default();
    let train_b = make_windows(&dataset, ranges.train, spec, &scaler, cov, batch).unwrap();
    let val_b = make_windows(&dataset, ranges.val, spec, &scaler, cov, batch).unwrap();
    (train_b, val_b, scaler)
}

fn small_config(n: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        num_nodes: n,
        neighborhood: 4,
        top_k: 3,
        embed_dim: 3,
        hidden_dim: 5,
        heads: 2,
        diffusion_steps: 2,
        history: 4,
        horizon: 2,
        alpha: 2.0,
        batch_size: 8,
        learning_rate: 0.01,
        max_epochs: 2,
        seed,
        ..ModelConfig::default()
    }
}

/// Manual training steps logging the loss of each iteration; lets the two
/// convolution routes be compared iteration by iteration.
fn loss_trajectory(
    cfg: &ModelConfig,
    mode: ConvMode,
    batches: &[diffcast_core::data::ForecastBatch],
    scaler: &Scaler,
    steps: usize,
) -> Vec<f64> {
    let mut model = Forecaster::new(cfg).unwrap();
    model.set_conv_mode(mode);
    model
        .set_index_set((0..cfg.num_nodes).collect())
        .unwrap();
    let mut adam = Adam::new(model.store(), cfg.learning_rate);
    let mut losses = Vec::new();
    for step in 0..steps {
        let batch = &batches[step % batches.len()];
        let mut tape = Tape::new();
        let out = model.forward_batch(&mut tape, batch, scaler).unwrap();
        losses.push(tape.value(out.loss).unwrap().item().unwrap());
        tape.backward(out.loss, model.store_mut()).unwrap();
        clip_global_norm(model.store_mut(), GRAD_CLIP_NORM);
        adam.step(model.store_mut());
    }
    losses
}

#[test]
fn slim_and_dense_routes_share_a_loss_trajectory() {
    // With M = N and the identity index set the slim gather route and the
    // dense matmul route describe the same model; three full training
    // iterations (forward, backward, Adam) must agree to 1e-8.
    let n = 6;
    let spec = WindowSpec {
        history: 4,
        horizon: 2,
        stride: 1,
    };
    let (train_b, _, scaler) = synth_setup(n, 60, 2, 3, spec, 8);
    let cfg = ModelConfig {
        num_nodes: n,
        neighborhood: n, // M = N
        top_k: n - 1,
        convergence_iter: Some(0),
        ..small_config(n, 5)
    };
    let slim = loss_trajectory(&cfg, ConvMode::Slim, &train_b, &scaler, 3);
    let dense = loss_trajectory(&cfg, ConvMode::Dense, &train_b, &scaler, 3);
    assert_eq!(slim.len(), 3);
    for (s, d) in slim.iter().zip(&dense) {
        assert!(
            (s - d).abs() <= 1e-8,
            "slim {s} vs dense {d} diverged beyond 1e-8"
        );
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let spec = WindowSpec {
        history: 4,
        horizon: 2,
        stride: 2,
    };
    let (train_b, val_b, scaler) = synth_setup(10, 80, 3, 9, spec, 8);
    let cfg = ModelConfig {
        num_nodes: 10,
        ..small_config(10, 21)
    };
    let run = || {
        let mut logs = Vec::new();
        let out = train(&cfg, &train_b, &val_b, &scaler, |l| logs.push(*l)).unwrap();
        (logs, out.best_val_mae)
    };
    let (logs_a, best_a) = run();
    let (logs_b, best_b) = run();
    assert_eq!(best_a.to_bits(), best_b.to_bits());
    assert_eq!(logs_a.len(), logs_b.len());
    for (a, b) in logs_a.iter().zip(&logs_b) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.val_mae.to_bits(), b.val_mae.to_bits());
    }
}

#[test]
fn sampling_gate_freezes_index_set() {
    // r = 0: the gate never fires, so the trained model keeps the index set
    // sampled at construction.
    let spec = WindowSpec {
        history: 4,
        horizon: 2,
        stride: 2,
    };
    let (train_b, val_b, scaler) = synth_setup(10, 80, 3, 9, spec, 8);
    let cfg = ModelConfig {
        num_nodes: 10,
        convergence_iter: Some(0),
        ..small_config(10, 33)
    };
    let initial = Forecaster::new(&cfg).unwrap().index_set().to_vec();
    let out = train(&cfg, &train_b, &val_b, &scaler, |_| {}).unwrap();
    assert_eq!(out.model.index_set(), initial.as_slice());

    // With the gate open for the whole run the set generally moves.
    let cfg_open = ModelConfig {
        convergence_iter: Some(usize::MAX),
        ..cfg
    };
    let out_open = train(&cfg_open, &train_b, &val_b, &scaler, |_| {}).unwrap();
    assert_ne!(out_open.model.index_set(), initial.as_slice());
}

#[test]
fn checkpoint_roundtrip_reproduces_metrics() {
    let spec = WindowSpec {
        history: 4,
        horizon: 2,
        stride: 2,
    };
    let (train_b, val_b, scaler) = synth_setup(10, 80, 3, 9, spec, 8);
    let cfg = ModelConfig {
        num_nodes: 10,
        ..small_config(10, 55)
    };
    let out = train(&cfg, &train_b, &val_b, &scaler, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &out.model, &scaler, &out.optimizer, out.iterations as u64).unwrap();
    let loaded = checkpoint::load(&path).unwrap();

    assert_eq!(loaded.iteration, out.iterations as u64);
    assert_eq!(loaded.model.index_set(), out.model.index_set());
    assert_eq!(loaded.scaler, scaler);
    assert_eq!(loaded.optimizer.step_count(), out.optimizer.step_count());

    let horizons = [1usize, 2];
    let before = evaluate(&out.model, &val_b, &scaler, &horizons).unwrap();
    let after = evaluate(&loaded.model, &val_b, &scaler, &horizons).unwrap();
    for h in horizons {
        assert_eq!(before[&h].mae.to_bits(), after[&h].mae.to_bits());
        assert_eq!(before[&h].rmse.to_bits(), after[&h].rmse.to_bits());
        assert_eq!(before[&h].mape.to_bits(), after[&h].mape.to_bits());
    }
}

#[test]
fn checkpoint_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"not a checkpoint at all").unwrap();
    assert!(matches!(
        checkpoint::load(&path),
        Err(diffcast_core::CoreError::Checkpoint(_))
    ));

    // Truncation after a valid prefix must also fail cleanly.
    let spec = WindowSpec {
        history: 4,
        horizon: 2,
        stride: 2,
    };
    let (train_b, val_b, scaler) = synth_setup(10, 80, 3, 9, spec, 8);
    let cfg = ModelConfig {
        num_nodes: 10,
        max_epochs: 1,
        ..small_config(10, 57)
    };
    let out = train(&cfg, &train_b, &val_b, &scaler, |_| {}).unwrap();
    let full = dir.path().join("full.ckpt");
    checkpoint::save(&full, &out.model, &scaler, &out.optimizer, 1).unwrap();
    let bytes = std::fs::read(&full).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        checkpoint::load(&cut),
        Err(diffcast_core::CoreError::Checkpoint(_))
    ));
}

#[test]
fn evaluate_rejects_horizon_beyond_model() {
    let spec = WindowSpec {
        history: 4,
        horizon: 2,
        stride: 2,
    };
    let (_, val_b, scaler) = synth_setup(10, 80, 3, 9, spec, 8);
    let cfg = ModelConfig {
        num_nodes: 10,
        ..small_config(10, 59)
    };
    let model = Forecaster::new(&cfg).unwrap();
    assert!(evaluate(&model, &val_b, &scaler, &[3]).is_err());
    assert!(evaluate(&model, &val_b, &scaler, &[0]).is_err());
    assert!(evaluate(&model, &val_b, &scaler, &[2]).is_ok());
}

#[test]
fn config_invariants_are_enforced() {
    let mut cfg = small_config(10, 1);
    cfg.num_nodes = 10;
    cfg.neighborhood = 11;
    assert!(Forecaster::new(&cfg).is_err());

    let mut cfg = small_config(10, 1);
    cfg.top_k = cfg.neighborhood;
    assert!(Forecaster::new(&cfg).is_err());

    let mut cfg = small_config(10, 1);
    cfg.alpha = 2.7;
    assert!(Forecaster::new(&cfg).is_err());

    let mut cfg = small_config(10, 1);
    cfg.history = 1;
    assert!(Forecaster::new(&cfg).is_err());

    let mut cfg = small_config(10, 1);
    cfg.horizon = 0;
    assert!(Forecaster::new(&cfg).is_err());
}

#[test]
fn divergence_aborts_with_diagnostic() {
    // An unbounded learning rate blows the parameters up within a step or
    // two; the loop must stop with the divergence error, not NaN-loop.
    let spec = WindowSpec {
        history: 4,
        horizon: 2,
        stride: 2,
    };
    let (train_b, val_b, scaler) = synth_setup(10, 80, 3, 9, spec, 8);
    let cfg = ModelConfig {
        num_nodes: 10,
        learning_rate: 1e300,
        ..small_config(10, 61)
    };
    match train(&cfg, &train_b, &val_b, &scaler, |_| {}) {
        Err(diffcast_core::CoreError::Diverged { iter }) => {
            assert!(iter < 5, "should diverge within a few iterations");
        }
        Err(other) => panic!("expected divergence abort, got {other}"),
        Ok(_) => panic!("expected divergence abort, got success"),
    }
}
