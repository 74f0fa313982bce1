//! End-to-end use of the public API: generate, encode, train, checkpoint,
//! reload, analyze.

use mesalab::analyze::{export_attention_maps, sub_diagonal_mass, token_probe};
use mesalab::attention::{linear_attention, mesa_forward};
use mesalab::constructions::{prop1_oracle_step, prop1_weights, Channels, ConstructedTokenSpec};
use mesalab::io::{load_checkpoint, save_checkpoint};
use mesalab::model::{batch_loss_and_grads, TransformerConfig};
use mesalab::seqgen::{gen_sequences, lsq_autoregressive, GeneratorSpec};
use mesalab::train::{eval_loss, train_loop, Schedule, Start, TokenMode, TrainConfig};
use mesalab::Rng;

fn tiny() -> TrainConfig {
    TrainConfig {
        steps: 8,
        batch_size: 4,
        peak_lr: 1e-3,
        warmup_steps: 2,
        cosine_steps: 8,
        final_lr: 1e-5,
        weight_decay: 0.1,
        grad_clip_norm: 1.0,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        seed: 7,
        eval_every: 4,
        eval_batch: 8,
        schedule: Schedule::WarmupCosine,
        tokens: TokenMode::Constructed { channels: Channels::Three },
        frozen_corpus: None,
        deterministic: true,
        task: GeneratorSpec::fully_observed(3, 10),
        arch: TransformerConfig::linear_constructed(3, 3, 2, 2, 6),
    }
}

#[test]
fn checkpoint_resume_continues_the_same_trajectory() {
    let cfg = tiny();
    let full = train_loop(&cfg, None, |_, _, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.mesa");
    let half = TrainConfig { steps: 4, ..cfg.clone() };
    train_loop(&half, None, |row, p, s| if row.step == 4 { save_checkpoint(&path, p, Some(s)) } else { Ok(()) }).unwrap();
    let (params, state) = load_checkpoint(&path).unwrap();
    let rest = train_loop(&cfg, Some(Start { params, state: state.unwrap() }), |_, _, _| Ok(())).unwrap();

    assert_eq!(full.params, rest.params);
    assert_eq!(full.metrics.last(), rest.metrics.last());
}

#[test]
fn parallel_and_sequential_gradients_agree_bitwise() {
    let cfg = tiny();
    let params = mesalab::train::init_params(&cfg).unwrap();
    let b = gen_sequences(&cfg.task, 6, &Rng::new(1, 0)).unwrap();
    let (toks, tgts) = cfg.tokens.encode_batch(&b);
    let (la, ga) = batch_loss_and_grads(&params, &cfg.arch, &toks, &tgts, true).unwrap();
    let (lb, gb) = batch_loss_and_grads(&params, &cfg.arch, &toks, &tgts, false).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_eq!(ga, gb);
    assert!(la.is_finite() && (la - eval_loss(&params, &cfg.arch, &toks, &tgts).unwrap()).abs() < 1e-9 * la.max(1.0));
}

#[test]
fn construction_layer_matches_its_oracle_on_generated_data() {
    let spec = ConstructedTokenSpec { channels: Channels::Four, n_s: 4 };
    let b = gen_sequences(&GeneratorSpec::fully_observed(4, 12), 3, &Rng::new(2, 0)).unwrap();
    let phi0 = Rng::new(3, 0).normal_matrix(4, 4, 0.3);
    let head = prop1_weights(&spec, 0.2, &phi0);
    for seq in &b.observations {
        let tokens = TokenMode::Constructed { channels: Channels::Four }.encode(seq).0;
        let got = tokens.add(&linear_attention(&tokens, std::slice::from_ref(&head), None, None).unwrap());
        let want = prop1_oracle_step(&tokens, &spec, 0.2, &phi0);
        assert!(got.max_abs_diff(&want) < 1e-10);
    }
}

#[test]
fn mesa_readout_of_a_trajectory_is_least_squares() {
    // With keys s_{t-1}, values s_t and queries s_t, the mesa readout at t is
    // the ridge prediction from pairs up to t.
    let seq = gen_sequences(&GeneratorSpec::fully_observed(3, 15).with_noise(0.0, 0.0), 1, &Rng::new(4, 0))
        .unwrap()
        .observations
        .remove(0);
    let t = seq.rows();
    let (keys, cur) = (seq.slice_rows(0, t - 1), seq.slice_rows(1, t - 1));
    let out = mesa_forward(&keys, &cur, &cur, 2.0, None, false).unwrap();
    let lsq = lsq_autoregressive(&seq, 2.0).unwrap();
    for step in 1..t - 1 {
        let want = lsq.preds[step].as_ref().unwrap();
        for (a, b) in out.y.row(step - 1).iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "t={step}: {a} vs {b}");
        }
    }
}

#[test]
fn maps_and_probes_have_documented_shapes() {
    let cfg = tiny();
    let params = mesalab::train::init_params(&cfg).unwrap();
    let b = gen_sequences(&cfg.task, 20, &Rng::new(5, 0)).unwrap();
    let (toks, _) = cfg.tokens.encode_batch(&b);
    let maps = export_attention_maps(&params, &cfg.arch, &toks, 0).unwrap();
    assert_eq!(maps.len(), 2);
    assert_eq!(maps[0].shape(), (10, 10));
    let mass = sub_diagonal_mass(&maps[0]);
    assert!((0.0..=1.0).contains(&mass));
    let report = token_probe(&params, &cfg.arch, &toks, 0, 9, &[0, 1, 2], 1e-6).unwrap();
    assert_eq!(report.cells.len(), 3);
    assert!(report.mse(0, 0).unwrap() < 1e-6);
}
