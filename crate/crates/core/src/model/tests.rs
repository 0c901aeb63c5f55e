use rand::Rng;

use super::*;
use crate::gradcheck::{finite_difference, resolution, worst_relative_error};

fn tiny(arch: Arch) -> ModelConfig {
    let mut cfg = ModelConfig::new(arch, 11, 8, 16, 16, 2);
    if !matches!(arch, Arch::Gmlp | Arch::Transformer) {
        cfg.n_sparse = 1;
        cfg.n_experts = 2;
    }
    if matches!(arch, Arch::Transformer | Arch::TransformerMoe) {
        cfg.n_heads = 2;
    }
    cfg
}

#[test]
fn placement_examples() {
    assert_eq!(placement(4, 2).unwrap(), vec![2, 4]);
    assert_eq!(placement(7, 3).unwrap(), vec![2, 5, 7]);
    assert_eq!(placement(2, 1).unwrap(), vec![1]);
    assert!(placement(5, 0).unwrap().is_empty());
    assert!(placement(0, 1).is_err());
    let err = placement(12, 12).unwrap_err().to_string();
    assert!(err.contains("sparse block 8") && err.contains("dense layer 14"), "{err}");
}

#[test]
fn placement_matches_formula_for_small_counts() {
    for n1 in 1..30 {
        for n2 in 0..30 {
            let direct: Vec<usize> = (1..=n2).map(|j| (j * (n1 + n2)) / (n2 + 1)).collect();
            match placement(n1, n2) {
                Ok(idx) => {
                    assert_eq!(idx, direct);
                    assert!(idx.windows(2).all(|w| w[0] < w[1]));
                }
                Err(_) => assert!(direct.iter().any(|&i| i > n1)),
            }
        }
    }
}

#[test]
fn block_spec_interleaves_sparse_blocks() {
    use BlockKind::*;
    let mut cfg = ModelConfig::new(Arch::Smlp, 11, 8, 16, 16, 4);
    cfg.n_sparse = 2;
    cfg.n_experts = 2;
    assert_eq!(
        block_spec(&cfg).unwrap(),
        vec![DenseGmlp, DenseGmlp, SparseSmlp, DenseGmlp, DenseGmlp, SparseSmlp]
    );
    let spec = block_spec(&tiny(Arch::GmlpTokenMoe)).unwrap();
    assert_eq!(spec, vec![DenseGmlp, NaiveGmlpMoe, DenseGmlp]);
    assert_eq!(block_spec(&tiny(Arch::Gmlp)).unwrap(), vec![DenseGmlp; 2]);
}

#[test]
fn config_errors_are_named() {
    let mut cfg = tiny(Arch::Gmlp);
    cfg.n_sparse = 1;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));

    let mut cfg = tiny(Arch::Smlp);
    cfg.n_experts = 3;
    assert!(matches!(cfg.validate(), Err(Error::Divisibility { .. })));

    let mut cfg = tiny(Arch::Smlp);
    cfg.router = Some(RouterKind::Hash);
    assert!(cfg.validate().is_err());

    let mut cfg = tiny(Arch::TransformerMoe);
    cfg.token_router = Some(RouterKind::NaiveSmoe);
    assert!(cfg.validate().is_err());

    let mut cfg = tiny(Arch::Smlp);
    cfg.top_k = 3;
    assert!(cfg.validate().is_err());

    let mut cfg = tiny(Arch::Transformer);
    cfg.n_heads = 3;
    assert!(matches!(Model::build(&cfg), Err(Error::Divisibility { .. })));
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = tiny(Arch::Smlp);
    cfg.router = Some(RouterKind::PartialPrediction);
    let text = toml::to_string(&cfg).unwrap();
    assert!(text.contains("arch = \"smlp\""));
    let back: ModelConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let minimal: ModelConfig =
        toml::from_str("arch = \"gmlp\"\nvocab_size = 5\nseq_len = 4\nembed_dim = 8\nffn_dim = 8\nn_dense = 1\n").unwrap();
    assert_eq!(minimal.n_heads, 1);
    assert!(toml::from_str::<ModelConfig>("arch = \"gmlp\"\nbogus = 1\n").is_err());
}

#[test]
fn equal_seeds_give_identical_parameters() {
    for arch in [Arch::Smlp, Arch::Gmlp, Arch::Transformer, Arch::TransformerMoe, Arch::GmlpTokenMoe] {
        let cfg = tiny(arch);
        assert_eq!(Model::build(&cfg).unwrap().store, Model::build(&cfg).unwrap().store);
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(Model::build(&cfg).unwrap().store, Model::build(&other).unwrap().store);
    }
}

#[test]
fn every_arch_produces_t_by_v_logits() {
    let tokens = [1, 2, 3, 4, 5, 6, 7, 8];
    for arch in [Arch::Smlp, Arch::Gmlp, Arch::Transformer, Arch::TransformerMoe, Arch::GmlpTokenMoe] {
        let model = Model::build(&tiny(arch)).unwrap();
        let logits = model.logits(&tokens).unwrap();
        assert_eq!(logits.shape(), &[8, 11]);
        assert!(logits.all_finite());
    }
}

#[test]
fn out_of_range_token_is_rejected() {
    let model = Model::build(&tiny(Arch::Gmlp)).unwrap();
    assert!(matches!(
        model.logits(&[0, 1, 2, 3, 4, 5, 6, 11]),
        Err(Error::TokenOutOfRange { id: 11, vocab: 11 })
    ));
    assert!(model.logits(&[0, 1]).is_err());
}

#[test]
fn partial_prediction_mask() {
    let mut cfg = ModelConfig::new(Arch::Smlp, 11, 10, 8, 8, 1);
    cfg.n_sparse = 1;
    cfg.n_experts = 2;
    cfg.router = Some(RouterKind::PartialPrediction);
    let mask = Model::build(&cfg).unwrap().loss_mask();
    assert_eq!(mask.iter().filter(|m| !**m).count(), 2);
    assert_eq!(&mask[..3], &[false, false, true]);
    cfg.router = None;
    assert!(Model::build(&cfg).unwrap().loss_mask().iter().all(|&m| m));
}

#[test]
fn fresh_model_loss_is_near_log_vocab() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for arch in [Arch::Smlp, Arch::Transformer, Arch::GmlpTokenMoe] {
        let model = Model::build(&tiny(arch)).unwrap();
        let window: Vec<usize> = (0..9).map(|_| rng.gen_range(0..11)).collect();
        let mut tape = Tape::new();
        let ps = model.store.bind(&mut tape, false);
        let (_, ce, _) = model.lm_loss(&mut tape, &ps, &window, &mut Mode::eval()).unwrap();
        let loss = tape.value(ce).data()[0];
        assert!((loss - 11f64.ln()).abs() < 0.05, "{arch:?}: {loss}");
    }
}

#[test]
fn softmax_router_adds_weighted_balance_loss() {
    let mut cfg = tiny(Arch::TransformerMoe);
    cfg.token_router = Some(RouterKind::SoftmaxTopk);
    let model = Model::build(&cfg).unwrap();
    let window = [1, 2, 3, 4, 5, 6, 7, 8, 9];
    let mut tape = Tape::new();
    let ps = model.store.bind(&mut tape, false);
    let (total, ce, out) = model.lm_loss(&mut tape, &ps, &window, &mut Mode::eval()).unwrap();
    let aux = out.plans[0].plan.aux_loss.unwrap();
    let diff = tape.value(total).data()[0] - tape.value(ce).data()[0];
    assert!((diff - 0.01 * aux).abs() < 1e-15);
}

/// Sets every parameter to a random value so no gradient is negligibly small.
fn scramble(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.store.ids().collect::<Vec<_>>() {
        for v in model.store.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    model.enforce_causal();
}

fn full_model_gradient_error(cfg: &ModelConfig) -> f64 {
    let mut model = Model::build(cfg).unwrap();
    scramble(&mut model, 5);
    let window = [3, 1, 4, 1, 5, 9, 2, 6, 5];
    let mut tape = Tape::new();
    let ps = model.store.bind(&mut tape, true);
    let mut mode = Mode {
        training: true,
        dropout: 0.0,
        rng: None,
    };
    let (loss, _, base) = model.lm_loss(&mut tape, &ps, &window, &mut mode).unwrap();
    tape.backward(loss).unwrap();
    let analytic = ps.grads(&tape);
    let f0 = tape.value(loss).data()[0];
    let params: Vec<Tensor> = model.store.iter().map(|(_, t)| t.clone()).collect();
    let numeric = finite_difference(&params, 1e-6, |xs| {
        let mut tape = Tape::new();
        let ps = Bound::from_vars(xs.iter().map(|t| tape.constant(t.clone())).collect());
        let mut mode = Mode {
            training: true,
            dropout: 0.0,
            rng: None,
        };
        let (loss, _, out) = model.lm_loss(&mut tape, &ps, &window, &mut mode)?;
        for (a, b) in out.plans.iter().zip(&base.plans) {
            assert_eq!(a.plan.top1(), b.plan.top1(), "routing flipped under perturbation");
        }
        Ok(tape.value(loss).data()[0])
    })
    .unwrap();
    worst_relative_error(&analytic, &numeric, resolution(f0, 1e-6))
}

#[test]
fn full_smlp_gradients_match_finite_differences() {
    for router in [RouterKind::DeterministicChunk, RouterKind::PartialPrediction] {
        let mut cfg = tiny(Arch::Smlp);
        cfg.router = Some(router);
        let err = full_model_gradient_error(&cfg);
        assert!(err < 1e-3, "{router:?}: {err}");
    }
}

#[test]
fn baseline_gradients_match_finite_differences() {
    for arch in [Arch::Transformer, Arch::TransformerMoe, Arch::GmlpTokenMoe] {
        let err = full_model_gradient_error(&tiny(arch));
        assert!(err < 1e-3, "{arch:?}: {err}");
    }
}
