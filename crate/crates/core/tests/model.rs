use moe_ensemble::checkpoint::{adapt_checkpoint_be, adapt_checkpoint_mimo, adapt_vmoe_checkpoint, Checkpoint};
use moe_ensemble::metrics::{kl_diversity, nll_error};
use moe_ensemble::model::{
    build_model, deep_ensemble_predict, mc_dropout_predict, BeInit, ForwardOptions, Model, ModelSpec, PredictionBundle, Variant,
};
use moe_ensemble::numerics::{Rng, Tensor};
use moe_ensemble::routing::Phase;

const CLASSES: usize = 5;

fn images(seed: u64, b: usize) -> Tensor {
    Rng::new(seed).gaussian(&[b, 8, 8, 3])
}

fn vmoe(seed: u64) -> Model {
    build_model(&ModelSpec::tiny(Variant::Vmoe, CLASSES).with_k(2), &mut Rng::new(seed)).unwrap()
}

fn adapted(base: &Model, variant: Variant, m: usize) -> Model {
    adapt_vmoe_checkpoint(&Checkpoint::from_model(base).unwrap(), variant, m).unwrap().into_model()
}

fn train_opts() -> ForwardOptions {
    ForwardOptions::train()
}

#[test]
fn pbe_with_one_member_is_vmoe_bitwise() {
    for seed in 0..3 {
        let base = vmoe(seed);
        let pbe = adapted(&base, Variant::Pbe, 1);
        let x = images(seed + 10, 6);
        for opts in [ForwardOptions::eval(), train_opts()] {
            let rng = Rng::new(seed + 20);
            assert_eq!(pbe.predict(&x, &rng, opts).unwrap(), base.predict(&x, &rng, opts).unwrap());
        }
    }
}

#[test]
fn pbe_built_fresh_with_one_member_is_vmoe_bitwise() {
    let spec = ModelSpec::tiny(Variant::Vmoe, CLASSES);
    let base = build_model(&spec, &mut Rng::new(4)).unwrap();
    let mut pbe_spec = spec.clone();
    pbe_spec.variant = Variant::Pbe;
    let pbe = build_model(&pbe_spec, &mut Rng::new(4)).unwrap();
    let x = images(5, 4);
    let rng = Rng::new(6);
    assert_eq!(pbe.predict(&x, &rng, train_opts()).unwrap(), base.predict(&x, &rng, train_opts()).unwrap());
}

#[test]
fn only_tiling_without_noise_has_zero_diversity() {
    let base = vmoe(1);
    let mut ot = adapted(&base, Variant::OnlyTiling, 2);
    let x = images(2, 8);
    let noisy = ot.predict(&x, &Rng::new(3), ForwardOptions::eval()).unwrap();
    assert!(kl_diversity(&noisy.member_probs).unwrap().unwrap() > 0.0);
    ot.spec.noise_multiplier = 0.0;
    let quiet = ot.predict(&x, &Rng::new(3), ForwardOptions::eval()).unwrap();
    assert_eq!(kl_diversity(&quiet.member_probs).unwrap(), Some(0.0));
    assert_eq!(quiet.member(0), quiet.member(1));
}

#[test]
fn deferred_tiling_matches_naive_tiling() {
    let base = vmoe(7);
    let vit = build_model(&ModelSpec::tiny(Variant::Vit, CLASSES), &mut Rng::new(7)).unwrap();
    let be = adapt_checkpoint_be(&Checkpoint::from_model(&vit).unwrap(), 2, BeInit::Gaussian, &mut Rng::new(8)).unwrap().into_model();
    let models = [adapted(&base, Variant::Pbe, 2), adapted(&base, Variant::OnlyTiling, 2), be];
    let x = images(9, 5);
    for model in &models {
        for phase in [Phase::Eval, Phase::Train] {
            let deferred = ForwardOptions { phase, dropout: false, naive_tiling: false };
            let naive = ForwardOptions { naive_tiling: true, ..deferred };
            let rng = Rng::new(11);
            assert_eq!(
                model.predict(&x, &rng, deferred).unwrap(),
                model.predict(&x, &rng, naive).unwrap(),
                "{} {phase:?}",
                model.spec.variant.name()
            );
        }
    }
}

#[test]
fn mc_dropout_sampling() {
    let base = vmoe(12);
    let x = images(13, 4);
    let rng = Rng::new(14);
    let one = mc_dropout_predict(&base, &x, 1, &rng).unwrap();
    let direct = base.predict(&x, &rng.fork(0), ForwardOptions { phase: Phase::Eval, dropout: true, naive_tiling: false }).unwrap();
    assert_eq!(one.ensemble_probs, direct.ensemble_probs);
    let many = mc_dropout_predict(&base, &x, 3, &rng).unwrap();
    assert!(many.member(0).max_abs_diff(&many.member(1)) > 0.0);

    let mut still = base.clone();
    still.spec.expert_dropout = 0.0;
    let same = mc_dropout_predict(&still, &x, 3, &rng).unwrap();
    assert_eq!(same.member(0), same.member(1));
    assert_eq!(same.member(1), same.member(2));
}

#[test]
fn deep_ensemble_of_copies_is_the_model() {
    let base = vmoe(15);
    let x = images(16, 6);
    let rng = Rng::new(17);
    let single = base.forward(&x, &rng, Phase::Eval).unwrap();
    let ens = deep_ensemble_predict(&[base.clone(), base.clone(), base.clone()], &x, &rng).unwrap();
    assert!(ens.ensemble_probs.max_abs_diff(&single.ensemble_probs) < 1e-15);
}

#[test]
fn ensemble_nll_below_mean_member_nll() {
    let models: Vec<Model> = (0..3).map(|s| vmoe(20 + s)).collect();
    let x = images(30, 16);
    let labels: Vec<usize> = (0..16).map(|i| i % CLASSES).collect();
    let ens = deep_ensemble_predict(&models, &x, &Rng::new(31)).unwrap();
    let (ens_nll, _) = nll_error(&ens.ensemble_probs, &labels).unwrap();
    let mean: f64 = (0..3).map(|m| nll_error(&ens.member(m), &labels).unwrap().0).sum::<f64>() / 3.0;
    assert!(ens_nll <= mean + 1e-12);
}

#[test]
fn mimo_adaptation_keeps_features_on_repeated_inputs() {
    for base in [build_model(&ModelSpec::tiny(Variant::Vit, CLASSES), &mut Rng::new(32)).unwrap(), vmoe(33)] {
        let mimo = adapt_checkpoint_mimo(&Checkpoint::from_model(&base).unwrap(), 3).unwrap().into_model();
        let x = images(34, 4);
        let rng = Rng::new(35);
        let want = base.features(&x, &rng).unwrap();
        let got = mimo.features(&x, &rng).unwrap();
        assert_eq!(got.shape()[0], 3);
        let n = want.len();
        for m in 0..3 {
            let diff = got.data()[m * n..(m + 1) * n].iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-9, "slot {m}: {diff:.3e}");
        }
        let p = mimo.forward(&x, &rng, Phase::Eval).unwrap();
        assert_eq!(p.members(), 3);
        assert!(p.member(0).max_abs_diff(&p.member(2)) < 1e-12);
    }
}

#[test]
fn mimo_with_one_member_is_identity() {
    let base = vmoe(43);
    let mimo = adapt_checkpoint_mimo(&Checkpoint::from_model(&base).unwrap(), 1).unwrap().into_model();
    let x = images(44, 3);
    let rng = Rng::new(45);
    assert_eq!(mimo.forward(&x, &rng, Phase::Eval).unwrap(), base.forward(&x, &rng, Phase::Eval).unwrap());
}

#[test]
fn partitioned_adaptation_slices_each_router() {
    let base = vmoe(36);
    let pbe = adapted(&base, Variant::Pbe, 2);
    for b in [1, 3] {
        let full = base.params.get(&format!("blocks.{b}.moe.router")).unwrap();
        let top = pbe.params.get(&format!("blocks.{b}.moe.router.0")).unwrap();
        let bottom = pbe.params.get(&format!("blocks.{b}.moe.router.1")).unwrap();
        assert_eq!(top, &full.select_rows(&[0, 1]));
        assert_eq!(bottom, &full.select_rows(&[2, 3]));
    }
    assert_eq!(pbe.parameter_count(), base.parameter_count());
    assert!(adapt_vmoe_checkpoint(&Checkpoint::from_model(&base).unwrap(), Variant::Pbe, 3).is_err());
}

#[test]
fn checkpoint_round_trip_keeps_f32_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = adapted(&vmoe(37), Variant::Pbe, 2);
    Checkpoint::from_model(&model).unwrap().save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().into_model();
    // Tensors are stored as f32.
    assert_eq!(back.spec, model.spec);
    for ((na, a), (nb, b)) in back.params.iter().zip(model.params.iter()) {
        assert_eq!(na, nb);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| *x == (*y as f32) as f64));
    }
    let bytes = Checkpoint::from_model(&model).unwrap().to_bytes().unwrap();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
}

#[test]
fn member_counts_per_variant() {
    let x = images(38, 3);
    let base = vmoe(39);
    let cases = [(adapted(&base, Variant::Pbe, 2), 2), (adapted(&base, Variant::OnlyPartitioning, 2), 1)];
    for (model, members) in cases {
        let p: PredictionBundle = model.forward(&x, &Rng::new(40), Phase::Eval).unwrap();
        assert_eq!(p.members(), members);
        assert_eq!(p.batch(), 3);
        for row in 0..3 {
            let s: f64 = p.ensemble_probs.row(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    let mh = build_model(&ModelSpec::tiny(Variant::Multihead, CLASSES).with_k(2), &mut Rng::new(41)).unwrap();
    assert_eq!(mh.forward(&x, &Rng::new(42), Phase::Eval).unwrap().members(), 2);
}

#[test]
fn largest_preset_shape() {
    let h = ModelSpec::preset("H/14").unwrap();
    assert_eq!(h.tokens(), 27 * 27 + 1);
    assert_eq!(h.special_positions(), vec![23, 25, 27, 29, 31]);
}
