mod common;

use common::{objective_error, small_spec, FD_TOL};
use moe_ensemble::losses::{
    data_loss_graph, ensemble_cross_entropy, importance_loss, load_loss, member_avg_cross_entropy, omega, omega_partition,
    total_loss, total_loss_graph, LossMode,
};
use moe_ensemble::model::{build_model, ForwardOptions, Variant};
use moe_ensemble::numerics::{softmax_rows, Graph, Rng, Tensor};
use proptest::prelude::*;

#[test]
fn total_loss_gradients_vmoe() {
    let model = build_model(&small_spec(Variant::Vmoe, 1), &mut Rng::new(1)).unwrap();
    let err = objective_error(&model, LossMode::MemberAvg, 0.1);
    assert!(err < FD_TOL, "{err:.3e}");
}

#[test]
fn total_loss_gradients_pbe() {
    let mut spec = small_spec(Variant::Pbe, 2);
    spec.k = 1;
    let model = build_model(&spec, &mut Rng::new(2)).unwrap();
    for mode in [LossMode::MemberAvg, LossMode::EnsembleCe] {
        let err = objective_error(&model, mode, 0.1);
        assert!(err < FD_TOL, "{mode:?}: {err:.3e}");
    }
}

#[test]
fn total_loss_gradients_be() {
    let model = build_model(&small_spec(Variant::Be, 2), &mut Rng::new(5)).unwrap();
    let err = objective_error(&model, LossMode::MemberAvg, 0.1);
    assert!(err < FD_TOL, "{err:.3e}");
}

#[test]
fn graph_objective_matches_scalar_parts() {
    let model = build_model(&small_spec(Variant::Vmoe, 1), &mut Rng::new(6)).unwrap();
    let x = Rng::new(7).gaussian(&[4, 4, 4, 3]);
    let labels = vec![vec![0, 1, 2, 0]];
    let mut g = Graph::new();
    let pv = model.params.to_graph(&mut g, false);
    let out = model.graph_forward(&mut g, &pv, &x, &Rng::new(8), ForwardOptions::train()).unwrap();
    let data = data_loss_graph(&mut g, &out.member_logits, &labels, LossMode::MemberAvg).unwrap();
    let (total, aux) = total_loss_graph(&mut g, data, &out.sparse, 0.3).unwrap();

    let probs = softmax_rows(g.value(out.member_logits[0])).unwrap();
    let bundle = Tensor::new(vec![1, 4, 3], probs.data().to_vec()).unwrap();
    let data_scalar = member_avg_cross_entropy(&bundle, &labels[0]).unwrap();
    assert!((g.value(data).data()[0] - data_scalar).abs() < 1e-12);

    let omegas: Vec<f64> = out
        .sparse
        .iter()
        .map(|l| {
            let blocks: Vec<(Tensor, Tensor)> = l.routers.iter().map(|b| (g.value(b.clean).clone(), g.value(b.noisy).clone())).collect();
            omega_partition(&blocks, l.routers[0].sigma, l.routers[0].k).unwrap()
        })
        .collect();
    let want = total_loss(data_scalar, &omegas, 0.3);
    assert!((g.value(total).data()[0] - want).abs() < 1e-12);
    let aux = g.value(aux.unwrap()).data()[0];
    assert!((aux - omegas.iter().sum::<f64>() / omegas.len() as f64).abs() < 1e-12);
}

#[test]
fn dense_models_have_no_aux_term() {
    let model = build_model(&small_spec(Variant::Vit, 1), &mut Rng::new(9)).unwrap();
    let mut g = Graph::new();
    let pv = model.params.to_graph(&mut g, false);
    let out = model.graph_forward(&mut g, &pv, &Rng::new(10).gaussian(&[2, 4, 4, 3]), &Rng::new(11), ForwardOptions::train()).unwrap();
    let data = data_loss_graph(&mut g, &out.member_logits, &[vec![0, 1]], LossMode::MemberAvg).unwrap();
    let (total, aux) = total_loss_graph(&mut g, data, &out.sparse, 0.1).unwrap();
    assert!(aux.is_none());
    assert_eq!(total, data);
}

#[test]
fn importance_extremes() {
    assert_eq!(importance_loss(&Tensor::full(&[6, 4], 0.25)), 0.0);
    let mut one_hot = Tensor::zeros(&[5, 4]);
    for i in 0..5 {
        one_hot.row_mut(i)[2] = 1.0;
    }
    // CV² of (0, 0, n, 0) is E − 1.
    assert!((importance_loss(&one_hot) - 3.0).abs() < 1e-12);
}

#[test]
fn hard_load_counts_top_k() {
    let logits = Tensor::new(vec![2, 3], vec![3.0, 2.0, 1.0, 3.0, 2.0, 1.0]).unwrap();
    // Loads (2, 2, 0): mean 4/3, variance 8/9, CV² = 1/2.
    assert!((load_loss(&logits, &logits, 0.0, 2).unwrap() - 0.5).abs() < 1e-12);
    let balanced = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(load_loss(&balanced, &balanced, 0.0, 1).unwrap(), 0.0);
}

#[test]
fn ensemble_ce_bounded_by_member_average() {
    let mut rng = Rng::new(12);
    for _ in 0..50 {
        let logits = rng.gaussian(&[3 * 4, 5]).scale(2.0);
        let probs = Tensor::new(vec![3, 4, 5], softmax_rows(&logits).unwrap().data().to_vec()).unwrap();
        let labels: Vec<usize> = (0..4).map(|_| rng.index(5)).collect();
        let ens = ensemble_cross_entropy(&probs, &labels).unwrap();
        let avg = member_avg_cross_entropy(&probs, &labels).unwrap();
        assert!(ens <= avg + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn omega_is_nonnegative_and_partition_averages(seed in any::<u64>(), e in 2usize..7, n in 1usize..8, blocks in 1usize..4) {
        let mut rng = Rng::new(seed);
        let parts: Vec<(Tensor, Tensor)> = (0..blocks)
            .map(|_| {
                let clean = rng.gaussian(&[n, e]);
                let noisy = clean.add(&rng.gaussian(&[n, e]).scale(0.3)).unwrap();
                (clean, noisy)
            })
            .collect();
        let each: Vec<f64> = parts.iter().map(|(c, z)| omega(c, z, 0.3, 1).unwrap()).collect();
        prop_assert!(each.iter().all(|&o| o >= 0.0));
        let mean = each.iter().sum::<f64>() / blocks as f64;
        prop_assert!((omega_partition(&parts, 0.3, 1).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn zero_aux_weight_leaves_data_loss(d in -5.0f64..5.0, o in proptest::collection::vec(0.0f64..3.0, 0..4)) {
        prop_assert_eq!(total_loss(d, &o, 0.0), d);
    }
}
