use proptest::prelude::*;

use geoflow::flow::{self, Density, FlowConfig};
use geoflow::graph::WeightedGraph;
use geoflow::oracle::{gw2_two_node_closed_form, TwoNodeInstance};

/// Connected-or-not graph on `n` nodes from a list of candidate pairs.
fn graph_strategy() -> impl Strategy<Value = WeightedGraph> {
    (2usize..25).prop_flat_map(|n| {
        prop::collection::vec((0..n, 0..n, 0.1f64..3.0), 1..60).prop_map(move |pairs| {
            let triples: Vec<_> = pairs
                .into_iter()
                .filter(|(i, j, _)| i != j)
                .map(|(i, j, w)| ((i.min(j), i.max(j)), w))
                .collect::<std::collections::BTreeMap<_, _>>()
                .into_iter()
                .map(|((i, j), w)| (i, j, w))
                .collect();
            WeightedGraph::build(n, &triples).unwrap()
        })
    })
}

fn instance() -> impl Strategy<Value = (WeightedGraph, Vec<f64>, Density, f64)> {
    graph_strategy().prop_flat_map(|g| {
        let n = g.num_nodes();
        (
            Just(g),
            prop::collection::vec(-2.0f64..2.0, n),
            prop::collection::vec(0.05f64..1.0, n),
            0.0f64..1.0,
        )
            .prop_map(|(g, loss, w, beta)| (g, loss, Density::from_weights(w).unwrap(), beta))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn step_conserves_mass_per_component((g, loss, q, beta) in instance()) {
        let cfg = FlowConfig { beta, tau: 0.05, ..FlowConfig::default() };
        let step = flow::euler_step(&q, &loss, &g, &cfg).unwrap();
        prop_assert!((step.pre_renorm_sum - 1.0).abs() <= 1e-12);
        for comp in g.connected_components() {
            prop_assert!((step.density.mass_of(&comp) - q.mass_of(&comp)).abs() <= 1e-12);
        }
        prop_assert!(step.density.values().iter().all(|&x| x >= cfg.positivity_floor));
    }

    #[test]
    fn velocity_is_antisymmetric((g, loss, q, beta) in instance()) {
        let v = flow::velocity(&loss, &q, &g, beta).unwrap();
        for e in g.edges() {
            prop_assert_eq!(v.get(&g, e.i, e.j), -v.get(&g, e.j, e.i));
        }
    }

    #[test]
    fn derivative_sums_to_zero((g, loss, q, beta) in instance()) {
        let dq = flow::density_derivative(&q, &loss, &g, beta).unwrap();
        let scale: f64 = dq.iter().map(|d| d.abs()).sum::<f64>().max(1.0);
        prop_assert!(dq.iter().sum::<f64>().abs() <= 1e-13 * scale);
    }

    #[test]
    fn small_steps_never_lower_free_energy((g, loss, q, beta) in instance()) {
        let cfg = FlowConfig { beta, tau: 1e-3, t_in: 50, ..FlowConfig::default() };
        let trace = flow::run_flow(Some(&q), &loss, &g, &cfg).unwrap();
        for w in trace.free_energies.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-10, "{} -> {}", w[0], w[1]);
        }
        let total: f64 = trace.step_actions.iter().sum();
        prop_assert_eq!(total, trace.cumulative_gw2);
        prop_assert!(trace.step_actions.iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn gibbs_density_is_stationary((g, loss, q, beta) in instance()) {
        let beta = beta + 0.05;
        let gibbs = flow::gibbs_stationary(&loss, beta, &g, &q).unwrap();
        let dq = flow::density_derivative(&gibbs, &loss, &g, beta).unwrap();
        prop_assert!(dq.iter().all(|d| d.abs() < 1e-12), "{dq:?}");
        for comp in g.connected_components() {
            prop_assert!((gibbs.mass_of(&comp) - q.mass_of(&comp)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_loss_uniform_is_fixed(g in graph_strategy(), c in -3.0f64..3.0, beta in 0.0f64..1.0) {
        let n = g.num_nodes();
        let cfg = FlowConfig { beta, tau: 0.1, t_in: 5, ..FlowConfig::default() };
        let trace = flow::run_flow(None, &vec![c; n], &g, &cfg).unwrap();
        prop_assert_eq!(trace.final_density(), &Density::uniform(n));
        prop_assert_eq!(trace.cumulative_gw2, 0.0);
    }

    #[test]
    fn two_node_gw2_mirror_and_scaled(w in 0.1f64..10.0, a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let fwd = gw2_two_node_closed_form(&TwoNodeInstance::new(w, a, b).unwrap());
        // relabelling the two nodes leaves the cost unchanged
        let back = gw2_two_node_closed_form(&TwoNodeInstance::new(w, 1.0 - a, 1.0 - b).unwrap());
        prop_assert!(fwd >= 0.0);
        prop_assert!((fwd - back).abs() <= 1e-12 * fwd.max(1.0));
        let unit = gw2_two_node_closed_form(&TwoNodeInstance::new(1.0, a, b).unwrap());
        prop_assert!((fwd * w - unit).abs() <= 1e-12 * unit.max(1.0));
    }

    #[test]
    fn graph_json_round_trip(g in graph_strategy()) {
        let text = serde_json::to_string(&g.to_json()).unwrap();
        prop_assert_eq!(WeightedGraph::from_json_str(&text).unwrap(), g);
    }
}
