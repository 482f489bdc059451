use harqopt::analytics::{
    correlation_factor, dbw_to_watts, evaluate, g_function, outage_profile, scheme_coefficient,
    watts_to_dbw,
};
use harqopt::autodiff::{finite_diff_check, Graph};
use harqopt::gcn::{self, init_weights, Checkpoint, LayerSpec};
use harqopt::graph::{adjacency, Normalization};
use harqopt::mc::{estimate_profiles, McConfig};
use harqopt::oracle::{grid_search, is_feasible, GridSpec};
use harqopt::{ChannelParams, Error, LinkConfig, Matrix, PowerPolicy, Scheme, P_MIN};
use proptest::prelude::*;

fn scheme() -> impl Strategy<Value = Scheme> {
    prop::sample::select(Scheme::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn correlation_factor_in_unit_interval(rho in 0.0f64..0.99, k in 1usize..6, delta in 1u32..4) {
        let l = correlation_factor(&ChannelParams::uniform(k, rho, delta).unwrap(), k).unwrap();
        prop_assert!(l > 0.0 && l <= 1.0 + 1e-15, "{}", l);
    }

    #[test]
    fn scheme_coefficients_are_ordered(rate in 0.05f64..6.0, k in 1usize..6) {
        let ir = scheme_coefficient(Scheme::IncrementalRedundancy, rate, k);
        let cc = scheme_coefficient(Scheme::ChaseCombining, rate, k);
        let t1 = scheme_coefficient(Scheme::TypeI, rate, k);
        prop_assert!(ir > 0.0);
        prop_assert!(ir <= cc * (1.0 + 1e-12) && cc <= t1 * (1.0 + 1e-12), "{} {} {}", ir, cc, t1);
        prop_assert_eq!(g_function(rate, k), ir);
    }

    #[test]
    fn outage_ordered_across_schemes(
        powers in prop::collection::vec(1.0f64..1e3, 1..5),
        rho in 0.0f64..0.95,
    ) {
        let params = ChannelParams::uniform(powers.len(), rho, 1).unwrap();
        let policy = PowerPolicy::new(powers).unwrap();
        let p: Vec<Vec<f64>> = [Scheme::IncrementalRedundancy, Scheme::ChaseCombining, Scheme::TypeI]
            .iter()
            .map(|s| outage_profile(*s, &params, &policy, 2.0).unwrap())
            .collect();
        for ((ir, cc), t1) in p[0].iter().zip(&p[1]).zip(&p[2]) {
            prop_assert!(ir <= cc && cc <= t1);
        }
    }

    #[test]
    fn more_power_never_hurts_latency(
        powers in prop::collection::vec(0.5f64..100.0, 1..5),
        c in 1.0f64..10.0,
        rho in 0.0f64..0.95,
        s in scheme(),
    ) {
        let params = ChannelParams::uniform(powers.len(), rho, 1).unwrap();
        let link = LinkConfig::default();
        let base = evaluate(s, &params, &PowerPolicy::new(powers.clone()).unwrap(), &link).unwrap();
        let scaled: Vec<f64> = powers.iter().map(|p| p * c).collect();
        let more = evaluate(s, &params, &PowerPolicy::new(scaled).unwrap(), &link).unwrap();
        prop_assert!(more.tau <= base.tau * (1.0 + 1e-12));
        prop_assert!(more.tau >= link.latency_floor() * (1.0 - 1e-12));
        prop_assert!(more.eta <= link.rate);
    }

    #[test]
    fn dbw_round_trip(x in -60.0f64..60.0) {
        prop_assert!((watts_to_dbw(dbw_to_watts(x)) - x).abs() < 1e-10);
    }

    #[test]
    fn gcn_output_is_floored_and_finite(seed in 0u64..1000, rho in 0.0f64..0.99, k in 1usize..6) {
        let w = init_weights(&LayerSpec::default(), seed).unwrap();
        let adj = adjacency(&ChannelParams::uniform(k, rho, 1).unwrap(), Normalization::Causal).unwrap();
        let p = gcn::forward(&adj, &w, 31.6).unwrap();
        prop_assert_eq!(p.len(), k);
        prop_assert!(p.powers().iter().all(|x| x.is_finite() && *x >= P_MIN));
    }

    #[test]
    fn checkpoint_round_trip(seed in 0u64..1000, diagonal in any::<bool>()) {
        let normalization = if diagonal { Normalization::DiagonalDegree } else { Normalization::Causal };
        let ck = Checkpoint { weights: init_weights(&LayerSpec::relu_stack(vec![1, 4, 3, 1]), seed).unwrap(), normalization };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        prop_assert_eq!(Checkpoint::read_from(buf.as_slice()).unwrap(), ck);
    }

    #[test]
    fn smooth_graph_gradients_match_differences(
        a in prop::collection::vec(0.1f64..2.0, 6),
        b in prop::collection::vec(0.1f64..2.0, 6),
    ) {
        let mut g = Graph::new();
        let x = g.parameter(Matrix::from_vec(2, 3, a).unwrap());
        let y = g.parameter(Matrix::from_vec(3, 2, b).unwrap());
        let xy = g.matmul(x, y);
        let sq = g.pow(xy, 1.5);
        let lg = g.log(xy);
        let q = g.div(sq, xy);
        let m = g.mul(q, lg);
        let root = g.sum(m);
        let fd = finite_diff_check(&mut g, root, 1e-5).unwrap();
        prop_assert!(fd.max_rel_error < 1e-5, "{}", fd.max_rel_error);
        prop_assert_eq!(fd.checked, 12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn monte_carlo_is_worker_invariant(seed in 0u64..1000, workers in 2usize..9, rho in 0.0f64..0.9) {
        let params = ChannelParams::uniform(3, rho, 1).unwrap();
        let policy = PowerPolicy::new(vec![5.0, 8.0, 12.0]).unwrap();
        let one = estimate_profiles(&Scheme::ALL, &params, &policy, 2.0, &McConfig::new(40_000, seed)).unwrap();
        let many = estimate_profiles(
            &Scheme::ALL, &params, &policy, 2.0, &McConfig::new(40_000, seed).with_workers(workers),
        ).unwrap();
        prop_assert_eq!(one, many);
    }

    #[test]
    fn oracle_refinement_and_feasibility(s in scheme(), rho in 0.0f64..0.9, pbar in 12.0f64..20.0) {
        let params = ChannelParams::uniform(2, rho, 1).unwrap();
        let link = LinkConfig::default().with_budget(pbar);
        let coarse = grid_search(s, &params, &link, &GridSpec::around_budget(8, pbar).unwrap());
        let fine = grid_search(s, &params, &link, &GridSpec::around_budget(16, pbar).unwrap());
        match (coarse, fine) {
            (Ok(c), Ok(f)) => {
                prop_assert!(f.tau() <= c.tau());
                prop_assert!(is_feasible(s, &params, &f.policy, &link));
                prop_assert!(is_feasible(s, &params, &c.policy, &link));
            }
            (Err(Error::Infeasible), Ok(f)) => prop_assert!(is_feasible(s, &params, &f.policy, &link)),
            (Err(Error::Infeasible), Err(Error::Infeasible)) => {}
            (c, f) => prop_assert!(false, "coarse {:?}, fine {:?}", c.map(|r| r.tau()), f.map(|r| r.tau())),
        }
    }
}
