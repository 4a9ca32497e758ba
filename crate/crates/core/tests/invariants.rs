use proptest::prelude::*;

use rostlab::cascades::{build_rpc, RpcSpec};
use rostlab::cavity_map::{apply_cavity_map, CavitySpec, Psi};
use rostlab::rng::stream;
use rostlab::rost_core::{normalize_log_weights, sample_overlap_matrix, triple_slack, ultrametricity_score, AtomicMeasure, EnsembleSource, RostEnsemble};
use rostlab::spin_models::{overlap_bits, MixedCouplings};

fn increasing(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n).prop_map(|mut v| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for i in 1..v.len() {
            if v[i] <= v[i - 1] {
                v[i] = v[i - 1] + 1e-3;
            }
        }
        v
    })
}

fn rpc_spec() -> impl Strategy<Value = RpcSpec> {
    (1usize..=3).prop_flat_map(|k| (increasing(k, 0.05, 0.9), increasing(k + 1, 0.0, 0.95), 3usize..12)).prop_filter_map(
        "valid spec",
        |(x, q, m)| {
            let x: Vec<f64> = x.into_iter().map(|v| v.min(0.98)).collect();
            RpcSpec::new(x, q, m).ok()
        },
    )
}

fn sum(w: &[f64]) -> f64 {
    w.iter().sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn log_weights_normalize(lw in prop::collection::vec(-700.0f64..700.0, 1..40)) {
        let w = normalize_log_weights(&lw);
        prop_assert!((sum(&w) - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn rpc_is_a_probability_measure_with_ultrametric_support(spec in rpc_spec(), seed in 0u64..1000) {
        let m = build_rpc(&spec, &mut stream(seed, "prop-rpc", 0)).unwrap();
        prop_assert!((sum(m.weights()) - 1.0).abs() < 1e-12);
        let q_max = *spec.q.last().unwrap();
        for i in 0..m.len().min(20) {
            prop_assert!((m.norm_sq(i) - q_max).abs() < 1e-12);
            for j in 0..m.len().min(20) {
                prop_assert_eq!(m.inner(i, j), m.inner(j, i));
                prop_assert!(spec.q.iter().any(|q| (q - m.inner(i, j)).abs() < 1e-12) || i == j);
            }
        }
        let e = RostEnsemble::new(EnsembleSource::Rpc(spec), seed, 2).unwrap();
        prop_assert_eq!(ultrametricity_score(&e, 200, seed).unwrap().violation_rate, 0.0);
    }

    #[test]
    fn cavity_map_preserves_probability_and_geometry(spec in rpc_spec(), lambda in 0.0f64..3.0, seed in 0u64..1000, logcosh in any::<bool>()) {
        let m = build_rpc(&spec, &mut stream(seed, "prop-map", 0)).unwrap();
        let psi = if logcosh { Psi::Logcosh } else { Psi::Linear };
        let cs = CavitySpec::new(psi, lambda, vec![0.0, 1.0]).unwrap();
        let out = apply_cavity_map(&m, &cs, &mut stream(seed, "prop-map", 1)).unwrap();
        prop_assert!((sum(out.weights()) - 1.0).abs() < 1e-12);
        prop_assert_eq!(out.gram(), m.gram());
        if lambda == 0.0 {
            for (a, b) in out.weights().iter().zip(m.weights()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampled_overlap_matrices_are_symmetric(spec in rpc_spec(), seed in 0u64..1000, s in 2usize..6) {
        let m = build_rpc(&spec, &mut stream(seed, "prop-q", 0)).unwrap();
        let q = sample_overlap_matrix(&m, s, &mut stream(seed, "prop-q", 1)).unwrap();
        prop_assert_eq!(q.len(), s * s);
        for a in 0..s {
            for b in 0..s {
                prop_assert_eq!(q[a * s + b], q[b * s + a]);
            }
        }
    }

    #[test]
    fn triple_slack_is_symmetric_and_nonnegative_on_isosceles(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0) {
        let s = triple_slack(a, b, c);
        prop_assert_eq!(s, triple_slack(b, a, c));
        prop_assert_eq!(s, triple_slack(c, b, a));
        let lo = a.min(b);
        prop_assert!(triple_slack(lo, lo, a.max(b)) >= 0.0);
    }

    #[test]
    fn rpc_spec_json_round_trips(spec in rpc_spec()) {
        prop_assert_eq!(RpcSpec::from_json(&spec.to_json()).unwrap(), spec);
    }

    #[test]
    fn rpc_overlap_law_sums_to_one(spec in rpc_spec()) {
        let law = spec.overlap_law();
        prop_assert!((law.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((spec.overlap_moment(0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spin_overlap_is_bounded_and_symmetric(a in any::<u64>(), b in any::<u64>(), n in 1usize..=24) {
        let mask = (1u64 << n) - 1;
        let (a, b) = (a & mask, b & mask);
        let r = overlap_bits(a, b, n);
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert_eq!(r, overlap_bits(b, a, n));
        prop_assert_eq!(overlap_bits(a, a, n), 1.0);
    }

    #[test]
    fn covariance_function_is_monotone_on_unit_interval(b1 in 0.0f64..2.0, b2 in 0.0f64..2.0, r in 0.0f64..1.0) {
        let beta = MixedCouplings::new([(1, b1), (2, b2)]).unwrap();
        prop_assert!(beta.covariance_fn(r) <= beta.covariance_fn(1.0) + 1e-12);
        prop_assert!((beta.covariance_fn(1.0) - beta.sum_sq()).abs() < 1e-12);
    }

    #[test]
    fn single_atom_moments_are_deterministic(norm_sq in 0.0f64..1.0) {
        let m = AtomicMeasure::single_atom(norm_sq).unwrap();
        let q = sample_overlap_matrix(&m, 3, &mut stream(0, "atom", 0)).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { 1.0 } else { norm_sq };
                prop_assert_eq!(q[a * 3 + b], want);
            }
        }
    }
}
