use overlap_core::bounds::{self, lr_band, Direction, OverlapSpec};
use overlap_core::discrete::{self, DivergenceSpec};
use overlap_core::estimation;
use overlap_core::exec::{self, Execution};
use overlap_core::harness::{self, ReportRow};
use overlap_core::linalg;
use overlap_core::processes::{self, Group, ProcessSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn kinds() -> Vec<DivergenceSpec> {
    vec![
        DivergenceSpec::Chi2,
        DivergenceSpec::Kl,
        DivergenceSpec::ChiAlpha { alpha: 1.5 },
        DivergenceSpec::ChiAlpha { alpha: 2.0 },
        DivergenceSpec::ChiAlpha { alpha: 3.0 },
        DivergenceSpec::ChiAlpha { alpha: 4.0 },
        DivergenceSpec::Tv,
    ]
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6f64..1e6,
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(0.0),
        Just(-0.0),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn exact_divergences_respect_their_bounds(seed in any::<u64>(), m in 2usize..7, pi in 0.25f64..0.75, eta in 0.02f64..0.25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let found = discrete::random_overlapping_pair(&mut rng, m, pi, eta, 20_000).unwrap();
        prop_assume!(found.is_some());
        let (pair, _) = found.unwrap();
        let band = lr_band(OverlapSpec::new(eta, pi).unwrap());
        for kind in kinds() {
            let bound = kind.bound(band).unwrap();
            let fwd = discrete::divergence(&pair, kind, Direction::Forward);
            let rev = discrete::divergence(&pair, kind, Direction::Reverse);
            prop_assert!(fwd <= bound.forward + 1e-9, "{} forward {fwd} > {}", kind.label(), bound.forward);
            prop_assert!(rev <= bound.reverse + 1e-9, "{} reverse {rev} > {}", kind.label(), bound.reverse);
        }
        prop_assert!(discrete::bayes_accuracy(&pair) <= bounds::classifier_accuracy_bound(eta).unwrap() + 1e-12);
    }

    #[test]
    fn swapping_the_laws_swaps_directions(seed in any::<u64>(), m in 2usize..8, pi in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = discrete::random_pair(&mut rng, m, pi).unwrap();
        let swapped = pair.swapped();
        for kind in kinds() {
            let a = discrete::divergence(&pair, kind, Direction::Reverse);
            let b = discrete::divergence(&swapped, kind, Direction::Forward);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        let acc = discrete::bayes_accuracy(&pair);
        prop_assert!((acc - discrete::bayes_accuracy(&swapped)).abs() <= 1e-12);
        prop_assert!(acc >= pi.max(1.0 - pi) - 1e-12 && acc <= 1.0 + 1e-12);
    }

    #[test]
    fn chain_rule_sums_to_joint_kl(seed in any::<u64>(), arity in prop::collection::vec(2usize..4, 1..5), pi in 0.1f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = discrete::random_joint(&mut rng, arity.clone(), pi).unwrap();
        let chain = discrete::chain_rule_kl(&table);
        prop_assert_eq!(chain.terms.len(), arity.len());
        prop_assert!(chain.terms.iter().all(|t| *t >= -1e-12));
        let joint = table.kl(Direction::Forward);
        prop_assert!((chain.total - joint).abs() <= 1e-9 * (1.0 + joint));
    }

    #[test]
    fn budgeted_families_certify_their_overlap(eta in 0.02f64..0.5, pi in 0.3f64..0.7, p in 1usize..40) {
        prop_assume!(OverlapSpec::new(eta, pi).is_ok());
        let spec = processes::lr_budget_allocator(eta, pi, p).unwrap();
        let (q0, q1, spec_pi) = spec.as_independent().unwrap();
        let cert = processes::lr_certificate(&q0, &q1, spec_pi);
        prop_assert!(cert.eta_star >= eta - 1e-12, "{} < {eta}", cert.eta_star);
        let moments = processes::exact_product_moments(&spec).unwrap();
        prop_assert!(moments.opnorm_0 <= 0.25 + 1e-15 && moments.opnorm_1 <= 0.25 + 1e-15);
        let band = lr_band(OverlapSpec::new(eta, pi).unwrap());
        let gap = moments
            .mean_0
            .iter()
            .zip(&moments.mean_1)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        prop_assert!(gap <= bounds::mean_discrepancy_bound(moments.opnorm_0, moments.opnorm_1, band) + 1e-12);
    }

    #[test]
    fn ma1_operator_norm_stays_under_symbol_sup(theta in -0.95f64..0.95, sigma2 in 0.1f64..4.0, p in 1usize..80) {
        let spec = ProcessSpec::Ma1 { theta, sigma2, p, pi: 0.5 };
        let cov = processes::covariance(&spec, Group::Control).unwrap();
        let (norm, _) = linalg::operator_norm_lenient(&cov);
        let ceiling = sigma2 * (1.0 + theta.abs()).powi(2);
        prop_assert!(norm <= ceiling * (1.0 + 1e-9));
        let exact = sigma2 * (1.0 + theta * theta)
            + 2.0 * sigma2 * theta.abs() * (std::f64::consts::PI / (p as f64 + 1.0)).cos();
        prop_assert!((norm - exact).abs() <= 1e-7 * (1.0 + exact), "{norm} vs {exact}");
    }

    #[test]
    fn trimming_never_retains_more_than_the_bound(fitted in prop::collection::vec(0.0f64..=1.0, 1..300)) {
        let grid = [0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5];
        let curve = estimation::trimming_analysis(&fitted, &grid).unwrap();
        prop_assert_eq!(curve.len(), grid.len());
        for point in &curve {
            prop_assert!(point.retained_fraction <= point.retention_bound + 1e-12);
            prop_assert!(point.holds);
        }
        prop_assert!(curve.windows(2).all(|w| w[1].retained_fraction <= w[0].retained_fraction));
    }

    #[test]
    fn parallel_maps_preserve_order_and_bits(len in 0usize..2000, chunk in 1usize..64, workers in 0usize..5) {
        let task = |i: usize| ((i as f64) * 0.1).sin() / (1.0 + i as f64);
        let mode = Execution::from_workers(workers);
        prop_assert_eq!(exec::map_indexed(len, mode, task), exec::map_indexed(len, Execution::Sequential, task));
        let fold = |r: std::ops::Range<usize>| r.map(task).sum::<f64>();
        let a = exec::chunked_reduce(len, chunk, mode, fold, |x, y| x + y);
        let b = exec::chunked_reduce(len, chunk, Execution::Sequential, fold, |x, y| x + y);
        prop_assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
    }

    #[test]
    fn reports_round_trip_exactly(
        values in prop::collection::vec((finite(), finite(), 0.0f64..1.0, any::<u64>(), 0usize..100, 1usize..5000), 0..40)
    ) {
        let rows: Vec<ReportRow> = values
            .iter()
            .map(|(obs, bound, tol, seed, rep, p)| ReportRow::new("prop", *p, "q", *obs, *bound, *tol, *seed, *rep))
            .collect();
        let mut buf = Vec::new();
        harness::write_report(&rows, &mut buf).unwrap();
        let back = harness::read_report(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            prop_assert_eq!(a.observed.to_bits(), b.observed.to_bits());
            prop_assert_eq!(a.bound.to_bits(), b.bound.to_bits());
            prop_assert_eq!(a.margin.to_bits(), b.margin.to_bits());
            prop_assert_eq!(a.pass, b.pass);
            prop_assert_eq!(b.pass, b.recomputed_pass());
            prop_assert_eq!((a.seed, a.replicate, a.p), (b.seed, b.replicate, b.p));
        }
    }
}
