//! Invariants of the sampling pipeline, checked with independent oracles.

use maxmean::estimators::{self, confidence_interval, EstimatorKind, EstimatorOptions};
use maxmean::harness::{self, Experiment};
use maxmean::normal;
use maxmean::policy::{self, BanditState, ExplorationRate, PolicyConfig, WarmupMode};
use maxmean::riskmodel::{self, FactorRegion, PortfolioSpec};
use maxmean::rng::{stream_key, RngStream};
use maxmean::systems::SystemSpec;
use maxmean::testing::{self, FrReference};
use proptest::prelude::*;

fn rate_strategy() -> impl Strategy<Value = ExplorationRate> {
    prop_oneof![
        (0.2f64..3.0).prop_map(ExplorationRate::ScaledLog),
        (0.1f64..0.9).prop_map(ExplorationRate::Power),
    ]
}

fn mode_strategy() -> impl Strategy<Value = WarmupMode> {
    prop_oneof![
        Just(WarmupMode::Adaptive),
        Just(WarmupMode::Cyclic),
        Just(WarmupMode::CyclicPrefix),
    ]
}

fn arms_strategy() -> impl Strategy<Value = Vec<SystemSpec>> {
    prop::collection::vec((-5.0f64..5.0, 0.1f64..4.0), 1..8).prop_map(|v| {
        v.into_iter()
            .map(|(m, s)| SystemSpec::normal(m, s).unwrap())
            .collect()
    })
}

fn config(rate: ExplorationRate, va: bool, frac: f64, mode: WarmupMode) -> PolicyConfig {
    PolicyConfig {
        rate,
        variance_aware: va,
        warmup_fraction: frac,
        warmup_mode: mode,
        record_trajectory: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn counts_add_up_to_rounds(
        specs in arms_strategy(),
        extra in 0u64..400,
        rate in rate_strategy(),
        va in any::<bool>(),
        frac in 0.0f64..0.5,
        mode in mode_strategy(),
        seed in any::<u64>(),
    ) {
        let n = specs.len() as u64 + extra;
        let cfg = config(rate, va, frac, mode);
        let s = policy::run(&specs, n, &cfg, &mut RngStream::new(seed, 0)).unwrap();
        let counts = s.counts();
        prop_assert_eq!(counts.iter().sum::<u64>(), s.total_rounds());
        prop_assert_eq!(s.round(), s.total_rounds());
        prop_assert!(counts.iter().all(|&c| c >= 1));
        let post: u64 = s.post().iter().map(|a| a.count).sum();
        prop_assert_eq!(post, s.total_rounds() - s.warmup_cutoff().min(s.total_rounds()));
        if mode == WarmupMode::CyclicPrefix {
            prop_assert_eq!(s.total_rounds(), n + s.warmup_cutoff());
        } else {
            prop_assert_eq!(s.total_rounds(), n);
        }
    }

    #[test]
    fn zero_warmup_keeps_every_sample(
        specs in arms_strategy(),
        extra in 0u64..300,
        rate in rate_strategy(),
        va in any::<bool>(),
        mode in mode_strategy(),
        seed in any::<u64>(),
    ) {
        let n = specs.len() as u64 + extra;
        let cfg = config(rate, va, 0.0, mode);
        let s = policy::run(&specs, n, &cfg, &mut RngStream::new(seed, 1)).unwrap();
        prop_assert_eq!(s.full(), s.post());
    }

    #[test]
    fn grand_average_is_count_weighted_mean(
        specs in arms_strategy(),
        extra in 0u64..300,
        rate in rate_strategy(),
        frac in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        let n = specs.len() as u64 + extra;
        let s = policy::run(&specs, n, &config(rate, true, frac, WarmupMode::Adaptive),
            &mut RngStream::new(seed, 2)).unwrap();
        let ga = estimators::ga_estimate(&s).unwrap();
        let post = s.post();
        let total: u64 = post.iter().map(|a| a.count).sum();
        let weighted: f64 = post
            .iter()
            .filter(|a| a.count > 0)
            .map(|a| a.count as f64 / total as f64 * (a.sum / a.count as f64))
            .sum();
        prop_assert!((ga - weighted).abs() <= 1e-12 * weighted.abs().max(1.0), "{} vs {}", ga, weighted);
    }

    #[test]
    fn runs_are_reproducible(
        specs in arms_strategy(),
        extra in 0u64..300,
        rate in rate_strategy(),
        seed in any::<u64>(),
    ) {
        let n = specs.len() as u64 + extra;
        let cfg = config(rate, true, 0.1, WarmupMode::Adaptive);
        let a = policy::run(&specs, n, &cfg, &mut RngStream::new(seed, 3)).unwrap();
        let b = policy::run(&specs, n, &cfg, &mut RngStream::new(seed, 3)).unwrap();
        prop_assert_eq!(a.full(), b.full());
        prop_assert_eq!(estimators::lsa_index(&a), estimators::lsa_index(&b));
    }

    #[test]
    fn ties_go_to_the_lowest_arm(k in 2usize..10, value in -3.0f64..3.0, rate in rate_strategy()) {
        // Identical point masses give identical indices at every round.
        let specs = vec![SystemSpec::constant(value).unwrap(); k];
        let mut s = BanditState::new(k, 100, config(rate, true, 0.0, WarmupMode::Adaptive)).unwrap();
        let mut rng = RngStream::new(0, 0);
        s.initialize(&specs, &mut rng).unwrap();
        let (arm, _) = s.step(&specs, &mut rng).unwrap();
        prop_assert_eq!(arm, 0);
        let full = s.full().iter().map(|a| a.count).collect::<Vec<_>>();
        prop_assert_eq!(estimators::lsa_index(&s), 0, "{:?}", full);
    }

    #[test]
    fn ci_half_width_identity(
        point in -100.0f64..100.0,
        var in 0.0f64..50.0,
        n_eff in 1u64..1_000_000,
        beta in 0.001f64..0.5,
    ) {
        let (lo, hi) = confidence_interval(point, var, n_eff, beta).unwrap();
        // Oracle: statrs' normal quantile.
        use statrs::distribution::{ContinuousCDF, Normal};
        let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - beta / 2.0);
        let half = z * (var / n_eff as f64).sqrt();
        prop_assert!(((hi - lo) / 2.0 - half).abs() <= 1e-9 * half.max(1e-12));
        prop_assert!(((hi + lo) / 2.0 - point).abs() <= 1e-9 * point.abs().max(1.0));
    }

    #[test]
    fn single_test_is_monotone(point in -1.0f64..1.0, bump in 0.0f64..1.0, var in 0.01f64..2.0) {
        let mk = |p: f64| estimators::EstimateReport {
            estimator: EstimatorKind::Lsa,
            point: p,
            variance_hat: var,
            ci_low: p,
            ci_high: p,
            beta: 0.1,
            n_effective: 100,
            chosen_arm: Some(0),
        };
        let a = testing::single_test(&mk(point), 0.0, 0.05).unwrap();
        let b = testing::single_test(&mk(point + bump), 0.0, 0.05).unwrap();
        prop_assert!(!a.reject || b.reject);
    }
}

#[test]
fn summaries_do_not_depend_on_thread_count() {
    let specs: Vec<SystemSpec> = (1..=6)
        .map(|k| SystemSpec::normal(k as f64, 1.0 + k as f64 * 0.3).unwrap())
        .collect();
    let mut exp = Experiment::new(specs, 500);
    exp.estimators = EstimatorKind::ALL.to_vec();
    exp.keep_points = true;
    let one = harness::replicate(&exp, 64, 9, Some(1)).unwrap();
    let four = harness::replicate(&exp, 64, 9, Some(4)).unwrap();
    assert_eq!(one, four);
    for e in &one.estimators {
        let bits = |s: &harness::EstimatorSummary| {
            (s.mse.to_bits(), s.bias.to_bits(), s.coverage.to_bits())
        };
        let f = four.estimator(e.estimator).unwrap();
        assert_eq!(bits(e), bits(f));
    }
}

#[test]
fn mse_recomputed_from_points() {
    let specs: Vec<SystemSpec> = (1..=4)
        .map(|k| SystemSpec::normal(k as f64, 2.0).unwrap())
        .collect();
    let mut exp = Experiment::new(specs, 400);
    exp.keep_points = true;
    let s = harness::replicate(&exp, 200, 5, None).unwrap();
    for e in &s.estimators {
        let pts = e.points.as_ref().unwrap();
        let r = pts.len() as f64;
        let mse = pts.iter().map(|p| (p - 4.0).powi(2)).sum::<f64>() / r;
        assert!(
            (mse - e.mse).abs() <= 1e-12 * mse,
            "{} {mse} {}",
            e.estimator,
            e.mse
        );
        let mean = pts.iter().sum::<f64>() / r;
        let var = pts.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (r - 1.0);
        let decomposed = e.bias.powi(2) + var * (r - 1.0) / r;
        assert!((decomposed - e.mse).abs() <= 1e-10 * e.mse);
        assert!((e.se_bias - var.sqrt() / r.sqrt()).abs() <= 1e-12 * e.se_bias.max(1e-300));
    }
}

#[test]
fn variance_estimators_near_top_arm_variance() {
    let specs: Vec<SystemSpec> = (1..=20)
        .map(|k| {
            let m = 1.5 + 0.5 * k as f64;
            SystemSpec::normal(m, m).unwrap()
        })
        .collect();
    let cfg = config(
        ExplorationRate::default(),
        true,
        0.1,
        WarmupMode::CyclicPrefix,
    );
    let s = policy::run(&specs, 1_000_000, &cfg, &mut RngStream::new(17, 0)).unwrap();
    let target = 11.5f64 * 11.5;
    for (name, v) in [
        ("GA", estimators::ga_variance(&s).unwrap()),
        ("LSA", estimators::lsa_variance(&s).unwrap()),
    ] {
        assert!(
            (v / target - 1.0).abs() < 0.05,
            "{name} variance {v} vs {target}"
        );
    }
}

#[test]
fn bonferroni_controls_fwer_on_boundary_null() {
    let mu0 = 0.3;
    let specs = vec![SystemSpec::bernoulli(mu0).unwrap(); 4];
    let reps = 10_000u64;
    let alpha = 0.05;
    let rejects = (0..reps)
        .filter(|&r| {
            let mut rng = RngStream::new(3, stream_key(0, r, 1));
            let s = policy::run_static(&specs, 423, &mut rng).unwrap();
            testing::bonferroni_fr_test(&s, mu0, alpha, &[1, 2, 3], FrReference::KnownMean)
                .unwrap()
                .reject
        })
        .count() as f64;
    let rate = rejects / reps as f64;
    let se = (rate * (1.0 - rate) / reps as f64).sqrt();
    assert!(rate <= alpha + 2.0 * se, "FWER {rate} (se {se})");
}

#[test]
fn bonferroni_critical_value() {
    let specs = vec![SystemSpec::bernoulli(0.5).unwrap(); 4];
    let s = policy::run_static(&specs, 400, &mut RngStream::new(1, 1)).unwrap();
    let t = testing::bonferroni_fr_test(&s, 0.5, 0.05, &[1, 2, 3], FrReference::KnownMean).unwrap();
    // z_{1 - 0.05/3}
    assert!((t.critical - 2.128045234).abs() < 1e-8, "{}", t.critical);
}

#[test]
fn region_frequencies() {
    let n = 1_000_000u64;
    let mut rng = RngStream::new(11, 0);
    let (mut up, mut lo, mut mid) = (0u64, 0u64, 0u64);
    for _ in 0..n {
        let z = riskmodel::sample_conditional_normal(FactorRegion::Unrestricted, &mut rng);
        if FactorRegion::UpperTail.contains(z) {
            up += 1;
        } else if FactorRegion::LowerTail.contains(z) {
            lo += 1;
        } else {
            mid += 1;
        }
    }
    let p = 1.0 / 20f64.sqrt();
    for (count, prob) in [(up, p), (lo, p), (mid, 1.0 - 2.0 * p)] {
        let f = count as f64 / n as f64;
        let se = (prob * (1.0 - prob) / n as f64).sqrt();
        assert!((f - prob).abs() < 4.0 * se, "{f} vs {prob}");
    }
}

#[test]
fn conditional_draws_stay_in_region() {
    let mut rng = RngStream::new(2, 0);
    let t = normal::quantile(1.0 - 1.0 / 20f64.sqrt()).unwrap();
    assert!((t - 0.7601).abs() < 1e-4);
    let mut mid_sum = 0.0;
    for _ in 0..100_000 {
        assert!(riskmodel::sample_conditional_normal(FactorRegion::UpperTail, &mut rng) > t);
        assert!(riskmodel::sample_conditional_normal(FactorRegion::LowerTail, &mut rng) < -t);
        let m = riskmodel::sample_conditional_normal(FactorRegion::Middle, &mut rng);
        assert!(m.abs() <= t);
        mid_sum += m;
    }
    assert!((mid_sum / 100_000.0).abs() < 4.0 * 0.45 / 100_000f64.sqrt());
}

#[test]
fn gbm_prices_are_martingales() {
    let book = PortfolioSpec::default();
    let n = 1_000_000usize;
    let mut rng = RngStream::new(13, 0);
    let mut sums = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for _ in 0..n {
        let z = [FactorRegion::Unrestricted; 4]
            .map(|r| riskmodel::sample_conditional_normal(r, &mut rng));
        let s = book.terminal_prices(z);
        for j in 0..3 {
            sums[j] += s[j];
            sq[j] += s[j] * s[j];
        }
    }
    for j in 0..3 {
        let mean = sums[j] / n as f64;
        let var = sq[j] / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - 100.0).abs() < 4.0 * se,
            "asset {j}: {mean} (se {se})"
        );
    }
}

#[test]
fn irrelevant_factor_does_not_change_loss() {
    let mut book = PortfolioSpec::default();
    // Drop every option on asset 2, so Z3 only moves an unheld asset.
    book.options.retain(|o| o.asset != 2);
    let a = [
        FactorRegion::Middle,
        FactorRegion::UpperTail,
        FactorRegion::LowerTail,
        FactorRegion::UpperTail,
    ];
    let b = [
        FactorRegion::Middle,
        FactorRegion::UpperTail,
        FactorRegion::LowerTail,
        FactorRegion::LowerTail,
    ];
    let mut ra = RngStream::new(4, 0);
    let mut rb = RngStream::new(4, 0);
    for _ in 0..1000 {
        assert_eq!(
            book.scenario_loss(&a, &mut ra),
            book.scenario_loss(&b, &mut rb)
        );
    }
}

#[test]
fn scenario_means_differ() {
    let specs = riskmodel::build_risk_systems(PortfolioSpec::default()).unwrap();
    assert_eq!(specs.len(), 256);
    assert!(specs.iter().all(|s| s.true_mean().is_none()));
    let mut rng = RngStream::new(6, 0);
    let mean = |s: &SystemSpec, rng: &mut RngStream| {
        (0..20_000).map(|_| s.sample(rng)).sum::<f64>() / 20_000.0
    };
    // All-middle against all-upper-tail: quiet markets pay the straddles less.
    let quiet = mean(&specs[170], &mut rng);
    let wild = mean(&specs[0], &mut rng);
    assert!(quiet > wild + 1.0, "{quiet} vs {wild}");
}

#[test]
fn zero_and_strike_zero_books() {
    let mut rng = RngStream::new(8, 0);
    let mut zero = PortfolioSpec::default();
    zero.options.iter_mut().for_each(|o| o.quantity = 0.0);
    let mut call = PortfolioSpec::default();
    call.options.truncate(1);
    call.options[0].strike = 0.0;
    for _ in 0..1000 {
        let r = [FactorRegion::Unrestricted; 4];
        assert_eq!(zero.scenario_loss(&r, &mut rng), 0.0);
        assert!(call.scenario_loss(&r, &mut rng) < 0.0);
    }
}

#[test]
fn min_via_negation_mirrors_max() {
    // Symmetric world: means ±1, ±2. The min run on negated arms is the max run.
    let specs: Vec<SystemSpec> = [-2.0, -1.0, 1.0, 2.0]
        .iter()
        .map(|&m| SystemSpec::normal(m, 1.0).unwrap())
        .collect();
    let cfg = PolicyConfig::default();
    let opts = EstimatorOptions::default();
    let neg: Vec<SystemSpec> = specs.iter().map(|s| s.negated()).collect();
    let lo = estimators::min_estimate_via_negation(
        &specs,
        2000,
        &cfg,
        EstimatorKind::Lsa,
        &opts,
        &mut RngStream::new(1, 0),
    )
    .unwrap();
    let state = policy::run(&neg, 2000, &cfg, &mut RngStream::new(1, 0)).unwrap();
    let hi = estimators::report(&state, EstimatorKind::Lsa, &opts).unwrap();
    assert_eq!(lo.point, -hi.point);
    assert_eq!((lo.ci_low, lo.ci_high), (-hi.ci_high, -hi.ci_low));
}
