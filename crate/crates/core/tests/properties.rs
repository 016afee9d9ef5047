use proptest::prelude::*;
use qsoc_core::graph::components_of_intervals;
use qsoc_core::registry::emitter_statistics_from_count;
use qsoc_core::spam::{histogram, spam_at};
use qsoc_core::{
    channel_graph, detection_probability, e_spam, fit_mixture, frequency_at_voltage,
    merge_identities, pc_sweep, purcell_from_lifetimes, reachable_channels, sample_ensemble,
    solve_threshold, voltage_for_frequency, Direction, Emitter, EnsembleConfig,
    EnsembleDocument, FrequencyGrid, LifetimeSet, MergeRule, MixtureFit, PhotonBudget,
    ReadoutRecord, Spot, TuningLaw, TuningMode,
};

fn emitter(f0: f64, delta_vm: f64) -> Emitter {
    Emitter {
        id: 0,
        x_um: 0.0,
        y_um: 0.0,
        f0,
        delta_vm,
        linewidth: 100.0,
        splitting: 1.0,
        brightness: 1.0,
    }
}

fn law_strategy() -> impl Strategy<Value = TuningLaw> {
    (
        prop_oneof![Just(Direction::Up), Just(Direction::Down)],
        prop_oneof![Just(TuningMode::OneSided), Just(TuningMode::Symmetric)],
        1.0f64..3.0,
    )
        .prop_map(|(direction, mode, exponent)| TuningLaw {
            v_max: 40.0,
            exponent,
            direction,
            mode,
        })
}

/// Plain quadratic union-find over pairwise overlaps.
fn pairwise_partition(iv: &[(f64, f64)]) -> Vec<Vec<usize>> {
    let n = iv.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if iv[i].0.max(iv[j].0) <= iv[i].1.min(iv[j].1) {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = root(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

fn brute_e_spam(d: &[f64], b: &[f64]) -> (f64, usize) {
    let len = d.len().max(b.len());
    let mut best = (f64::INFINITY, 0);
    for m in 0..=len {
        let v = objective(d, b, m);
        if v < best.0 - 1e-12 {
            best = (v, m);
        }
    }
    best
}

fn weights(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len)
}

fn normalized(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter().map(|x| x / s).collect()
    } else {
        let mut v = vec![0.0; w.len()];
        v[0] = 1.0;
        v
    }
}

fn objective(d: &[f64], b: &[f64], m: usize) -> f64 {
    let dark: f64 = d[m.min(d.len())..].iter().sum();
    let bright: f64 = b[..m.min(b.len())].iter().sum();
    0.5 * (dark + bright)
}

fn spot_strategy() -> impl Strategy<Value = Spot> {
    (0.0f64..6.0, 0.0f64..6.0, 1.0f64..100.0, 1u32..4, 0.0f64..40.0).prop_map(
        |(x, y, brightness, channel, best_voltage)| Spot {
            x,
            y,
            brightness,
            peak: brightness,
            channel,
            best_voltage,
            edge: false,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ensemble_bytes_repeat_per_seed(seed in any::<u64>(), n in 1usize..200) {
        let cfg = EnsembleConfig { n_qubit: n, rng_seed: seed, ..EnsembleConfig::default() };
        let a = EnsembleDocument::new(cfg.clone(), sample_ensemble(&cfg).unwrap()).to_json().unwrap();
        let b = EnsembleDocument::new(cfg.clone(), sample_ensemble(&cfg).unwrap()).to_json().unwrap();
        prop_assert_eq!(a.as_bytes(), b.as_bytes());
    }

    #[test]
    fn p_c_monotone_in_tuning_range(seed in any::<u64>(), n in 2usize..80) {
        let ratios = [0.0, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0];
        let curve = pc_sweep(&EnsembleConfig::default(), &TuningLaw::default(), &ratios, &[n], 3, seed).unwrap();
        for t in 0..3 {
            for w in curve.samples.windows(2) {
                prop_assert!(w[1][t] >= w[0][t]);
            }
        }
    }

    #[test]
    fn channel_edges_imply_interval_overlap(seed in any::<u64>(), law in law_strategy()) {
        let cfg = EnsembleConfig { n_qubit: 50, rng_seed: seed, ..EnsembleConfig::default() };
        let ens = sample_ensemble(&cfg).unwrap();
        let grid = FrequencyGrid { v0: 0.0, delta_v: cfg.v_inh / 1e4, k_max: 20_000 };
        let g = channel_graph(&ens, &law, &grid, f64::INFINITY);
        for [a, b] in &g.edges {
            let (ia, ib) = (law.interval(&ens[*a as usize]), law.interval(&ens[*b as usize]));
            prop_assert!(ia.0.max(ib.0) <= ia.1.min(ib.1));
        }
    }

    #[test]
    fn merge_is_symmetric(a in spot_strategy(), b in spot_strategy()) {
        let rule = MergeRule::default();
        prop_assert_eq!(rule.matches(&a, &b), rule.matches(&b, &a));
    }

    #[test]
    fn merge_partition_ignores_input_order(
        spots in prop::collection::vec(spot_strategy(), 0..40),
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut idx: Vec<usize> = (0..spots.len()).collect();
        idx.shuffle(&mut rand::rngs::StdRng::seed_from_u64(perm_seed));
        let shuffled: Vec<Spot> = idx.iter().map(|&i| spots[i].clone()).collect();

        let rule = MergeRule::default();
        let t1 = merge_identities(&spots, &rule, 0.2);
        let t2 = merge_identities(&shuffled, &rule, 0.2);
        prop_assert_eq!(&t1.channels, &t2.channels);
        prop_assert_eq!(t1.n_emitters, t2.n_emitters);
        for (pos, &orig) in idx.iter().enumerate() {
            prop_assert_eq!(t1.spot_to_emitter[orig], t2.spot_to_emitter[pos]);
        }
    }

    #[test]
    fn emitter_statistics_arithmetic(n_spot in 0u64..10_000_000, n_sys in 1u64..5000, k_max in 1u32..50) {
        let s = emitter_statistics_from_count(n_spot, n_sys, k_max).unwrap();
        prop_assert_eq!(s.n_spot_distinct * 2.0, n_spot as f64);
        prop_assert_eq!(s.per_channel_avg, n_spot as f64 / 2.0 / k_max as f64);
        prop_assert!((s.n_emitter - n_spot as f64 / (2.0 * k_max as f64 * n_sys as f64)).abs() <= 1e-12 * s.n_emitter.max(1.0));
    }

    #[test]
    fn threshold_matches_density_crossing(p0 in 0.02f64..0.98, l2 in 0.2f64..8.0, gap in 0.5f64..40.0) {
        let l1 = l2 + gap;
        let fit = MixtureFit { p0, lambda1: l1, lambda2: l2, log_likelihood: 0.0, iterations: 0, ll_trace: vec![] };
        let closed = solve_threshold(&fit).unwrap();
        // log((1 - p0) Poi(N; l1)) - log(p0 Poi(N; l2)) with the factorials cancelled
        let g = |n: f64| ((1.0 - p0).ln() + n * l1.ln() - l1) - (p0.ln() + n * l2.ln() - l2);
        let (mut a, mut b) = (-1e4, 1e4);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if g(m) < 0.0 { a = m } else { b = m }
        }
        prop_assert!((closed - 0.5 * (a + b)).abs() < 1e-9);
    }

    #[test]
    fn em_log_likelihood_never_drops(
        p0 in 0.1f64..0.9,
        l2 in 0.5f64..4.0,
        gap in 4.0f64..25.0,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Poisson};
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let (dark, bright) = (Poisson::new(l2).unwrap(), Poisson::new(l2 + gap).unwrap());
        let counts: Vec<u32> = (0..3000)
            .map(|_| {
                let d = if rand::Rng::random::<f64>(&mut rng) < p0 { dark.sample(&mut rng) } else { bright.sample(&mut rng) };
                d as u32
            })
            .collect();
        let fit = fit_mixture(&histogram(counts, 10)).unwrap();
        for w in fit.ll_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn post_selection_at_zero_is_unconditioned(
        recs in prop::collection::vec((0u32..30, 0u32..30, 0u32..30), 1..300),
    ) {
        let records: Vec<ReadoutRecord> = recs.iter().map(|&(bin1, bin2, bin3)| ReadoutRecord { bin1, bin2, bin3 }).collect();
        let r = spam_at(&records, 0).unwrap();
        prop_assert_eq!(r.p_success, 1.0);
        prop_assert_eq!(r.survivors, records.len());

        let mut d = vec![0.0; 31];
        let mut b = vec![0.0; 31];
        for rec in &records {
            d[rec.bin2 as usize] += 1.0 / records.len() as f64;
            b[rec.bin3 as usize] += 1.0 / records.len() as f64;
        }
        let (e, m) = brute_e_spam(&d, &b);
        prop_assert!((r.e_spam.unwrap() - e).abs() < 1e-12);
        let near = (0..=31).filter(|&k| (objective(&d, &b, k) - e).abs() < 1e-9).count();
        if near == 1 {
            prop_assert_eq!(r.n_m.unwrap(), m);
        }
    }

    #[test]
    fn detection_probability_scaling(counts in 0.1f64..100.0, s in 0.1f64..10.0, t_m in 1.0f64..200.0, tau in 0.5f64..20.0) {
        let base = PhotonBudget { readout_counts: counts, t_m_us: t_m, tau_emitter_ns: tau, ..PhotonBudget::default() };
        let p = detection_probability(&base).unwrap().p_det;
        let more = detection_probability(&PhotonBudget { readout_counts: counts * s, ..base.clone() }).unwrap().p_det;
        prop_assert!((more - s * p).abs() <= 1e-12 * more.abs().max(1e-300));
        let longer = detection_probability(&PhotonBudget { t_m_us: t_m * s, ..base.clone() }).unwrap().p_det;
        prop_assert!((longer - p / s).abs() <= 1e-12 * p);
        let slower = detection_probability(&PhotonBudget { tau_emitter_ns: tau * s, ..base.clone() }).unwrap().p_det;
        prop_assert!((slower - p * s).abs() <= 1e-12 * slower);
    }

    #[test]
    fn purcell_ignores_common_lifetime_scale(s in 1e-3f64..1e3, bulk in 1.0f64..10.0, on in 0.5f64..4.0, extra in 0.1f64..6.0, xi in 0.05f64..1.0) {
        let l = LifetimeSet { tau_bulk: bulk, tau_on: on, tau_off: on + extra, xi_zpl: xi };
        let a = purcell_from_lifetimes(&l).unwrap();
        let b = purcell_from_lifetimes(&l.scaled(s)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn voltage_round_trip(f0 in 0.0f64..20.0, dvm in 0.01f64..10.0, law in law_strategy(), frac in 0.0f64..=1.0) {
        let e = emitter(f0, dvm);
        let f = frequency_at_voltage(&e, &law, frac * law.v_max).unwrap();
        let v = voltage_for_frequency(&e, &law, f).unwrap();
        let back = frequency_at_voltage(&e, &law, v).unwrap();
        prop_assert!((back - f).abs() <= 1e-6, "f {} back {}", f, back);
    }

    #[test]
    fn reachable_channels_by_scan(f0 in -5.0f64..30.0, dvm in 0.0f64..12.0, law in law_strategy(), delta_v in 0.3f64..4.0) {
        let e = emitter(f0, dvm);
        let grid = FrequencyGrid { v0: 0.0, delta_v, k_max: 11 };
        let (lo, hi) = law.interval(&e);
        let scan: Vec<u32> = (1..=11).filter(|&k| {
            let f = k as f64 * delta_v;
            lo <= f && f <= hi
        }).collect();
        prop_assert_eq!(reachable_channels(&e, &law, &grid), scan);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn interval_sweep_matches_pairwise_union_find(
        raw in prop::collection::vec((0i32..400, 0i32..40), 1..300),
    ) {
        // integer endpoints make touching intervals common
        let iv: Vec<(f64, f64)> = raw.iter().map(|&(a, w)| (a as f64 / 4.0, (a + w) as f64 / 4.0)).collect();
        prop_assert_eq!(components_of_intervals(&iv), pairwise_partition(&iv));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn e_spam_matches_exhaustive(len in 1usize..60, d in weights(60), b in weights(60)) {
        let (d, b) = (normalized(&d[..len]), normalized(&b[..len]));
        let (e, m) = e_spam(&d, &b).unwrap();
        let (eo, mo) = brute_e_spam(&d, &b);
        prop_assert!((e - eo).abs() < 1e-12);
        // summation order differs, so minimizers are compared only on a unique minimum
        let near = (0..=len).filter(|&k| (objective(&d, &b, k) - eo).abs() < 1e-12).count();
        if near == 1 {
            prop_assert_eq!(m, mo);
        }
    }
}
