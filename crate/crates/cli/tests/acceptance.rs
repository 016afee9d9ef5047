//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use qsoc_core::graph::components_of_intervals;
use qsoc_core::photonics::LifetimeSet;
use qsoc_core::registry::{emitter_statistics_from_count, transition_channels, uniform_frequency_sweep};
use qsoc_core::spam::{histogram, HISTOGRAM_PAD};
use qsoc_core::*;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn round_sig(x: f64, sig: i32) -> f64 {
    let mag = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(sig - 1 - mag);
    (x * scale).round() / scale
}

fn c1() -> Outcome {
    let s = emitter_statistics_from_count(52322, 1024, 11).unwrap();
    let pass = s.n_spot_distinct == 26161.0
        && s.per_channel_avg.round() == 2378.0
        && round_sig(s.n_emitter, 2) == 2.3;
    check(
        pass,
        format!(
            "52322 -> {} -> {:.2} per channel -> n_emitter {:.4}",
            s.n_spot_distinct, s.per_channel_avg, s.n_emitter
        ),
    )
}

fn c2() -> Outcome {
    let fp = purcell_from_lifetimes(&LifetimeSet::default()).unwrap();
    check(
        (fp - 2.87).abs() <= 0.01 && round_sig(fp, 2) == 2.9,
        format!("F_p = {fp:.5}"),
    )
}

fn c3() -> Outcome {
    let b = PhotonBudget::default();
    let d = detection_probability(&b).unwrap();
    let s = detection_probability(&b.snspd()).unwrap();
    let rel = (d.p_det_rounded - 2.4e-3).abs() / 2.4e-3;
    let rel_raw = (d.p_det - 2.4e-3).abs() / 2.4e-3;
    let pass = d.photon_total == 10000.0
        && d.photon_zpl_rounded == 24.0
        && rel <= 0.05
        && rel_raw <= 0.05
        && s.p_det >= 3.5e-3;
    check(
        pass,
        format!(
            "photon_total {}, photon_ZPL {:.3} -> {}, p_det {:.4e} (raw {:.4e}), SNSPD {:.4e}",
            d.photon_total, d.photon_zpl, d.photon_zpl_rounded, d.p_det_rounded, d.p_det, s.p_det
        ),
    )
}

fn c4() -> Outcome {
    let q = QuadrantCounts {
        gray: 0,
        red: 1508,
        blue: 143,
        magenta: 29,
    };
    let e = q.error().unwrap();
    check((e - 0.1024).abs() <= 1e-4, format!("error = {:.4}%", 100.0 * e))
}

fn c5() -> Outcome {
    let model = ReadoutModel::default();
    let records = simulate_readout(&model).unwrap();
    let r = &post_selection_sweep(&records, &[18]).unwrap()[0];
    let e = r.e_spam.unwrap_or(f64::NAN);
    check(
        records.len() == 100_000 && e <= 0.05 && (0.01..=0.10).contains(&r.p_success),
        format!(
            "C_th 18: e_spam {:.4}, p_success {:.4} over {} shots",
            e,
            r.p_success,
            records.len()
        ),
    )
}

/// Pairwise closed-interval overlap closed under union-find.
fn oracle_partition(iv: &[(f64, f64)]) -> BTreeSet<Vec<usize>> {
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
            if iv[i].0 <= iv[j].1 && iv[j].0 <= iv[i].1 {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = root(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

fn c6() -> Outcome {
    let mut rng = derived_rng(6, &[]);
    let mut mismatches = 0;
    for inst in 0..500 {
        let n = rng.random_range(1..=300);
        // every third instance uses integer endpoints to force touching intervals
        let coarse = inst % 3 == 0;
        let iv: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let (lo, w) = if coarse {
                    (rng.random_range(0..200) as f64, rng.random_range(0..4) as f64)
                } else {
                    (rng.random::<f64>() * 100.0, rng.random::<f64>() * 0.5)
                };
                (lo, lo + w)
            })
            .collect();
        let dp: BTreeSet<Vec<usize>> = components_of_intervals(&iv)
            .into_iter()
            .map(|mut g| {
                g.sort_unstable();
                g
            })
            .collect();
        if dp != oracle_partition(&iv) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatches over 500 instances"))
}

fn c7() -> Outcome {
    let ratios: Vec<f64> = vec![
        0.0, 0.0025, 0.005, 0.0075, 0.01, 0.0125, 0.015, 0.02, 0.025, 0.03, 0.04, 0.05, 0.075,
        0.1, 0.15, 0.2, 0.3, 0.5, 0.75, 1.0,
    ];
    let sizes = [10, 100, 300, 1000];
    let curve = pc_sweep(
        &EnsembleConfig::default(),
        &TuningLaw::default(),
        &ratios,
        &sizes,
        10,
        7,
    )
    .unwrap();

    let mut notes = Vec::new();
    let zero_exact = curve
        .points
        .iter()
        .zip(&curve.samples)
        .filter(|(p, _)| p.ratio == 0.0)
        .all(|(p, s)| s.iter().all(|&v| v == 1.0 / p.n_qubit as f64));
    if !zero_exact {
        notes.push("ratio 0 not 1/N".to_string());
    }
    let full = curve
        .series(1000)
        .find(|p| p.ratio == 1.0)
        .map(|p| p.p_c_mean)
        .unwrap_or(0.0);
    let mut monotone = true;
    for &n in &sizes {
        let s: Vec<&PcPoint> = curve.series(n).collect();
        for w in s.windows(2) {
            let tol = 2.0 * (w[0].p_c_stderr.powi(2) + w[1].p_c_stderr.powi(2)).sqrt();
            if w[1].p_c_mean < w[0].p_c_mean - tol {
                monotone = false;
                notes.push(format!("N={n} drops at ratio {}", w[1].ratio));
            }
        }
    }
    let t100 = curve.threshold_ratio(100, 0.9);
    let t1000 = curve.threshold_ratio(1000, 0.9);
    let scale_ok = matches!((t1000, t100), (Some(a), Some(b)) if a < b);
    check(
        zero_exact && full >= 0.99 && monotone && scale_ok,
        format!(
            "ratio 1, N=1000: p_c {full:.4}; threshold(0.9) N=100 {:.4}, N=1000 {:.4}; monotone {monotone}{}",
            t100.unwrap_or(f64::NAN),
            t1000.unwrap_or(f64::NAN),
            if notes.is_empty() { String::new() } else { format!("; {}", notes.join(", ")) }
        ),
    )
}

fn c8() -> Outcome {
    let est = scaling_estimate(2.3, 1024.0, 1.0, 11).unwrap();
    let spots = resolvable_spots(2650.0, 2.52).unwrap();
    check(
        (est.n_qubit - 25907.0).abs() <= 1.0 && (850_000..=890_000).contains(&spots),
        format!("N_qubit {:.1}, resolvable spots {spots}", est.n_qubit),
    )
}

fn c9() -> Outcome {
    let law = TuningLaw::default();
    let grid = FrequencyGrid::default();
    let synth = SynthParams {
        width: 66,
        height: 66,
        ..SynthParams::default()
    };
    let voltages = uniform_frequency_sweep(201, &law);
    let (mut planted, mut found, mut ids, mut spurious) = (0usize, 0usize, 0usize, 0usize);
    let (mut entries, mut off_freq) = (0usize, 0usize);
    let mut min_snr = f64::INFINITY;
    for stack_idx in 0..20u64 {
        let cfg = EnsembleConfig {
            n_qubit: 100,
            placement: Placement::Lattice {
                pitch_um: 1.2,
                jitter_um: 0.2,
            },
            brightness_min: 0.4,
            brightness_max: 1.0,
            rng_seed: derive_seed(9, &[stack_idx, 0]),
            ..EnsembleConfig::default()
        };
        let ens = sample_ensemble(&cfg).unwrap();
        for e in &ens {
            min_snr = min_snr.min(synth.peak_counts * e.brightness / synth.background.sqrt());
        }
        let stack = synthesize_frames(
            &ens,
            &law,
            &grid,
            &SynthParams {
                seed: derive_seed(9, &[stack_idx, 1]),
                ..synth.clone()
            },
            &voltages,
        )
        .unwrap();
        let reg = register(&stack, &RegistryParams::default());
        let pitch = stack.meta.pixel_pitch_um;

        // each identity maps to the planted emitter within 1.5 px, if any
        let mut id_to_planted: BTreeMap<u64, Option<usize>> = BTreeMap::new();
        for entries in reg.table.channels.values() {
            for e in entries {
                id_to_planted.entry(e.id).or_insert_with(|| {
                    ens.iter().position(|p| {
                        (p.x_um - e.x_um).hypot(p.y_um - e.y_um) / pitch < 1.5
                    })
                });
            }
        }
        let matched: BTreeSet<usize> = id_to_planted.values().flatten().copied().collect();
        ids += id_to_planted.len();
        spurious += id_to_planted.len() - matched.len();
        for (i, p) in ens.iter().enumerate() {
            if !transition_channels(p, &law, &grid).is_empty() {
                planted += 1;
                found += matched.contains(&i) as usize;
            }
        }
        for (&k, list) in &reg.table.channels {
            for e in list {
                let Some(Some(i)) = id_to_planted.get(&e.id) else {
                    continue;
                };
                let p = &ens[*i];
                entries += 1;
                let f = frequency_at_voltage(p, &law, e.best_voltage_v).unwrap();
                let fk = grid.channel_frequency(k);
                let miss = (f - fk).abs().min((f + p.splitting - fk).abs());
                if miss > p.linewidth_ghz() / 2.0 {
                    off_freq += 1;
                }
            }
        }
    }
    let recall = found as f64 / planted as f64;
    let spurious_rate = spurious as f64 / ids.max(1) as f64;
    check(
        min_snr >= 10.0 && recall >= 0.9 && spurious_rate < 0.05 && off_freq == 0,
        format!(
            "min SNR {min_snr:.1}; recall {found}/{planted} = {recall:.4}; spurious {spurious}/{ids} = {spurious_rate:.4}; off-frequency entries {off_freq}/{entries}"
        ),
    )
}

fn c10() -> Outcome {
    let model = ReadoutModel {
        p_charge: 0.5,
        seed: 10,
        ..ReadoutModel::default()
    };
    let records = simulate_readout(&model).unwrap();
    let hist = histogram(records.iter().map(|r| r.bin3), HISTOGRAM_PAD);
    let fit = fit_mixture(&hist).unwrap();
    let rel = |x: f64, t: f64| (x - t).abs() / t;
    let params_ok = rel(fit.p0, 0.5) <= 0.05 && rel(fit.lambda1, 18.0) <= 0.05 && rel(fit.lambda2, 1.6) <= 0.05;
    let monotone = fit
        .ll_trace
        .windows(2)
        .all(|w| w[1] >= w[0] - 1e-9 * w[0].abs());

    // root of the log density ratio by bisection
    let g = |n: f64| {
        (1.0 - fit.p0).ln() - fit.lambda1 + n * fit.lambda1.ln() - fit.p0.ln() + fit.lambda2
            - n * fit.lambda2.ln()
    };
    let (mut lo, mut hi) = (fit.lambda2, fit.lambda1);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let closed = solve_threshold(&fit).unwrap();
    let diff = (closed - 0.5 * (lo + hi)).abs();
    check(
        params_ok && monotone && diff <= 1e-9,
        format!(
            "p0 {:.4}, lambda1 {:.4}, lambda2 {:.4}; LL monotone over {} iterations: {monotone}; threshold {closed:.9} vs numeric diff {diff:.2e}",
            fit.p0, fit.lambda1, fit.lambda2, fit.ll_trace.len()
        ),
    )
}

const CLI_CONFIG: &str = r#"
seed = 3

[ensemble]
n_qubit = 30

[registry]
n_voltages = 41

[spam.model]
shots = 20000

[pc_sweep]
ratios = [0.0, 0.02, 0.1, 0.5]
n_qubits = [20, 100]
trials = 4
"#;

fn tree(root: &Path, rel: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for e in fs::read_dir(root.join(rel)).unwrap() {
        let name = rel.join(e.unwrap().file_name());
        let full = root.join(&name);
        if full.is_dir() {
            tree(root, &name, out);
        } else {
            out.insert(name, fs::read(&full).unwrap());
        }
    }
}

fn c11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), CLI_CONFIG).unwrap();
    let subs = ["pc-sweep", "registry", "spam", "budget", "scaling", "synth-frames"];
    let mut differing = Vec::new();
    for sub in subs {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let out = dir.path().join(format!("{sub}-{run}"));
            let status = Command::new(env!("CARGO_BIN_EXE_qsoc"))
                .args([sub, "--config", "exp.toml", "--seed", "5", "--out"])
                .arg(&out)
                .current_dir(dir.path())
                .status()
                .unwrap();
            if !status.success() {
                differing.push(format!("{sub} exited with {status}"));
            }
            let mut files = BTreeMap::new();
            if out.is_dir() {
                tree(&out, Path::new(""), &mut files);
            }
            // the output directory itself is echoed in the resolved config
            files.remove(Path::new("resolved_config.toml"));
            outputs.push(files);
        }
        if outputs[0].is_empty() || outputs[0] != outputs[1] {
            differing.push(sub.to_string());
        }
    }
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} subcommands byte-identical across two runs", subs.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 11] = [
        ("n_emitter pipeline arithmetic", Duration::from_secs(1), c1),
        ("Purcell factor from lifetimes", Duration::from_secs(1), c2),
        ("p_det budget", Duration::from_secs(1), c3),
        ("no-post-selection SPAM", Duration::from_secs(1), c4),
        ("post-selection sweep at C_th = 18", Duration::from_secs(10), c5),
        ("interval-graph oracle equivalence", Duration::from_secs(30), c6),
        ("p_c limits and sweep", Duration::from_secs(120), c7),
        ("scaling identity and resolvable spots", Duration::from_secs(1), c8),
        ("registry closed loop", Duration::from_secs(120), c9),
        ("mixture-Poisson MLE recovery", Duration::from_secs(10), c10),
        ("CLI determinism", Duration::from_secs(120), c11),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let out = run();
        let elapsed = t.elapsed();
        let pass = out.pass && elapsed <= *budget;
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] {:>2}. {name}: {} ({:.2} s, budget {} s)",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            out.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
