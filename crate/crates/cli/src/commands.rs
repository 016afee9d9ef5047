use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use qsoc_core::graph::{write_scaling_csv, ScalingPoint};
use qsoc_core::numfmt::round9;
use qsoc_core::registry::{linear_sweep, uniform_frequency_sweep, write_stats_csv};
use qsoc_core::spam::{mean_time_to_success, read_records_csv, write_sweep_csv, histogram, HISTOGRAM_PAD};
use qsoc_core::{
    derive_seed, detection_probability, emitter_statistics, fit_mixture, pc_sweep,
    post_selection_sweep, purcell_from_cavity, purcell_from_lifetimes, quadrant_analysis,
    register, resolvable_spots, sample_ensemble, scaling_estimate, simulate_readout,
    solve_threshold, synthesize_frames, EnsembleConfig, EnsembleDocument, FrameStack,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, SweepKind};
use crate::Failure;

const REPORT_SCHEMA_VERSION: u32 = 1;

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path)
        .map_err(Failure::io)
        .with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text)
        .map_err(Failure::io)
        .with_context(|| format!("writing {}", path.display()))
}

fn prepare(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(&cfg.out)
        .map_err(Failure::io)
        .with_context(|| format!("creating output directory {}", cfg.out.display()))?;
    write_text(&cfg.out.join("resolved_config.toml"), &cfg.to_toml()?)?;
    Ok(cfg.out.clone())
}

fn core<T>(r: qsoc_core::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| Failure::from_core(e).into())
}

fn pretty<T: Serialize>(v: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// Fills module seeds from the master seed. Seeds stay below 2^63 so the
/// resolved config is valid TOML.
pub fn derive_module_seeds(cfg: &mut ExperimentConfig) -> anyhow::Result<()> {
    if cfg.seed > i64::MAX as u64 {
        return Err(Failure::Config(format!("seed {} must be below 2^63", cfg.seed)).into());
    }
    let sub = |i: u64| derive_seed(cfg.seed, &[i]) & i64::MAX as u64;
    cfg.ensemble.rng_seed = sub(1);
    cfg.registry.synth.seed = sub(2);
    cfg.spam.model.seed = sub(3);
    Ok(())
}

pub fn pc_sweep_cmd(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let p = &cfg.pc_sweep;
    let curve = core(pc_sweep(
        &cfg.ensemble,
        &cfg.law,
        &p.ratios,
        &p.n_qubits,
        p.trials,
        cfg.seed,
    ))?;
    let out = prepare(cfg)?;
    core(curve.write_csv(create(&out.join("pc_curve.csv"))?))
}

fn registry_ensemble(cfg: &ExperimentConfig) -> anyhow::Result<Vec<qsoc_core::Emitter>> {
    core(sample_ensemble(&cfg.ensemble))
}

fn synth_stack(cfg: &ExperimentConfig) -> anyhow::Result<(EnsembleConfig, Vec<qsoc_core::Emitter>, FrameStack)> {
    let r = &cfg.registry;
    if r.n_voltages < 2 {
        return Err(Failure::Config("registry.n_voltages must be >= 2".into()).into());
    }
    core(cfg.law.validate())?;
    let ensemble = registry_ensemble(cfg)?;
    let voltages = match r.sweep {
        SweepKind::Linear => linear_sweep(r.n_voltages, cfg.law.v_max),
        SweepKind::UniformFrequency => uniform_frequency_sweep(r.n_voltages, &cfg.law),
    };
    let stack = core(synthesize_frames(&ensemble, &cfg.law, &cfg.grid, &r.synth, &voltages))?;
    Ok((cfg.ensemble.clone(), ensemble, stack))
}

pub fn synth_frames_cmd(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let (ens_cfg, ensemble, stack) = synth_stack(cfg)?;
    let out = prepare(cfg)?;
    let doc = EnsembleDocument::new(ens_cfg, ensemble);
    write_text(&out.join("ensemble.json"), &core(doc.to_json())?)?;
    core(qsoc_core::ensemble::write_ensemble_csv(
        &doc.emitters,
        create(&out.join("ensemble.csv"))?,
    ))?;
    core(stack.write_dir(&out.join("frames")))
}

pub fn registry_cmd(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let r = &cfg.registry;
    let stack = match &r.frames_dir {
        Some(dir) => core(FrameStack::read_dir(dir))
            .with_context(|| format!("loading frames from {}", dir.display()))?,
        None => synth_stack(cfg)?.2,
    };
    let reg = register(&stack, &r.params);
    let stats = core(emitter_statistics(&reg.table, r.n_sys, stack.meta.grid.k_max))?;
    let out = prepare(cfg)?;
    write_text(&out.join("lookup_table.json"), &(core(reg.table.to_json())? + "\n"))?;
    core(reg.table.write_csv(create(&out.join("lookup_table.csv"))?))?;
    core(write_stats_csv(&stats, create(&out.join("stats.csv"))?))
}

pub fn spam_cmd(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let s = &cfg.spam;
    let t_cycle_us = s.cycle_time_us;
    if !(t_cycle_us.is_finite() && t_cycle_us > 0.0) {
        return Err(Failure::Config("spam.cycle_time_us must be positive".into()).into());
    }
    let records = match &s.records {
        Some(path) => {
            let f = File::open(path)
                .map_err(Failure::io)
                .with_context(|| format!("opening records {}", path.display()))?;
            core(read_records_csv(f)).with_context(|| format!("reading {}", path.display()))?
        }
        None => core(simulate_readout(&s.model))?,
    };
    let sweep = core(post_selection_sweep(&records, &s.c_th))?;

    let hist = histogram(records.iter().map(|r| r.bin3), HISTOGRAM_PAD);
    let fit_section = match fit_mixture(&hist) {
        Ok(fit) => {
            let n_m = solve_threshold(&fit).ok();
            let quadrants = n_m.and_then(|n| quadrant_analysis(&records, n).ok());
            json!({
                "p0": round9(fit.p0),
                "lambda1": round9(fit.lambda1),
                "lambda2": round9(fit.lambda2),
                "log_likelihood": round9(fit.log_likelihood),
                "iterations": fit.iterations,
                "n_m": n_m.map(round9),
                "quadrants": quadrants,
                "quadrant_error": quadrants.and_then(|q| q.error()).map(round9),
            })
        }
        Err(e) => json!({ "error": e.to_string() }),
    };
    let successes: Vec<Value> = sweep
        .iter()
        .map(|r| {
            let t = mean_time_to_success(t_cycle_us, r.p_success);
            json!({
                "c_th": r.c_th,
                "mean_time_to_success_us": t.is_finite().then(|| round9(t)),
            })
        })
        .collect();
    let report = json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "shots": records.len(),
        "fit_bin3": fit_section,
        "cycle_time_us": round9(t_cycle_us),
        "mean_time_to_success": successes,
    });

    let out = prepare(cfg)?;
    core(write_sweep_csv(&sweep, create(&out.join("spam_sweep.csv"))?))?;
    write_text(&out.join("fit_report.json"), &pretty(&report)?)
}

fn entry(name: &str, value: f64, provenance: &str) -> Value {
    json!({ "name": name, "value": round9(value), "provenance": provenance })
}

pub fn budget_cmd(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let ph = &cfg.photonics;
    let b = &ph.budget;
    let det = core(detection_probability(b))?;
    let snspd = core(detection_probability(&b.snspd()))?;
    let fp = core(purcell_from_lifetimes(&ph.lifetimes))?;

    let mut q = vec![
        entry("tau_bulk_ns", ph.lifetimes.tau_bulk, "input"),
        entry("tau_on_ns", ph.lifetimes.tau_on, "input"),
        entry("tau_off_ns", ph.lifetimes.tau_off, "input"),
        entry("xi_zpl", ph.lifetimes.xi_zpl, "input"),
        entry("purcell_factor", fp, "derived"),
    ];
    if let Some(c) = &ph.cavity {
        let fc = core(purcell_from_cavity(c.wavelength_over_n, c.q, c.mode_volume, c.unit))?;
        q.push(entry("purcell_factor_cavity", fc, "derived"));
    }
    for &(na, eta) in &ph.collection.points {
        q.push(entry(&format!("collection_efficiency_na_{na}"), eta, "input"));
    }
    q.extend([
        entry("readout_counts", b.readout_counts, "input"),
        entry("t_m_us", b.t_m_us, "input"),
        entry("tau_emitter_ns", b.tau_emitter_ns, "input"),
        entry("zpl_fraction", b.zpl_fraction, "input"),
        entry("c_line_fraction", b.c_line_fraction, "input"),
        entry("psb_after_filter", b.psb_after_filter, "input"),
        entry("detector_qe", b.detector_qe, "input"),
        entry("photon_total", det.photon_total, "derived"),
        entry("zpl_to_psb_ratio", det.zpl_to_psb_ratio, "derived"),
        entry("photon_zpl", det.photon_zpl, "derived"),
        entry("photon_zpl_rounded", det.photon_zpl_rounded, "derived"),
        entry("p_det", det.p_det, "derived"),
        entry("p_det_rounded", det.p_det_rounded, "derived"),
        entry("photon_zpl_snspd", snspd.photon_zpl, "derived"),
        entry("p_det_snspd", snspd.p_det, "derived"),
    ]);
    let doc = json!({ "schema_version": REPORT_SCHEMA_VERSION, "quantities": q });
    let out = prepare(cfg)?;
    write_text(&out.join("budget.json"), &pretty(&doc)?)
}

pub fn scaling_cmd(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let s = &cfg.scaling;
    let mut systems: Vec<(String, f64)> =
        s.systems.iter().map(|x| (x.label.clone(), x.n_sys)).collect();
    if let Some(d) = s.fov_diameter_um {
        let spots = core(resolvable_spots(d, s.spot_spacing_um))?;
        systems.push(("wide_fov".into(), spots as f64));
    }
    let mut points = Vec::new();
    for (label, n_sys) in &systems {
        for &k in &s.k_max {
            let est = core(scaling_estimate(s.n_emitter, *n_sys, s.p_c, k))?;
            points.push(ScalingPoint {
                label: format!("{label}_k{k}"),
                n_qubit: est.n_qubit,
                n_link: est.n_link,
            });
        }
    }
    let out = prepare(cfg)?;
    core(write_scaling_csv(&points, create(&out.join("scaling.csv"))?))
}
