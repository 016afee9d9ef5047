//! Tunability-overlap connectivity.
//!
//! Two views of the same ensemble are kept apart:
//!
//! * the continuous interval graph, where two emitters connect when their
//!   closed tuning intervals intersect; its largest component gives `p_c`;
//! * the discrete channel graph, where two emitters connect when they can both
//!   reach a common comb channel and both have linewidths under the
//!   interference limit.
//!
//! Also hosts the `p_c` Monte-Carlo sweep and the system scaling arithmetic.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsu::DisjointSet;
use crate::ensemble::{
    reachable_channels, sample_ensemble, Emitter, EnsembleConfig, FrequencyGrid, TuningLaw,
    TRANSFORM_LIMIT_MHZ,
};
use crate::error::{Error, Result};
use crate::numfmt::sig9;
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityReport {
    /// Emitter ids per component, ascending, components ordered by smallest id.
    pub components: Vec<Vec<u64>>,
    /// Size of the largest component (N_con).
    pub largest_size: usize,
    pub n_qubit: usize,
    /// `largest_size / n_qubit`.
    pub p_c: f64,
}

impl ConnectivityReport {
    /// Fraction of emitters in any component of size two or more. Reported
    /// for comparison only; `p_c` uses the largest component.
    pub fn non_singleton_fraction(&self) -> f64 {
        let n: usize = self
            .components
            .iter()
            .filter(|c| c.len() > 1)
            .map(Vec::len)
            .sum();
        n as f64 / self.n_qubit as f64
    }
}

/// Order in which the sweep visits intervals: by left endpoint, ties by index.
fn sweep_order(intervals: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..intervals.len()).collect();
    order.sort_by(|&a, &b| intervals[a].0.total_cmp(&intervals[b].0).then(a.cmp(&b)));
    order
}

/// Connected components of the interval graph over closed intervals `(lo, hi)`.
///
/// Sort by left endpoint and carry the running maximum right endpoint; a new
/// component starts when the next left endpoint lies strictly beyond it.
/// Returns index groups in canonical order (ascending within a group, groups
/// ordered by smallest index).
pub fn components_of_intervals(intervals: &[(f64, f64)]) -> Vec<Vec<usize>> {
    let order = sweep_order(intervals);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut reach = f64::NEG_INFINITY;
    for &i in &order {
        let (lo, hi) = intervals[i];
        if groups.is_empty() || lo > reach {
            groups.push(Vec::new());
            reach = hi;
        } else {
            reach = reach.max(hi);
        }
        groups.last_mut().expect("pushed above").push(i);
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort_unstable_by_key(|g| g[0]);
    groups
}

/// Size of the largest interval-graph component, without materializing groups.
pub fn largest_component_size(intervals: &[(f64, f64)]) -> usize {
    let order = sweep_order(intervals);
    let (mut best, mut run) = (0usize, 0usize);
    let mut reach = f64::NEG_INFINITY;
    for &i in &order {
        let (lo, hi) = intervals[i];
        if run == 0 || lo > reach {
            run = 1;
            reach = hi;
        } else {
            run += 1;
            reach = reach.max(hi);
        }
        best = best.max(run);
    }
    best
}

pub fn interval_components(ensemble: &[Emitter], law: &TuningLaw) -> Result<ConnectivityReport> {
    if ensemble.is_empty() {
        return Err(Error::Domain("connectivity of an empty ensemble".into()));
    }
    let intervals: Vec<(f64, f64)> = ensemble.iter().map(|e| law.interval(e)).collect();
    let mut components: Vec<Vec<u64>> = components_of_intervals(&intervals)
        .into_iter()
        .map(|g| {
            let mut ids: Vec<u64> = g.into_iter().map(|i| ensemble[i].id).collect();
            ids.sort_unstable();
            ids
        })
        .collect();
    components.sort_unstable_by_key(|c| c[0]);
    let largest_size = components.iter().map(Vec::len).max().unwrap_or(0);
    Ok(ConnectivityReport {
        components,
        largest_size,
        n_qubit: ensemble.len(),
        p_c: largest_size as f64 / ensemble.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcPoint {
    pub ratio: f64,
    pub n_qubit: usize,
    pub p_c_mean: f64,
    pub p_c_stderr: f64,
    pub trials: usize,
}

/// `p_c` versus mean tunability ratio, one series per system size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcCurve {
    pub tunability_ratios: Vec<f64>,
    pub n_qubits: Vec<usize>,
    pub trials: usize,
    /// Ordered by `n_qubit` (input order), then ratio (input order).
    pub points: Vec<PcPoint>,
    /// Per-trial values, same order as `points`.
    pub samples: Vec<Vec<f64>>,
}

impl PcCurve {
    pub fn series(&self, n_qubit: usize) -> impl Iterator<Item = &PcPoint> {
        self.points.iter().filter(move |p| p.n_qubit == n_qubit)
    }

    /// Smallest ratio at which the mean curve reaches `target`, linearly
    /// interpolated between sweep points. `None` if never reached.
    pub fn threshold_ratio(&self, n_qubit: usize, target: f64) -> Option<f64> {
        let mut pts: Vec<&PcPoint> = self.series(n_qubit).collect();
        pts.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
        let idx = pts.iter().position(|p| p.p_c_mean >= target)?;
        if idx == 0 {
            return Some(pts[0].ratio);
        }
        let (a, b) = (pts[idx - 1], pts[idx]);
        let t = (target - a.p_c_mean) / (b.p_c_mean - a.p_c_mean);
        Some(a.ratio + t * (b.ratio - a.ratio))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["ratio", "n_qubit", "p_c_mean", "p_c_stderr", "trials"])?;
        for p in &self.points {
            wr.write_record([
                sig9(p.ratio),
                p.n_qubit.to_string(),
                sig9(p.p_c_mean),
                sig9(p.p_c_stderr),
                p.trials.to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::Serde(e.to_string()))?;
        Ok(())
    }
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.iter().all(|&x| x == xs[0]) {
        return (xs[0], 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo `p_c` sweep.
///
/// For each ratio the mean tuning range is `ratio * v_inh`. The ensemble of
/// trial `t` at size `n` is drawn from `derive_seed(master_seed, [n, t])`
/// for every ratio, so ratios share zero-bias frequencies and standard-normal
/// tuning draws and differ only in scale. Trials run in parallel and are
/// reduced by index.
pub fn pc_sweep(
    base: &EnsembleConfig,
    law: &TuningLaw,
    ratios: &[f64],
    n_qubit_list: &[usize],
    trials: usize,
    master_seed: u64,
) -> Result<PcCurve> {
    base.validate()?;
    law.validate()?;
    if trials < 1 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Config(format!("ratio {r} outside [0, 1]")));
    }
    if n_qubit_list.iter().any(|&n| n == 0) {
        return Err(Error::Config("n_qubit must be >= 1".into()));
    }

    let jobs: Vec<(usize, usize)> = n_qubit_list
        .iter()
        .flat_map(|&n| (0..trials).map(move |t| (n, t)))
        .collect();

    // rows[job][ratio]
    let rows: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(n, t)| -> Result<Vec<f64>> {
            let unit = EnsembleConfig {
                n_qubit: n,
                mean_tuning: None,
                tuning_sigma: Some(1.0),
                rng_seed: derive_seed(master_seed, &[n as u64, t as u64]),
                ..base.clone()
            };
            let ensemble = sample_ensemble(&unit)?;
            Ok(ratios
                .iter()
                .map(|&ratio| {
                    let sigma = base.with_mean_tuning(ratio * base.v_inh).sigma();
                    let intervals: Vec<(f64, f64)> = ensemble
                        .iter()
                        .map(|e| {
                            let scaled = Emitter {
                                delta_vm: e.delta_vm * sigma,
                                ..e.clone()
                            };
                            law.interval(&scaled)
                        })
                        .collect();
                    largest_component_size(&intervals) as f64 / n as f64
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut points = Vec::new();
    let mut samples = Vec::new();
    for (ni, &n) in n_qubit_list.iter().enumerate() {
        for (ri, &ratio) in ratios.iter().enumerate() {
            let vals: Vec<f64> = (0..trials).map(|t| rows[ni * trials + t][ri]).collect();
            let (p_c_mean, p_c_stderr) = mean_stderr(&vals);
            points.push(PcPoint {
                ratio,
                n_qubit: n,
                p_c_mean,
                p_c_stderr,
                trials,
            });
            samples.push(vals);
        }
    }
    Ok(PcCurve {
        tunability_ratios: ratios.to_vec(),
        n_qubits: n_qubit_list.to_vec(),
        trials,
        points,
        samples,
    })
}

/// Default interference limit: twice the transform-limited linewidth.
pub const DEFAULT_LINEWIDTH_LIMIT_MHZ: f64 = 2.0 * TRANSFORM_LIMIT_MHZ;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelNode {
    pub id: u64,
    pub channels: Vec<u32>,
}

/// Emitters linked through shared comb channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelGraph {
    pub nodes: Vec<ChannelNode>,
    pub edges: Vec<[u64; 2]>,
    /// `members[k - 1]` lists ids reaching channel `k`.
    #[serde(skip)]
    pub members: Vec<Vec<u64>>,
}

impl ChannelGraph {
    pub fn channel_members(&self, k: u32) -> &[u64] {
        &self.members[k as usize - 1]
    }

    /// Connected components over node ids, canonical order.
    pub fn components(&self) -> Vec<Vec<u64>> {
        let index: std::collections::HashMap<u64, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id, i))
            .collect();
        let mut dsu = DisjointSet::new(self.nodes.len());
        for [a, b] in &self.edges {
            dsu.union(index[a], index[b]);
        }
        let mut out: Vec<Vec<u64>> = dsu
            .groups()
            .into_iter()
            .map(|g| {
                let mut ids: Vec<u64> = g.into_iter().map(|i| self.nodes[i].id).collect();
                ids.sort_unstable();
                ids
            })
            .collect();
        out.sort_unstable_by_key(|c| c[0]);
        out
    }

    /// Node-link JSON: `{nodes: [{id, channels}], edges: [[i, j], ...]}`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn channel_graph(
    ensemble: &[Emitter],
    law: &TuningLaw,
    grid: &FrequencyGrid,
    linewidth_limit_mhz: f64,
) -> ChannelGraph {
    let mut members = vec![Vec::new(); grid.k_max as usize];
    let mut nodes = Vec::with_capacity(ensemble.len());
    for e in ensemble {
        let channels = reachable_channels(e, law, grid);
        for &k in &channels {
            members[k as usize - 1].push(e.id);
        }
        nodes.push(ChannelNode { id: e.id, channels });
    }

    let eligible: std::collections::HashSet<u64> = ensemble
        .iter()
        .filter(|e| e.linewidth <= linewidth_limit_mhz)
        .map(|e| e.id)
        .collect();
    let mut edges = BTreeSet::new();
    for m in &members {
        let ok: Vec<u64> = m.iter().copied().filter(|id| eligible.contains(id)).collect();
        for (i, &a) in ok.iter().enumerate() {
            for &b in &ok[i + 1..] {
                if a != b {
                    edges.insert([a.min(b), a.max(b)]);
                }
            }
        }
    }
    ChannelGraph {
        nodes,
        edges: edges.into_iter().collect(),
        members,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingEstimate {
    pub n_qubit: f64,
    /// Direct connections per qubit: one frequency channel's all-to-all set,
    /// never more than `n_qubit`.
    pub n_link: f64,
}

/// `N_qubit = n_emitter * N_sys * p_c * k_max`.
pub fn scaling_estimate(n_emitter: f64, n_sys: f64, p_c: f64, k_max: u32) -> Result<ScalingEstimate> {
    if [n_emitter, n_sys, p_c].iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::Domain("scaling inputs must be >= 0".into()));
    }
    let n_qubit = n_emitter * n_sys * p_c * k_max as f64;
    let n_link = (n_emitter * n_sys * p_c).min(n_qubit);
    Ok(ScalingEstimate { n_qubit, n_link })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub label: String,
    pub n_qubit: f64,
    pub n_link: f64,
}

pub fn write_scaling_csv<W: Write>(points: &[ScalingPoint], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["n_qubit", "n_link", "label"])?;
    for p in points {
        wr.write_record([sig9(p.n_qubit), sig9(p.n_link), p.label.clone()])?;
    }
    wr.flush().map_err(|e| Error::Serde(e.to_string()))?;
    Ok(())
}

/// Diffraction-limited sites in a circular field of view: `floor(pi (d/2)^2 / s^2)`.
pub fn resolvable_spots(fov_diameter_um: f64, spot_spacing_um: f64) -> Result<u64> {
    if !(fov_diameter_um > 0.0 && spot_spacing_um > 0.0) {
        return Err(Error::Domain("FOV diameter and spot spacing must be positive".into()));
    }
    let r = fov_diameter_um / 2.0;
    Ok((PI * r * r / (spot_spacing_um * spot_spacing_um)).floor() as u64)
}
