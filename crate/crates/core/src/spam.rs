//! Spin state preparation and measurement statistics.
//!
//! A shot is three APD time bins of duration `T_M`: bin 1 heralds the
//! prepared state, bin 2 reads the spin expecting dark, bin 3 reads it
//! expecting bright after the opposite-transition pulse.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numfmt::sig9;
use crate::rng::derived_rng;

/// Extra zero-probability support past the largest observed count.
pub const HISTOGRAM_PAD: usize = 10;
/// Tolerance on the normalization of count distributions.
pub const NORMALIZATION_TOL: f64 = 1e-9;
const TIE_TOL: f64 = 1e-12;

const SHOTS_PER_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadoutRecord {
    pub bin1: u32,
    pub bin2: u32,
    pub bin3: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReadoutModel {
    /// Mean bright-state counts per bin.
    pub lambda_bright: f64,
    /// Mean dark-state counts per bin.
    pub lambda_dark: f64,
    /// Probability the shot starts in the addressed charge and spin manifold.
    pub p_charge: f64,
    pub shots: usize,
    /// Bin duration in microseconds.
    pub t_m_us: f64,
    pub seed: u64,
    /// Per-bin bright rate overrides for asymmetric measured data.
    pub bin1_bright: Option<f64>,
    pub bin3_bright: Option<f64>,
}

impl Default for ReadoutModel {
    fn default() -> Self {
        Self {
            lambda_bright: 18.0,
            lambda_dark: 1.6,
            p_charge: 0.06,
            shots: 100_000,
            t_m_us: 50.0,
            seed: 0,
            bin1_bright: None,
            bin3_bright: None,
        }
    }
}

impl ReadoutModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_dark > 0.0 && self.lambda_dark < self.lambda_bright) {
            return Err(Error::Config("need 0 < lambda_dark < lambda_bright".into()));
        }
        if !self.lambda_bright.is_finite() {
            return Err(Error::Config("lambda_bright must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.p_charge) {
            return Err(Error::Config("p_charge must be in [0, 1]".into()));
        }
        for l in [self.bin1_bright, self.bin3_bright].into_iter().flatten() {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config("bright rate overrides must be positive".into()));
            }
        }
        if !(self.t_m_us > 0.0) {
            return Err(Error::Config("t_m_us must be positive".into()));
        }
        Ok(())
    }
}

fn poisson(lambda: f64) -> Result<Poisson<f64>> {
    Poisson::new(lambda).map_err(|e| Error::Config(format!("Poisson({lambda}): {e}")))
}

/// Draws `model.shots` three-bin records. Shots are generated in fixed-size
/// chunks, each with its own derived seed.
pub fn simulate_readout(model: &ReadoutModel) -> Result<Vec<ReadoutRecord>> {
    model.validate()?;
    let dark = poisson(model.lambda_dark)?;
    let b1 = poisson(model.bin1_bright.unwrap_or(model.lambda_bright))?;
    let b3 = poisson(model.bin3_bright.unwrap_or(model.lambda_bright))?;
    let n_chunks = model.shots.div_ceil(SHOTS_PER_CHUNK);

    let chunks: Vec<Vec<ReadoutRecord>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = derived_rng(model.seed, &[c as u64]);
            let len = SHOTS_PER_CHUNK.min(model.shots - c * SHOTS_PER_CHUNK);
            (0..len)
                .map(|_| {
                    let addressed = rng.random::<f64>() < model.p_charge;
                    let mut draw = |d: &Poisson<f64>| d.sample(&mut rng) as u32;
                    if addressed {
                        ReadoutRecord {
                            bin1: draw(&b1),
                            bin2: draw(&dark),
                            bin3: draw(&b3),
                        }
                    } else {
                        ReadoutRecord {
                            bin1: draw(&dark),
                            bin2: draw(&dark),
                            bin3: draw(&dark),
                        }
                    }
                })
                .collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// Counts per value `0..=max + pad`.
pub fn histogram(values: impl IntoIterator<Item = u32>, pad: usize) -> Vec<u64> {
    let mut h: Vec<u64> = Vec::new();
    for v in values {
        let v = v as usize;
        if v >= h.len() {
            h.resize(v + 1, 0);
        }
        h[v] += 1;
    }
    if !h.is_empty() {
        h.resize(h.len() + pad, 0);
    }
    h
}

pub fn normalize(h: &[u64]) -> Vec<f64> {
    let total: u64 = h.iter().sum();
    h.iter().map(|&c| c as f64 / total as f64).collect()
}

/// `p(n) = (1 - p0) Poi(n; lambda1) + p0 Poi(n; lambda2)` with `lambda1 > lambda2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub p0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Log-likelihood after each EM iteration of the selected start.
    #[serde(skip)]
    pub ll_trace: Vec<f64>,
}

impl MixtureFit {
    pub fn pmf(&self, n: u32) -> f64 {
        let lf = ln_factorial(n as usize);
        (1.0 - self.p0) * log_poisson(n as f64, self.lambda1, lf).exp()
            + self.p0 * log_poisson(n as f64, self.lambda2, lf).exp()
    }
}

pub const EM_TOL: f64 = 1e-9;
pub const EM_MAX_ITER: usize = 500;
pub const EM_RESTARTS: usize = 3;
const LAMBDA_FLOOR: f64 = 1e-9;

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

fn log_poisson(n: f64, lambda: f64, ln_fact: f64) -> f64 {
    n * lambda.ln() - lambda - ln_fact
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

struct EmRun {
    p0: f64,
    l1: f64,
    l2: f64,
    ll: f64,
    trace: Vec<f64>,
}

fn em_run(hist: &[u64], lnf: &[f64], mut p0: f64, mut l1: f64, mut l2: f64) -> EmRun {
    let total: f64 = hist.iter().sum::<u64>() as f64;
    let ll_of = |p0: f64, l1: f64, l2: f64| -> f64 {
        hist.iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(n, &c)| {
                let a = (1.0 - p0).ln() + log_poisson(n as f64, l1, lnf[n]);
                let b = p0.ln() + log_poisson(n as f64, l2, lnf[n]);
                c as f64 * log_sum_exp(a, b)
            })
            .sum()
    };
    let mut ll = ll_of(p0, l1, l2);
    let mut trace = Vec::new();
    for _ in 0..EM_MAX_ITER {
        let (mut w2, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for (n, &c) in hist.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let a = (1.0 - p0).ln() + log_poisson(n as f64, l1, lnf[n]);
            let b = p0.ln() + log_poisson(n as f64, l2, lnf[n]);
            let r2 = (b - log_sum_exp(a, b)).exp();
            let c = c as f64;
            w2 += c * r2;
            s2 += c * r2 * n as f64;
            s1 += c * (1.0 - r2) * n as f64;
        }
        let w1 = total - w2;
        if w2 > 0.0 {
            l2 = (s2 / w2).max(LAMBDA_FLOOR);
        }
        if w1 > 0.0 {
            l1 = (s1 / w1).max(LAMBDA_FLOOR);
        }
        p0 = w2 / total;
        let next = ll_of(p0, l1, l2);
        debug_assert!(
            next >= ll - 1e-9 * ll.abs().max(1.0),
            "EM log-likelihood decreased: {ll} -> {next}"
        );
        trace.push(next);
        let improvement = next - ll;
        ll = next;
        if improvement < EM_TOL {
            break;
        }
    }
    EmRun {
        p0,
        l1,
        l2,
        ll,
        trace,
    }
}

/// Mean of the samples at or below quantile `q` (`upper = false`) or at or
/// above it (`upper = true`).
fn tail_mean(hist: &[u64], q: f64, upper: bool) -> f64 {
    let total: u64 = hist.iter().sum();
    let want = ((total as f64) * if upper { 1.0 - q } else { q }).ceil().max(1.0) as u64;
    let (mut taken, mut sum) = (0u64, 0.0);
    let iter: Box<dyn Iterator<Item = (usize, &u64)>> = if upper {
        Box::new(hist.iter().enumerate().rev())
    } else {
        Box::new(hist.iter().enumerate())
    };
    for (n, &c) in iter {
        let take = c.min(want - taken);
        sum += take as f64 * n as f64;
        taken += take;
        if taken >= want {
            break;
        }
    }
    sum / taken as f64
}

/// Maximum-likelihood two-component Poisson mixture by EM.
///
/// Starts from the lower-quartile mean (dark) and upper-decile mean (bright)
/// with equal weights, plus [`EM_RESTARTS`] seeded perturbations of that
/// start; the highest-likelihood run wins.
pub fn fit_mixture(hist: &[u64]) -> Result<MixtureFit> {
    let total: u64 = hist.iter().sum();
    if total < 100 {
        return Err(Error::Fit(format!("histogram has {total} counts, need >= 100")));
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Fit("histogram mass sits in a single bin".into()));
    }
    let lnf: Vec<f64> = {
        let mut v = Vec::with_capacity(hist.len());
        let mut acc = 0.0;
        for n in 0..hist.len() {
            if n > 1 {
                acc += (n as f64).ln();
            }
            v.push(acc);
        }
        v
    };

    let l2_init = tail_mean(hist, 0.25, false).max(0.05);
    let mut l1_init = tail_mean(hist, 0.90, true);
    if l1_init <= l2_init {
        l1_init = l2_init + 1.0;
    }

    let mut best = em_run(hist, &lnf, 0.5, l1_init, l2_init);
    let mut rng = derived_rng(0x5eed_0f_e3, &[total]);
    for _ in 0..EM_RESTARTS {
        let p0 = rng.random_range(0.2..0.8);
        let l1 = l1_init * rng.random_range(0.7..1.3);
        let l2 = l2_init * rng.random_range(0.7..1.3);
        let run = em_run(hist, &lnf, p0, l1, l2);
        if run.ll > best.ll {
            best = run;
        }
    }

    let (p0, lambda1, lambda2) = if best.l1 >= best.l2 {
        (best.p0, best.l1, best.l2)
    } else {
        (1.0 - best.p0, best.l2, best.l1)
    };
    Ok(MixtureFit {
        p0,
        lambda1,
        lambda2,
        log_likelihood: best.ll,
        iterations: best.trace.len(),
        ll_trace: best.trace,
    })
}

/// Real-valued count where the weighted bright and dark densities cross:
/// `(1 - p0) l1^N e^-l1 = p0 l2^N e^-l2`.
pub fn solve_threshold(fit: &MixtureFit) -> Result<f64> {
    if !(fit.p0 > 0.0 && fit.p0 < 1.0) {
        return Err(Error::ThresholdUndefined(format!(
            "mixture weight p0 = {} leaves one component empty",
            fit.p0
        )));
    }
    if fit.lambda1 == fit.lambda2 {
        return Err(Error::ThresholdUndefined("components have equal means".into()));
    }
    Ok(
        (fit.lambda1 - fit.lambda2 + (fit.p0 / (1.0 - fit.p0)).ln())
            / (fit.lambda1 / fit.lambda2).ln(),
    )
}

/// Bright iff `count >= ceil(n_m)`.
pub fn is_bright(count: u32, n_m: f64) -> bool {
    count as f64 >= n_m.ceil()
}

fn check_normalized(p: &[f64], what: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL || p.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::Domain(format!("{what} is not a normalized distribution (sum {s})")));
    }
    Ok(())
}

/// Minimizes `0.5 * (P_dark[N >= N_m] + P_bright[N < N_m])` over integer
/// `N_m`, returning the minimum and its smallest minimizer.
pub fn e_spam(p_dark: &[f64], p_bright: &[f64]) -> Result<(f64, usize)> {
    check_normalized(p_dark, "P_dark")?;
    check_normalized(p_bright, "P_bright")?;
    let len = p_dark.len().max(p_bright.len());
    let at = |p: &[f64], i: usize| p.get(i).copied().unwrap_or(0.0);

    // dark_tail[m] = sum_{n >= m} P_dark(n), summed from the top
    let mut dark_tail = vec![0.0; len + 1];
    for m in (0..len).rev() {
        dark_tail[m] = dark_tail[m + 1] + at(p_dark, m);
    }
    let mut bright_head = 0.0;
    let (mut best, mut best_m) = (f64::INFINITY, 0);
    for m in 0..=len {
        let v = 0.5 * (dark_tail[m] + bright_head);
        // summation noise must not displace an earlier tied minimizer
        if v < best - TIE_TOL {
            best = v;
            best_m = m;
        }
        if m < len {
            bright_head += at(p_bright, m);
        }
    }
    Ok((best, best_m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpamResult {
    pub c_th: u32,
    /// `None` when no shot survives post-selection.
    pub e_spam: Option<f64>,
    pub n_m: Option<usize>,
    pub p_success: f64,
    pub survivors: usize,
}

pub fn spam_at(records: &[ReadoutRecord], c_th: u32) -> Result<SpamResult> {
    let kept: Vec<&ReadoutRecord> = records.iter().filter(|r| r.bin1 >= c_th).collect();
    let p_success = if records.is_empty() {
        0.0
    } else {
        kept.len() as f64 / records.len() as f64
    };
    if kept.is_empty() {
        return Ok(SpamResult {
            c_th,
            e_spam: None,
            n_m: None,
            p_success,
            survivors: 0,
        });
    }
    let max = kept.iter().map(|r| r.bin2.max(r.bin3)).max().unwrap_or(0);
    let pad = max as usize + 1 + HISTOGRAM_PAD;
    let mut hd = histogram(kept.iter().map(|r| r.bin2), 0);
    let mut hb = histogram(kept.iter().map(|r| r.bin3), 0);
    hd.resize(pad, 0);
    hb.resize(pad, 0);
    let (e, n_m) = e_spam(&normalize(&hd), &normalize(&hb))?;
    Ok(SpamResult {
        c_th,
        e_spam: Some(e),
        n_m: Some(n_m),
        p_success,
        survivors: kept.len(),
    })
}

/// Keeps shots whose herald bin reaches `C_th`, then scores bin 2 as dark
/// and bin 3 as bright over the survivors.
pub fn post_selection_sweep(records: &[ReadoutRecord], c_th_list: &[u32]) -> Result<Vec<SpamResult>> {
    c_th_list.iter().map(|&c| spam_at(records, c)).collect()
}

/// Shots binned by (bin 2 bright, bin 3 bright).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadrantCounts {
    /// Both dark: not initialized, excluded.
    pub gray: u64,
    /// Dark then bright: correct.
    pub red: u64,
    /// Bright then dark.
    pub blue: u64,
    /// Both bright.
    pub magenta: u64,
}

impl QuadrantCounts {
    /// `(blue + magenta) / (blue + red + magenta)`.
    pub fn error(&self) -> Option<f64> {
        let denom = self.blue + self.red + self.magenta;
        (denom > 0).then(|| (self.blue + self.magenta) as f64 / denom as f64)
    }
}

pub fn quadrant_analysis(records: &[ReadoutRecord], n_m: f64) -> Result<QuadrantCounts> {
    if !(n_m > 0.0) {
        return Err(Error::Domain("N_m must be positive".into()));
    }
    let mut q = QuadrantCounts::default();
    for r in records {
        match (is_bright(r.bin2, n_m), is_bright(r.bin3, n_m)) {
            (false, false) => q.gray += 1,
            (false, true) => q.red += 1,
            (true, false) => q.blue += 1,
            (true, true) => q.magenta += 1,
        }
    }
    Ok(q)
}

/// Expected wait for a heralded preparation when each attempt takes `t_cycle`.
pub fn mean_time_to_success(t_cycle: f64, p_success: f64) -> f64 {
    t_cycle / p_success
}

pub fn write_records_csv<W: Write>(records: &[ReadoutRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["shot", "bin1", "bin2", "bin3"])?;
    for (i, r) in records.iter().enumerate() {
        wr.write_record([
            i.to_string(),
            r.bin1.to_string(),
            r.bin2.to_string(),
            r.bin3.to_string(),
        ])?;
    }
    wr.flush().map_err(|e| Error::Serde(e.to_string()))?;
    Ok(())
}

#[derive(Deserialize)]
struct RecordRow {
    #[allow(dead_code)]
    shot: u64,
    bin1: u32,
    bin2: u32,
    bin3: u32,
}

/// Reads `shot,bin1,bin2,bin3`; errors carry the 1-based file line.
pub fn read_records_csv<R: Read>(r: R) -> Result<Vec<ReadoutRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    if header.iter().ne(["shot", "bin1", "bin2", "bin3"]) {
        return Err(Error::Parse {
            row: 1,
            msg: "expected header shot,bin1,bin2,bin3".into(),
        });
    }
    let mut out = Vec::new();
    for row in rd.deserialize::<RecordRow>() {
        let r = row?;
        out.push(ReadoutRecord {
            bin1: r.bin1,
            bin2: r.bin2,
            bin3: r.bin3,
        });
    }
    Ok(out)
}

pub fn write_sweep_csv<W: Write>(results: &[SpamResult], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["c_th", "e_spam", "n_m", "p_success"])?;
    for r in results {
        wr.write_record([
            r.c_th.to_string(),
            r.e_spam.map(sig9).unwrap_or_default(),
            r.n_m.map(|n| n.to_string()).unwrap_or_default(),
            sig9(r.p_success),
        ])?;
    }
    wr.flush().map_err(|e| Error::Serde(e.to_string()))?;
    Ok(())
}
