//! Widefield registration of emitters into per-channel lookup tables.
//!
//! A [`FrameStack`] holds one widefield frame per (frequency channel, bias
//! voltage). Registration runs in four steps:
//!
//! 1. detect bright spots in every frame ([`detect_spots`]);
//! 2. link detections of one channel across voltages into tracks and read the
//!    brightness of each track at every voltage;
//! 3. keep tracks whose resonance is resolved inside the sweep and take the
//!    brightest voltage ([`best_voltage`]);
//! 4. merge spots of different channels into emitter identities by position
//!    and brightness ([`merge_identities`]).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsu::DisjointSet;
use crate::ensemble::{reachable_channels, Emitter, FrequencyGrid, TuningLaw};
use crate::error::{Error, Result};
use crate::numfmt::{round9, sig9};
use crate::rng::derived_rng;

pub const STACK_SCHEMA_VERSION: u32 = 1;
pub const LOOKUP_SCHEMA_VERSION: u32 = 1;

/// Default detector pixel pitch in micrometers.
pub const DEFAULT_PIXEL_PITCH_UM: f64 = 0.2;

/// MAD to standard deviation for Gaussian noise.
const MAD_SCALE: f64 = 1.4826;

/// Frames indexed by `(channel, voltage step)`, stored as 16-bit counts.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub meta: StackMeta,
    frames: Vec<Array2<u16>>,
}

/// Contents of `meta.json` next to the frame images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackMeta {
    pub schema_version: u32,
    pub width: usize,
    pub height: usize,
    pub pixel_pitch_um: f64,
    pub voltages: Vec<f64>,
    pub v_max: f64,
    pub grid: FrequencyGrid,
    pub seed: Option<u64>,
}

impl StackMeta {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.width == 0 || self.height == 0 {
            return Err(Error::Domain("frames must be non-empty".into()));
        }
        if !(self.pixel_pitch_um > 0.0) {
            return Err(Error::Domain("pixel pitch must be positive".into()));
        }
        if self.voltages.len() < 2 {
            return Err(Error::Domain("need at least two voltage steps".into()));
        }
        if self.voltages.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("voltage steps must be strictly increasing".into()));
        }
        if self.voltages[0] < 0.0 || *self.voltages.last().unwrap() > self.v_max {
            return Err(Error::Domain("voltage steps must lie in [0, v_max]".into()));
        }
        Ok(())
    }
}

impl FrameStack {
    pub fn new(meta: StackMeta, frames: Vec<Array2<u16>>) -> Result<Self> {
        meta.validate()?;
        let expected = meta.grid.k_max as usize * meta.voltages.len();
        if frames.len() != expected {
            return Err(Error::Domain(format!(
                "expected {expected} frames, got {}",
                frames.len()
            )));
        }
        if frames.iter().any(|f| f.dim() != (meta.height, meta.width)) {
            return Err(Error::Domain("all frames must share dimensions".into()));
        }
        Ok(Self { meta, frames })
    }

    pub fn n_voltages(&self) -> usize {
        self.meta.voltages.len()
    }

    fn index(&self, k: u32, step: usize) -> usize {
        (k as usize - 1) * self.n_voltages() + step
    }

    /// Frame for channel `k` (1-based) at voltage step `step`.
    pub fn frame(&self, k: u32, step: usize) -> ArrayView2<'_, u16> {
        self.frames[self.index(k, step)].view()
    }

    pub fn frame_name(k: u32, step: usize) -> String {
        format!("k{k:02}_v{step:03}.png")
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta_path = dir.join("meta.json");
        fs::write(&meta_path, serde_json::to_string_pretty(&self.meta)?)
            .map_err(|e| Error::io(&meta_path, e))?;
        for k in self.meta.grid.channels() {
            for step in 0..self.n_voltages() {
                let path = dir.join(Self::frame_name(k, step));
                let f = self.frame(k, step);
                let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(
                    self.meta.width as u32,
                    self.meta.height as u32,
                    |x, y| Luma([f[[y as usize, x as usize]]]),
                );
                buf.save(&path).map_err(|e| Error::Image {
                    path: path.clone(),
                    msg: e.to_string(),
                })?;
            }
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: StackMeta = serde_json::from_str(&text)?;
        if meta.schema_version != STACK_SCHEMA_VERSION {
            return Err(Error::Serde(format!(
                "unsupported stack schema_version {}",
                meta.schema_version
            )));
        }
        meta.validate()?;
        let mut frames = Vec::new();
        for k in meta.grid.channels() {
            for step in 0..meta.voltages.len() {
                let path = dir.join(Self::frame_name(k, step));
                let img = image::open(&path)
                    .map_err(|e| match e {
                        image::ImageError::IoError(io) => Error::io(&path, io),
                        other => Error::Image {
                            path: path.clone(),
                            msg: other.to_string(),
                        },
                    })?
                    .into_luma16();
                let (w, h) = img.dimensions();
                let data = img.into_raw();
                let arr = Array2::from_shape_vec((h as usize, w as usize), data).map_err(|e| {
                    Error::Image {
                        path: path.clone(),
                        msg: e.to_string(),
                    }
                })?;
                frames.push(arr);
            }
        }
        Self::new(meta, frames)
    }
}

/// `n` evenly spaced voltages on `[0, v_max]`.
pub fn linear_sweep(n: usize, v_max: f64) -> Vec<f64> {
    (0..n).map(|i| v_max * i as f64 / (n - 1) as f64).collect()
}

/// `n` voltages giving evenly spaced frequencies under `law`.
pub fn uniform_frequency_sweep(n: usize, law: &TuningLaw) -> Vec<f64> {
    (0..n)
        .map(|i| law.v_max * (i as f64 / (n - 1) as f64).powf(1.0 / law.exponent))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch_um: f64,
    pub psf_sigma_px: f64,
    /// Mean background counts per pixel.
    pub background: f64,
    /// Peak counts above background for a brightness-1 emitter on resonance.
    pub peak_counts: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            pixel_pitch_um: DEFAULT_PIXEL_PITCH_UM,
            psf_sigma_px: 1.0,
            background: 100.0,
            peak_counts: 250.0,
            seed: 0,
        }
    }
}

/// Lorentzian with unit peak and full width `fwhm`.
pub fn lorentzian(detuning: f64, fwhm: f64) -> f64 {
    let hw = 0.5 * fwhm;
    hw * hw / (detuning * detuning + hw * hw)
}

/// Renders one frame per (channel, voltage) with Gaussian PSFs and Poisson
/// shot noise. Each emitter shows two spin transitions, at `f(V)` and
/// `f(V) + splitting`, with equal strength.
pub fn synthesize_frames(
    ensemble: &[Emitter],
    law: &TuningLaw,
    grid: &FrequencyGrid,
    params: &SynthParams,
    voltages: &[f64],
) -> Result<FrameStack> {
    law.validate()?;
    let meta = StackMeta {
        schema_version: STACK_SCHEMA_VERSION,
        width: params.width,
        height: params.height,
        pixel_pitch_um: params.pixel_pitch_um,
        voltages: voltages.to_vec(),
        v_max: law.v_max,
        grid: *grid,
        seed: Some(params.seed),
    };
    meta.validate()?;
    if !(params.psf_sigma_px > 0.0 && params.background > 0.0 && params.peak_counts >= 0.0) {
        return Err(Error::Config(
            "psf_sigma_px and background must be positive, peak_counts >= 0".into(),
        ));
    }

    let n_v = voltages.len();
    let jobs: Vec<(u32, usize)> = grid
        .channels()
        .flat_map(|k| (0..n_v).map(move |s| (k, s)))
        .collect();
    let bg_noise = poisson(params.background)?;
    let frames: Vec<Array2<u16>> = jobs
        .par_iter()
        .map(|&(k, step)| {
            let f_k = grid.channel_frequency(k);
            let mut mean = Array2::from_elem((params.height, params.width), params.background);
            for e in ensemble {
                let f = law_eval(e, law, voltages[step]);
                let lw = e.linewidth_ghz();
                let amp = params.peak_counts
                    * e.brightness
                    * (lorentzian(f - f_k, lw) + lorentzian(f + e.splitting - f_k, lw));
                if amp < 1e-3 {
                    continue;
                }
                render_psf(
                    &mut mean,
                    e.x_um / params.pixel_pitch_um,
                    e.y_um / params.pixel_pitch_um,
                    params.psf_sigma_px,
                    amp,
                );
            }
            let mut rng = derived_rng(params.seed, &[k as u64, step as u64]);
            mean.mapv(|m| {
                let draw = if m == params.background {
                    bg_noise.sample(&mut rng)
                } else {
                    Poisson::new(m).map(|d| d.sample(&mut rng)).unwrap_or(m)
                };
                draw.min(u16::MAX as f64) as u16
            })
        })
        .collect();
    FrameStack::new(meta, frames)
}

fn law_eval(e: &Emitter, law: &TuningLaw, v: f64) -> f64 {
    crate::ensemble::frequency_at_voltage(e, law, v.clamp(0.0, law.v_max))
        .expect("voltage clamped into range")
}

fn poisson(lambda: f64) -> Result<Poisson<f64>> {
    Poisson::new(lambda).map_err(|e| Error::Config(format!("Poisson({lambda}): {e}")))
}

fn render_psf(img: &mut Array2<f64>, cx: f64, cy: f64, sigma: f64, amp: f64) {
    let (h, w) = img.dim();
    let r = (4.0 * sigma).ceil() as isize;
    let (px, py) = (cx.round() as isize, cy.round() as isize);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in (py - r).max(0)..=(py + r).min(h as isize - 1) {
        for x in (px - r).max(0)..=(px + r).min(w as isize - 1) {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            img[[y as usize, x as usize]] += amp * (-(dx * dx + dy * dy) * inv).exp();
        }
    }
}

/// Channels an emitter can be tuned onto with either spin transition.
pub fn transition_channels(e: &Emitter, law: &TuningLaw, grid: &FrequencyGrid) -> Vec<u32> {
    let shifted = Emitter {
        f0: e.f0 + e.splitting,
        ..e.clone()
    };
    let mut ks = reachable_channels(e, law, grid);
    ks.extend(reachable_channels(&shifted, law, grid));
    ks.sort_unstable();
    ks.dedup();
    ks
}

/// Median and MAD-derived standard deviation of a frame.
pub fn background_stats(frame: ArrayView2<'_, u16>) -> (f64, f64) {
    let mut v: Vec<u16> = frame.iter().copied().collect();
    let mid = v.len() / 2;
    let median = *v.select_nth_unstable(mid).1 as f64;
    let mut dev: Vec<f64> = v.iter().map(|&x| (x as f64 - median).abs()).collect();
    let mad = *dev
        .select_nth_unstable_by(mid, |a, b| a.total_cmp(b))
        .1;
    (median, MAD_SCALE * mad)
}

/// Background mean plus five standard deviations.
pub fn auto_threshold(frame: ArrayView2<'_, u16>) -> f64 {
    let (bg, sd) = background_stats(frame);
    bg + 5.0 * sd
}

/// One bright spot in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Centroid in pixels (x = column, y = row).
    pub x: f64,
    pub y: f64,
    /// Raw value of the local-maximum pixel.
    pub peak: f64,
}

/// Local maxima above `threshold`, thinned by non-maximum suppression within
/// `min_separation_px`, centroided over the background-subtracted 3x3
/// neighborhood.
pub fn detect_spots(
    frame: ArrayView2<'_, u16>,
    threshold: f64,
    min_separation_px: f64,
) -> Vec<Detection> {
    let (bg, _) = background_stats(frame);
    detect_with_background(frame, threshold, min_separation_px, bg)
}

fn detect_with_background(
    frame: ArrayView2<'_, u16>,
    threshold: f64,
    min_separation_px: f64,
    bg: f64,
) -> Vec<Detection> {
    let (h, w) = frame.dim();
    let at = |y: usize, x: usize| frame[[y, x]] as f64;
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = at(y, x);
            if v <= threshold {
                continue;
            }
            let mut is_max = true;
            let mut above_some = false;
            'n: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let n = at(ny as usize, nx as usize);
                    // plateaus keep their first pixel in raster order
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if n > v || (earlier && n == v) {
                        is_max = false;
                        break 'n;
                    }
                    above_some |= n < v;
                }
            }
            if is_max && above_some {
                candidates.push((y, x, v));
            }
        }
    }
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));

    let min_sq = min_separation_px * min_separation_px;
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for c in candidates {
        let clear = kept.iter().all(|k| {
            let (dy, dx) = (k.0 as f64 - c.0 as f64, k.1 as f64 - c.1 as f64);
            dx * dx + dy * dy >= min_sq
        });
        if clear {
            kept.push(c);
        }
    }

    kept.into_iter()
        .map(|(y, x, peak)| {
            let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let wgt = (at(ny, nx) - bg).max(0.0);
                    sw += wgt;
                    sx += wgt * nx as f64;
                    sy += wgt * ny as f64;
                }
            }
            if sw > 0.0 {
                Detection {
                    x: sx / sw,
                    y: sy / sw,
                    peak,
                }
            } else {
                Detection {
                    x: x as f64,
                    y: y as f64,
                    peak,
                }
            }
        })
        .collect()
}

/// Voltage of the brightest sample; ties go to the lower voltage.
pub fn best_voltage(track: &[(f64, f64)]) -> Result<f64> {
    if track.len() < 2 {
        return Err(Error::Domain("brightness track needs at least two samples".into()));
    }
    let mut sorted = track.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = sorted[0];
    for &s in &sorted[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    if !(best.1 > 0.0) {
        return Err(Error::NoSignal);
    }
    Ok(best.0)
}

/// Whether the track falls below `min(fraction * peak, peak - min_drop)`
/// before any brighter sample, to the left and to the right of sample `i`.
fn drops_around(track: &[(f64, f64)], i: usize, fraction: f64, min_drop: f64) -> (bool, bool) {
    let b = track[i].1;
    let cut = (fraction * b).min(b - min_drop);
    let falls = |it: &mut dyn Iterator<Item = &(f64, f64)>| {
        for &(_, v) in it {
            if v > b {
                return false;
            }
            if v < cut {
                return true;
            }
        }
        false
    };
    (
        falls(&mut track[..i].iter().rev()),
        falls(&mut track[i + 1..].iter()),
    )
}

/// Index of the brightest sample above `min_drop` whose track falls below
/// `min(fraction * peak, peak - min_drop)` on both sides before any brighter
/// sample or the end of the track. Samples must be in voltage order. Ties go
/// to the lower voltage.
pub fn resolved_peak(track: &[(f64, f64)], fraction: f64, min_drop: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(_, b)) in track.iter().enumerate() {
        if !(b > min_drop) || best.is_some_and(|j| track[j].1 >= b) {
            continue;
        }
        if drops_around(track, i, fraction, min_drop) == (true, true) {
            best = Some(i);
        }
    }
    best
}

/// A tracked spot in one channel at its best voltage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spot {
    pub x: f64,
    pub y: f64,
    /// Background-subtracted 3x3 sum at the best voltage.
    pub brightness: f64,
    /// Raw peak pixel at the best voltage.
    pub peak: f64,
    pub channel: u32,
    pub best_voltage: f64,
    /// The resonance runs into the end of the sweep and is only resolved on one side.
    #[serde(default)]
    pub edge: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistryParams {
    /// Absolute detection threshold; `None` uses each frame's background
    /// median plus five MAD-derived standard deviations.
    pub threshold: Option<f64>,
    pub min_separation_px: f64,
    /// Detections of one channel closer than this join one track.
    pub link_radius_px: f64,
    /// Minimum number of voltage frames a track must be detected in.
    pub min_detections: usize,
    /// Keep only tracks with a resolved peak; see [`resolved_peak`].
    pub require_resolved_peak: bool,
    pub resolve_fraction: f64,
    /// Peaks resolved on one side only are kept when at least this fraction
    /// of the brightest resolved peak at the same position. `None` drops them.
    pub edge_peak_fraction: Option<f64>,
    /// Same, against the median resolved peak of the stack, for positions
    /// without a resolved peak.
    pub edge_fallback_fraction: f64,
    pub merge: MergeRule,
}

impl Default for RegistryParams {
    fn default() -> Self {
        Self {
            threshold: None,
            min_separation_px: 3.0,
            link_radius_px: 1.5,
            min_detections: 2,
            require_resolved_peak: true,
            resolve_fraction: 0.85,
            edge_peak_fraction: Some(0.7),
            edge_fallback_fraction: 1.0,
            merge: MergeRule::default(),
        }
    }
}

/// Spots merge when closer than `radius_px`, both brighter than
/// `brightness_threshold`, and `|b1 - b2| / max(b1, b2) < max_rel_diff`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeRule {
    pub radius_px: f64,
    pub brightness_threshold: f64,
    pub max_rel_diff: f64,
}

impl Default for MergeRule {
    fn default() -> Self {
        Self {
            radius_px: 1.0,
            brightness_threshold: 0.0,
            max_rel_diff: 0.5,
        }
    }
}

impl MergeRule {
    pub fn matches(&self, a: &Spot, b: &Spot) -> bool {
        let (dx, dy) = (a.x - b.x, a.y - b.y);
        if (dx * dx + dy * dy).sqrt() >= self.radius_px {
            return false;
        }
        if !(a.brightness > self.brightness_threshold && b.brightness > self.brightness_threshold)
        {
            return false;
        }
        let hi = a.brightness.max(b.brightness);
        (a.brightness - b.brightness).abs() / hi < self.max_rel_diff
    }
}

fn sum3x3(frame: ArrayView2<'_, u16>, x: f64, y: f64, bg: f64) -> f64 {
    let (h, w) = frame.dim();
    let (cx, cy) = (x.round().clamp(0.0, (w - 1) as f64) as usize, y.round().clamp(0.0, (h - 1) as f64) as usize);
    let mut s = 0.0;
    for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
        for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
            s += frame[[ny, nx]] as f64 - bg;
        }
    }
    s
}

/// Steps 1 to 3 for one channel. Edge peaks are returned unfiltered; the
/// brightness cut against resolved peaks happens in [`register`].
pub fn channel_spots(stack: &FrameStack, k: u32, params: &RegistryParams) -> Vec<Spot> {
    let n_v = stack.n_voltages();
    let stats: Vec<(f64, f64)> = (0..n_v)
        .map(|s| {
            let f = stack.frame(k, s);
            let (bg, sd) = background_stats(f);
            (bg, params.threshold.unwrap_or(bg + 5.0 * sd))
        })
        .collect();

    // (step, detection)
    let mut dets: Vec<(usize, Detection)> = Vec::new();
    for (s, &(bg, thr)) in stats.iter().enumerate() {
        for d in detect_with_background(stack.frame(k, s), thr, params.min_separation_px, bg) {
            dets.push((s, d));
        }
    }

    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[a].1.x.total_cmp(&dets[b].1.x).then(a.cmp(&b)));
    let mut dsu = DisjointSet::new(dets.len());
    let r2 = params.link_radius_px * params.link_radius_px;
    for (oi, &i) in order.iter().enumerate() {
        for &j in &order[oi + 1..] {
            let dx = dets[j].1.x - dets[i].1.x;
            if dx >= params.link_radius_px {
                break;
            }
            let dy = dets[j].1.y - dets[i].1.y;
            if dx * dx + dy * dy < r2 {
                dsu.union(i, j);
            }
        }
    }

    let mut spots = Vec::new();
    for group in dsu.groups() {
        let mut steps: Vec<usize> = group.iter().map(|&i| dets[i].0).collect();
        steps.sort_unstable();
        steps.dedup();
        if steps.len() < params.min_detections {
            continue;
        }
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for &i in &group {
            let (s, d) = dets[i];
            let wgt = (d.peak - stats[s].0).max(1e-9);
            sw += wgt;
            sx += wgt * d.x;
            sy += wgt * d.y;
        }
        let (x, y) = (sx / sw, sy / sw);

        let track: Vec<(f64, f64)> = (0..n_v)
            .map(|s| (stack.meta.voltages[s], sum3x3(stack.frame(k, s), x, y, stats[s].0)))
            .collect();
        let argmax = || {
            best_voltage(&track)
                .ok()
                .map(|v| track.iter().position(|t| t.0 == v).expect("voltage from track"))
        };
        let (step, edge) = if params.require_resolved_peak {
            // shot noise of a 3x3 sum at the brightest point of the track
            let bg = stats.iter().map(|s| s.0).fold(0.0, f64::max);
            let top = track.iter().map(|t| t.1).fold(0.0, f64::max);
            let min_drop = 8.0 * (9.0 * bg + top).sqrt();
            match resolved_peak(&track, params.resolve_fraction, min_drop) {
                Some(i) => (i, false),
                None => {
                    let Some(i) = argmax() else { continue };
                    let (l, r) = drops_around(&track, i, params.resolve_fraction, min_drop);
                    if !(params.edge_peak_fraction.is_some() && track[i].1 > min_drop && (l || r)) {
                        continue;
                    }
                    (i, true)
                }
            }
        } else {
            let Some(i) = argmax() else { continue };
            (i, false)
        };
        let (v_best, b_max) = track[step];
        let frame = stack.frame(k, step);
        let (h, w) = frame.dim();
        let (cx, cy) = (x.round() as usize, y.round() as usize);
        let mut peak = 0.0f64;
        for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
            for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                peak = peak.max(frame[[ny, nx]] as f64);
            }
        }
        if peak <= stats[step].1 {
            continue;
        }
        spots.push(Spot {
            x,
            y,
            brightness: b_max,
            peak,
            channel: k,
            best_voltage: v_best,
            edge,
        });
    }
    spots.sort_by(|a, b| canonical_cmp(a, b));
    spots
}

fn canonical_cmp(a: &Spot, b: &Spot) -> std::cmp::Ordering {
    a.channel
        .cmp(&b.channel)
        .then(a.x.total_cmp(&b.x))
        .then(a.y.total_cmp(&b.y))
        .then(a.brightness.total_cmp(&b.brightness))
        .then(a.best_voltage.total_cmp(&b.best_voltage))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupEntry {
    pub id: u64,
    pub x_px: f64,
    pub y_px: f64,
    pub x_um: f64,
    pub y_um: f64,
    pub best_voltage_v: f64,
    pub brightness: f64,
}

/// Per-channel registry of emitters and the voltage that tunes each onto the channel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LookupTable {
    pub channels: BTreeMap<u32, Vec<LookupEntry>>,
    /// Emitter id of every input spot, in input order.
    pub spot_to_emitter: Vec<u64>,
    pub n_emitters: usize,
    pub pixel_pitch_um: f64,
}

#[derive(Serialize, Deserialize)]
struct LookupDocument {
    schema_version: u32,
    channels: BTreeMap<String, Vec<LookupJsonEntry>>,
}

#[derive(Serialize, Deserialize)]
struct LookupJsonEntry {
    id: u64,
    x_um: f64,
    y_um: f64,
    best_voltage_v: f64,
}

impl LookupTable {
    pub fn n_entries(&self) -> usize {
        self.channels.values().map(Vec::len).sum()
    }

    /// `{schema_version, channels: {k: [{id, x_um, y_um, best_voltage_v}]}}`.
    pub fn to_json(&self) -> Result<String> {
        let doc = LookupDocument {
            schema_version: LOOKUP_SCHEMA_VERSION,
            channels: self
                .channels
                .iter()
                .map(|(k, es)| {
                    (
                        k.to_string(),
                        es.iter()
                            .map(|e| LookupJsonEntry {
                                id: e.id,
                                x_um: round9(e.x_um),
                                y_um: round9(e.y_um),
                                best_voltage_v: round9(e.best_voltage_v),
                            })
                            .collect(),
                    )
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Flat `channel,id,x_um,y_um,best_voltage_v`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["channel", "id", "x_um", "y_um", "best_voltage_v"])?;
        for (k, es) in &self.channels {
            for e in es {
                wr.write_record([
                    k.to_string(),
                    e.id.to_string(),
                    sig9(e.x_um),
                    sig9(e.y_um),
                    sig9(e.best_voltage_v),
                ])?;
            }
        }
        wr.flush().map_err(|e| Error::Serde(e.to_string()))?;
        Ok(())
    }
}

/// Groups spots into emitter identities.
///
/// Pairwise matches under `rule` are closed transitively. Ids follow the
/// first member of each group in canonical spot order (channel, x, y,
/// brightness, voltage), so the result does not depend on input order.
/// When one identity has several spots in a channel the brightest is listed.
pub fn merge_identities(spots: &[Spot], rule: &MergeRule, pixel_pitch_um: f64) -> LookupTable {
    let mut order: Vec<usize> = (0..spots.len()).collect();
    order.sort_by(|&a, &b| canonical_cmp(&spots[a], &spots[b]));
    let canon: Vec<&Spot> = order.iter().map(|&i| &spots[i]).collect();

    let mut by_x: Vec<usize> = (0..canon.len()).collect();
    by_x.sort_by(|&a, &b| canon[a].x.total_cmp(&canon[b].x).then(a.cmp(&b)));
    let mut dsu = DisjointSet::new(canon.len());
    for (oi, &i) in by_x.iter().enumerate() {
        for &j in &by_x[oi + 1..] {
            if canon[j].x - canon[i].x >= rule.radius_px {
                break;
            }
            if rule.matches(canon[i], canon[j]) {
                dsu.union(i, j);
            }
        }
    }

    let groups = dsu.groups();
    let mut canon_id = vec![0u64; canon.len()];
    let mut channels: BTreeMap<u32, Vec<LookupEntry>> = BTreeMap::new();
    for (id, g) in groups.iter().enumerate() {
        let sw: f64 = g.iter().map(|&i| canon[i].brightness.max(1e-12)).sum();
        let x = g.iter().map(|&i| canon[i].brightness.max(1e-12) * canon[i].x).sum::<f64>() / sw;
        let y = g.iter().map(|&i| canon[i].brightness.max(1e-12) * canon[i].y).sum::<f64>() / sw;
        let mut per_channel: BTreeMap<u32, &Spot> = BTreeMap::new();
        for &i in g {
            canon_id[i] = id as u64;
            let s = canon[i];
            per_channel
                .entry(s.channel)
                .and_modify(|cur| {
                    if s.brightness > cur.brightness {
                        *cur = s;
                    }
                })
                .or_insert(s);
        }
        for (k, s) in per_channel {
            channels.entry(k).or_default().push(LookupEntry {
                id: id as u64,
                x_px: x,
                y_px: y,
                x_um: x * pixel_pitch_um,
                y_um: y * pixel_pitch_um,
                best_voltage_v: s.best_voltage,
                brightness: s.brightness,
            });
        }
    }
    let mut spot_to_emitter = vec![0u64; spots.len()];
    for (ci, &orig) in order.iter().enumerate() {
        spot_to_emitter[orig] = canon_id[ci];
    }
    LookupTable {
        channels,
        spot_to_emitter,
        n_emitters: groups.len(),
        pixel_pitch_um,
    }
}

/// Detected spots and the merged lookup table of one stack.
#[derive(Debug, Clone)]
pub struct Registration {
    pub spots: Vec<Spot>,
    pub table: LookupTable,
}

/// Keeps an edge peak when it is at least `frac` times the brightest resolved
/// peak within `radius_px`, or, with no resolved peak nearby, `fallback`
/// times the median resolved peak.
fn filter_edge_peaks(spots: Vec<Spot>, frac: f64, fallback: f64, radius_px: f64) -> Vec<Spot> {
    let mut resolved: Vec<&Spot> = spots.iter().filter(|s| !s.edge).collect();
    resolved.sort_by(|a, b| a.x.total_cmp(&b.x));
    let mut bs: Vec<f64> = resolved.iter().map(|s| s.brightness).collect();
    let median = if bs.is_empty() {
        f64::INFINITY
    } else {
        let mid = bs.len() / 2;
        *bs.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
    };
    let keep: Vec<bool> = spots
        .iter()
        .map(|s| {
            if !s.edge {
                return true;
            }
            let start = resolved.partition_point(|r| r.x <= s.x - radius_px);
            let local = resolved[start..]
                .iter()
                .take_while(|r| r.x < s.x + radius_px)
                .filter(|r| (r.x - s.x).hypot(r.y - s.y) < radius_px)
                .map(|r| r.brightness)
                .fold(None, |m: Option<f64>, b| Some(m.map_or(b, |m| m.max(b))));
            match local {
                Some(b) => s.brightness >= frac * b,
                None => s.brightness >= fallback * median,
            }
        })
        .collect();
    spots
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect()
}

pub fn register(stack: &FrameStack, params: &RegistryParams) -> Registration {
    let per_channel: Vec<Vec<Spot>> = stack
        .meta
        .grid
        .channels()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&k| channel_spots(stack, k, params))
        .collect();
    let mut spots: Vec<Spot> = per_channel.into_iter().flatten().collect();
    if let Some(frac) = params.edge_peak_fraction {
        spots = filter_edge_peaks(spots, frac, params.edge_fallback_fraction, params.merge.radius_px);
    }
    let table = merge_identities(&spots, &params.merge, stack.meta.pixel_pitch_um);
    Registration { spots, table }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmitterStats {
    /// Spots summed over channels.
    pub n_spot: u64,
    /// Distinct spots after removing the two-transition double count.
    pub n_spot_distinct: f64,
    pub per_channel_avg: f64,
    /// Resonant emitters per frequency channel per quantum channel.
    pub n_emitter: f64,
    pub n_sys: u64,
    pub k_max: u32,
}

/// Statistics from a raw spot count. Each emitter is counted once per spin
/// transition, so distinct spots are half the total.
pub fn emitter_statistics_from_count(n_spot: u64, n_sys: u64, k_max: u32) -> Result<EmitterStats> {
    if n_sys < 1 || k_max < 1 {
        return Err(Error::Domain("n_sys and k_max must be >= 1".into()));
    }
    let n_spot_distinct = n_spot as f64 / 2.0;
    Ok(EmitterStats {
        n_spot,
        n_spot_distinct,
        per_channel_avg: n_spot_distinct / k_max as f64,
        n_emitter: n_spot_distinct / (k_max as f64 * n_sys as f64),
        n_sys,
        k_max,
    })
}

pub fn emitter_statistics(table: &LookupTable, n_sys: u64, k_max: u32) -> Result<EmitterStats> {
    emitter_statistics_from_count(table.n_entries() as u64, n_sys, k_max)
}

pub fn write_stats_csv<W: Write>(s: &EmitterStats, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["n_spot", "n_spot_distinct", "per_channel_avg", "n_emitter", "n_sys", "k_max"])?;
    wr.write_record([
        s.n_spot.to_string(),
        sig9(s.n_spot_distinct),
        sig9(s.per_channel_avg),
        sig9(s.n_emitter),
        s.n_sys.to_string(),
        s.k_max.to_string(),
    ])?;
    wr.flush().map_err(|e| Error::Serde(e.to_string()))?;
    Ok(())
}
