//! Closed-form spin-photon interface arithmetic: Purcell factors and the
//! coherent-photon detection budget.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lifetimes in ns and the ZPL branching fraction of the strongest line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifetimeSet {
    pub tau_bulk: f64,
    pub tau_on: f64,
    pub tau_off: f64,
    pub xi_zpl: f64,
}

impl Default for LifetimeSet {
    fn default() -> Self {
        Self {
            tau_bulk: 4.12,
            tau_on: 2.32,
            tau_off: 5.56,
            xi_zpl: 0.36,
        }
    }
}

impl LifetimeSet {
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            tau_bulk: self.tau_bulk * s,
            tau_on: self.tau_on * s,
            tau_off: self.tau_off * s,
            ..*self
        }
    }
}

/// `F_p = (tau_bulk / tau_on - tau_bulk / tau_off) / xi_zpl`.
pub fn purcell_from_lifetimes(l: &LifetimeSet) -> Result<f64> {
    if !(l.tau_bulk > 0.0 && l.tau_on > 0.0 && l.tau_off > 0.0) {
        return Err(Error::Domain("lifetimes must be positive".into()));
    }
    if !(l.xi_zpl > 0.0 && l.xi_zpl <= 1.0) {
        return Err(Error::Domain("xi_zpl must be in (0, 1]".into()));
    }
    if l.tau_on >= l.tau_off {
        return Err(Error::Domain(
            "tau_on >= tau_off: no resonant enhancement".into(),
        ));
    }
    Ok((l.tau_bulk / l.tau_on - l.tau_bulk / l.tau_off) / l.xi_zpl)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeVolumeUnit {
    /// Same length unit as `wavelength_over_n`, cubed.
    Absolute,
    /// Multiples of `(lambda / n)^3`.
    CubicWavelengths,
}

/// `F_p = 3 / (4 pi^2) (lambda/n)^3 (Q / V)`.
pub fn purcell_from_cavity(
    wavelength_over_n: f64,
    q: f64,
    v_mode: f64,
    unit: ModeVolumeUnit,
) -> Result<f64> {
    if !(wavelength_over_n > 0.0 && q > 0.0 && v_mode > 0.0) {
        return Err(Error::Domain("cavity parameters must be positive".into()));
    }
    let v = match unit {
        ModeVolumeUnit::Absolute => v_mode,
        ModeVolumeUnit::CubicWavelengths => v_mode * wavelength_over_n.powi(3),
    };
    Ok(3.0 / (4.0 * PI * PI) * wavelength_over_n.powi(3) * q / v)
}

/// Simulated collection efficiency of the dielectric antenna at a given NA.
/// Stored constants; the far-field integral is not computed here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectionEfficiency {
    pub points: Vec<(f64, f64)>,
}

impl Default for CollectionEfficiency {
    fn default() -> Self {
        Self {
            points: vec![(0.5, 0.78), (0.9, 0.96)],
        }
    }
}

impl CollectionEfficiency {
    pub fn at(&self, na: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|(n, _)| (n - na).abs() < 1e-12)
            .map(|&(_, eta)| eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotonBudget {
    pub quantum_efficiency: f64,
    /// Energy fraction in the four ZPL lines.
    pub zpl_fraction: f64,
    /// Fraction of ZPL energy in the spin-conserving C line.
    pub c_line_fraction: f64,
    pub psb_fraction: f64,
    /// PSB fraction transmitted by the long-pass filter.
    pub psb_after_filter: f64,
    pub detector_qe: f64,
    /// Detector QE for the projected ZPL measurement; `None` means the same
    /// detector as the PSB readout.
    pub target_detector_qe: Option<f64>,
    /// Mean PSB counts per readout window.
    pub readout_counts: f64,
    pub t_m_us: f64,
    pub tau_emitter_ns: f64,
}

impl Default for PhotonBudget {
    fn default() -> Self {
        Self {
            quantum_efficiency: 0.80,
            zpl_fraction: 0.57,
            c_line_fraction: 0.80,
            psb_fraction: 0.43,
            psb_after_filter: 0.35,
            detector_qe: 0.65,
            target_detector_qe: None,
            readout_counts: 18.0,
            t_m_us: 50.0,
            tau_emitter_ns: 5.0,
        }
    }
}

impl PhotonBudget {
    /// Same budget projected onto a unit-efficiency detector.
    pub fn snspd(&self) -> Self {
        Self {
            target_detector_qe: Some(1.0),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fractions = [
            ("quantum_efficiency", self.quantum_efficiency),
            ("zpl_fraction", self.zpl_fraction),
            ("c_line_fraction", self.c_line_fraction),
            ("psb_fraction", self.psb_fraction),
            ("psb_after_filter", self.psb_after_filter),
            ("detector_qe", self.detector_qe),
            ("target_detector_qe", self.target_detector_qe.unwrap_or(1.0)),
        ];
        for (name, f) in fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Domain(format!("{name} must be in (0, 1]")));
            }
        }
        if (self.zpl_fraction + self.psb_fraction - 1.0).abs() > 1e-9 {
            return Err(Error::Domain("zpl_fraction + psb_fraction must equal 1".into()));
        }
        if !(self.tau_emitter_ns > 0.0) {
            return Err(Error::Domain("tau_emitter must be positive".into()));
        }
        if !(self.t_m_us > 0.0) || !(self.readout_counts >= 0.0) {
            return Err(Error::Domain("t_m must be positive and readout_counts >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBudget {
    /// Photons emitted at most during the readout window, `t_m / tau`.
    pub photon_total: f64,
    /// C-line ZPL to filtered-PSB intensity ratio.
    pub zpl_to_psb_ratio: f64,
    /// Detected ZPL photons without rounding.
    pub photon_zpl: f64,
    pub p_det: f64,
    /// Detected ZPL photons rounded up to a whole photon.
    pub photon_zpl_rounded: f64,
    pub p_det_rounded: f64,
}

/// Lower bound on the coherent-photon detection probability.
///
/// The PSB counts observed in one readout window convert to C-line ZPL
/// counts through `zpl_to_psb_ratio`, rescaled by the target-to-readout
/// detector QE, and are divided by the most photons the emitter can emit
/// in the same window.
pub fn detection_probability(b: &PhotonBudget) -> Result<DetectionBudget> {
    b.validate()?;
    let photon_total = b.t_m_us * 1e3 / b.tau_emitter_ns;
    let zpl_to_psb_ratio = b.zpl_fraction * b.c_line_fraction / b.psb_after_filter;
    let qe_scale = b.target_detector_qe.unwrap_or(b.detector_qe) / b.detector_qe;
    let photon_zpl = b.readout_counts * zpl_to_psb_ratio * qe_scale;
    let photon_zpl_rounded = photon_zpl.ceil();
    Ok(DetectionBudget {
        photon_total,
        zpl_to_psb_ratio,
        photon_zpl,
        p_det: photon_zpl / photon_total,
        photon_zpl_rounded,
        p_det_rounded: photon_zpl_rounded / photon_total,
    })
}
