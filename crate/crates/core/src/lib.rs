//! Simulation kernels for a spin-photon quantum processor built from
//! tunable solid-state emitters: ensemble sampling, frequency connectivity,
//! widefield registration, readout analysis and photon budgets.

pub mod dsu;
pub mod ensemble;
pub mod error;
pub mod graph;
pub mod numfmt;
pub mod photonics;
pub mod registry;
pub mod rng;
pub mod spam;

pub use ensemble::{
    frequency_at_voltage, reachable_channels, sample_ensemble, voltage_for_frequency, Direction,
    Emitter, EmpiricalCdf, EnsembleConfig, EnsembleDocument, FrequencyGrid, Placement, TuningLaw,
    TuningMode,
};
pub use error::{Error, Result};
pub use graph::{
    channel_graph, interval_components, pc_sweep, resolvable_spots, scaling_estimate,
    ChannelGraph, ConnectivityReport, PcCurve, PcPoint, ScalingEstimate, ScalingPoint,
};
pub use photonics::{
    detection_probability, purcell_from_cavity, purcell_from_lifetimes, DetectionBudget,
    LifetimeSet, ModeVolumeUnit, PhotonBudget,
};
pub use registry::{
    best_voltage, detect_spots, emitter_statistics, merge_identities, register, synthesize_frames,
    Detection, EmitterStats, FrameStack, LookupTable, MergeRule, RegistryParams, Spot,
    SynthParams,
};
pub use rng::{derive_seed, derived_rng, SimRng};
pub use spam::{
    e_spam, fit_mixture, post_selection_sweep, quadrant_analysis, simulate_readout,
    solve_threshold, MixtureFit, QuadrantCounts, ReadoutModel, ReadoutRecord, SpamResult,
};
