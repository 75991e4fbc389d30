//! Receiver side: matched-filter synthesis, clock and timeslot recovery,
//! filter banks, and event detection.
//!
//! Filters are synthesized replicas of the transmit waveform (unit
//! amplitude, jointly unit-energy I/Q references). A bank correlates the
//! received I against each filter's I reference and Q against its Q
//! reference, multiplies the two point-wise (immune to phase cancellation),
//! and sums the products across the bank. Detection thresholds scale with
//! the RMS of the combined output, so they adapt to the network load.
//!
//! Oscillator chips need a clock-recovery sweep and a drift-spanning bank;
//! divider chips have a known clock, three phase variants suffice, and
//! detection can run at recovered timeslots only (discrete mode).

mod correlate;

use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::codes::SpreadingCode;
use crate::netsim::EventTrain;
use crate::phy::{self, CarrierParams, IqStream};
use crate::{Error, Result};

pub(crate) use correlate::Engine;

/// Detection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemodMode {
    /// Local maxima of the full combined output.
    Continuous,
    /// Evaluate only at recovered packet timeslots; off-slot peaks are
    /// excluded outright.
    Discrete,
}

/// Receiver tuning knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RxParams {
    /// Detection mode override; scenarios default to continuous for
    /// oscillator clocks and discrete for dividers.
    #[serde(default)]
    pub mode: Option<DemodMode>,
    /// Threshold multiplier over the combined-output RMS.
    #[serde(default = "default_threshold_k")]
    pub threshold_k: f64,
    /// Clock points in the fine (drift-spanning) bank.
    #[serde(default = "default_n_clock_points")]
    pub n_clock_points: usize,
    /// Phase variants per clock point.
    #[serde(default = "default_n_phases")]
    pub n_phases: usize,
    /// Drift half-width the fine bank must span, ppm.
    #[serde(default = "default_drift_ppm")]
    pub drift_ppm: f64,
    /// Coarse clock-search range and step.
    #[serde(default = "default_coarse_lo")]
    pub coarse_lo_hz: f64,
    #[serde(default = "default_coarse_hi")]
    pub coarse_hi_hz: f64,
    #[serde(default = "default_coarse_step")]
    pub coarse_step_hz: f64,
    /// Refinement pass half-width in coarse steps and step divider.
    #[serde(default = "default_refine_steps")]
    pub refine_steps: usize,
    #[serde(default = "default_refine_factor")]
    pub refine_factor: usize,
    /// Reference truncation for the coarse search. A short reference keeps
    /// its correlation peak wide in frequency, so the coarse grid cannot
    /// step over it; the refine pass then uses the full code.
    #[serde(default = "default_coarse_ref_chips")]
    pub coarse_ref_chips: usize,
    /// Threshold multiplier for clock/slot acquisition. A target's own
    /// packets tower over the series RMS, while cross-correlation responses
    /// of other codes stay within a few tens of it, so acquisition can
    /// demand much more than detection.
    #[serde(default = "default_acquire_threshold_k")]
    pub acquire_threshold_k: f64,
    /// Clip length used for clock/slot recovery (grown adaptively when no
    /// packet is found).
    #[serde(default = "default_clip")]
    pub clip_duration_s: f64,
}

fn default_threshold_k() -> f64 {
    16.0
}
fn default_n_clock_points() -> usize {
    31
}
fn default_n_phases() -> usize {
    3
}
fn default_drift_ppm() -> f64 {
    1005.0
}
fn default_coarse_lo() -> f64 {
    27.0e6
}
fn default_coarse_hi() -> f64 {
    33.0e6
}
fn default_coarse_step() -> f64 {
    50.0e3
}
fn default_refine_steps() -> usize {
    1
}
fn default_refine_factor() -> usize {
    10
}
fn default_coarse_ref_chips() -> usize {
    64
}
fn default_acquire_threshold_k() -> f64 {
    30.0
}
fn default_clip() -> f64 {
    0.2
}

impl Default for RxParams {
    fn default() -> Self {
        Self {
            mode: None,
            threshold_k: default_threshold_k(),
            n_clock_points: default_n_clock_points(),
            n_phases: default_n_phases(),
            drift_ppm: default_drift_ppm(),
            coarse_lo_hz: default_coarse_lo(),
            coarse_hi_hz: default_coarse_hi(),
            coarse_step_hz: default_coarse_step(),
            refine_steps: default_refine_steps(),
            refine_factor: default_refine_factor(),
            coarse_ref_chips: default_coarse_ref_chips(),
            acquire_threshold_k: default_acquire_threshold_k(),
            clip_duration_s: default_clip(),
        }
    }
}

/// A synthesized reference waveform for one (clock, phase) hypothesis.
#[derive(Debug, Clone)]
pub struct MatchedFilter {
    pub i_ref: Vec<f32>,
    pub q_ref: Vec<f32>,
    pub f_clk_hz: f64,
    pub phase_rad: f64,
    pub phase_variant: usize,
}

impl MatchedFilter {
    pub fn len(&self) -> usize {
        self.i_ref.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i_ref.is_empty()
    }
}

/// Synthesize a matched filter: the unit-amplitude transmit waveform at the
/// hypothesized clock and phase, I/Q references jointly normalized to unit
/// energy.
pub fn synthesize_matched_filter(
    code: &SpreadingCode,
    f_clk_hz: f64,
    phase_rad: f64,
    carrier: &CarrierParams,
    sample_rate_hz: f64,
) -> Result<MatchedFilter> {
    carrier.validate()?;
    let packet = phy::synthesize_packet_iq_at(
        code,
        1.0,
        f_clk_hz,
        carrier.f_dc_hz,
        phase_rad,
        sample_rate_hz,
    )?;
    let energy: f64 = packet.iter().map(|c| c.norm_sqr() as f64).sum();
    let inv = (1.0 / energy.sqrt()) as f32;
    Ok(MatchedFilter {
        i_ref: packet.iter().map(|c| c.re * inv).collect(),
        q_ref: packet.iter().map(|c| c.im * inv).collect(),
        f_clk_hz,
        phase_rad,
        phase_variant: 0,
    })
}

/// A per-target reference set: `n_clock_points x n_phases` filters plus the
/// parameters needed to apply them.
#[derive(Debug, Clone)]
pub struct FilterBank {
    pub code: SpreadingCode,
    pub carrier: CarrierParams,
    pub sample_rate_hz: f64,
    pub mode: DemodMode,
    pub clock_points_hz: Vec<f64>,
    pub phases_rad: Vec<f64>,
    pub filters: Vec<MatchedFilter>,
}

/// Build a filter bank spanning `clock_hint * (1 ± drift_ppm * 1e-6)` with
/// uniformly spaced clock points and phase variants on `{k*pi/n}` (the I*Q
/// product is pi-periodic in phase).
#[allow(clippy::too_many_arguments)]
pub fn build_filter_bank(
    code: &SpreadingCode,
    carrier: &CarrierParams,
    sample_rate_hz: f64,
    clock_hint_hz: f64,
    drift_ppm: f64,
    n_clock_points: usize,
    n_phases: usize,
    mode: DemodMode,
) -> Result<FilterBank> {
    if n_clock_points < 1 {
        return Err(Error::InvalidParam("n_clock_points must be >= 1".into()));
    }
    if n_phases < 1 {
        return Err(Error::InvalidParam("n_phases must be >= 1".into()));
    }
    let clock_points_hz = clock_grid(clock_hint_hz, drift_ppm, n_clock_points);
    let phases_rad: Vec<f64> = (0..n_phases)
        .map(|k| k as f64 * std::f64::consts::PI / n_phases as f64)
        .collect();
    let mut filters = Vec::with_capacity(n_clock_points * n_phases);
    for &f_clk in &clock_points_hz {
        for (variant, &phase) in phases_rad.iter().enumerate() {
            let mut filter =
                synthesize_matched_filter(code, f_clk, phase, carrier, sample_rate_hz)?;
            filter.phase_variant = variant;
            filters.push(filter);
        }
    }
    Ok(FilterBank {
        code: code.clone(),
        carrier: *carrier,
        sample_rate_hz,
        mode,
        clock_points_hz,
        phases_rad,
        filters,
    })
}

fn clock_grid(hint_hz: f64, drift_ppm: f64, n: usize) -> Vec<f64> {
    if n == 1 || drift_ppm == 0.0 {
        return vec![hint_hz; n];
    }
    let lo = hint_hz * (1.0 - drift_ppm * 1e-6);
    let hi = hint_hz * (1.0 + drift_ppm * 1e-6);
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

impl FilterBank {
    pub(crate) fn engine(&self) -> Result<Engine> {
        Engine::new(
            &self.code,
            self.carrier.f_dc_hz,
            self.sample_rate_hz,
            &self.clock_points_hz,
            &self.phases_rad,
        )
    }

    /// Reference length in samples (longest clock hypothesis).
    pub fn packet_len_samples(&self) -> usize {
        self.filters.iter().map(|f| f.len()).max().unwrap_or(0)
    }

    /// Per-filter I*Q products at one stream position, in `filters` order.
    pub fn filter_products_at(&self, y: &IqStream, pos: usize) -> Result<Vec<f32>> {
        let engine = self.engine()?;
        Ok(engine.filter_products_at(&y.samples, pos, &self.phases_rad))
    }
}

/// The summed I*Q matched-filter product series for a bank: one value per
/// alignment, length `len(y) - packet_len + 1`.
pub fn combined_output(y: &IqStream, bank: &FilterBank) -> Result<Vec<f32>> {
    let engine = bank.engine()?;
    let out = engine.process(&y.samples, y.noise_floor_dbm.is_none())?;
    Ok(out.to_series())
}

/// Grid-search the clock over `[f_lo, f_hi]` in `step` increments on a
/// short clip: the estimate is the grid frequency maximizing the peak
/// combined output, provided that peak clears its own RMS threshold.
/// Absence (no detectable packet) is a value, not an error.
#[allow(clippy::too_many_arguments)]
pub fn recover_clock(
    clip: &IqStream,
    code: &SpreadingCode,
    carrier: &CarrierParams,
    f_lo_hz: f64,
    f_hi_hz: f64,
    step_hz: f64,
    n_phases: usize,
    threshold_k: f64,
) -> Result<Option<f64>> {
    if !(f_hi_hz >= f_lo_hz && step_hz > 0.0) {
        return Err(Error::InvalidParam("bad clock search range".into()));
    }
    let n_points = ((f_hi_hz - f_lo_hz) / step_hz).round() as usize + 1;
    let grid: Vec<f64> = (0..n_points)
        .map(|i| (f_lo_hz + i as f64 * step_hz).min(f_hi_hz))
        .collect();
    let phases = phase_grid(n_phases);
    let engine = Engine::new(code, carrier.f_dc_hz, clip.sample_rate_hz, &grid, &phases)?;
    let scans = engine.scan_per_clock(&clip.samples, clip.noise_floor_dbm.is_none())?;
    let n_out = engine.output_len(clip.len())? as f64;

    let best = scans
        .iter()
        .max_by(|a, b| a.peak.partial_cmp(&b.peak).unwrap())
        .copied();
    Ok(best.and_then(|s| {
        let rms = (s.sumsq / n_out).sqrt() as f32;
        (s.peak > threshold_k as f32 * rms && s.peak > 0.0).then_some(s.f_clk_hz)
    }))
}

fn phase_grid(n_phases: usize) -> Vec<f64> {
    let n = n_phases.max(1);
    (0..n)
        .map(|k| k as f64 * std::f64::consts::PI / n as f64)
        .collect()
}

pub(crate) struct SlotEstimate {
    pub tau_s: f64,
}

pub(crate) fn recover_slot_stats(
    y: &IqStream,
    code: &SpreadingCode,
    carrier: &CarrierParams,
    f_clk_hz: f64,
    bin_size_s: f64,
    n_phases: usize,
    threshold_k: f64,
) -> Result<Option<SlotEstimate>> {
    let phases = phase_grid(n_phases);
    let engine = Engine::new(code, carrier.f_dc_hz, y.sample_rate_hz, &[f_clk_hz], &phases)?;
    let out = engine.process(&y.samples, y.noise_floor_dbm.is_none())?;
    let rms = out.rms();
    if !(out.peak > threshold_k as f32 * rms && out.peak > 0.0) {
        return Ok(None);
    }
    let bin_samples = (bin_size_s * y.sample_rate_hz).round() as usize;
    let tau_samples = out.argmax % bin_samples.max(1);
    Ok(Some(SlotEstimate {
        tau_s: tau_samples as f64 / y.sample_rate_hz,
    }))
}

/// Recover a node's packet-start phase within the event-bin grid from the
/// argmax of the combined output (periodic emission assumed: divider or
/// drift-free clocks). Returns the delay in seconds, or absence when no
/// packet clears the threshold.
pub fn recover_slot(
    y: &IqStream,
    code: &SpreadingCode,
    carrier: &CarrierParams,
    f_clk_hz: f64,
    bin_size_s: f64,
    n_phases: usize,
    threshold_k: f64,
) -> Result<Option<f64>> {
    Ok(
        recover_slot_stats(y, code, carrier, f_clk_hz, bin_size_s, n_phases, threshold_k)?
            .map(|s| s.tau_s),
    )
}

/// One detected event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bin_index: u32,
    pub time_s: f64,
    pub score: f32,
    /// Index into the bank's filter list of the strongest contributor.
    pub filter_index: usize,
}

/// Demodulation result for one target node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemodReport {
    pub node_id: u64,
    pub detected: EventTrain,
    pub detections: Vec<Detection>,
    pub threshold: f32,
    pub recovered_f_clk_hz: Option<f64>,
    pub recovered_tau_s: Option<f64>,
}

impl DemodReport {
    fn empty(node_id: u64, bin_size_s: f64, duration_s: f64) -> Self {
        Self {
            node_id,
            detected: EventTrain::new(bin_size_s, &[], duration_s)
                .expect("empty train is always valid"),
            detections: Vec::new(),
            threshold: 0.0,
            recovered_f_clk_hz: None,
            recovered_tau_s: None,
        }
    }
}

/// Parameters for series-level event detection.
#[derive(Debug, Clone, Copy)]
pub struct DetectParams {
    pub mode: DemodMode,
    pub threshold_k: f64,
    pub bin_size_s: f64,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    /// Minimum peak separation (one packet length) in samples.
    pub packet_len_samples: usize,
    /// Recovered slot phase, required in discrete mode.
    pub slot_tau_s: Option<f64>,
}

/// Threshold a combined-output series into binned event detections.
///
/// Continuous mode keeps local maxima above `threshold_k * RMS(series)`,
/// merging peaks closer than one packet length (a chip cannot overlap its
/// own packets). Discrete mode reads the series only at the predicted
/// timeslots. Detections land on the event-bin grid.
pub fn detect_events(series: &[f32], params: &DetectParams) -> Result<DemodReport> {
    if series.is_empty() {
        return Ok(DemodReport::empty(0, params.bin_size_s, params.duration_s));
    }
    let sumsq: f64 = series.iter().map(|&x| (x as f64) * (x as f64)).sum();
    let rms = (sumsq / series.len() as f64).sqrt() as f32;
    let threshold = params.threshold_k as f32 * rms;

    let candidates: Vec<(usize, f32)> = match params.mode {
        DemodMode::Continuous => {
            let mut out = Vec::new();
            for (k, &x) in series.iter().enumerate() {
                if x <= threshold {
                    continue;
                }
                let left = if k > 0 { series[k - 1] } else { f32::NEG_INFINITY };
                let right = series.get(k + 1).copied().unwrap_or(f32::NEG_INFINITY);
                if x > left && x >= right {
                    out.push((k, x));
                }
            }
            merge_by_separation(out, params.packet_len_samples)
        }
        DemodMode::Discrete => {
            let tau = params.slot_tau_s.ok_or_else(|| {
                Error::InvalidParam("discrete mode requires a recovered slot".into())
            })?;
            let positions = slot_positions(
                tau,
                params.bin_size_s,
                params.sample_rate_hz,
                params.duration_s,
                series.len(),
            );
            positions
                .into_iter()
                .filter(|&p| series[p] > threshold)
                .map(|p| (p, series[p]))
                .collect()
        }
    };

    finish_report(candidates, threshold, params, 0)
}

fn slot_positions(
    tau_s: f64,
    bin_size_s: f64,
    sample_rate_hz: f64,
    duration_s: f64,
    n_out: usize,
) -> Vec<usize> {
    let bin_samples = (bin_size_s * sample_rate_hz).round() as usize;
    let tau_samples = (tau_s * sample_rate_hz).round() as usize;
    let n_bins = (duration_s / bin_size_s + 1e-9).floor() as usize;
    (0..n_bins)
        .map(|b| b * bin_samples + tau_samples)
        .filter(|&p| p < n_out)
        .collect()
}

/// Merge candidates closer than `sep` samples, keeping the higher score
/// (ties keep the earlier peak).
fn merge_by_separation(candidates: Vec<(usize, f32)>, sep: usize) -> Vec<(usize, f32)> {
    let mut kept: Vec<(usize, f32)> = Vec::with_capacity(candidates.len());
    for cand in candidates {
        if let Some(last) = kept.last_mut() {
            if cand.0 - last.0 < sep {
                if cand.1 > last.1 {
                    *last = cand;
                }
                continue;
            }
        }
        kept.push(cand);
    }
    kept
}

fn finish_report(
    candidates: Vec<(usize, f32)>,
    threshold: f32,
    params: &DetectParams,
    node_id: u64,
) -> Result<DemodReport> {
    // Bin the detections; keep the strongest peak per bin.
    let mut per_bin: std::collections::BTreeMap<u32, (usize, f32)> = Default::default();
    for (pos, score) in candidates {
        let t = pos as f64 / params.sample_rate_hz;
        let bin = (t / params.bin_size_s).floor() as u32;
        per_bin
            .entry(bin)
            .and_modify(|e| {
                if score > e.1 {
                    *e = (pos, score);
                }
            })
            .or_insert((pos, score));
    }
    let detections: Vec<Detection> = per_bin
        .iter()
        .map(|(&bin_index, &(pos, score))| Detection {
            bin_index,
            time_s: pos as f64 / params.sample_rate_hz,
            score,
            filter_index: 0,
        })
        .collect();
    let bins: Vec<u32> = per_bin.keys().copied().collect();
    Ok(DemodReport {
        node_id,
        detected: EventTrain::new(params.bin_size_s, &bins, params.duration_s)?,
        detections,
        threshold,
        recovered_f_clk_hz: None,
        recovered_tau_s: None,
    })
}

/// Acquisition of one target on a recovery clip: its clock (recovered or
/// known), its in-bin packet phase, and the clip's series RMS.
struct Acquisition {
    f_clk_hz: f64,
    recovered_clock: bool,
    tau_samples: usize,
    clip_rms: f32,
}

/// Acquire a target's clock and slot phase on an adaptively grown clip.
///
/// Unknown clocks run a coarse grid search with a truncated reference
/// (short references keep the correlation peak wide in frequency, so the
/// grid cannot step over it); the strongest coarse candidates are all
/// refined with the full code, and candidates are tried in refined-peak
/// order — full-length codes separate the true clock from interference far
/// more sharply than truncated ones. Every candidate must then pass a
/// slot-consistency check: a real target's packets recur at the same
/// in-bin phase, so several timeslots must clear the threshold, which
/// interference responses essentially never do. Failing all candidates,
/// the clip quadruples and the search repeats; the final full-stream
/// attempt accepts a single hit.
fn acquire(
    y: &IqStream,
    code: &SpreadingCode,
    carrier: &CarrierParams,
    known_clock_hz: Option<f64>,
    bin_size_s: f64,
    rx: &RxParams,
) -> Result<Option<Acquisition>> {
    let duration_s = y.duration_s();
    let short = code.truncated(rx.coarse_ref_chips.max(8));
    let bin_samples = (bin_size_s * y.sample_rate_hz).round() as usize;
    let mut clip_len = rx.clip_duration_s.min(duration_s);
    loop {
        let clip = y.clip(0.0, clip_len);
        let last_try = clip_len >= duration_s;
        let min_hits = if last_try { 1 } else { 3 };

        let candidates: Vec<f64> = match known_clock_hz {
            Some(f) => vec![f],
            None => refined_clock_candidates(&clip, code, &short, carrier, rx)?,
        };

        for f_clk in candidates {
            // Presence plus slot consistency at the candidate clock.
            let phases = phase_grid(rx.n_phases);
            let Ok(engine) =
                Engine::new(code, carrier.f_dc_hz, y.sample_rate_hz, &[f_clk], &phases)
            else {
                continue;
            };
            let Ok(out) = engine.process(&clip.samples, clip.noise_floor_dbm.is_none()) else {
                continue;
            };
            let rms = out.rms();
            let acquire_threshold = rx.acquire_threshold_k.max(rx.threshold_k) as f32 * rms;
            if !(out.peak > acquire_threshold && out.peak > 0.0) {
                continue;
            }
            let tau_samples = out.argmax % bin_samples.max(1);
            let clip_bins = (clip.duration_s() / bin_size_s + 1e-9).floor() as usize;
            let hits = (0..clip_bins)
                .map(|b| b * bin_samples + tau_samples)
                .filter(|&p| p < out.n_out)
                .filter(|&p| engine.eval_at(&clip.samples, p) > acquire_threshold)
                .count();
            if hits >= min_hits {
                return Ok(Some(Acquisition {
                    f_clk_hz: f_clk,
                    recovered_clock: known_clock_hz.is_none(),
                    tau_samples,
                    clip_rms: rms,
                }));
            }
        }

        if last_try {
            return Ok(None);
        }
        clip_len = (clip_len * 4.0).min(duration_s);
    }
}

/// Coarse-search the clip with the truncated reference, refine the top
/// candidates with the full code, and return them ordered by refined peak.
fn refined_clock_candidates(
    clip: &IqStream,
    code: &SpreadingCode,
    short: &SpreadingCode,
    carrier: &CarrierParams,
    rx: &RxParams,
) -> Result<Vec<f64>> {
    const TOP_COARSE: usize = 5;
    let Ok(scans) = clock_scan(
        clip,
        short,
        carrier,
        rx.coarse_lo_hz,
        rx.coarse_hi_hz,
        rx.coarse_step_hz,
        rx.n_phases,
    ) else {
        return Ok(Vec::new());
    };
    let mut ranked = scans;
    ranked.sort_by(|a, b| b.peak.partial_cmp(&a.peak).unwrap());
    let mut coarse: Vec<f64> = Vec::new();
    for s in ranked {
        if coarse
            .iter()
            .all(|&f| (f - s.f_clk_hz).abs() > 1.5 * rx.coarse_step_hz)
        {
            coarse.push(s.f_clk_hz);
        }
        if coarse.len() >= TOP_COARSE {
            break;
        }
    }

    let span = rx.refine_steps as f64 * rx.coarse_step_hz;
    let step = rx.coarse_step_hz / rx.refine_factor.max(1) as f64;
    let mut refined: Vec<(f64, f32)> = Vec::with_capacity(coarse.len());
    for cand in coarse {
        let Ok(scans) = clock_scan(
            clip,
            code,
            carrier,
            (cand - span).max(rx.coarse_lo_hz),
            (cand + span).min(rx.coarse_hi_hz),
            step,
            rx.n_phases,
        ) else {
            continue;
        };
        if let Some(best) = scans
            .iter()
            .max_by(|a, b| a.peak.partial_cmp(&b.peak).unwrap())
        {
            refined.push((best.f_clk_hz, best.peak));
        }
    }
    refined.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    refined.truncate(3);
    Ok(refined.into_iter().map(|(f, _)| f).collect())
}

/// All per-grid-point scans for a clock search (internal form of
/// [`recover_clock`] that keeps the whole grid).
fn clock_scan(
    clip: &IqStream,
    code: &SpreadingCode,
    carrier: &CarrierParams,
    f_lo_hz: f64,
    f_hi_hz: f64,
    step_hz: f64,
    n_phases: usize,
) -> Result<Vec<correlate::ClockScan>> {
    let n_points = ((f_hi_hz - f_lo_hz) / step_hz).round() as usize + 1;
    let grid: Vec<f64> = (0..n_points)
        .map(|i| (f_lo_hz + i as f64 * step_hz).min(f_hi_hz))
        .collect();
    let phases = phase_grid(n_phases);
    let engine = Engine::new(code, carrier.f_dc_hz, clip.sample_rate_hz, &grid, &phases)?;
    engine.scan_per_clock(&clip.samples, clip.noise_floor_dbm.is_none())
}

/// Full single-target pipeline: acquire the clock (unless known) and slot
/// phase on a recovery clip, build the bank, and extract events.
///
/// Oscillator targets get a drift-spanning fine bank over the whole stream;
/// divider targets (`known_clock_hz`) get a three-phase single-clock bank.
/// In discrete mode the combined output is evaluated at the recovered
/// timeslots only, thresholded against the RMS of the recovery clip's
/// full-resolution series.
#[allow(clippy::too_many_arguments)]
pub fn demod_node(
    y: &IqStream,
    node_id: u64,
    code: &SpreadingCode,
    carrier: &CarrierParams,
    known_clock_hz: Option<f64>,
    mode: DemodMode,
    bin_size_s: f64,
    rx: &RxParams,
) -> Result<DemodReport> {
    let duration_s = y.duration_s();
    let Some(acq) = acquire(y, code, carrier, known_clock_hz, bin_size_s, rx)? else {
        return Ok(DemodReport::empty(node_id, bin_size_s, duration_s));
    };

    let (n_clock, drift) = if known_clock_hz.is_some() {
        (1, 0.0)
    } else {
        (rx.n_clock_points, rx.drift_ppm)
    };
    let bank = build_filter_bank(
        code,
        carrier,
        y.sample_rate_hz,
        acq.f_clk_hz,
        drift,
        n_clock,
        rx.n_phases,
        mode,
    )?;
    let engine = bank.engine()?;
    let packet_len = engine.n_ref_max;
    let params = DetectParams {
        mode,
        threshold_k: rx.threshold_k,
        bin_size_s,
        sample_rate_hz: y.sample_rate_hz,
        duration_s,
        packet_len_samples: packet_len,
        slot_tau_s: None,
    };

    let mut report = match mode {
        DemodMode::Continuous => {
            let out = engine.process(&y.samples, y.noise_floor_dbm.is_none())?;
            let threshold = rx.threshold_k as f32 * out.rms();
            let candidates =
                merge_by_separation(out.candidates_above(threshold, engine.step), packet_len);
            let mut report = finish_report(candidates, threshold, &params, node_id)?;
            attribute_filters(&mut report, &engine, &bank, &y.samples);
            report
        }
        DemodMode::Discrete => {
            let threshold = rx.threshold_k as f32 * acq.clip_rms;
            let n_out = engine.output_len(y.len())?;
            let tau_s = acq.tau_samples as f64 / y.sample_rate_hz;
            let positions = slot_positions(tau_s, bin_size_s, y.sample_rate_hz, duration_s, n_out);
            // Slot-sampled evaluation by direct summation: cheap, and the
            // reason divider demodulation is fast.
            let values: Vec<f32> =
                crate::par::map_indexed(&positions, |_, &p| engine.eval_at(&y.samples, p));
            let candidates: Vec<(usize, f32)> = positions
                .into_iter()
                .zip(values)
                .filter(|&(_, x)| x > threshold)
                .collect();
            let mut report = finish_report(candidates, threshold, &params, node_id)?;
            report.recovered_tau_s = Some(tau_s);
            attribute_filters(&mut report, &engine, &bank, &y.samples);
            report
        }
    };
    report.node_id = node_id;
    report.recovered_f_clk_hz = acq.recovered_clock.then_some(acq.f_clk_hz);
    Ok(report)
}

/// Tag each detection with the index of its strongest contributing filter.
fn attribute_filters(
    report: &mut DemodReport,
    engine: &Engine,
    bank: &FilterBank,
    samples: &[Complex32],
) {
    for det in &mut report.detections {
        let pos = (det.time_s * bank.sample_rate_hz).round() as usize;
        let products = engine.filter_products_at(samples, pos, &bank.phases_rad);
        let mut best = 0usize;
        for (i, &p) in products.iter().enumerate() {
            if p > products[best] {
                best = i;
            }
        }
        det.filter_index = best;
    }
}
