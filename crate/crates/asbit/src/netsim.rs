//! Node populations, event sources, and end-to-end scenario execution.
//!
//! A scenario is a pure function of its [`ScenarioConfig`]: every random
//! quantity is drawn from a stream keyed by `(master seed, domain, node)`,
//! so adding nodes, reordering work, or changing thread counts never
//! perturbs any existing node's events, clock, placement, or code.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codes::{default_family, GoldFamily, SpreadingCode};
use crate::metrics::{event_error_rate, ErrorReport, NodeErrorRecord};
use crate::phy::{
    self, CarrierParams, ClockModel, IqStream, NodeProfile, NodeStream,
};
use crate::rng::{derived, Domain};
use crate::rx::{self, DemodMode, DemodReport, RxParams};
use crate::{Error, Result};

/// Sparse binary events on a fixed bin grid; a `1` bin is an event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTrain {
    /// Bin width in seconds (1 ms by default).
    pub bin_size_s: f64,
    /// Total covered duration in seconds.
    pub duration_s: f64,
    bins: Vec<u32>,
}

impl EventTrain {
    /// Build a train from sorted, strictly increasing bin indices.
    pub fn new(bin_size_s: f64, bins: &[u32], duration_s: f64) -> Result<Self> {
        if bin_size_s <= 0.0 || duration_s < 0.0 {
            return Err(Error::InvalidParam(
                "bin size must be positive and duration nonnegative".into(),
            ));
        }
        for w in bins.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidParam(format!(
                    "bin indices must be strictly increasing (saw {} then {})",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = bins.last() {
            if last as f64 * bin_size_s >= duration_s {
                return Err(Error::InvalidParam(format!(
                    "bin {last} starts at or past the {duration_s} s duration"
                )));
            }
        }
        Ok(Self {
            bin_size_s,
            duration_s,
            bins: bins.to_vec(),
        })
    }

    pub fn bins(&self) -> &[u32] {
        &self.bins
    }

    pub fn count(&self) -> usize {
        self.bins.len()
    }

    /// Number of grid bins covered by the duration.
    pub fn grid_bins(&self) -> usize {
        (self.duration_s / self.bin_size_s + 1e-9).floor() as usize
    }

    /// Cyclically shift all events by `shift` bins, preserving the
    /// inter-event structure.
    pub fn cyclic_shift(&self, shift: u32) -> EventTrain {
        let n = self.grid_bins() as u32;
        if n == 0 || self.bins.is_empty() {
            return self.clone();
        }
        let mut bins: Vec<u32> = self.bins.iter().map(|&b| (b + shift) % n).collect();
        bins.sort_unstable();
        bins.dedup();
        EventTrain {
            bin_size_s: self.bin_size_s,
            duration_s: self.duration_s,
            bins,
        }
    }
}

/// Bernoulli-thinned Poisson events: each bin carries an event with
/// probability `rate * bin_size`, at most one per bin.
///
/// One uniform is consumed per bin regardless of the rate, so trains drawn
/// from the same stream at different rates are nested: every event of the
/// lower-rate train is an event of the higher-rate train.
pub fn poisson_events(
    rate_hz: f64,
    duration_s: f64,
    bin_size_s: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EventTrain> {
    if rate_hz < 0.0 {
        return Err(Error::InvalidParam("event rate must be nonnegative".into()));
    }
    let p = rate_hz * bin_size_s;
    if p >= 1.0 {
        return Err(Error::RateTooHigh {
            rate_hz,
            bin_s: bin_size_s,
        });
    }
    let n_bins = (duration_s / bin_size_s + 1e-9).floor() as usize;
    let mut bins = Vec::new();
    for b in 0..n_bins {
        let u: f64 = rng.gen();
        if u < p {
            bins.push(b as u32);
        }
    }
    EventTrain::new(bin_size_s, &bins, duration_s)
}

/// Load per-channel spike trains from an events file (CSV with a
/// `channel,time_s` header, or NDJSON records `{"channel":..,"time_s":..}`).
///
/// Timestamps are binned onto the 1 ms grid; channels come back sorted by
/// id. Negative or non-finite timestamps and malformed rows are rejected
/// with their line number.
pub fn load_spike_trains(path: &Path, bin_size_s: f64) -> Result<Vec<(u64, EventTrain)>> {
    let rows = crate::io::read_events_file(path)?;
    let mut max_time = 0.0f64;
    for r in &rows {
        max_time = max_time.max(r.time_s);
    }
    let duration_s = ((max_time / bin_size_s).floor() + 1.0) * bin_size_s;

    let mut by_channel: std::collections::BTreeMap<u64, Vec<u32>> = Default::default();
    for r in &rows {
        let bin = (r.time_s / bin_size_s).floor() as u32;
        by_channel.entry(r.channel).or_default().push(bin);
    }
    let mut out = Vec::with_capacity(by_channel.len());
    for (channel, mut bins) in by_channel {
        bins.sort_unstable();
        bins.dedup();
        out.push((channel, EventTrain::new(bin_size_s, &bins, duration_s)?));
    }
    Ok(out)
}

/// Expand a train list by `factor`: each replica keeps its source's event
/// content under a fresh sequential channel id.
pub fn replicate_channels(
    trains: &[(u64, EventTrain)],
    factor: usize,
) -> Result<Vec<(u64, EventTrain)>> {
    if factor == 0 {
        return Err(Error::InvalidParam("replication factor must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(trains.len() * factor);
    let mut next_id = 0u64;
    for rep in 0..factor {
        let _ = rep;
        for (_, train) in trains {
            out.push((next_id, train.clone()));
            next_id += 1;
        }
    }
    Ok(out)
}

/// How a population member came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemberOrigin {
    Target,
    Pool,
    /// Replica of the given pool member.
    Replica(u64),
}

/// A node's identity, code, and ground-truth events before amplitudes and
/// clocks are assigned.
#[derive(Debug, Clone)]
pub struct PopulationMember {
    pub node_id: u64,
    pub code: SpreadingCode,
    pub events: EventTrain,
    pub origin: MemberOrigin,
}

/// Grow a population to `total_nodes` by sampling pool members with
/// replacement; each replica gets a fresh cyclic time shift and either keeps
/// its pool member's code (`reuse_codes`, mirroring reuse of a fixed chip
/// population) or takes a fresh family code.
pub fn augment_background(
    targets: &[PopulationMember],
    pool: &[PopulationMember],
    total_nodes: usize,
    reuse_codes: bool,
    family: &GoldFamily,
    code_length: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PopulationMember>> {
    let base = targets.len() + pool.len();
    if total_nodes < base {
        return Err(Error::InvalidParam(format!(
            "total_nodes {total_nodes} smaller than targets + pool = {base}"
        )));
    }
    if pool.is_empty() && total_nodes > base {
        return Err(Error::InvalidParam(
            "cannot add replicas from an empty pool".into(),
        ));
    }
    let mut population: Vec<PopulationMember> = targets.to_vec();
    population.extend(pool.iter().cloned());

    let mut next_id = population
        .iter()
        .map(|m| m.node_id + 1)
        .max()
        .unwrap_or(0);
    for _ in 0..(total_nodes - base) {
        let src = &pool[rng.gen_range(0..pool.len())];
        let n_bins = src.events.grid_bins().max(1) as u32;
        let shift = rng.gen_range(0..n_bins);
        let code = if reuse_codes {
            src.code.clone()
        } else {
            let seed = rng.gen_range(0..=family.max_seed());
            family.code(seed, code_length)?
        };
        population.push(PopulationMember {
            node_id: next_id,
            code,
            events: src.events.cyclic_shift(shift),
            origin: MemberOrigin::Replica(src.node_id),
        });
        next_id += 1;
    }
    Ok(population)
}

/// Draw each node's relative SNR uniformly in `[0, spread_db]` and scale its
/// amplitude accordingly. Returns the per-node relative SNR in dB, in
/// population order. Draws are keyed by node id, not position.
pub fn assign_near_far(
    profiles: &mut [NodeProfile],
    spread_db: f64,
    master_seed: u64,
) -> Vec<f64> {
    profiles
        .iter_mut()
        .map(|p| {
            let rel = if spread_db > 0.0 {
                derived(master_seed, Domain::NearFar, p.node_id).gen_range(0.0..=spread_db)
            } else {
                0.0
            };
            p.a_bck *= phy::dbm_to_amplitude(rel);
            rel
        })
        .collect()
}

/// Clock configuration for a scenario population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ClockConfig {
    /// Free-running oscillators with per-node nominals drawn uniformly from
    /// `[nominal_low_hz, nominal_high_hz]`.
    Oscillator {
        nominal_low_hz: f64,
        nominal_high_hz: f64,
        drift_ppm: f64,
        walk_step_ppm: f64,
    },
    /// Carrier-derived dividers: every node at exactly `f_tx / ratio`.
    Divider { ratio: u32 },
}

impl ClockConfig {
    pub fn is_divider(&self) -> bool {
        matches!(self, ClockConfig::Divider { .. })
    }
}

fn default_bin_size() -> f64 {
    1e-3
}
fn default_gold_degree() -> u32 {
    13
}
fn default_code_length() -> usize {
    511
}
fn default_true() -> bool {
    true
}
fn default_one() -> f64 {
    1.0
}
fn default_replicate() -> usize {
    1
}

/// Reference noise floor used to translate SNR into amplitude when noise is
/// disabled.
pub const DEFAULT_NOISE_FLOOR_DBM: f64 = -75.75;

/// Full description of one simulated network run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Total population size (targets + background).
    pub n_nodes: usize,
    /// Leading subset of nodes whose events are demodulated and scored.
    pub n_targets: usize,
    pub duration_s: f64,
    #[serde(default = "default_bin_size")]
    pub bin_size_s: f64,
    /// Event rate of target nodes (ignored when an events file is given).
    pub target_rate_hz: f64,
    /// Event rate of background nodes.
    pub background_rate_hz: f64,
    /// Optional spike-train file feeding the targets.
    #[serde(default)]
    pub events_file: Option<std::path::PathBuf>,
    /// Channel replication factor for file-fed targets.
    #[serde(default = "default_replicate")]
    pub replicate_factor: usize,
    pub clock: ClockConfig,
    /// Per-node SNR over the sampled band, dB, before any near-far spread.
    pub snr_db: f64,
    /// Total in-band AWGN power; `None` disables noise.
    #[serde(default)]
    pub noise_floor_dbm: Option<f64>,
    #[serde(default)]
    pub near_far_spread_db: f64,
    #[serde(default = "default_gold_degree")]
    pub gold_degree: u32,
    #[serde(default = "default_code_length")]
    pub code_length: usize,
    /// Assign codes without seed collisions (the hardware analogue screens
    /// colliding chips out of the target group).
    #[serde(default = "default_true")]
    pub distinct_seeds: bool,
    /// Probability that a packet carries the node's own code; below 1.0 the
    /// remainder are emitted under a random seed, modelling seed-circuit
    /// instability.
    #[serde(default = "default_one")]
    pub seed_repeat_prob: f64,
    /// Build the background from a fixed pool of this many nodes plus
    /// shifted replicas, instead of independent background nodes.
    #[serde(default)]
    pub background_pool: Option<usize>,
    /// Replicas reuse their pool member's code (measured-chip style) rather
    /// than drawing fresh codes.
    #[serde(default = "default_true")]
    pub reuse_pool_codes: bool,
    #[serde(default)]
    pub carrier: CarrierParams,
    pub sample_rate_hz: f64,
    #[serde(default)]
    pub quant_bits: Option<u8>,
    #[serde(default)]
    pub rx: RxParams,
    pub master_seed: u64,
}

impl ScenarioConfig {
    /// Validate cross-field invariants.
    pub fn validate(&self) -> Result<()> {
        self.carrier.validate()?;
        if self.n_targets > self.n_nodes {
            return Err(Error::InvalidParam(format!(
                "n_targets {} exceeds n_nodes {}",
                self.n_targets, self.n_nodes
            )));
        }
        if self.duration_s <= 0.0 || self.sample_rate_hz <= 0.0 {
            return Err(Error::InvalidParam(
                "duration and sample rate must be positive".into(),
            ));
        }
        if self.target_rate_hz < 0.0 || self.background_rate_hz < 0.0 {
            return Err(Error::InvalidParam("rates must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.seed_repeat_prob) {
            return Err(Error::InvalidParam(
                "seed_repeat_prob must lie in [0, 1]".into(),
            ));
        }
        if let Some(pool) = self.background_pool {
            if self.n_targets + pool > self.n_nodes {
                return Err(Error::InvalidParam(format!(
                    "targets + pool = {} exceeds n_nodes {}",
                    self.n_targets + pool,
                    self.n_nodes
                )));
            }
        }
        if self.distinct_seeds && self.n_nodes > (1 << self.gold_degree) {
            return Err(Error::InvalidParam(format!(
                "{} nodes cannot take distinct seeds from a degree-{} family",
                self.n_nodes, self.gold_degree
            )));
        }
        Ok(())
    }

    /// The noise floor used as the SNR reference (configured floor, or the
    /// default reference when noise is disabled).
    pub fn reference_floor_dbm(&self) -> f64 {
        self.noise_floor_dbm.unwrap_or(DEFAULT_NOISE_FLOOR_DBM)
    }

    /// Clock model for one node.
    fn clock_model(&self, node_id: u64) -> ClockModel {
        match self.clock {
            ClockConfig::Divider { ratio } => ClockModel::Divider { ratio },
            ClockConfig::Oscillator {
                nominal_low_hz,
                nominal_high_hz,
                drift_ppm,
                walk_step_ppm,
            } => {
                let mut rng = derived(self.master_seed, Domain::Clock, node_id);
                let nominal_hz = rng.gen_range(nominal_low_hz..=nominal_high_hz);
                ClockModel::FreeOscillator {
                    nominal_hz,
                    drift_ppm,
                    walk_step_ppm,
                }
            }
        }
    }
}

/// Aggregate bookkeeping for a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStats {
    pub total_events: usize,
    pub total_packets: usize,
    pub events_per_s: f64,
    pub synth_wall_s: f64,
    pub demod_wall_s: f64,
    pub demod_s_per_node: f64,
}

/// Everything a scenario produces.
#[derive(Debug)]
pub struct RunReport {
    pub config: ScenarioConfig,
    /// Ground-truth trains for the whole population, node order.
    pub truth: Vec<(u64, EventTrain)>,
    /// Per-node relative SNR assigned by the near-far spread, node order.
    pub rel_snr_db: Vec<f64>,
    pub iq: IqStream,
    /// Demodulation reports for the targets, target order.
    pub reports: Vec<DemodReport>,
    pub errors: ErrorReport,
    pub stats: RunStats,
}

/// Build the population members (ids, codes, events) for a config.
pub fn build_population(config: &ScenarioConfig) -> Result<Vec<PopulationMember>> {
    config.validate()?;
    let family = default_family(config.gold_degree)?;

    // Seed assignment: a dedicated shuffle stream hands out distinct seeds;
    // otherwise each node draws independently.
    let seeds: Vec<u32> = if config.distinct_seeds {
        let mut all: Vec<u32> = (0..(1u32 << config.gold_degree)).collect();
        let mut rng = derived(config.master_seed, Domain::CodeSeed, 0);
        all.shuffle(&mut rng);
        all.truncate(config.n_nodes);
        all
    } else {
        (0..config.n_nodes as u64)
            .map(|id| {
                derived(config.master_seed, Domain::CodeSeed, id)
                    .gen_range(0..(1u32 << config.gold_degree))
            })
            .collect()
    };

    let code_for = |idx: usize| family.code(seeds[idx], config.code_length);

    // Target events: Poisson by default, file-fed when configured.
    let mut target_trains: Vec<EventTrain> = if let Some(path) = &config.events_file {
        let loaded = load_spike_trains(path, config.bin_size_s)?;
        let replicated = replicate_channels(&loaded, config.replicate_factor)?;
        replicated.into_iter().map(|(_, t)| t).collect()
    } else {
        (0..config.n_targets)
            .map(|id| {
                let mut rng = derived(config.master_seed, Domain::Events, id as u64);
                poisson_events(
                    config.target_rate_hz,
                    config.duration_s,
                    config.bin_size_s,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?
    };
    if target_trains.len() < config.n_targets {
        return Err(Error::InvalidParam(format!(
            "events file provides {} channels, fewer than n_targets {}",
            target_trains.len(),
            config.n_targets
        )));
    }
    target_trains.truncate(config.n_targets);

    let targets: Vec<PopulationMember> = target_trains
        .into_iter()
        .enumerate()
        .map(|(i, events)| {
            Ok(PopulationMember {
                node_id: i as u64,
                code: code_for(i)?,
                events,
                origin: MemberOrigin::Target,
            })
        })
        .collect::<Result<_>>()?;

    if let Some(pool_size) = config.background_pool {
        // Measured-chip style: a fixed pool plus shifted replicas.
        let pool: Vec<PopulationMember> = (0..pool_size)
            .map(|k| {
                let id = (config.n_targets + k) as u64;
                let mut rng = derived(config.master_seed, Domain::Events, id);
                Ok(PopulationMember {
                    node_id: id,
                    code: code_for(config.n_targets + k)?,
                    events: poisson_events(
                        config.background_rate_hz,
                        config.duration_s,
                        config.bin_size_s,
                        &mut rng,
                    )?,
                    origin: MemberOrigin::Pool,
                })
            })
            .collect::<Result<_>>()?;
        let mut rng = derived(config.master_seed, Domain::Augment, 0);
        augment_background(
            &targets,
            &pool,
            config.n_nodes,
            config.reuse_pool_codes,
            &family,
            config.code_length,
            &mut rng,
        )
    } else {
        let mut population = targets;
        for k in config.n_targets..config.n_nodes {
            let id = k as u64;
            let mut rng = derived(config.master_seed, Domain::Events, id);
            population.push(PopulationMember {
                node_id: id,
                code: code_for(k)?,
                events: poisson_events(
                    config.background_rate_hz,
                    config.duration_s,
                    config.bin_size_s,
                    &mut rng,
                )?,
                origin: MemberOrigin::Pool,
            });
        }
        Ok(population)
    }
}

/// Attach clocks, placement, and amplitudes to population members.
pub fn build_profiles(
    config: &ScenarioConfig,
    population: &[PopulationMember],
) -> Result<(Vec<NodeProfile>, Vec<f64>)> {
    let base_rssi_dbm = config.reference_floor_dbm() + config.snr_db;
    let base_amplitude = phy::dbm_to_amplitude(base_rssi_dbm);
    let wavelength = config.carrier.wavelength_m();

    let worst_packet_s = {
        let f_min = match config.clock {
            ClockConfig::Divider { ratio } => config.carrier.f_tx_hz / ratio as f64,
            ClockConfig::Oscillator {
                nominal_low_hz,
                drift_ppm,
                ..
            } => nominal_low_hz * (1.0 - drift_ppm * 1e-6),
        };
        phy::packet_duration_s(config.code_length, f_min)
    };
    if worst_packet_s > config.bin_size_s {
        return Err(Error::PacketExceedsBin {
            packet_s: worst_packet_s,
            bin_s: config.bin_size_s,
        });
    }
    let tau_max = config.bin_size_s - worst_packet_s;

    let mut profiles = Vec::with_capacity(population.len());
    for member in population {
        let mut place = derived(config.master_seed, Domain::Placement, member.node_id);
        let distance_m = place.gen_range(0.02..(0.02 + wavelength));
        let tau_s = place.gen_range(0.0..tau_max.max(f64::MIN_POSITIVE));
        profiles.push(NodeProfile {
            node_id: member.node_id,
            code: member.code.clone(),
            clock: config.clock_model(member.node_id),
            a_bck: base_amplitude,
            composite_gain: 1.0,
            distance_m,
            tau_s,
        });
    }
    let rel_snr = assign_near_far(&mut profiles, config.near_far_spread_db, config.master_seed);
    Ok((profiles, rel_snr))
}

/// Render every node and superpose into the aggregate stream.
///
/// Nodes render in fixed-size batches (parallel within a batch) and
/// accumulate strictly in node order, so the output is independent of the
/// schedule. Returns the stream and the total packet count.
pub fn render_aggregate(
    config: &ScenarioConfig,
    profiles: &[NodeProfile],
    population: &[PopulationMember],
) -> Result<(IqStream, usize)> {
    let n_samples = (config.duration_s * config.sample_rate_hz).round() as usize;
    let mut buffer = vec![num_complex::Complex32::new(0.0, 0.0); n_samples];
    let mut total_packets = 0usize;

    let family = default_family(config.gold_degree)?;
    const BATCH: usize = 32;
    for batch_start in (0..profiles.len()).step_by(BATCH) {
        let batch_end = (batch_start + BATCH).min(profiles.len());
        let rendered: Vec<Result<Vec<NodeStream>>> =
            crate::par::map_range(batch_end - batch_start, |i| {
                let idx = batch_start + i;
                render_member(config, &profiles[idx], &population[idx], &family)
            });
        for streams in rendered {
            for stream in streams? {
                total_packets += stream.packet_count();
                phy::accumulate_stream(&mut buffer, &stream, config.sample_rate_hz);
            }
        }
    }

    if let Some(floor) = config.noise_floor_dbm {
        phy::add_noise(&mut buffer, floor, config.master_seed);
    }
    let mut iq = IqStream {
        samples: buffer,
        sample_rate_hz: config.sample_rate_hz,
        noise_floor_dbm: config.noise_floor_dbm,
        quant_bits: None,
    };
    if let Some(bits) = config.quant_bits {
        iq = phy::adc_quantize(&iq, bits)?;
    }
    Ok((iq, total_packets))
}

/// Render one node, splitting off seed-instability packets when configured.
fn render_member(
    config: &ScenarioConfig,
    profile: &NodeProfile,
    member: &PopulationMember,
    family: &Arc<GoldFamily>,
) -> Result<Vec<NodeStream>> {
    let mut rng = derived(config.master_seed, Domain::ClockWalk, profile.node_id);
    if config.seed_repeat_prob >= 1.0 {
        let stream = phy::render_node_stream(
            profile,
            &member.events,
            &config.carrier,
            config.sample_rate_hz,
            &mut rng,
        )?;
        return Ok(vec![stream]);
    }

    // Unstable seed circuit: some packets go out under a random code.
    let mut instab = derived(config.master_seed, Domain::PufInstability, profile.node_id);
    let mut stable = Vec::new();
    let mut corrupt = Vec::new();
    for &bin in member.events.bins() {
        if instab.gen::<f64>() < config.seed_repeat_prob {
            stable.push(bin);
        } else {
            corrupt.push(bin);
        }
    }
    let mut streams = vec![phy::render_node_stream(
        profile,
        &EventTrain::new(member.events.bin_size_s, &stable, member.events.duration_s)?,
        &config.carrier,
        config.sample_rate_hz,
        &mut rng,
    )?];
    for bin in corrupt {
        let seed = instab.gen_range(0..=family.max_seed());
        let mut twin = profile.clone();
        twin.code = family.code(seed, config.code_length)?;
        streams.push(phy::render_node_stream(
            &twin,
            &EventTrain::new(member.events.bin_size_s, &[bin], member.events.duration_s)?,
            &config.carrier,
            config.sample_rate_hz,
            &mut rng,
        )?);
    }
    Ok(streams)
}

/// The detection mode a config resolves to: its override, or the clock
/// default (discrete timing for dividers, continuous for oscillators).
pub fn resolved_mode(config: &ScenarioConfig) -> DemodMode {
    config.rx.mode.unwrap_or(if config.clock.is_divider() {
        DemodMode::Discrete
    } else {
        DemodMode::Continuous
    })
}

/// Demodulate every target of `config` against a stored or in-memory
/// aggregate stream. Node profiles are regenerated from the config, so a
/// capture written by one run demodulates to identical reports later.
pub fn demod_capture(config: &ScenarioConfig, iq: &IqStream) -> Result<Vec<DemodReport>> {
    config.validate()?;
    let population = build_population(config)?;
    let (profiles, _) = build_profiles(config, &population)?;
    demod_targets(config, &profiles, iq)
}

fn demod_targets(
    config: &ScenarioConfig,
    profiles: &[NodeProfile],
    iq: &IqStream,
) -> Result<Vec<DemodReport>> {
    let mode = resolved_mode(config);
    let targets = &profiles[..config.n_targets];
    let reports: Vec<Result<DemodReport>> = crate::par::map_indexed(targets, |_, profile| {
        let known_clock = match config.clock {
            ClockConfig::Divider { ratio } => Some(config.carrier.f_tx_hz / ratio as f64),
            ClockConfig::Oscillator { .. } => None,
        };
        rx::demod_node(
            iq,
            profile.node_id,
            &profile.code,
            &config.carrier,
            known_clock,
            mode,
            config.bin_size_s,
            &config.rx,
        )
    });
    reports.into_iter().collect()
}

/// Execute a scenario end to end: codes, events, synthesis, demodulation,
/// and error accounting. Fully deterministic given the config.
pub fn run_scenario(config: &ScenarioConfig) -> Result<RunReport> {
    config.validate()?;
    let population = build_population(config)?;
    let (profiles, rel_snr) = build_profiles(config, &population)?;

    let synth_start = Instant::now();
    let (iq, total_packets) = render_aggregate(config, &profiles, &population)?;
    let synth_wall_s = synth_start.elapsed().as_secs_f64();

    let demod_start = Instant::now();
    let reports = demod_targets(config, &profiles, &iq)?;
    let demod_wall_s = demod_start.elapsed().as_secs_f64();

    let mut per_node = Vec::with_capacity(reports.len());
    for (i, report) in reports.iter().enumerate() {
        let record = event_error_rate(&population[i].events, &report.detected)?;
        per_node.push(NodeErrorRecord {
            node_id: population[i].node_id,
            rel_snr_db: rel_snr[i],
            ..record
        });
    }
    let errors = ErrorReport::aggregate(config.bin_size_s, per_node);

    let total_events: usize = population.iter().map(|m| m.events.count()).sum();
    let stats = RunStats {
        total_events,
        total_packets,
        events_per_s: total_events as f64 / config.duration_s,
        synth_wall_s,
        demod_wall_s,
        demod_s_per_node: demod_wall_s / config.n_targets.max(1) as f64,
    };

    Ok(RunReport {
        config: config.clone(),
        truth: population
            .iter()
            .map(|m| (m.node_id, m.events.clone()))
            .collect(),
        rel_snr_db: rel_snr,
        iq,
        reports,
        errors,
        stats,
    })
}

/// Sweep the detection threshold multiplier on a noise-only stream and
/// report the false-alarm rate per event bin for each candidate, plus the
/// smallest multiplier meeting `target_far`.
pub fn calibrate_threshold(
    config: &ScenarioConfig,
    duration_s: f64,
    target_far: f64,
) -> Result<serde_json::Value> {
    config.validate()?;
    let Some(floor) = config.noise_floor_dbm else {
        return Err(Error::InvalidParam(
            "threshold calibration needs a configured noise floor".into(),
        ));
    };
    if duration_s <= 0.0 || target_far <= 0.0 {
        return Err(Error::InvalidParam(
            "calibration duration and target rate must be positive".into(),
        ));
    }

    let stream = phy::superpose(&[], Some(floor), duration_s, config.sample_rate_hz, config.master_seed);
    let family = default_family(config.gold_degree)?;
    let probe_code = family.code(0, config.code_length)?;
    let (hint, n_clock, drift) = match config.clock {
        ClockConfig::Divider { ratio } => (config.carrier.f_tx_hz / ratio as f64, 1, 0.0),
        ClockConfig::Oscillator {
            nominal_low_hz,
            nominal_high_hz,
            drift_ppm,
            ..
        } => (
            (nominal_low_hz + nominal_high_hz) / 2.0,
            config.rx.n_clock_points,
            drift_ppm,
        ),
    };
    let bank = rx::build_filter_bank(
        &probe_code,
        &config.carrier,
        config.sample_rate_hz,
        hint,
        drift,
        n_clock,
        config.rx.n_phases,
        resolved_mode(config),
    )?;
    let series = rx::combined_output(&stream, &bank)?;
    let sumsq: f64 = series.iter().map(|&x| (x as f64) * (x as f64)).sum();
    let rms = (sumsq / series.len() as f64).sqrt();
    let n_bins = (duration_s / config.bin_size_s + 1e-9).floor() as usize;

    // Local maxima only, matching the continuous detector's candidate rule.
    let mut peaks: Vec<f32> = Vec::new();
    for k in 0..series.len() {
        let x = series[k];
        let left = if k > 0 { series[k - 1] } else { f32::NEG_INFINITY };
        let right = series.get(k + 1).copied().unwrap_or(f32::NEG_INFINITY);
        if x > left && x >= right && x > 0.0 {
            peaks.push(x);
        }
    }

    let mut rows = Vec::new();
    let mut chosen = None;
    for k10 in 20..=300u32 {
        let k = k10 as f64 / 10.0;
        let thr = (k * rms) as f32;
        let false_alarms = peaks.iter().filter(|&&x| x > thr).count();
        let far = false_alarms as f64 / n_bins.max(1) as f64;
        if k10 % 10 == 0 || (chosen.is_none() && far <= target_far) {
            rows.push(serde_json::json!({
                "threshold_k": k,
                "false_alarms": false_alarms,
                "far_per_bin": far,
            }));
        }
        if chosen.is_none() && far <= target_far {
            chosen = Some(k);
        }
    }

    Ok(serde_json::json!({
        "noise_floor_dbm": floor,
        "duration_s": duration_s,
        "series_rms": rms,
        "event_bins": n_bins,
        "target_far_per_bin": target_far,
        "rows": rows,
        "chosen_k": chosen,
    }))
}
