//! Baseband physical layer: BPSK backscatter packet synthesis, clock
//! models, stream superposition, and link-budget arithmetic.
//!
//! A packet is the node's spreading code BPSK-encoded against its clock
//! square wave, downconverted to complex baseband, and sampled. The sampled
//! waveform carries the clock residual `|f_clk - f_dc|` in I and Q; that
//! residual is what matched filters later lock onto. Amplitudes are linear
//! with unit power at 0 dBm, so stream power and the configured noise floor
//! share one scale.

use num_complex::Complex32;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codes::SpreadingCode;
use crate::netsim::EventTrain;
use crate::rng::{derived, Domain};
use crate::{Error, Result};

/// Highest `f_clk / sample_rate` ratio accepted by the encoder. Above this
/// the sampler skips whole chips and the waveform no longer represents the
/// code.
pub const MAX_CLOCK_TO_SAMPLE_RATIO: f64 = 1.25;

/// Samples per AWGN generation block; the noise RNG is re-keyed per block so
/// generation can fan out without affecting the result.
pub const NOISE_BLOCK_SAMPLES: usize = 1 << 20;

/// Carrier and downconversion parameters shared by the whole network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarrierParams {
    /// Transmit carrier frequency in Hz.
    pub f_tx_hz: f64,
    /// Carrier amplitude, linear units.
    pub a_tx: f64,
    /// Downconversion offset from the carrier in Hz (the nominal clock).
    pub f_dc_hz: f64,
}

impl Default for CarrierParams {
    fn default() -> Self {
        Self {
            f_tx_hz: 915.0e6,
            a_tx: 1.0,
            f_dc_hz: 30.0e6,
        }
    }
}

impl CarrierParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_tx_hz > self.f_dc_hz && self.f_dc_hz > 0.0) {
            return Err(Error::InvalidParam(format!(
                "carrier requires f_tx > f_dc > 0 (got {} and {})",
                self.f_tx_hz, self.f_dc_hz
            )));
        }
        Ok(())
    }

    /// Carrier wavelength in meters.
    pub fn wavelength_m(&self) -> f64 {
        299_792_458.0 / self.f_tx_hz
    }
}

/// On-chip clock behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ClockModel {
    /// Free-running relaxation oscillator: a per-chip nominal plus a bounded
    /// random walk, packet to packet, within `±drift_ppm`.
    FreeOscillator {
        nominal_hz: f64,
        drift_ppm: f64,
        /// Walk step bound per packet, in ppm of the nominal.
        walk_step_ppm: f64,
    },
    /// Clock divided down from the carrier: exactly `f_tx / ratio`, drift
    /// free.
    Divider { ratio: u32 },
}

impl ClockModel {
    /// The clock frequency absent any drift.
    pub fn nominal_hz(&self, carrier: &CarrierParams) -> f64 {
        match *self {
            ClockModel::FreeOscillator { nominal_hz, .. } => nominal_hz,
            ClockModel::Divider { ratio } => carrier.f_tx_hz / ratio as f64,
        }
    }

    /// Lowest frequency the model can emit.
    pub fn min_hz(&self, carrier: &CarrierParams) -> f64 {
        match *self {
            ClockModel::FreeOscillator {
                nominal_hz,
                drift_ppm,
                ..
            } => nominal_hz * (1.0 - drift_ppm * 1e-6),
            ClockModel::Divider { .. } => self.nominal_hz(carrier),
        }
    }
}

/// One sensor node's transmit characteristics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeProfile {
    pub node_id: u64,
    pub code: SpreadingCode,
    pub clock: ClockModel,
    /// Backscatter amplitude, linear (unit power = 0 dBm).
    pub a_bck: f64,
    /// Receive-chain gain folded with the conversion factor; the effective
    /// amplitude is `a_bck * composite_gain`.
    pub composite_gain: f64,
    /// Distance to the transceiver, meters; sets the phase delay.
    pub distance_m: f64,
    /// Initial transmission delay within each event bin, seconds.
    pub tau_s: f64,
}

impl NodeProfile {
    /// Effective packet amplitude `A' = composite_gain * a_bck`.
    pub fn amplitude(&self) -> f64 {
        self.a_bck * self.composite_gain
    }

    /// Phase delay `2*pi*D / lambda`, folded to `[0, 2*pi)`.
    pub fn phase_rad(&self, carrier: &CarrierParams) -> f64 {
        let cycles = self.distance_m / carrier.wavelength_m();
        cycles.fract() * std::f64::consts::TAU
    }

    pub fn validate(&self) -> Result<()> {
        if self.a_bck <= 0.0 || self.composite_gain <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "node {} amplitude terms must be positive",
                self.node_id
            )));
        }
        if self.tau_s < 0.0 {
            return Err(Error::InvalidParam(format!(
                "node {} tau must be nonnegative",
                self.node_id
            )));
        }
        Ok(())
    }
}

/// Complex baseband samples at a fixed rate plus capture metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct IqStream {
    pub samples: Vec<Complex32>,
    pub sample_rate_hz: f64,
    /// Configured total in-band noise power, dBm; `None` when noise was
    /// disabled.
    pub noise_floor_dbm: Option<f64>,
    /// ADC depth the stream was quantized to, if any.
    pub quant_bits: Option<u8>,
}

impl IqStream {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    /// Mean sample power in dBm (unit power = 0 dBm).
    pub fn mean_power_dbm(&self) -> f64 {
        if self.samples.is_empty() {
            return f64::NEG_INFINITY;
        }
        let p: f64 = self
            .samples
            .iter()
            .map(|s| s.norm_sqr() as f64)
            .sum::<f64>()
            / self.samples.len() as f64;
        10.0 * p.log10()
    }

    /// Copy out the samples covering `[start_s, start_s + len_s)`.
    pub fn clip(&self, start_s: f64, len_s: f64) -> IqStream {
        let a = ((start_s * self.sample_rate_hz).round() as usize).min(self.samples.len());
        let b = (((start_s + len_s) * self.sample_rate_hz).round() as usize)
            .clamp(a, self.samples.len());
        IqStream {
            samples: self.samples[a..b].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
            noise_floor_dbm: self.noise_floor_dbm,
            quant_bits: self.quant_bits,
        }
    }
}

/// Duration of one packet of `n_chips` symbols at clock `f_clk` (three
/// clock cycles per symbol).
pub fn packet_duration_s(n_chips: usize, f_clk_hz: f64) -> f64 {
    3.0 * n_chips as f64 / f_clk_hz
}

/// BPSK-encode a spreading code against the clock square wave.
///
/// Symbol duration is `T_s = 3 / f_clk`; each code symbol multiplies the
/// clock sequence (`±1` alternating per clock chip of duration `T_s / 3`,
/// starting +1). The output is the piecewise-constant ±1 transmit waveform
/// sampled at `sample_rate`.
pub fn bpsk_clock_encode(
    code: &SpreadingCode,
    f_clk_hz: f64,
    sample_rate_hz: f64,
) -> Result<Vec<f32>> {
    check_encode_rates(f_clk_hz, sample_rate_hz)?;
    let chips = code.chips();
    let n_samples = encoded_len(chips.len(), f_clk_hz, sample_rate_hz);
    // Clock-chip index per sample; the symbol index falls out by integer
    // division (three clock chips per symbol).
    let ratio = f_clk_hz / sample_rate_hz;
    let mut out = Vec::with_capacity(n_samples);
    for v in 0..n_samples {
        let m = (v as f64 * ratio).floor() as u64;
        let sym = ((m / 3) as usize).min(chips.len() - 1);
        let clk = if m & 1 == 0 { 1.0f32 } else { -1.0f32 };
        out.push(chips[sym] as f32 * clk);
    }
    Ok(out)
}

/// The coded symbol envelope sampled at `sample_rate`: the ±1 symbol value
/// held over each `T_s = 3 / f_clk` interval, without the clock sequence.
pub fn symbol_waveform(
    code: &SpreadingCode,
    f_clk_hz: f64,
    sample_rate_hz: f64,
) -> Result<Vec<f32>> {
    check_encode_rates(f_clk_hz, sample_rate_hz)?;
    let chips = code.chips();
    let n_samples = encoded_len(chips.len(), f_clk_hz, sample_rate_hz);
    let sym_ratio = f_clk_hz / (3.0 * sample_rate_hz);
    let mut out = Vec::with_capacity(n_samples);
    for v in 0..n_samples {
        let sym = ((v as f64 * sym_ratio).floor() as usize).min(chips.len() - 1);
        out.push(chips[sym] as f32);
    }
    Ok(out)
}

fn check_encode_rates(f_clk_hz: f64, sample_rate_hz: f64) -> Result<()> {
    if !(f_clk_hz > 0.0 && sample_rate_hz > 0.0) {
        return Err(Error::InvalidParam(
            "clock and sample rate must be positive".into(),
        ));
    }
    if f_clk_hz > MAX_CLOCK_TO_SAMPLE_RATIO * sample_rate_hz {
        return Err(Error::ClockTooFast {
            f_clk_hz,
            sample_rate_hz,
        });
    }
    Ok(())
}

/// Sample count of an encoded packet.
pub fn encoded_len(n_chips: usize, f_clk_hz: f64, sample_rate_hz: f64) -> usize {
    (packet_duration_s(n_chips, f_clk_hz) * sample_rate_hz).round() as usize
}

/// Synthesize one complex baseband packet at an explicit clock frequency.
///
/// Models the receive chain of the BPSK backscatter link: the upper
/// clock sideband of `s_BPSK`, mixed down by `f_dc` and low-pass filtered
/// ahead of the sampler, leaves the coded symbol envelope rotating at the
/// clock residual:
///
/// `y(v) = A * c(t_v) * exp(j*(2*pi*(f_clk - f_dc)*t_v - phase))`
///
/// so I and Q each carry the residual `|f_clk - f_dc|` in quadrature. The
/// lower sideband at `f_clk + f_dc` falls outside the sampled band and is
/// dropped.
pub fn synthesize_packet_iq_at(
    code: &SpreadingCode,
    amplitude: f64,
    f_clk_hz: f64,
    f_dc_hz: f64,
    phase_rad: f64,
    sample_rate_hz: f64,
) -> Result<Vec<Complex32>> {
    let envelope = symbol_waveform(code, f_clk_hz, sample_rate_hz)?;
    let f_res = f_clk_hz - f_dc_hz;
    if f_res.abs() >= sample_rate_hz / 2.0 {
        return Err(Error::InvalidParam(format!(
            "clock residual {f_res} Hz exceeds half the {sample_rate_hz} Hz sample rate"
        )));
    }
    let cycles_per_sample = f_res / sample_rate_hz;
    let out = envelope
        .iter()
        .enumerate()
        .map(|(v, &c)| {
            let beta = std::f64::consts::TAU * (v as f64 * cycles_per_sample) - phase_rad;
            let w = amplitude * c as f64;
            Complex32::new((w * beta.cos()) as f32, (w * beta.sin()) as f32)
        })
        .collect();
    Ok(out)
}

/// Synthesize one packet for a node at its nominal clock.
pub fn synthesize_packet_iq(
    node: &NodeProfile,
    carrier: &CarrierParams,
    phase_rad: f64,
    sample_rate_hz: f64,
) -> Result<Vec<Complex32>> {
    carrier.validate()?;
    synthesize_packet_iq_at(
        &node.code,
        node.amplitude(),
        node.clock.nominal_hz(carrier),
        carrier.f_dc_hz,
        phase_rad,
        sample_rate_hz,
    )
}

/// Per-packet instantaneous clock frequencies.
///
/// Free oscillators perform a bounded random walk (reflected at the
/// `±drift_ppm` band edges); dividers are constant.
pub fn clock_trajectory(
    model: &ClockModel,
    carrier: &CarrierParams,
    n_packets: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    match *model {
        ClockModel::Divider { ratio } => {
            vec![carrier.f_tx_hz / ratio as f64; n_packets]
        }
        ClockModel::FreeOscillator {
            nominal_hz,
            drift_ppm,
            walk_step_ppm,
        } => {
            let lo = nominal_hz * (1.0 - drift_ppm * 1e-6);
            let hi = nominal_hz * (1.0 + drift_ppm * 1e-6);
            let step = nominal_hz * walk_step_ppm * 1e-6;
            let mut f = nominal_hz;
            let mut out = Vec::with_capacity(n_packets);
            for _ in 0..n_packets {
                if step > 0.0 && hi > lo {
                    f += rng.gen_range(-step..=step);
                    // Reflect at the band edges.
                    if f > hi {
                        f = hi - (f - hi);
                    }
                    if f < lo {
                        f = lo + (lo - f);
                    }
                    f = f.clamp(lo, hi);
                }
                out.push(f);
            }
            out
        }
    }
}

/// One emitted packet placed on the scenario timeline.
#[derive(Debug, Clone)]
pub struct PlacedPacket {
    pub start_s: f64,
    pub samples: std::sync::Arc<Vec<Complex32>>,
}

/// All packets a node emits over a scenario.
#[derive(Debug, Clone)]
pub struct NodeStream {
    pub node_id: u64,
    pub packets: Vec<PlacedPacket>,
}

impl NodeStream {
    pub fn packet_count(&self) -> usize {
        self.packets.len()
    }
}

/// Render a node's sparse packet stream: one packet per 1-bin, emitted at
/// `bin_start + tau`, using that packet's trajectory frequency and the
/// node's phase. Zero bins stay silent.
pub fn render_node_stream(
    node: &NodeProfile,
    events: &EventTrain,
    carrier: &CarrierParams,
    sample_rate_hz: f64,
    trajectory_rng: &mut ChaCha8Rng,
) -> Result<NodeStream> {
    carrier.validate()?;
    node.validate()?;
    let slowest = node.clock.min_hz(carrier);
    let worst_packet_s = packet_duration_s(node.code.len(), slowest);
    if worst_packet_s > events.bin_size_s {
        return Err(Error::PacketExceedsBin {
            packet_s: worst_packet_s,
            bin_s: events.bin_size_s,
        });
    }

    let freqs = clock_trajectory(&node.clock, carrier, events.bins().len(), trajectory_rng);
    let phase = node.phase_rad(carrier);
    let amplitude = node.amplitude();

    // Dividers repeat the same frequency; reuse the waveform.
    let mut cached: Option<(u64, std::sync::Arc<Vec<Complex32>>)> = None;
    let mut packets = Vec::with_capacity(events.bins().len());
    for (k, &bin) in events.bins().iter().enumerate() {
        let f_clk = freqs[k];
        let key = f_clk.to_bits();
        let samples = match &cached {
            Some((bits, arc)) if *bits == key => arc.clone(),
            _ => {
                let arc = std::sync::Arc::new(synthesize_packet_iq_at(
                    &node.code,
                    amplitude,
                    f_clk,
                    carrier.f_dc_hz,
                    phase,
                    sample_rate_hz,
                )?);
                cached = Some((key, arc.clone()));
                arc
            }
        };
        packets.push(PlacedPacket {
            start_s: bin as f64 * events.bin_size_s + node.tau_s,
            samples,
        });
    }
    Ok(NodeStream {
        node_id: node.node_id,
        packets,
    })
}

/// Add a node stream's packets into a sample buffer (start times rounded to
/// the nearest sample; writes past the buffer end are clipped).
pub fn accumulate_stream(buffer: &mut [Complex32], stream: &NodeStream, sample_rate_hz: f64) {
    for packet in &stream.packets {
        let start = (packet.start_s * sample_rate_hz).round() as usize;
        if start >= buffer.len() {
            continue;
        }
        let n = packet.samples.len().min(buffer.len() - start);
        let dst = &mut buffer[start..start + n];
        for (d, s) in dst.iter_mut().zip(packet.samples[..n].iter()) {
            *d += *s;
        }
    }
}

/// Add complex AWGN with total in-band power `noise_floor_dbm` to a buffer.
///
/// Generation is blocked: each `NOISE_BLOCK_SAMPLES` block draws from its
/// own counter-derived stream, so the result is one fixed function of the
/// seed no matter how the blocks are scheduled.
pub fn add_noise(buffer: &mut [Complex32], noise_floor_dbm: f64, seed: u64) {
    let power = dbm_to_power(noise_floor_dbm);
    let sigma = (power / 2.0).sqrt() as f32;
    crate::par::for_each_chunk_mut(buffer, NOISE_BLOCK_SAMPLES, |block_idx, chunk| {
        let mut rng = derived(seed, Domain::NoiseBlock, block_idx as u64);
        for s in chunk.iter_mut() {
            let re: f32 = StandardNormal.sample(&mut rng);
            let im: f32 = StandardNormal.sample(&mut rng);
            *s += Complex32::new(sigma * re, sigma * im);
        }
    });
}

/// Superpose node streams over `duration_s` and add the noise floor:
/// `Y(v) = sum_i y_i(v - tau_i) + w(v)`.
///
/// Packets accumulate in stream order (the canonical order), so the output
/// is bit-identical across runs and thread counts.
pub fn superpose(
    streams: &[NodeStream],
    noise_floor_dbm: Option<f64>,
    duration_s: f64,
    sample_rate_hz: f64,
    seed: u64,
) -> IqStream {
    let n = (duration_s * sample_rate_hz).round() as usize;
    let mut buffer = vec![Complex32::new(0.0, 0.0); n];
    for stream in streams {
        accumulate_stream(&mut buffer, stream, sample_rate_hz);
    }
    if let Some(floor) = noise_floor_dbm {
        add_noise(&mut buffer, floor, seed);
    }
    IqStream {
        samples: buffer,
        sample_rate_hz,
        noise_floor_dbm,
        quant_bits: None,
    }
}

/// Quantize I and Q independently onto a uniform `2^bits`-code lattice
/// (symmetric signed-ADC convention: codes `-(2^(bits-1)-1)` through
/// `+(2^(bits-1)-1)`, zero on the lattice).
///
/// Full scale is the maximum sample magnitude of the input, so the
/// quantizer never clips; a stream already quantized at the same depth
/// passes through unchanged.
pub fn adc_quantize(stream: &IqStream, bits: u8) -> Result<IqStream> {
    if !(4..=16).contains(&bits) {
        return Err(Error::InvalidParam(format!(
            "quantizer depth {bits} outside [4, 16]"
        )));
    }
    if stream.samples.is_empty() || stream.quant_bits == Some(bits) {
        let mut out = stream.clone();
        out.quant_bits = Some(bits);
        return Ok(out);
    }
    let full_scale = stream
        .samples
        .iter()
        .map(|s| s.norm())
        .fold(0.0f32, f32::max);
    if full_scale == 0.0 {
        let mut out = stream.clone();
        out.quant_bits = Some(bits);
        return Ok(out);
    }
    let top_code = (1u32 << (bits - 1)) - 1;
    let step = full_scale / top_code as f32;
    let q = |x: f32| (x / step).round() * step;
    Ok(IqStream {
        samples: stream
            .samples
            .iter()
            .map(|s| Complex32::new(q(s.re), q(s.im)))
            .collect(),
        sample_rate_hz: stream.sample_rate_hz,
        noise_floor_dbm: stream.noise_floor_dbm,
        quant_bits: Some(bits),
    })
}

/// Received signal strength after the backscatter chain:
/// `RSSI = P_tx + 2*eta + (eta_c + c)`, all in dB/dBm.
pub fn rssi_chain(p_tx_dbm: f64, eta_db: f64, eta_c_plus_c_db: f64) -> f64 {
    p_tx_dbm + 2.0 * eta_db + eta_c_plus_c_db
}

/// `SNR = RSSI - noise floor`, in dB.
pub fn snr_of(rssi_dbm: f64, noise_floor_dbm: f64) -> f64 {
    rssi_dbm - noise_floor_dbm
}

/// Linear power for a dBm level (unit power = 0 dBm).
pub fn dbm_to_power(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

/// Linear amplitude whose power sits at `dbm`.
pub fn dbm_to_amplitude(dbm: f64) -> f64 {
    10f64.powf(dbm / 20.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::default_family;
    use approx::assert_relative_eq;
    use rustfft::FftPlanner;

    fn test_code(len: usize) -> SpreadingCode {
        default_family(9).unwrap().code(17, len).unwrap()
    }

    #[test]
    fn encode_nominal_point() {
        // 30 MHz clock -> 10 Mbps symbols; 511 symbols span 51.1 us.
        let code = test_code(511);
        let wave = bpsk_clock_encode(&code, 30.0e6, 30.0e6).unwrap();
        assert_eq!(wave.len(), 1533);
        assert!(wave.iter().all(|&s| s == 1.0 || s == -1.0));
        assert_relative_eq!(packet_duration_s(511, 30.0e6), 51.1e-6, max_relative = 1e-12);
    }

    #[test]
    fn encode_rejects_undersampling() {
        let code = test_code(63);
        assert!(matches!(
            bpsk_clock_encode(&code, 60.0e6, 30.0e6),
            Err(Error::ClockTooFast { .. })
        ));
    }

    #[test]
    fn packet_scales_linearly_with_amplitude() {
        let code = test_code(63);
        let a = synthesize_packet_iq_at(&code, 1.0, 31.0e6, 30.0e6, 0.7, 30.0e6).unwrap();
        let b = synthesize_packet_iq_at(&code, 2.0, 31.0e6, 30.0e6, 0.7, 30.0e6).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(y.re, 2.0 * x.re);
            assert_eq!(y.im, 2.0 * x.im);
        }
    }

    #[test]
    fn packet_energy_invariant_under_phase() {
        let code = test_code(511);
        let energy = |phi: f64| -> f64 {
            synthesize_packet_iq_at(&code, 1.0, 31.0e6, 30.0e6, phi, 30.0e6)
                .unwrap()
                .iter()
                .map(|s| s.norm_sqr() as f64)
                .sum()
        };
        let e0 = energy(0.0);
        let e1 = energy(std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(e0, e1, max_relative = 1e-7);
    }

    #[test]
    fn phase_quadrature_swaps_iq_energy() {
        let code = test_code(255);
        let at = |phi: f64| {
            let p = synthesize_packet_iq_at(&code, 1.0, 30.9e6, 30.0e6, phi, 30.0e6).unwrap();
            let ei: f64 = p.iter().map(|s| (s.re * s.re) as f64).sum();
            let eq: f64 = p.iter().map(|s| (s.im * s.im) as f64).sum();
            (ei, eq)
        };
        let (i0, q0) = at(0.0);
        let (i1, q1) = at(std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(i0, q1, max_relative = 1e-5);
        assert_relative_eq!(q0, i1, max_relative = 1e-5);
    }

    #[test]
    fn spectral_peak_at_clock_residual() {
        // 31 MHz clock downconverted by 30 MHz: the clock component of I/Q
        // sits at 1 MHz. The spreading code smears the raw spectrum across
        // the symbol bandwidth, so the code is stripped first (the packet
        // times its own ±1 envelope), which leaves the bare residual line.
        for (f_clk, expect_hz) in [(31.0e6, 1.0e6), (28.59375e6, -1.40625e6)] {
            let code = test_code(511);
            let packet = synthesize_packet_iq_at(&code, 1.0, f_clk, 30.0e6, 0.3, 30.0e6).unwrap();
            let envelope = symbol_waveform(&code, f_clk, 30.0e6).unwrap();
            let n = packet.len();
            let mut buf: Vec<Complex32> = packet
                .iter()
                .zip(envelope.iter())
                .map(|(&p, &c)| p * c)
                .collect();
            FftPlanner::new().plan_fft_forward(n).process(&mut buf);
            let bin_hz = 30.0e6 / n as f64;
            let (peak_bin, _) = buf
                .iter()
                .enumerate()
                .map(|(i, c)| (i, c.norm()))
                .fold((0, 0.0f32), |acc, x| if x.1 > acc.1 { x } else { acc });
            // Map the upper half of the FFT to negative frequencies.
            let peak_hz = if peak_bin <= n / 2 {
                peak_bin as f64 * bin_hz
            } else {
                (peak_bin as f64 - n as f64) * bin_hz
            };
            assert!(
                (peak_hz - expect_hz).abs() <= bin_hz,
                "peak at {peak_hz} Hz, expected {expect_hz} +/- {bin_hz} Hz"
            );
        }
    }

    #[test]
    fn divider_trajectory_constant() {
        let carrier = CarrierParams::default();
        let model = ClockModel::Divider { ratio: 32 };
        let mut rng = derived(1, Domain::Clock, 0);
        let traj = clock_trajectory(&model, &carrier, 50, &mut rng);
        assert!(traj.iter().all(|&f| f == 915.0e6 / 32.0));
        assert_relative_eq!(traj[0], 28.59375e6, max_relative = 1e-12);
    }

    #[test]
    fn zero_drift_trajectory_constant() {
        let carrier = CarrierParams::default();
        let model = ClockModel::FreeOscillator {
            nominal_hz: 30.0e6,
            drift_ppm: 0.0,
            walk_step_ppm: 0.0,
        };
        let mut rng = derived(1, Domain::Clock, 0);
        let traj = clock_trajectory(&model, &carrier, 20, &mut rng);
        assert!(traj.iter().all(|&f| f == 30.0e6));
    }

    #[test]
    fn oscillator_trajectory_respects_ppm_bound() {
        let carrier = CarrierParams::default();
        let model = ClockModel::FreeOscillator {
            nominal_hz: 30.0e6,
            drift_ppm: 1005.0,
            walk_step_ppm: 400.0,
        };
        let (lo, hi) = (30.0e6 * (1.0 - 1005e-6), 30.0e6 * (1.0 + 1005e-6));
        for node in 0..8u64 {
            let mut rng = derived(9, Domain::Clock, node);
            for f in clock_trajectory(&model, &carrier, 400, &mut rng) {
                assert!((lo..=hi).contains(&f), "{f} outside [{lo}, {hi}]");
            }
        }
    }

    fn test_node(clock: ClockModel) -> NodeProfile {
        NodeProfile {
            node_id: 0,
            code: test_code(511),
            clock,
            a_bck: 1.0,
            composite_gain: 1.0,
            distance_m: 0.05,
            tau_s: 100.0e-6,
        }
    }

    #[test]
    fn empty_event_train_renders_nothing() {
        let node = test_node(ClockModel::Divider { ratio: 32 });
        let events = EventTrain::new(1e-3, &[], 1.0).unwrap();
        let carrier = CarrierParams::default();
        let mut rng = derived(3, Domain::Clock, 0);
        let stream = render_node_stream(&node, &events, &carrier, 30.0e6, &mut rng).unwrap();
        assert_eq!(stream.packet_count(), 0);
    }

    #[test]
    fn render_rejects_packet_longer_than_bin() {
        let mut node = test_node(ClockModel::Divider { ratio: 32 });
        node.code = default_family(13).unwrap().code(5, 8191).unwrap();
        // 8191 symbols at ~9.53 Mbps is ~0.86 ms: fits a 1 ms bin but not
        // half of one.
        let events = EventTrain::new(0.5e-3, &[0], 1.0).unwrap();
        let carrier = CarrierParams::default();
        let mut rng = derived(3, Domain::Clock, 0);
        assert!(matches!(
            render_node_stream(&node, &events, &carrier, 30.0e6, &mut rng),
            Err(Error::PacketExceedsBin { .. })
        ));
    }

    #[test]
    fn packets_fit_inside_millisecond_bin() {
        let node = test_node(ClockModel::FreeOscillator {
            nominal_hz: 30.0e6,
            drift_ppm: 1005.0,
            walk_step_ppm: 250.0,
        });
        let events = EventTrain::new(1e-3, &[0, 5, 17], 0.1).unwrap();
        let carrier = CarrierParams::default();
        let mut rng = derived(3, Domain::Clock, 0);
        let stream = render_node_stream(&node, &events, &carrier, 30.0e6, &mut rng).unwrap();
        assert_eq!(stream.packet_count(), 3);
        for p in &stream.packets {
            assert!(p.samples.len() as f64 / 30.0e6 <= 1e-3);
        }
    }

    #[test]
    fn superpose_two_single_packets_is_exact_sum() {
        let carrier = CarrierParams::default();
        let mut a = test_node(ClockModel::Divider { ratio: 32 });
        a.tau_s = 10.0e-6;
        let mut b = test_node(ClockModel::Divider { ratio: 30 });
        b.node_id = 1;
        b.tau_s = 30.0e-6;
        let events = EventTrain::new(1e-3, &[0], 1e-3).unwrap();
        let mut rng = derived(3, Domain::Clock, 0);
        let sa = render_node_stream(&a, &events, &carrier, 30.0e6, &mut rng).unwrap();
        let sb = render_node_stream(&b, &events, &carrier, 30.0e6, &mut rng).unwrap();

        let both = superpose(&[sa.clone(), sb.clone()], None, 1e-3, 30.0e6, 0);
        let only_a = superpose(&[sa], None, 1e-3, 30.0e6, 0);
        let only_b = superpose(&[sb], None, 1e-3, 30.0e6, 0);
        for i in 0..both.len() {
            assert_eq!(both.samples[i], only_a.samples[i] + only_b.samples[i]);
        }
    }

    #[test]
    fn noise_only_stream_hits_the_configured_floor() {
        // No streams, floor at -75.75 dBm: measured mean power within
        // 0.5 dB.
        let out = superpose(&[], Some(-75.75), 20.0e-3, 30.0e6, 42);
        assert!((out.mean_power_dbm() - (-75.75)).abs() < 0.5);
    }

    #[test]
    fn superpose_is_seed_deterministic() {
        let a = superpose(&[], Some(-70.0), 1.0e-3, 30.0e6, 7);
        let b = superpose(&[], Some(-70.0), 1.0e-3, 30.0e6, 7);
        assert_eq!(a.samples, b.samples);
        let c = superpose(&[], Some(-70.0), 1.0e-3, 30.0e6, 8);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn quantizer_is_idempotent_and_bounded() {
        let code = test_code(127);
        let samples = synthesize_packet_iq_at(&code, 0.8, 31.0e6, 30.0e6, 0.2, 30.0e6).unwrap();
        let stream = IqStream {
            samples,
            sample_rate_hz: 30.0e6,
            noise_floor_dbm: None,
            quant_bits: None,
        };
        let q1 = adc_quantize(&stream, 12).unwrap();
        let q2 = adc_quantize(&q1, 12).unwrap();
        assert_eq!(q1.samples, q2.samples);
        assert_eq!(q1.quant_bits, Some(12));

        let full_scale = stream.samples.iter().map(|s| s.norm()).fold(0.0, f32::max);
        let step = full_scale / ((1u32 << 11) - 1) as f32;
        for (orig, q) in stream.samples.iter().zip(q1.samples.iter()) {
            assert!((orig.re - q.re).abs() <= step / 2.0 + f32::EPSILON);
            assert!((orig.im - q.im).abs() <= step / 2.0 + f32::EPSILON);
        }
    }

    #[test]
    fn quantizer_rejects_out_of_range_depth() {
        let stream = IqStream {
            samples: vec![],
            sample_rate_hz: 1.0,
            noise_floor_dbm: None,
            quant_bits: None,
        };
        assert!(adc_quantize(&stream, 3).is_err());
        assert!(adc_quantize(&stream, 17).is_err());
    }

    #[test]
    fn rssi_chain_reference_values() {
        assert_relative_eq!(rssi_chain(24.0, -36.375, -24.0), -72.75);
        assert_relative_eq!(rssi_chain(24.0, -29.0, -24.0), -58.0);
        assert_relative_eq!(rssi_chain(10.0, 0.0, 0.0), 10.0);
    }

    #[test]
    fn snr_reference_values() {
        assert_relative_eq!(snr_of(-72.75, -75.75), 3.0);
        assert_relative_eq!(snr_of(-74.45, -75.75), 1.3, max_relative = 1e-12);
        assert_relative_eq!(snr_of(-60.0, -60.0), 0.0);
    }
}
