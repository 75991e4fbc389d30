//! Chunked overlap-save correlation engine behind the filter banks.
//!
//! For one clock candidate the bank's phase variants are linear
//! combinations of two base kernels, `kc = c*cos(beta)` and
//! `ks = c*sin(beta)` (`c` the coded symbol envelope, `beta` the residual
//! rotation at phase variant 0). Each input chunk therefore costs one
//! forward FFT shared across the whole bank plus two inverse FFTs per clock
//! candidate; the per-variant I/Q products reduce algebraically to
//! `Im(conj(U) * V)` when the phase grid is uniform over pi.
//!
//! Output windows overlap by two samples so local-maximum tests always see
//! both neighbours; chunks whose input is entirely zero are skipped when the
//! stream is known noise-free, which makes sparse single-node streams cheap.

use num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::codes::SpreadingCode;
use crate::phy;
use crate::{Error, Result};

/// Per-clock-candidate kernels: time domain for point evaluation, frequency
/// domain (conjugated, 1/N scaled) for chunked correlation.
pub(crate) struct ClockKernels {
    pub f_clk_hz: f64,
    pub n_ref: usize,
    /// `1 / sum(kc^2 + ks^2)`: joint unit-energy normalization.
    pub inv_energy: f32,
    kc_time: Vec<f32>,
    ks_time: Vec<f32>,
    kc_spec: Vec<Complex32>,
    ks_spec: Vec<Complex32>,
}

/// How phase variants combine into the bank output.
enum PhaseCombine {
    /// Uniform grid over pi with at least two points: the per-variant
    /// product sum collapses to `(n/2) * Im(U * conj(V))`.
    EvenGrid { factor: f32 },
    /// Explicit `(cos, sin)` pairs.
    Explicit(Vec<(f32, f32)>),
}

/// One retained chunk of combined output.
pub(crate) struct ChunkWindow {
    /// Global index of `values[0]`.
    pub start: usize,
    /// `step + 2` combined samples (truncated at the stream tail); the
    /// chunk owns candidates at window offsets `1..=step`.
    pub values: Vec<f32>,
}

/// Whole-stream correlation summary.
pub(crate) struct ProcessOutput {
    pub n_out: usize,
    pub sumsq: f64,
    pub peak: f32,
    pub argmax: usize,
    /// Non-zero chunk windows in order; all-zero chunks are omitted.
    pub windows: Vec<ChunkWindow>,
}

/// Per-clock-candidate scan result (no windows retained).
#[derive(Debug, Clone, Copy)]
pub(crate) struct ClockScan {
    pub f_clk_hz: f64,
    pub peak: f32,
    pub argmax: usize,
    pub sumsq: f64,
}

pub(crate) struct Engine {
    pub chunk_len: usize,
    pub step: usize,
    pub n_ref_max: usize,
    fwd: Arc<dyn Fft<f32>>,
    inv: Arc<dyn Fft<f32>>,
    pub clocks: Vec<ClockKernels>,
    combine: PhaseCombine,
}

/// True when `phases` is the uniform grid `k * pi / n` with `n >= 2`.
fn is_even_grid(phases: &[f64]) -> bool {
    let n = phases.len();
    if n < 2 {
        return false;
    }
    phases
        .iter()
        .enumerate()
        .all(|(k, &p)| (p - k as f64 * std::f64::consts::PI / n as f64).abs() < 1e-12)
}

impl Engine {
    pub fn new(
        code: &SpreadingCode,
        f_dc_hz: f64,
        sample_rate_hz: f64,
        clock_points_hz: &[f64],
        phases_rad: &[f64],
    ) -> Result<Self> {
        if clock_points_hz.is_empty() || phases_rad.is_empty() {
            return Err(Error::InvalidParam(
                "bank needs at least one clock point and one phase".into(),
            ));
        }
        let mut n_ref_max = 0;
        for &f in clock_points_hz {
            n_ref_max = n_ref_max.max(phy::encoded_len(code.len(), f, sample_rate_hz));
        }
        let chunk_len = (4 * n_ref_max).next_power_of_two().clamp(8192, 1 << 19);
        if chunk_len < n_ref_max + 2 {
            return Err(Error::InvalidParam(format!(
                "reference of {n_ref_max} samples too long for the correlation engine"
            )));
        }
        let step = chunk_len - n_ref_max - 1;

        let mut planner = FftPlanner::<f32>::new();
        let fwd = planner.plan_fft_forward(chunk_len);
        let inv = planner.plan_fft_inverse(chunk_len);

        let scale = 1.0 / chunk_len as f32;
        let mut scratch =
            vec![Complex32::default(); fwd.get_inplace_scratch_len().max(chunk_len)];
        let mut clocks = Vec::with_capacity(clock_points_hz.len());
        for &f_clk in clock_points_hz {
            let envelope = phy::symbol_waveform(code, f_clk, sample_rate_hz)?;
            let n_ref = envelope.len();
            let cycles_per_sample = (f_clk - f_dc_hz) / sample_rate_hz;
            let mut kc_time = Vec::with_capacity(n_ref);
            let mut ks_time = Vec::with_capacity(n_ref);
            let mut energy = 0.0f64;
            for (v, &c) in envelope.iter().enumerate() {
                let beta = std::f64::consts::TAU * (v as f64 * cycles_per_sample);
                let kc = c as f64 * beta.cos();
                let ks = c as f64 * beta.sin();
                energy += kc * kc + ks * ks;
                kc_time.push(kc as f32);
                ks_time.push(ks as f32);
            }
            // Conjugated spectra pre-scaled by 1/N: ifft(Z * spec) is then
            // the plain cross-correlation.
            let mut kc_spec = vec![Complex32::default(); chunk_len];
            for (dst, &k) in kc_spec.iter_mut().zip(kc_time.iter()) {
                *dst = Complex32::new(k, 0.0);
            }
            fwd.process_with_scratch(&mut kc_spec, &mut scratch);
            for c in kc_spec.iter_mut() {
                *c = c.conj() * scale;
            }
            let mut ks_spec = vec![Complex32::default(); chunk_len];
            for (dst, &k) in ks_spec.iter_mut().zip(ks_time.iter()) {
                *dst = Complex32::new(k, 0.0);
            }
            fwd.process_with_scratch(&mut ks_spec, &mut scratch);
            for c in ks_spec.iter_mut() {
                *c = c.conj() * scale;
            }
            clocks.push(ClockKernels {
                f_clk_hz: f_clk,
                n_ref,
                inv_energy: (1.0 / energy) as f32,
                kc_time,
                ks_time,
                kc_spec,
                ks_spec,
            });
        }

        let combine = if is_even_grid(phases_rad) {
            PhaseCombine::EvenGrid {
                factor: phases_rad.len() as f32 / 2.0,
            }
        } else {
            PhaseCombine::Explicit(
                phases_rad
                    .iter()
                    .map(|&p| (p.cos() as f32, p.sin() as f32))
                    .collect(),
            )
        };

        Ok(Self {
            chunk_len,
            step,
            n_ref_max,
            fwd,
            inv,
            clocks,
            combine,
        })
    }

    /// Combined-output length for an input of `len` samples.
    pub fn output_len(&self, len: usize) -> Result<usize> {
        if len < self.n_ref_max {
            return Err(Error::StreamTooShort {
                stream_len: len,
                filter_len: self.n_ref_max,
            });
        }
        Ok(len - self.n_ref_max + 1)
    }

    fn n_chunks(&self, n_out: usize) -> usize {
        n_out.div_ceil(self.step)
    }

    /// Accumulate one clock candidate's combined contribution over a chunk.
    fn combine_into(
        &self,
        out: &mut [f32],
        u: &[Complex32],
        v: &[Complex32],
        inv_energy: f32,
    ) {
        match &self.combine {
            PhaseCombine::EvenGrid { factor } => {
                let g = factor * inv_energy;
                for (o, (a, b)) in out.iter_mut().zip(u.iter().zip(v.iter())) {
                    // Im(conj(U) * V) = Re(U)*Im(V) - Im(U)*Re(V)
                    *o += g * (a.re * b.im - a.im * b.re);
                }
            }
            PhaseCombine::Explicit(pairs) => {
                for (o, (a, b)) in out.iter_mut().zip(u.iter().zip(v.iter())) {
                    let mut acc = 0.0f32;
                    for &(cp, sp) in pairs {
                        let ci = cp * a.re + sp * b.re;
                        let cq = cp * b.im - sp * a.im;
                        acc += ci * cq;
                    }
                    *o += acc * inv_energy;
                }
            }
        }
    }

    /// Compute one chunk's combined window. Returns `None` for an all-zero
    /// input chunk when `sparse_skip` is set.
    fn compute_chunk(&self, samples: &[Complex32], chunk: usize, sparse_skip: bool) -> Option<Vec<f32>> {
        let n_out = samples.len() - self.n_ref_max + 1;
        let a = chunk * self.step;
        let window_len = (self.step + 2).min(n_out - a);
        let have = samples.len().saturating_sub(a).min(self.chunk_len);

        if sparse_skip
            && samples[a..a + have]
                .iter()
                .all(|c| c.re == 0.0 && c.im == 0.0)
        {
            return None;
        }

        let mut z = vec![Complex32::default(); self.chunk_len];
        z[..have].copy_from_slice(&samples[a..a + have]);
        let mut scratch =
            vec![Complex32::default(); self.fwd.get_inplace_scratch_len().max(self.chunk_len)];
        self.fwd.process_with_scratch(&mut z, &mut scratch);

        let mut out = vec![0.0f32; window_len];
        let mut u = vec![Complex32::default(); self.chunk_len];
        let mut v = vec![Complex32::default(); self.chunk_len];
        for ck in &self.clocks {
            for i in 0..self.chunk_len {
                u[i] = z[i] * ck.kc_spec[i];
            }
            self.inv.process_with_scratch(&mut u, &mut scratch);
            for i in 0..self.chunk_len {
                v[i] = z[i] * ck.ks_spec[i];
            }
            self.inv.process_with_scratch(&mut v, &mut scratch);
            self.combine_into(&mut out, &u[..window_len], &v[..window_len], ck.inv_energy);
        }
        Some(out)
    }

    /// Run the bank over the stream, retaining non-zero windows.
    pub fn process(&self, samples: &[Complex32], sparse_skip: bool) -> Result<ProcessOutput> {
        let n_out = self.output_len(samples.len())?;
        let n_chunks = self.n_chunks(n_out);

        let computed: Vec<Option<Vec<f32>>> = crate::par::map_range(n_chunks, |i| {
            self.compute_chunk(samples, i, sparse_skip)
        });

        let mut windows = Vec::new();
        let mut sumsq = 0.0f64;
        let mut peak = f32::NEG_INFINITY;
        let mut argmax = 0usize;
        for (i, vals) in computed.into_iter().enumerate() {
            let Some(values) = vals else { continue };
            let start = i * self.step;
            // Owned range for stats: the first `step` samples (window holds
            // two extra for neighbour context).
            let owned = self.step.min(n_out - start);
            for (k, &x) in values[..owned].iter().enumerate() {
                sumsq += (x as f64) * (x as f64);
                if x > peak {
                    peak = x;
                    argmax = start + k;
                }
            }
            windows.push(ChunkWindow { start, values });
        }
        if peak == f32::NEG_INFINITY {
            peak = 0.0; // fully sparse stream
        }
        Ok(ProcessOutput {
            n_out,
            sumsq,
            peak,
            argmax,
            windows,
        })
    }

    /// Scan per clock candidate: peak, argmax, and sum of squares of each
    /// candidate's own combined series (one pass, forward FFTs shared).
    pub fn scan_per_clock(&self, samples: &[Complex32], sparse_skip: bool) -> Result<Vec<ClockScan>> {
        let n_out = self.output_len(samples.len())?;
        let n_chunks = self.n_chunks(n_out);

        type Partial = Vec<(f32, usize, f64)>;
        let partials: Vec<Option<Partial>> = crate::par::map_range(n_chunks, |i| {
            let a = i * self.step;
            let have = samples.len().saturating_sub(a).min(self.chunk_len);
            if sparse_skip
                && samples[a..a + have]
                    .iter()
                    .all(|c| c.re == 0.0 && c.im == 0.0)
            {
                return None;
            }
            let owned = self.step.min(n_out - a);
            let mut z = vec![Complex32::default(); self.chunk_len];
            z[..have].copy_from_slice(&samples[a..a + have]);
            let mut scratch = vec![
                Complex32::default();
                self.fwd.get_inplace_scratch_len().max(self.chunk_len)
            ];
            self.fwd.process_with_scratch(&mut z, &mut scratch);

            let mut u = vec![Complex32::default(); self.chunk_len];
            let mut v = vec![Complex32::default(); self.chunk_len];
            let mut out = vec![0.0f32; owned];
            let mut partial: Partial = Vec::with_capacity(self.clocks.len());
            for ck in &self.clocks {
                for x in out.iter_mut() {
                    *x = 0.0;
                }
                for i in 0..self.chunk_len {
                    u[i] = z[i] * ck.kc_spec[i];
                }
                self.inv.process_with_scratch(&mut u, &mut scratch);
                for i in 0..self.chunk_len {
                    v[i] = z[i] * ck.ks_spec[i];
                }
                self.inv.process_with_scratch(&mut v, &mut scratch);
                self.combine_into(&mut out, &u[..owned], &v[..owned], ck.inv_energy);

                let mut pk = f32::NEG_INFINITY;
                let mut am = 0usize;
                let mut ss = 0.0f64;
                for (k, &x) in out.iter().enumerate() {
                    ss += (x as f64) * (x as f64);
                    if x > pk {
                        pk = x;
                        am = a + k;
                    }
                }
                partial.push((pk, am, ss));
            }
            Some(partial)
        });

        let mut scans: Vec<ClockScan> = self
            .clocks
            .iter()
            .map(|ck| ClockScan {
                f_clk_hz: ck.f_clk_hz,
                peak: 0.0,
                argmax: 0,
                sumsq: 0.0,
            })
            .collect();
        let mut any = vec![false; scans.len()];
        for partial in partials.into_iter().flatten() {
            for (c, (pk, am, ss)) in partial.into_iter().enumerate() {
                scans[c].sumsq += ss;
                if !any[c] || pk > scans[c].peak {
                    scans[c].peak = pk;
                    scans[c].argmax = am;
                    any[c] = true;
                }
            }
        }
        for (c, seen) in any.iter().enumerate() {
            if !seen {
                scans[c].peak = 0.0;
            }
        }
        Ok(scans)
    }

    /// Evaluate the combined output at one position by direct summation
    /// (used by discrete-timing detection and score attribution).
    pub fn eval_at(&self, samples: &[Complex32], pos: usize) -> f32 {
        let mut total = 0.0f32;
        for ck in &self.clocks {
            let (u, v) = self.correlate_point(samples, pos, ck);
            total += self.combine_point(u, v, ck.inv_energy);
        }
        total
    }

    /// Per-filter products at one position, ordered clock-major then phase,
    /// matching `FilterBank::filters` order.
    pub fn filter_products_at(&self, samples: &[Complex32], pos: usize, phases: &[f64]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.clocks.len() * phases.len());
        for ck in &self.clocks {
            let (u, v) = self.correlate_point(samples, pos, ck);
            for &p in phases {
                let (cp, sp) = (p.cos() as f32, p.sin() as f32);
                let ci = cp * u.re + sp * v.re;
                let cq = cp * v.im - sp * u.im;
                out.push(ci * cq * ck.inv_energy);
            }
        }
        out
    }

    fn correlate_point(
        &self,
        samples: &[Complex32],
        pos: usize,
        ck: &ClockKernels,
    ) -> (Complex32, Complex32) {
        let n = ck.n_ref.min(samples.len().saturating_sub(pos));
        let z = &samples[pos..pos + n];
        let (mut ur, mut ui, mut vr, mut vi) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
        for i in 0..n {
            let s = z[i];
            let kc = ck.kc_time[i];
            let ks = ck.ks_time[i];
            ur += s.re * kc;
            ui += s.im * kc;
            vr += s.re * ks;
            vi += s.im * ks;
        }
        (Complex32::new(ur, ui), Complex32::new(vr, vi))
    }

    fn combine_point(&self, u: Complex32, v: Complex32, inv_energy: f32) -> f32 {
        match &self.combine {
            PhaseCombine::EvenGrid { factor } => {
                factor * inv_energy * (u.re * v.im - u.im * v.re)
            }
            PhaseCombine::Explicit(pairs) => {
                let mut acc = 0.0f32;
                for &(cp, sp) in pairs {
                    let ci = cp * u.re + sp * v.re;
                    let cq = cp * v.im - sp * u.im;
                    acc += ci * cq;
                }
                acc * inv_energy
            }
        }
    }
}

impl ProcessOutput {
    /// Root-mean-square of the combined series (zero chunks included).
    pub fn rms(&self) -> f32 {
        if self.n_out == 0 {
            return 0.0;
        }
        ((self.sumsq / self.n_out as f64).sqrt()) as f32
    }

    /// Assemble the full combined series.
    pub fn to_series(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.n_out];
        for w in &self.windows {
            // Windows overlap by two samples; owned values win, and they
            // are identical where windows agree.
            let n = w.values.len().min(self.n_out - w.start);
            out[w.start..w.start + n].copy_from_slice(&w.values[..n]);
        }
        out
    }

    /// Local maxima strictly above `threshold`: value greater than the left
    /// neighbour and at least the right neighbour (missing neighbours count
    /// as minus infinity). Returned in position order.
    pub fn candidates_above(&self, threshold: f32, step: usize) -> Vec<(usize, f32)> {
        let mut out = Vec::new();
        for w in &self.windows {
            let vals = &w.values;
            // Window offset 0 is owned by the previous window except at the
            // very start of the stream.
            if w.start == 0 && !vals.is_empty() {
                let x = vals[0];
                let right = vals.get(1).copied().unwrap_or(f32::NEG_INFINITY);
                if x > threshold && x >= right {
                    out.push((0, x));
                }
            }
            let hi = step.min(vals.len().saturating_sub(1));
            for k in 1..=hi {
                let x = vals[k];
                if x <= threshold || x <= vals[k - 1] {
                    continue;
                }
                let right = vals.get(k + 1).copied().unwrap_or(f32::NEG_INFINITY);
                if x >= right {
                    out.push((w.start + k, x));
                }
            }
        }
        out
    }

}
