//! Maximal-length and Gold spreading sequences.
//!
//! A Gold family is built from a preferred pair of maximal-length (ML)
//! sequences of equal degree `m`: the element-wise product (XOR in the bit
//! domain) of the first sequence with cyclic shifts of the second yields
//! `2^m - 1` codes, and together with the two bare ML sequences the family
//! holds `2^m + 1` members. Preferred pairs are admitted only after an
//! exhaustive three-valued cross-correlation check, so every shipped family
//! carries the bounded-interference guarantee by construction.
//!
//! Chips are kept in the ±1 domain throughout: bit 0 maps to +1 and bit 1
//! to -1, which makes correlation a plain integer dot product.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default preferred pairs per degree, each admitted by
/// [`verify_preferred_pair`] in the test suite. Taps are the nonzero
/// exponents of the feedback polynomial (the degree itself included).
const DEFAULT_PAIRS: [(u32, &[u32], &[u32]); 4] = [
    (5, &[5, 2], &[5, 4, 3, 2]),
    (7, &[7, 3], &[7, 3, 2, 1]),
    (9, &[9, 4], &[9, 6, 4, 3]),
    (13, &[13, 4, 3, 1], &[13, 10, 9, 7, 5, 4]),
];

/// Degrees with a shipped default family.
pub const DEFAULT_DEGREES: [u32; 4] = [5, 7, 9, 13];

/// A Fibonacci LFSR: feedback polynomial taps plus a nonzero start state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LfsrSpec {
    /// Register length `m`; the generated period is `2^m - 1`.
    pub degree: u32,
    /// Nonzero exponents of the feedback polynomial. Must contain `degree`.
    pub taps: Vec<u32>,
    /// Initial register fill, bit `i` seeding sequence element `i`.
    pub state0: u64,
}

impl LfsrSpec {
    pub fn new(degree: u32, taps: &[u32], state0: u64) -> Result<Self> {
        if !(3..=24).contains(&degree) {
            return Err(Error::InvalidLfsr(format!(
                "degree {degree} outside supported range [3, 24]"
            )));
        }
        if state0 == 0 {
            return Err(Error::ZeroInitialState);
        }
        if state0 >= 1 << degree {
            return Err(Error::InvalidLfsr(format!(
                "state0 {state0:#x} wider than {degree} bits"
            )));
        }
        let mut taps = taps.to_vec();
        taps.sort_unstable();
        taps.dedup();
        if !taps.contains(&degree) || taps.iter().any(|&t| t == 0 || t > degree) {
            return Err(Error::InvalidLfsr(format!(
                "taps {taps:?} must lie in [1, {degree}] and include {degree}"
            )));
        }
        Ok(Self { degree, taps, state0 })
    }

    /// Full sequence period `2^m - 1` (when the taps are primitive).
    pub fn period(&self) -> usize {
        (1usize << self.degree) - 1
    }
}

/// One period of the ML sequence as ±1 chips (bit 0 → +1, bit 1 → -1).
///
/// The taps are validated by running the register for a full period and
/// checking that the state returns to the start exactly then: a shorter
/// cycle means the polynomial is not primitive and the spec is rejected.
pub fn ml_sequence(spec: &LfsrSpec) -> Result<Vec<i8>> {
    let bits = ml_bits(spec)?;
    Ok(bits.iter().map(|&b| if b == 0 { 1 } else { -1 }).collect())
}

/// One period of the raw bit sequence.
fn ml_bits(spec: &LfsrSpec) -> Result<Vec<u8>> {
    if spec.state0 == 0 {
        return Err(Error::ZeroInitialState);
    }
    let m = spec.degree as usize;
    let period = spec.period();
    // s[n + m] = s[n] xor s[n + e] for every mid tap e; the degree tap is
    // the s[n] term.
    let low_taps: Vec<usize> = spec
        .taps
        .iter()
        .filter(|&&t| t != spec.degree)
        .map(|&t| t as usize)
        .collect();

    let mut s = Vec::with_capacity(period + m);
    for i in 0..m {
        s.push(((spec.state0 >> i) & 1) as u8);
    }
    for n in 0..period {
        let mut next = s[n];
        for &e in &low_taps {
            next ^= s[n + e];
        }
        s.push(next);
    }
    // Exact-period check: the register must first return to its start state
    // after 2^m - 1 steps. Any earlier return shows up as a mismatch here
    // combined with the cycle-detection scan below.
    if s[period..period + m] != s[..m] {
        return Err(non_primitive(spec, &s, period, m));
    }
    // Guard against divisor-length cycles that still line up at `period`.
    for d in divisors(period) {
        if d < period && s[d..d + m] == s[..m] {
            return Err(Error::NonPrimitiveTaps {
                degree: spec.degree,
                observed: d,
                expected: period,
            });
        }
    }
    s.truncate(period);
    Ok(s)
}

fn non_primitive(spec: &LfsrSpec, s: &[u8], period: usize, m: usize) -> Error {
    // Find the actual cycle length for the error message.
    let observed = (1..period)
        .find(|&d| s[d..d + m] == s[..m])
        .unwrap_or(period);
    Error::NonPrimitiveTaps {
        degree: spec.degree,
        observed,
        expected: period,
    }
}

fn divisors(n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n % d == 0 {
            out.push(d);
            out.push(n / d);
        }
        d += 1;
    }
    out.sort_unstable();
    out
}

/// Cyclic correlation `sum_i a[i] * b[(i + lag) mod L]` of ±1 chips.
pub fn periodic_correlation(a: &[i8], b: &[i8], lag: i64) -> Result<i64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::InvalidParam("empty sequences".into()));
    }
    let n = a.len();
    let shift = lag.rem_euclid(n as i64) as usize;
    let mut acc: i64 = 0;
    for i in 0..n {
        let j = i + shift;
        let j = if j >= n { j - n } else { j };
        acc += (a[i] as i64) * (b[j] as i64);
    }
    Ok(acc)
}

/// Every cyclic cross-correlation value of the pair's full-period sequences.
fn correlation_spectrum(a: &[i8], b: &[i8]) -> BTreeSet<i64> {
    let n = a.len();
    // Doubled copy avoids the modulo in the hot loop.
    let mut b2 = Vec::with_capacity(2 * n);
    b2.extend_from_slice(b);
    b2.extend_from_slice(b);
    let values = crate::par::map_range(n, |lag| {
        let mut acc: i64 = 0;
        for i in 0..n {
            acc += (a[i] as i64) * (b2[i + lag] as i64);
        }
        acc
    });
    values.into_iter().collect()
}

/// Check the three-valued cross-correlation property of a candidate pair.
///
/// For odd degree `m` a preferred pair takes only the values
/// `{-1, -(2^((m+1)/2) + 1), 2^((m+1)/2) - 1}` over all lags. The observed
/// value set is returned alongside the verdict so failed candidates can be
/// inspected.
pub fn verify_preferred_pair(
    first: &LfsrSpec,
    second: &LfsrSpec,
) -> Result<(bool, BTreeSet<i64>)> {
    if first.degree != second.degree {
        return Err(Error::DegreeMismatch(first.degree, second.degree));
    }
    let a = ml_sequence(first)?;
    let b = ml_sequence(second)?;
    let observed = correlation_spectrum(&a, &b);
    Ok((observed.is_subset(&preferred_values(first.degree)), observed))
}

/// The admissible value set for degree `m` (odd-degree bound).
pub fn preferred_values(degree: u32) -> BTreeSet<i64> {
    let t = (1i64 << ((degree as i64 + 1) / 2)) + 1;
    [-1, -t, t - 2].into_iter().collect()
}

/// A verified preferred pair and its cached full-period sequences.
#[derive(Debug, Clone)]
pub struct GoldFamily {
    first: LfsrSpec,
    second: LfsrSpec,
    seq_first: Vec<i8>,
    seq_second: Vec<i8>,
}

impl GoldFamily {
    /// Build a family from a candidate pair, verifying the three-valued
    /// cross-correlation property exhaustively.
    pub fn new(first: LfsrSpec, second: LfsrSpec) -> Result<Self> {
        let (ok, observed) = verify_preferred_pair(&first, &second)?;
        if !ok {
            return Err(Error::NotPreferredPair(observed.into_iter().collect()));
        }
        let seq_first = ml_sequence(&first)?;
        let seq_second = ml_sequence(&second)?;
        Ok(Self {
            first,
            second,
            seq_first,
            seq_second,
        })
    }

    pub fn degree(&self) -> u32 {
        self.first.degree
    }

    /// Sequence period `2^m - 1`.
    pub fn period(&self) -> usize {
        self.first.period()
    }

    /// `2^m + 1` codes: one per cyclic shift of the second register plus the
    /// two bare ML sequences.
    pub fn family_size(&self) -> usize {
        (1usize << self.degree()) + 1
    }

    /// Largest valid seed (`2^m`).
    pub fn max_seed(&self) -> u32 {
        1 << self.degree()
    }

    pub fn specs(&self) -> (&LfsrSpec, &LfsrSpec) {
        (&self.first, &self.second)
    }

    /// Generate the family member for `seed`, truncated to `length` chips.
    ///
    /// Seeds `0 ..= 2^m - 2` select the cyclic shift of the second register;
    /// the two top seed values are reserved for the bare ML sequences
    /// (`2^m - 1` → first register, `2^m` → second register), completing the
    /// family of `2^m + 1`.
    pub fn code(&self, seed: u32, length: usize) -> Result<SpreadingCode> {
        let period = self.period();
        if length == 0 || length > period {
            return Err(Error::LengthExceedsPeriod { length, period });
        }
        if seed > self.max_seed() {
            return Err(Error::SeedOutOfRange {
                seed,
                max: self.max_seed(),
            });
        }
        let chips: Vec<i8> = if seed as usize == period {
            self.seq_first[..length].to_vec()
        } else if seed == self.max_seed() {
            self.seq_second[..length].to_vec()
        } else {
            let shift = seed as usize;
            (0..length)
                .map(|i| {
                    let j = (i + shift) % period;
                    self.seq_first[i] * self.seq_second[j]
                })
                .collect()
        };
        Ok(SpreadingCode {
            chips,
            degree: self.degree(),
            seed,
            taps_first: self.first.taps.clone(),
            taps_second: self.second.taps.clone(),
        })
    }
}

/// The shipped family for `degree`, built once and cached.
pub fn default_family(degree: u32) -> Result<Arc<GoldFamily>> {
    static CACHE: OnceLock<Mutex<Vec<(u32, Arc<GoldFamily>)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(Vec::new()));
    {
        let guard = cache.lock().unwrap();
        if let Some((_, fam)) = guard.iter().find(|(d, _)| *d == degree) {
            return Ok(fam.clone());
        }
    }
    let (_, taps1, taps2) = DEFAULT_PAIRS
        .iter()
        .find(|(d, _, _)| *d == degree)
        .ok_or_else(|| {
            Error::InvalidParam(format!(
                "no default family for degree {degree}; shipped degrees: {DEFAULT_DEGREES:?}"
            ))
        })?;
    let fam = Arc::new(GoldFamily::new(
        LfsrSpec::new(degree, taps1, 1)?,
        LfsrSpec::new(degree, taps2, 1)?,
    )?);
    cache.lock().unwrap().push((degree, fam.clone()));
    Ok(fam)
}

/// A ±1 chip sequence with the metadata needed to regenerate it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpreadingCode {
    chips: Vec<i8>,
    degree: u32,
    seed: u32,
    taps_first: Vec<u32>,
    taps_second: Vec<u32>,
}

impl SpreadingCode {
    pub fn chips(&self) -> &[i8] {
        &self.chips
    }

    pub fn len(&self) -> usize {
        self.chips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chips.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn seed(&self) -> u32 {
        self.seed
    }

    pub fn taps(&self) -> (&[u32], &[u32]) {
        (&self.taps_first, &self.taps_second)
    }

    /// The leading `length` chips as a code of their own (same family and
    /// seed metadata). Longer requests return the code unchanged.
    pub fn truncated(&self, length: usize) -> SpreadingCode {
        let mut out = self.clone();
        out.chips.truncate(length.max(1));
        out
    }
}
