//! Reduced-precision binary floating point formats.
//!
//! A [`FloatFormat`] is an IEEE-style layout with a configurable number of
//! exponent and stored mantissa bits: sign, biased exponent, subnormals,
//! signed zeros, infinities and NaN. Values are carried as `f64`; a value
//! "belongs" to a format when it is exactly one of the format's representable
//! numbers. All rounding is computed from the exact `f64` input, so results are
//! bit-exact and platform independent.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Binary floating point layout `E<exponent_bits>M<mantissa_bits>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FloatFormat {
    exponent_bits: u32,
    mantissa_bits: u32,
}

/// How an operator output is mapped back onto a format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundingMode {
    NearestTiesToEven,
    Stochastic,
}

/// A rounding mode bound to its randomness source.
///
/// Stochastic rounding cannot be requested without a stream, so the
/// "rng present iff stochastic" precondition holds by construction.
#[derive(Debug)]
pub enum Rounding<'a> {
    Nearest,
    Stochastic(&'a mut RngStream),
}

impl Rounding<'_> {
    pub fn mode(&self) -> RoundingMode {
        match self {
            Rounding::Nearest => RoundingMode::NearestTiesToEven,
            Rounding::Stochastic(_) => RoundingMode::Stochastic,
        }
    }

    /// Rounds `x` into `fmt`. Nearest follows IEEE overflow to infinity,
    /// stochastic rounding rejects out-of-range input.
    pub fn round(&mut self, x: f64, fmt: FloatFormat) -> Result<f64> {
        match self {
            Rounding::Nearest => Ok(fmt.round_nearest(x)),
            Rounding::Stochastic(rng) => fmt.round_stochastic(x, rng),
        }
    }

    /// Reborrows, so one `Rounding` can be threaded through several calls.
    pub fn reborrow(&mut self) -> Rounding<'_> {
        match self {
            Rounding::Nearest => Rounding::Nearest,
            Rounding::Stochastic(rng) => Rounding::Stochastic(rng),
        }
    }
}

pub const MIN_EXPONENT_BITS: u32 = 2;
pub const MAX_EXPONENT_BITS: u32 = 11;
pub const MIN_MANTISSA_BITS: u32 = 1;
pub const MAX_MANTISSA_BITS: u32 = 52;

impl FloatFormat {
    /// BFloat16.
    pub const BF16: Self = Self::raw(8, 7);
    /// IEEE binary16.
    pub const FP16: Self = Self::raw(5, 10);
    pub const E8M5: Self = Self::raw(8, 5);
    pub const E8M3: Self = Self::raw(8, 3);
    pub const E8M1: Self = Self::raw(8, 1);
    /// IEEE binary32; rounding into it matches `as f32` exactly.
    pub const FP32: Self = Self::raw(8, 23);
    /// IEEE binary64; rounding into it is the identity.
    pub const FP64: Self = Self::raw(11, 52);

    const fn raw(exponent_bits: u32, mantissa_bits: u32) -> Self {
        Self {
            exponent_bits,
            mantissa_bits,
        }
    }

    pub fn new(exponent_bits: u32, mantissa_bits: u32) -> Result<Self> {
        let fmt = Self::raw(exponent_bits, mantissa_bits);
        if !(MIN_EXPONENT_BITS..=MAX_EXPONENT_BITS).contains(&exponent_bits) {
            return Err(Error::InvalidFormat(format!(
                "{fmt}: exponent bits must be in {MIN_EXPONENT_BITS}..={MAX_EXPONENT_BITS}"
            )));
        }
        if !(MIN_MANTISSA_BITS..=MAX_MANTISSA_BITS).contains(&mantissa_bits) {
            return Err(Error::InvalidFormat(format!(
                "{fmt}: mantissa bits must be in {MIN_MANTISSA_BITS}..={MAX_MANTISSA_BITS}"
            )));
        }
        Ok(fmt)
    }

    pub fn presets() -> [Self; 7] {
        [
            Self::BF16,
            Self::FP16,
            Self::E8M5,
            Self::E8M3,
            Self::E8M1,
            Self::FP32,
            Self::FP64,
        ]
    }

    pub fn exponent_bits(self) -> u32 {
        self.exponent_bits
    }

    pub fn mantissa_bits(self) -> u32 {
        self.mantissa_bits
    }

    /// Total storage width in bits.
    pub fn width(self) -> u32 {
        1 + self.exponent_bits + self.mantissa_bits
    }

    pub fn bias(self) -> i32 {
        (1 << (self.exponent_bits - 1)) - 1
    }

    /// Exponent of the smallest normal binade.
    pub fn min_exponent(self) -> i32 {
        1 - self.bias()
    }

    /// Exponent of the largest finite binade.
    pub fn max_exponent(self) -> i32 {
        self.bias()
    }

    /// `2^-(mantissa_bits+1)`: the largest ε with `ε|u| <= |u-v| <= 2ε|u|`
    /// for adjacent normals `u`, `v`, and the unit roundoff of nearest rounding.
    pub fn machine_epsilon(self) -> f64 {
        pow2(-(self.mantissa_bits as i32) - 1)
    }

    pub fn max_finite(self) -> f64 {
        scalbn(2.0 - pow2(-(self.mantissa_bits as i32)), self.max_exponent())
    }

    pub fn min_positive_normal(self) -> f64 {
        scalbn(1.0, self.min_exponent())
    }

    pub fn min_positive_subnormal(self) -> f64 {
        scalbn(1.0, self.min_exponent() - self.mantissa_bits as i32)
    }

    /// True when every finite value of the format is also an `f32`.
    pub fn fits_in_f32(self) -> bool {
        self.exponent_bits <= 8 && self.mantissa_bits <= 23
    }

    fn is_f64(self) -> bool {
        self == Self::FP64
    }

    /// Exponent of the quantum (spacing) of the binade holding `|x|`.
    fn quantum_exponent(self, x: f64) -> i32 {
        floor_log2(x.abs()).max(self.min_exponent()) - self.mantissa_bits as i32
    }

    /// Spacing between consecutive representable values around finite `x`.
    pub fn ulp(self, x: f64) -> f64 {
        if self.is_f64() {
            let e = if x == 0.0 { -1022 } else { floor_log2(x.abs()).max(-1022) };
            return scalbn(1.0, e - 52);
        }
        if x == 0.0 {
            return self.min_positive_subnormal();
        }
        scalbn(1.0, self.quantum_exponent(x))
    }

    pub fn is_representable(self, x: f64) -> bool {
        if !x.is_finite() {
            return true;
        }
        self.round_nearest(x) == x
    }

    /// Closest representable value, ties to even mantissa; IEEE overflow.
    pub fn round_nearest(self, x: f64) -> f64 {
        if !x.is_finite() || x == 0.0 || self.is_f64() {
            return x;
        }
        let q = self.quantum_exponent(x);
        let r = scalbn(scalbn(x, -q).round_ties_even(), q);
        if r.abs() > self.max_finite() {
            f64::INFINITY.copysign(x)
        } else {
            r
        }
    }

    /// `(a_l, a_u)`: the largest representable `<= x` and smallest `>= x`.
    pub fn neighbors(self, x: f64) -> Result<(f64, f64)> {
        if x.is_nan() {
            return Err(Error::NonFinite("neighbors".into()));
        }
        if x.abs() > self.max_finite() {
            return Err(self.overflow(x));
        }
        if x == 0.0 || self.is_f64() {
            return Ok((x, x));
        }
        let q = self.quantum_exponent(x);
        let scaled = scalbn(x, -q);
        Ok((scalbn(scaled.floor(), q), scalbn(scaled.ceil(), q)))
    }

    /// Rounds up to `a_u` with probability `(x - a_l)/(a_u - a_l)`.
    ///
    /// The probability is exact in `f64`: both differences are exact and the
    /// quotient is a short dyadic fraction. Exactly one draw is consumed, even
    /// when `x` is already representable.
    pub fn round_stochastic(self, x: f64, rng: &mut RngStream) -> Result<f64> {
        let u = rng.next_uniform();
        if !x.is_finite() {
            return Err(Error::NonFinite("stochastic rounding".into()));
        }
        let (lo, hi) = self.neighbors(x)?;
        if lo == hi {
            return Ok(lo);
        }
        let p_up = (x - lo) / (hi - lo);
        Ok(if u < p_up { hi } else { lo })
    }

    /// Hardware-style stochastic rounding: add random bits below the kept
    /// mantissa and truncate.
    ///
    /// Distribution-equivalent to [`round_stochastic`](Self::round_stochastic)
    /// and consumes one draw. Only inputs in the format's normal range take the
    /// bit path; subnormal-range inputs use the exact path.
    pub fn round_stochastic_bits(self, x: f64, rng: &mut RngStream) -> Result<f64> {
        if !x.is_finite() {
            rng.next_u64_draw();
            return Err(Error::NonFinite("stochastic rounding".into()));
        }
        if x.abs() > self.max_finite() {
            rng.next_u64_draw();
            return Err(self.overflow(x));
        }
        if x.abs() < self.min_positive_normal() || self.is_f64() {
            return self.round_stochastic(x, rng);
        }
        let drop = 52 - self.mantissa_bits;
        let noise = rng.next_u64_draw() >> (64 - drop);
        let bits = (x.abs().to_bits() + noise) & !((1u64 << drop) - 1);
        Ok(f64::from_bits(bits).copysign(x))
    }

    /// Next representable value towards `-inf` from a representable `x`.
    pub fn next_down(self, x: f64) -> Result<f64> {
        if x > 0.0 {
            Ok(self.decode(self.encode(x)? - 1))
        } else if x == 0.0 {
            Ok(-self.min_positive_subnormal())
        } else {
            Ok(-self.next_up(-x)?)
        }
    }

    /// Next representable value towards `+inf` from a representable `x`.
    pub fn next_up(self, x: f64) -> Result<f64> {
        if x >= 0.0 {
            let bits = if x == 0.0 { 0 } else { self.encode(x)? };
            Ok(self.decode(bits + 1))
        } else {
            Ok(-self.next_down(-x)?)
        }
    }

    fn exponent_mask(self) -> u64 {
        (1u64 << self.exponent_bits) - 1
    }

    fn mantissa_mask(self) -> u64 {
        (1u64 << self.mantissa_bits) - 1
    }

    /// Canonical quiet NaN pattern.
    pub fn canonical_nan(self) -> u64 {
        (self.exponent_mask() << self.mantissa_bits) | (1u64 << (self.mantissa_bits - 1))
    }

    /// Exact value of a bit pattern. Bits above the format width are ignored.
    pub fn decode(self, bits: u64) -> f64 {
        let m = self.mantissa_bits;
        let sign = if (bits >> (self.exponent_bits + m)) & 1 == 1 {
            -1.0
        } else {
            1.0
        };
        let exp_field = (bits >> m) & self.exponent_mask();
        let man = bits & self.mantissa_mask();
        let magnitude = if exp_field == self.exponent_mask() {
            if man == 0 {
                f64::INFINITY
            } else {
                return f64::NAN;
            }
        } else if exp_field == 0 {
            scalbn(man as f64, self.min_exponent() - m as i32)
        } else {
            let e = exp_field as i32 - self.bias();
            scalbn(((1u64 << m) | man) as f64, e - m as i32)
        };
        sign * magnitude
    }

    /// Bit pattern of a representable value. NaN encodes to the canonical NaN.
    pub fn encode(self, x: f64) -> Result<u64> {
        let m = self.mantissa_bits;
        if x.is_nan() {
            return Ok(self.canonical_nan());
        }
        let sign = u64::from(x.is_sign_negative()) << (self.exponent_bits + m);
        if x.is_infinite() {
            return Ok(sign | (self.exponent_mask() << m));
        }
        if x == 0.0 {
            return Ok(sign);
        }
        if !self.is_representable(x) {
            return Err(Error::NotRepresentable {
                value: x,
                format: self,
            });
        }
        let a = x.abs();
        let e = floor_log2(a);
        let body = if e < self.min_exponent() {
            scalbn(a, m as i32 - self.min_exponent()) as u64
        } else {
            let exp_field = (e + self.bias()) as u64;
            let man = scalbn(a, m as i32 - e) as u64 - (1u64 << m);
            (exp_field << m) | man
        };
        Ok(sign | body)
    }

    /// Rounds to nearest, then encodes.
    pub fn encode_nearest(self, x: f64) -> u64 {
        self.encode(self.round_nearest(x))
            .expect("nearest-rounded value is representable")
    }

    fn overflow(self, value: f64) -> Error {
        Error::Overflow {
            value,
            format: self,
            max: self.max_finite(),
        }
    }
}

impl fmt::Display for FloatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{}M{}", self.exponent_bits, self.mantissa_bits)
    }
}

impl FromStr for FloatFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        match t.as_str() {
            "BF16" | "BFLOAT16" => return Ok(Self::BF16),
            "FP16" | "FLOAT16" => return Ok(Self::FP16),
            "FP32" | "FLOAT32" => return Ok(Self::FP32),
            "FP64" | "FLOAT64" => return Ok(Self::FP64),
            _ => {}
        }
        let bad = || Error::InvalidFormat(s.to_string());
        let rest = t.strip_prefix('E').ok_or_else(bad)?;
        let (e, m) = rest.split_once('M').ok_or_else(bad)?;
        let e: u32 = e.parse().map_err(|_| bad())?;
        let m: u32 = m.parse().map_err(|_| bad())?;
        Self::new(e, m)
    }
}

impl TryFrom<String> for FloatFormat {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FloatFormat> for String {
    fn from(f: FloatFormat) -> Self {
        f.to_string()
    }
}

/// `2^k` for `k` in the normal exponent range of `f64`.
fn pow2(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// `x * 2^n`, exact whenever the result is representable.
pub(crate) fn scalbn(mut x: f64, mut n: i32) -> f64 {
    while n > 1000 {
        x *= pow2(1000);
        n -= 1000;
    }
    while n < -1000 {
        x *= pow2(-1000);
        n += 1000;
    }
    x * pow2(n)
}

/// `floor(log2(x))` for finite positive `x`, subnormals included.
pub(crate) fn floor_log2(x: f64) -> i32 {
    let bits = x.to_bits();
    let exp_field = ((bits >> 52) & 0x7FF) as i32;
    if exp_field == 0 {
        let man = bits & ((1u64 << 52) - 1);
        63 - man.leading_zeros() as i32 - 1074
    } else {
        exp_field - 1023
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force nearest: scan every finite pattern of a 16-bit format.
    fn oracle_nearest(x: f64, fmt: FloatFormat) -> f64 {
        let mut best = f64::NAN;
        let mut best_err = f64::INFINITY;
        for bits in 0..(1u64 << fmt.width()) {
            let v = fmt.decode(bits);
            if !v.is_finite() {
                continue;
            }
            let err = (v - x).abs();
            let even = (bits & 1) == 0;
            if err < best_err || (err == best_err && even) {
                best = v;
                best_err = err;
            }
        }
        best
    }

    #[test]
    fn derived_constants() {
        let bf = FloatFormat::BF16;
        assert_eq!(bf.width(), 16);
        assert_eq!(bf.bias(), 127);
        assert_eq!(bf.machine_epsilon(), 0.00390625);
        assert_eq!(bf.max_finite(), (2.0 - 2f64.powi(-7)) * 2f64.powi(127));
        assert_eq!(FloatFormat::FP16.max_finite(), 65504.0);
        assert_eq!(FloatFormat::FP16.machine_epsilon(), 2f64.powi(-11));
        assert_eq!(FloatFormat::FP16.min_positive_normal(), 2f64.powi(-14));
        assert_eq!(FloatFormat::FP16.min_positive_subnormal(), 2f64.powi(-24));
        assert_eq!(FloatFormat::E8M1.machine_epsilon(), 0.25);
        assert_eq!(FloatFormat::FP32.max_finite(), f32::MAX as f64);
        assert_eq!(FloatFormat::FP32.min_positive_subnormal(), f32::from_bits(1) as f64);
        assert_eq!(FloatFormat::FP64.max_finite(), f64::MAX);
    }

    #[test]
    fn decode_examples() {
        let bf = FloatFormat::BF16;
        assert_eq!(bf.decode(0x3F80), 1.0);
        assert_eq!(bf.decode(0x0000), 0.0);
        assert!(bf.decode(0x0000).is_sign_positive());
        // 1.1001101b * 2^-4
        assert_eq!(bf.decode(0x3DCD), 0.10009765625);
        assert_eq!(bf.decode(0x7F80), f64::INFINITY);
        assert_eq!(bf.decode(0xFF80), f64::NEG_INFINITY);
        assert!(bf.decode(0x7FC1).is_nan());
    }

    #[test]
    fn decode_matches_hardware_for_wide_formats() {
        let mut rng = RngStream::new(11, 0);
        for _ in 0..20_000 {
            let bits32 = rng.next_u64_draw() as u32;
            let hw = f32::from_bits(bits32) as f64;
            let sim = FloatFormat::FP32.decode(u64::from(bits32));
            assert!(hw == sim || (hw.is_nan() && sim.is_nan()), "{bits32:#x}");
            let bits64 = rng.next_u64_draw();
            let hw = f64::from_bits(bits64);
            let sim = FloatFormat::FP64.decode(bits64);
            assert!(hw.to_bits() == sim.to_bits() || (hw.is_nan() && sim.is_nan()));
        }
    }

    #[test]
    fn round_nearest_examples() {
        let bf = FloatFormat::BF16;
        assert_eq!(bf.round_nearest(0.1), 0.10009765625);
        assert_eq!(bf.round_nearest(1.0 + 2f64.powi(-9)), 1.0);
        assert_eq!(bf.round_nearest(256.0), 256.0);
        assert_eq!(bf.round_nearest(255.5), 256.0);
        assert_eq!(bf.round_nearest(254.5), 254.0);
        assert!(bf.round_nearest(f64::NAN).is_nan());
        assert!(bf.round_nearest(-0.0).is_sign_negative());
    }

    #[test]
    fn round_nearest_matches_brute_force() {
        let mut rng = RngStream::new(1, 2);
        for fmt in [FloatFormat::BF16, FloatFormat::FP16, FloatFormat::E8M3] {
            for _ in 0..40 {
                // spread over many binades including subnormals
                let mag = (rng.next_uniform() * 2.0 - 1.0) * 30.0;
                let x = (rng.next_uniform() - 0.5) * 2f64.powf(mag);
                if x.abs() > fmt.max_finite() {
                    continue;
                }
                assert_eq!(fmt.round_nearest(x), oracle_nearest(x, fmt), "{fmt} {x:e}");
            }
            let tiny = fmt.min_positive_subnormal() * 1.5;
            assert_eq!(fmt.round_nearest(tiny), oracle_nearest(tiny, fmt));
        }
    }

    #[test]
    fn round_nearest_matches_f32_cast() {
        let mut rng = RngStream::new(9, 9);
        for _ in 0..100_000 {
            let x = f64::from_bits(rng.next_u64_draw());
            if !x.is_finite() {
                continue;
            }
            let hw = x as f32 as f64;
            let sim = FloatFormat::FP32.round_nearest(x);
            assert_eq!(hw.to_bits(), sim.to_bits(), "{x:e}");
        }
        // subnormal and overflow boundaries
        for x in [1e-45, 7e-46, 1.5e-45, 3.4028235677973366e38, 3.4028236e38, 1e39] {
            assert_eq!((x as f32 as f64).to_bits(), FloatFormat::FP32.round_nearest(x).to_bits());
        }
    }

    #[test]
    fn overflow_to_infinity() {
        let fp16 = FloatFormat::FP16;
        assert_eq!(fp16.round_nearest(65504.0), 65504.0);
        assert_eq!(fp16.round_nearest(65519.0), 65504.0);
        // exact midpoint to 2^16 ties to even, which overflows
        assert_eq!(fp16.round_nearest(65520.0), f64::INFINITY);
        assert_eq!(fp16.round_nearest(-1e6), f64::NEG_INFINITY);
    }

    #[test]
    fn neighbors_examples() {
        let bf = FloatFormat::BF16;
        assert_eq!(bf.neighbors(255.5).unwrap(), (255.0, 256.0));
        assert_eq!(bf.neighbors(1.0).unwrap(), (1.0, 1.0));
        assert_eq!(bf.neighbors(257.0).unwrap(), (256.0, 258.0));
        assert_eq!(bf.neighbors(-255.5).unwrap(), (-256.0, -255.0));
        assert!(matches!(
            FloatFormat::FP16.neighbors(70000.0),
            Err(Error::Overflow { .. })
        ));
    }

    #[test]
    fn machine_epsilon_spacing_assumption() {
        for fmt in [FloatFormat::BF16, FloatFormat::FP16, FloatFormat::E8M1] {
            let eps = fmt.machine_epsilon();
            // adjacent normals around binade edges and interiors
            for u in [1.0, 1.5, 2.0 - fmt.ulp(1.0), 4.0, 3.0] {
                let v = fmt.next_up(u).unwrap();
                let gap = v - u;
                assert!(eps * u <= gap && gap <= 2.0 * eps * u, "{fmt} {u}");
                let w = fmt.next_down(u).unwrap();
                let gap = u - w;
                assert!(eps * u <= gap && gap <= 2.0 * eps * u, "{fmt} {u}");
            }
        }
        assert_eq!(FloatFormat::BF16.machine_epsilon(), 2f64.powi(-8));
    }

    #[test]
    fn stochastic_examples() {
        let bf = FloatFormat::BF16;
        let mut rng = RngStream::new(7, 0);
        let n = 20_000;
        let ups = (0..n)
            .filter(|_| {
                let r = bf.round_stochastic(255.5, &mut rng).unwrap();
                assert!(r == 255.0 || r == 256.0);
                r == 256.0
            })
            .count();
        let sd = (n as f64 * 0.25).sqrt();
        assert!((ups as f64 - n as f64 / 2.0).abs() < 3.0 * sd);

        let before = rng.counter();
        assert_eq!(bf.round_stochastic(2.0, &mut rng).unwrap(), 2.0);
        assert_eq!(rng.counter(), before + 1);
    }

    #[test]
    fn stochastic_errors() {
        let mut rng = RngStream::new(0, 0);
        let bf = FloatFormat::BF16;
        assert!(matches!(bf.round_stochastic(f64::NAN, &mut rng), Err(Error::NonFinite(_))));
        assert!(matches!(
            FloatFormat::FP16.round_stochastic(1e5, &mut rng),
            Err(Error::Overflow { .. })
        ));
        assert!(matches!(bf.round_stochastic(f64::INFINITY, &mut rng), Err(_)));
    }

    #[test]
    fn stochastic_bit_path_matches_exact_probability() {
        // The bit path rounds up iff noise >= 2^drop - low; count of such noise
        // values equals low, so P(up) = low / 2^drop = the exact probability.
        let bf = FloatFormat::BF16;
        let x = 1.0 + 3.0 * 2f64.powi(-10); // p_up = 3/8
        let n = 80_000;
        let mut a = RngStream::new(4, 1);
        let mut b = RngStream::new(4, 2);
        let (mut up_exact, mut up_bits) = (0, 0);
        for _ in 0..n {
            if bf.round_stochastic(x, &mut a).unwrap() > x {
                up_exact += 1;
            }
            if bf.round_stochastic_bits(x, &mut b).unwrap() > x {
                up_bits += 1;
            }
        }
        let sd = (n as f64 * 0.375 * 0.625).sqrt();
        assert!((up_exact as f64 - 0.375 * n as f64).abs() < 4.0 * sd);
        assert!((up_bits as f64 - 0.375 * n as f64).abs() < 4.0 * sd);
        assert_eq!(a.counter(), b.counter());
    }

    #[test]
    fn stochastic_bit_path_handles_carry_and_sign() {
        let bf = FloatFormat::BF16;
        let mut rng = RngStream::new(8, 8);
        for _ in 0..2000 {
            let r = bf.round_stochastic_bits(-255.5, &mut rng).unwrap();
            assert!(r == -255.0 || r == -256.0);
            let r = bf.round_stochastic_bits(1.0 - 2f64.powi(-10), &mut rng).unwrap();
            assert!(r == 1.0 || r == 1.0 - 2f64.powi(-8));
        }
    }

    #[test]
    fn encode_roundtrip_16_bit_formats() {
        for fmt in [FloatFormat::BF16, FloatFormat::FP16] {
            for bits in 0..(1u64 << 16) {
                let v = fmt.decode(bits);
                let back = fmt.encode(v).unwrap();
                if v.is_nan() {
                    assert_eq!(back, fmt.canonical_nan());
                } else {
                    assert_eq!(back, bits, "{fmt} {bits:#06x}");
                }
            }
        }
    }

    #[test]
    fn encode_rejects_unrepresentable() {
        assert!(matches!(
            FloatFormat::BF16.encode(0.1),
            Err(Error::NotRepresentable { .. })
        ));
        assert_eq!(FloatFormat::BF16.encode_nearest(0.1), 0x3DCD);
    }

    #[test]
    fn next_neighbors() {
        let bf = FloatFormat::BF16;
        assert_eq!(bf.next_down(1.0).unwrap(), 0.99609375);
        assert_eq!(bf.next_up(1.0).unwrap(), 1.0078125);
        assert_eq!(bf.next_up(0.0).unwrap(), bf.min_positive_subnormal());
        assert_eq!(bf.next_down(-1.0).unwrap(), -1.0078125);
    }

    #[test]
    fn parse_and_display() {
        assert_eq!("E8M7".parse::<FloatFormat>().unwrap(), FloatFormat::BF16);
        assert_eq!("e5m10".parse::<FloatFormat>().unwrap(), FloatFormat::FP16);
        assert_eq!("bf16".parse::<FloatFormat>().unwrap(), FloatFormat::BF16);
        assert_eq!("E4M3".parse::<FloatFormat>().unwrap().to_string(), "E4M3");
        assert!("E8M0".parse::<FloatFormat>().is_err());
        assert!("E1M3".parse::<FloatFormat>().is_err());
        assert!("E12M3".parse::<FloatFormat>().is_err());
        assert!("F8M3".parse::<FloatFormat>().is_err());
        let json = serde_json::to_string(&FloatFormat::E8M5).unwrap();
        assert_eq!(json, "\"E8M5\"");
        assert!(serde_json::from_str::<FloatFormat>("\"E8M0\"").is_err());
    }

    #[test]
    fn floor_log2_subnormals() {
        assert_eq!(floor_log2(f64::from_bits(1)), -1074);
        assert_eq!(floor_log2(1.0), 0);
        assert_eq!(floor_log2(0.75), -1);
        assert_eq!(floor_log2(f64::MIN_POSITIVE), -1022);
    }
}
