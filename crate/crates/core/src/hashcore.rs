//! Keyed hashing core: canonical input serialization, HMAC-SHA256 splitting,
//! and the watermarking decision.
//!
//! Every response-rewriting decision in the gateway reduces to one HMAC over
//! the canonical bytes of the (mapped) input. The 256-bit MAC is split into
//! two independent 128-bit halves: the low half drives the watermark decision
//! (compare against `floor(r_w * 2^128)`), the high half keys the prediction
//! permutation. Determinism is the load-bearing property: the same input must
//! produce the same decision and the same permutation for every client,
//! forever, so everything in this module is a pure function of key + bytes.

use hmac::{Hmac, Mac};
use num_bigint::BigUint;
use num_integer::Integer;
use sha2::Sha256;
use thiserror::Error;

use crate::digest::{sha3_256, Digest32};
use crate::mapping::MappingConfig;

type HmacSha256 = Hmac<Sha256>;

/// Wire tag for unsigned 8-bit elements, the only dtype in v1.
pub const DTYPE_U8_TAG: u8 = 0x01;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HashError {
    #[error("byte length {actual} does not match shape product {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("unsupported dtype tag {0:#04x} (only u8 = 0x01)")]
    UnsupportedDtype(u8),
    #[error("shape must be non-empty")]
    EmptyShape,
    #[error("shape dimensions must be >= 1")]
    ZeroDim,
    #[error("at most 255 dimensions supported, got {0}")]
    TooManyDims(usize),
    #[error("key must be 64 hex characters (32 bytes)")]
    BadKey,
    #[error("invalid watermark ratio: {0}")]
    BadRatio(String),
}

/// Element type of a canonical input. Only `U8` exists in v1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        DTYPE_U8_TAG
    }

    pub fn from_tag(tag: u8) -> Result<Self, HashError> {
        match tag {
            DTYPE_U8_TAG => Ok(Dtype::U8),
            other => Err(HashError::UnsupportedDtype(other)),
        }
    }
}

/// A flattened input tensor in its canonical wire form.
///
/// Two inputs are the same input if and only if their canonical byte strings
/// are equal. The byte string is
/// `[dtype tag: 1][dim count: 1][each dim: u32 LE][row-major element bytes]`;
/// including the shape header keeps a 2x2 image and a length-4 vector
/// distinct even though their element bytes coincide.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CanonicalInput {
    dtype: Dtype,
    shape: Vec<u32>,
    bytes: Vec<u8>,
}

impl CanonicalInput {
    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[u32] {
        &self.shape
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn num_elements(&self) -> usize {
        self.bytes.len()
    }

    /// The canonical byte string: header plus raw element bytes.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + 4 * self.shape.len() + self.bytes.len());
        out.push(self.dtype.tag());
        out.push(self.shape.len() as u8);
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.bytes);
        out
    }

    /// SHA3-256 of the canonical bytes; the identity used for trigger
    /// deduplication and lookup-model keys.
    pub fn digest(&self) -> Digest32 {
        sha3_256(&self.canonical_bytes())
    }
}

/// Validates and wraps a raw tensor. Idempotent: the canonical form of a
/// canonical input is itself.
pub fn canonicalize(
    dtype: Dtype,
    shape: &[u32],
    bytes: Vec<u8>,
) -> Result<CanonicalInput, HashError> {
    if shape.is_empty() {
        return Err(HashError::EmptyShape);
    }
    if shape.len() > 255 {
        return Err(HashError::TooManyDims(shape.len()));
    }
    if shape.contains(&0) {
        return Err(HashError::ZeroDim);
    }
    let expected: usize = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or(HashError::ShapeMismatch {
            expected: usize::MAX,
            actual: bytes.len(),
        })?;
    if expected != bytes.len() {
        return Err(HashError::ShapeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(CanonicalInput {
        dtype,
        shape: shape.to_vec(),
        bytes,
    })
}

/// Watermarking decision threshold derived from the ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionThreshold {
    /// `r_w = 1`: every input is watermarked.
    Always,
    /// Watermark iff the low hash half is strictly below this value.
    Below(u128),
}

/// The watermark ratio `r_w` as an exact fraction.
///
/// Stored as a reduced `num/den` pair so that the decision threshold
/// `floor(r_w * 2^128)` is bit-exact across builds; a floating-point ratio
/// would move the threshold by hundreds of hash values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WatermarkRatio {
    num: u128,
    den: u128,
    threshold: DecisionThreshold,
}

impl WatermarkRatio {
    pub fn from_fraction(num: u128, den: u128) -> Result<Self, HashError> {
        if den == 0 {
            return Err(HashError::BadRatio("denominator is zero".into()));
        }
        if num > den {
            return Err(HashError::BadRatio(format!("{num}/{den} exceeds 1")));
        }
        let g = num.gcd(&den);
        let (num, den) = (num / g, den / g);
        let threshold = if num == den {
            DecisionThreshold::Always
        } else {
            // floor(num * 2^128 / den); num < den so the quotient fits u128
            let t = (BigUint::from(num) << 128u32) / BigUint::from(den);
            let digits = t.to_u64_digits();
            let mut value: u128 = 0;
            for (i, d) in digits.iter().enumerate().take(2) {
                value |= (*d as u128) << (64 * i);
            }
            DecisionThreshold::Below(value)
        };
        Ok(WatermarkRatio {
            num,
            den,
            threshold,
        })
    }

    /// Parses either a decimal like `0.00426` or a fraction like `109/25600`.
    pub fn parse(s: &str) -> Result<Self, HashError> {
        let s = s.trim();
        if let Some((a, b)) = s.split_once('/') {
            let num: u128 = a
                .trim()
                .parse()
                .map_err(|_| HashError::BadRatio(s.into()))?;
            let den: u128 = b
                .trim()
                .parse()
                .map_err(|_| HashError::BadRatio(s.into()))?;
            return Self::from_fraction(num, den);
        }
        let (int_part, frac_part) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(HashError::BadRatio(s.into()));
        }
        if !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac_part.chars().all(|c| c.is_ascii_digit())
        {
            return Err(HashError::BadRatio(s.into()));
        }
        if frac_part.len() > 30 {
            return Err(HashError::BadRatio("more than 30 fractional digits".into()));
        }
        let den = 10u128.pow(frac_part.len() as u32);
        let int_val: u128 = if int_part.is_empty() {
            0
        } else {
            int_part
                .parse()
                .map_err(|_| HashError::BadRatio(s.into()))?
        };
        let frac_val: u128 = if frac_part.is_empty() {
            0
        } else {
            frac_part
                .parse()
                .map_err(|_| HashError::BadRatio(s.into()))?
        };
        let num = int_val
            .checked_mul(den)
            .and_then(|v| v.checked_add(frac_val))
            .ok_or_else(|| HashError::BadRatio(s.into()))?;
        Self::from_fraction(num, den)
    }

    pub fn zero() -> Self {
        Self::from_fraction(0, 1).unwrap()
    }

    pub fn one() -> Self {
        Self::from_fraction(1, 1).unwrap()
    }

    pub fn numer(&self) -> u128 {
        self.num
    }

    pub fn denom(&self) -> u128 {
        self.den
    }

    pub fn threshold(&self) -> DecisionThreshold {
        self.threshold
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::fmt::Display for WatermarkRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Per-model secrets and mapping parameters; roots all determinism.
#[derive(Clone)]
pub struct ModelKeySet {
    k_w: [u8; 32],
    pub r_w: WatermarkRatio,
    pub mapping_cfg: MappingConfig,
}

impl ModelKeySet {
    pub fn new(k_w: [u8; 32], r_w: WatermarkRatio, mapping_cfg: MappingConfig) -> Self {
        ModelKeySet {
            k_w,
            r_w,
            mapping_cfg,
        }
    }

    /// Parses the 64-hex-character key file / env format.
    pub fn from_hex_key(
        hex_key: &str,
        r_w: WatermarkRatio,
        mapping_cfg: MappingConfig,
    ) -> Result<Self, HashError> {
        let trimmed = hex_key.trim();
        if trimmed.len() != 64 {
            return Err(HashError::BadKey);
        }
        let bytes = hex::decode(trimmed).map_err(|_| HashError::BadKey)?;
        let mut k_w = [0u8; 32];
        k_w.copy_from_slice(&bytes);
        Ok(ModelKeySet {
            k_w,
            r_w,
            mapping_cfg,
        })
    }

    pub fn key_bytes(&self) -> &[u8; 32] {
        &self.k_w
    }
}

impl std::fmt::Debug for ModelKeySet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // key material stays out of logs
        f.debug_struct("ModelKeySet")
            .field("k_w", &"<redacted>")
            .field("r_w", &self.r_w)
            .field("mapping_cfg", &self.mapping_cfg)
            .finish()
    }
}

/// The two independent 128-bit halves of one HMAC-SHA256 output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashSplit {
    /// Big-endian integer of MAC bytes [0..16); drives the decision.
    pub lo: u128,
    /// Big-endian integer of MAC bytes [16..32); keys the permutation.
    pub hi: u128,
}

/// HMAC-SHA256 over the canonical bytes of the mapped input, split in half.
///
/// Callers must map the input first; the gateway hashes `M(x)`, never raw `x`.
pub fn hmac_split(keys: &ModelKeySet, mapped: &CanonicalInput) -> HashSplit {
    let mut mac = HmacSha256::new_from_slice(&keys.k_w).expect("hmac accepts any key length");
    mac.update(&mapped.canonical_bytes());
    let out = mac.finalize().into_bytes();
    let lo = u128::from_be_bytes(out[0..16].try_into().unwrap());
    let hi = u128::from_be_bytes(out[16..32].try_into().unwrap());
    HashSplit { lo, hi }
}

/// Should the response to this input be watermarked?
///
/// True iff `split.lo < floor(r_w * 2^128)`; client-independent by
/// construction.
pub fn wm_decision(keys: &ModelKeySet, split: &HashSplit) -> bool {
    match keys.r_w.threshold() {
        DecisionThreshold::Always => true,
        DecisionThreshold::Below(t) => split.lo < t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::MappingConfig;
    use proptest::prelude::*;

    fn keys(r_w: WatermarkRatio) -> ModelKeySet {
        ModelKeySet::new([0u8; 32], r_w, MappingConfig::identity())
    }

    /// Independent HMAC-SHA256 built from the SHA-256 primitive alone,
    /// following the RFC 2104 construction. Used as the reference oracle
    /// for `hmac_split`.
    fn reference_hmac_sha256(key: &[u8], msg: &[u8]) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut k = [0u8; 64];
        if key.len() > 64 {
            k[..32].copy_from_slice(&Sha256::digest(key));
        } else {
            k[..key.len()].copy_from_slice(key);
        }
        let ipad: Vec<u8> = k.iter().map(|b| b ^ 0x36).collect();
        let opad: Vec<u8> = k.iter().map(|b| b ^ 0x5c).collect();
        let inner = Sha256::digest([ipad.as_slice(), msg].concat());
        Sha256::digest([opad.as_slice(), inner.as_slice()].concat()).into()
    }

    #[test]
    fn canonical_layout_matches_wire_spec() {
        let x = canonicalize(Dtype::U8, &[2, 2], vec![1, 2, 3, 4]).unwrap();
        assert_eq!(
            x.canonical_bytes(),
            vec![0x01, 0x02, 0x02, 0, 0, 0, 0x02, 0, 0, 0, 1, 2, 3, 4]
        );
    }

    #[test]
    fn shape_header_distinguishes_reshapes() {
        let a = canonicalize(Dtype::U8, &[2, 2], vec![1, 2, 3, 4]).unwrap();
        let b = canonicalize(Dtype::U8, &[4], vec![1, 2, 3, 4]).unwrap();
        assert_ne!(a.canonical_bytes(), b.canonical_bytes());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let err = canonicalize(Dtype::U8, &[2, 3], vec![0; 5]).unwrap_err();
        assert_eq!(
            err,
            HashError::ShapeMismatch {
                expected: 6,
                actual: 5
            }
        );
        assert_eq!(
            canonicalize(Dtype::U8, &[], vec![]).unwrap_err(),
            HashError::EmptyShape
        );
        assert_eq!(
            canonicalize(Dtype::U8, &[0], vec![]).unwrap_err(),
            HashError::ZeroDim
        );
    }

    #[test]
    fn dtype_tag_round_trip() {
        assert_eq!(Dtype::from_tag(0x01).unwrap(), Dtype::U8);
        assert_eq!(
            Dtype::from_tag(0x02).unwrap_err(),
            HashError::UnsupportedDtype(0x02)
        );
    }

    #[test]
    fn hmac_split_matches_reference_oracle() {
        let ks = keys(WatermarkRatio::parse("0.5").unwrap());
        let x = canonicalize(Dtype::U8, &[1], vec![0x00]).unwrap();
        let split = hmac_split(&ks, &x);

        let digest = reference_hmac_sha256(&[0u8; 32], &x.canonical_bytes());
        assert_eq!(
            split.lo,
            u128::from_be_bytes(digest[0..16].try_into().unwrap())
        );
        assert_eq!(
            split.hi,
            u128::from_be_bytes(digest[16..32].try_into().unwrap())
        );
    }

    #[test]
    fn one_byte_difference_changes_both_halves() {
        let ks = keys(WatermarkRatio::parse("0.5").unwrap());
        let a = canonicalize(Dtype::U8, &[4], vec![10, 20, 30, 40]).unwrap();
        let b = canonicalize(Dtype::U8, &[4], vec![10, 20, 30, 41]).unwrap();
        let (sa, sb) = (hmac_split(&ks, &a), hmac_split(&ks, &b));
        assert_ne!(sa, sb);

        // cross-check both digests against the reference oracle
        for x in [&a, &b] {
            let d = reference_hmac_sha256(&[0u8; 32], &x.canonical_bytes());
            let s = hmac_split(&ks, x);
            assert_eq!(s.lo, u128::from_be_bytes(d[0..16].try_into().unwrap()));
        }
    }

    #[test]
    fn hmac_split_is_deterministic() {
        let ks = keys(WatermarkRatio::parse("0.1").unwrap());
        let x = canonicalize(Dtype::U8, &[3], vec![7, 8, 9]).unwrap();
        assert_eq!(hmac_split(&ks, &x), hmac_split(&ks, &x));
    }

    #[test]
    fn decision_boundaries() {
        let half = keys(WatermarkRatio::from_fraction(1, 2).unwrap());
        // floor(2^128 / 2) = 2^127
        assert!(wm_decision(
            &half,
            &HashSplit {
                lo: (1u128 << 127) - 1,
                hi: 0
            }
        ));
        assert!(!wm_decision(
            &half,
            &HashSplit {
                lo: 1u128 << 127,
                hi: 0
            }
        ));

        let zero = keys(WatermarkRatio::zero());
        assert!(!wm_decision(&zero, &HashSplit { lo: 0, hi: 0 }));

        let one = keys(WatermarkRatio::one());
        assert!(wm_decision(
            &one,
            &HashSplit {
                lo: u128::MAX,
                hi: 0
            }
        ));
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!(
            WatermarkRatio::parse("0.5").unwrap(),
            WatermarkRatio::from_fraction(1, 2).unwrap()
        );
        assert_eq!(
            WatermarkRatio::parse("109/25600").unwrap().as_f64(),
            109.0 / 25600.0
        );
        assert_eq!(
            WatermarkRatio::parse("1").unwrap().threshold(),
            DecisionThreshold::Always
        );
        assert_eq!(
            WatermarkRatio::parse("1.0").unwrap().threshold(),
            DecisionThreshold::Always
        );
        assert!(WatermarkRatio::parse("1.5").is_err());
        assert!(WatermarkRatio::parse("-0.1").is_err());
        assert!(WatermarkRatio::parse("3/2").is_err());
        assert_eq!(
            WatermarkRatio::parse("0.00426").unwrap(),
            WatermarkRatio::from_fraction(426, 100_000).unwrap()
        );
    }

    #[test]
    fn threshold_quarter_is_exact() {
        let q = WatermarkRatio::from_fraction(1, 4).unwrap();
        assert_eq!(q.threshold(), DecisionThreshold::Below(1u128 << 126));
    }

    #[test]
    fn empirical_rate_within_six_sigma() {
        let p = 0.1;
        let ks = keys(WatermarkRatio::parse("0.1").unwrap());
        let n = 20_000u32;
        let mut hits = 0u32;
        for i in 0..n {
            let x = canonicalize(Dtype::U8, &[4], i.to_le_bytes().to_vec()).unwrap();
            if wm_decision(&ks, &hmac_split(&ks, &x)) {
                hits += 1;
            }
        }
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let lo = mean - 6.0 * sigma;
        let hi = mean + 6.0 * sigma;
        assert!(
            (hits as f64) > lo && (hits as f64) < hi,
            "hits {hits} outside [{lo:.0}, {hi:.0}]"
        );
    }

    proptest! {
        #[test]
        fn canonical_injectivity(
            shape_a in proptest::collection::vec(1u32..5, 1..4),
            shape_b in proptest::collection::vec(1u32..5, 1..4),
            seed_a in any::<u64>(),
            seed_b in any::<u64>(),
        ) {
            let fill = |shape: &[u32], seed: u64| {
                let n: usize = shape.iter().product::<u32>() as usize;
                let mut v = Vec::with_capacity(n);
                let mut s = seed;
                for _ in 0..n {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    v.push((s >> 56) as u8);
                }
                v
            };
            let a = canonicalize(Dtype::U8, &shape_a, fill(&shape_a, seed_a)).unwrap();
            let b = canonicalize(Dtype::U8, &shape_b, fill(&shape_b, seed_b)).unwrap();
            let same_triple = a.shape() == b.shape() && a.bytes() == b.bytes();
            prop_assert_eq!(a.canonical_bytes() == b.canonical_bytes(), same_triple);
        }
    }
}
