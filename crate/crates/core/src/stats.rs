//! Exact sizing math: the trivial-verification probability, minimum
//! watermark size, required watermark ratio, and multi-watermark
//! corrections.
//!
//! The probabilities in play sit around 1e-26, far below anything double
//! precision can compare against a 2^-64 target, so everything here runs on
//! arbitrary-precision rationals. Floats appear only as display values
//! (log10 of an exact rational).
//!
//! One wrinkle worth knowing: the allowed-mismatch cutoff `floor(e*|T|)`
//! makes the trivial probability zig-zag between consecutive sizes (an even
//! size at e = 1/2 admits exactly-half mismatches, an odd one does not), so
//! `min_watermark_size` cannot stop at the first size under the target. The
//! scan continues until the bound holds for every subsequent size, certified
//! by the exponential tail envelope.

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("no watermark size up to {limit} meets the target")]
    NotAchievable { limit: u64 },
    #[error("parse error: {0}")]
    ParseError(String),
}

/// Scan ceiling for `min_watermark_size`.
pub const SIZE_SCAN_LIMIT: u64 = 1_000_000;

/// An exact probability plus its display form.
#[derive(Debug, Clone, PartialEq)]
pub struct TrivialProb {
    pub exact: BigRational,
    pub log10: f64,
}

fn log10_biguint(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits == 0 {
        return f64::NEG_INFINITY;
    }
    if bits <= 53 {
        return (x.to_u64().expect("fits") as f64).log10();
    }
    let shift = bits - 53;
    let top = (x >> shift).to_u64().expect("53 bits fit") as f64;
    top.log10() + shift as f64 * std::f64::consts::LOG10_2
}

/// log10 of a positive rational, computed without overflow.
pub fn log10_rational(r: &BigRational) -> f64 {
    if r.is_zero() {
        return f64::NEG_INFINITY;
    }
    log10_biguint(r.numer().magnitude()) - log10_biguint(r.denom().magnitude())
}

fn check_common(m: u64, e: &BigRational) -> Result<(), StatsError> {
    if m < 2 {
        return Err(StatsError::DomainError(format!("m = {m} < 2")));
    }
    if !e.is_positive() {
        return Err(StatsError::DomainError("e must be > 0".into()));
    }
    let random_match = BigRational::new(BigInt::from(m - 1), BigInt::from(m));
    if *e >= random_match {
        return Err(StatsError::DomainError(format!(
            "e must be below the random mismatch rate (m-1)/m = {}/{m}",
            m - 1
        )));
    }
    Ok(())
}

/// `floor(e * t)` on exact rationals; the number of tolerated mismatches.
pub fn mismatch_cutoff(e: &BigRational, t: u64) -> u64 {
    let scaled = e.numer() * BigInt::from(t);
    (scaled / e.denom()).to_u64().expect("cutoff <= t")
}

/// Probability that an unrelated model passes verification by luck:
/// `sum_{i=0}^{floor(e*t)} C(t,i) ((m-1)/m)^i (1/m)^(t-i)`, exactly.
pub fn trivial_prob(m: u64, e: &BigRational, t: u64) -> Result<TrivialProb, StatsError> {
    check_common(m, e)?;
    if t < 1 {
        return Err(StatsError::DomainError("|T| must be >= 1".into()));
    }
    let cutoff = mismatch_cutoff(e, t);
    let m_minus_1 = BigUint::from(m - 1);
    // numerator = sum C(t,i) (m-1)^i, denominator = m^t
    let mut term = BigUint::one(); // C(t,0) (m-1)^0
    let mut num = BigUint::one();
    for i in 0..cutoff {
        // C(t,i+1) = C(t,i) (t-i)/(i+1); both factors divide exactly
        term = term * BigUint::from(t - i) / BigUint::from(i + 1) * &m_minus_1;
        num += &term;
    }
    let den = BigUint::from(m).pow(t as u32);
    let exact = BigRational::new(BigInt::from(num), BigInt::from(den));
    let log10 = log10_rational(&exact);
    Ok(TrivialProb { exact, log10 })
}

/// Information-theoretic decay rate of the lower binomial tail; the
/// Chernoff-Hoeffding exponent `KL(e || (m-1)/m)` in nats.
fn tail_exponent(m: u64, e: &BigRational) -> f64 {
    let e = e.to_f64().expect("e in (0,1)");
    let q = (m - 1) as f64 / m as f64;
    e * (e / q).ln() + (1.0 - e) * ((1.0 - e) / (1.0 - q)).ln()
}

/// Smallest watermark size from which `trivial_prob` stays strictly below
/// the target for every size onward.
///
/// The exact scan runs until the Chernoff envelope `exp(-t * KL)` itself is
/// below the target, which certifies every unscanned size; the parity
/// zig-zag of the floor cutoff is thereby handled with no monotonicity
/// assumption.
pub fn min_watermark_size(
    m: u64,
    e: &BigRational,
    target: &BigRational,
) -> Result<u64, StatsError> {
    check_common(m, e)?;
    if !target.is_positive() || *target >= BigRational::one() {
        return Err(StatsError::DomainError(
            "target probability must be in (0,1)".into(),
        ));
    }
    let kl = tail_exponent(m, e);
    let ln_target = log10_rational(target) * std::f64::consts::LN_10;
    // first size certified by the envelope alone, with slack for f64 error
    let certified_from = ((-ln_target / kl) * (1.0 + 1e-9) + 1.0).ceil();
    let certified_from = if certified_from.is_finite() && certified_from > 0.0 {
        certified_from as u64
    } else {
        u64::MAX
    };

    let mut last_fail: u64 = 0;
    for t in 1..=SIZE_SCAN_LIMIT {
        if trivial_prob(m, e, t)?.exact >= *target {
            last_fail = t;
        } else if t >= certified_from {
            return Ok(last_fail + 1);
        }
    }
    Err(StatsError::NotAchievable {
        limit: SIZE_SCAN_LIMIT,
    })
}

/// The watermark ratio needed so that `N` adversary queries yield a
/// watermark of `size` per colluding client.
#[derive(Debug, Clone, PartialEq)]
pub struct RequiredRatio {
    pub exact: BigRational,
    /// Percent rendered at 3 decimals, e.g. "0.426".
    pub percent: String,
}

pub fn required_ratio(
    n_queries: u64,
    size: u64,
    colluders: u64,
) -> Result<RequiredRatio, StatsError> {
    if n_queries < 1 || size < 1 || colluders < 1 {
        return Err(StatsError::DomainError(
            "N, |T| and colluders must be >= 1".into(),
        ));
    }
    let scaled = size
        .checked_mul(colluders)
        .ok_or_else(|| StatsError::DomainError("|T| * colluders overflows".into()))?;
    if scaled > n_queries {
        return Err(StatsError::DomainError(format!(
            "|T| * colluders = {scaled} exceeds N = {n_queries}"
        )));
    }
    let exact = BigRational::new(BigInt::from(scaled), BigInt::from(n_queries));
    let percent = percent_string(&exact, 3);
    Ok(RequiredRatio { exact, percent })
}

/// Renders a fraction of 1 as a percentage with fixed decimals,
/// round-half-up, computed exactly.
pub fn percent_string(value: &BigRational, decimals: u32) -> String {
    let scale = BigInt::from(100u32) * BigInt::from(10u64.pow(decimals));
    let scaled_num = value.numer() * &scale;
    let den = value.denom();
    let mut q = &scaled_num / den;
    let rem = &scaled_num % den;
    if &rem * BigInt::from(2) >= *den {
        q += 1;
    }
    let unit = BigInt::from(10u64.pow(decimals));
    let int_part = &q / &unit;
    let frac_part = &q % &unit;
    if decimals == 0 {
        format!("{int_part}")
    } else {
        format!("{int_part}.{frac_part:0width$}", width = decimals as usize)
    }
}

/// Union-bound correction for testing many registered watermarks.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveConfidence {
    /// `min(1, n_clients * p)`.
    pub trivial_bound: BigRational,
    /// `1 - trivial_bound`.
    pub confidence: BigRational,
}

impl EffectiveConfidence {
    /// True when the union bound saturated at 1.
    pub fn clamped(&self) -> bool {
        self.trivial_bound.is_one()
    }
}

pub fn effective_confidence(
    trivial: &BigRational,
    n_clients: u64,
) -> Result<EffectiveConfidence, StatsError> {
    if trivial.is_negative() || *trivial > BigRational::one() {
        return Err(StatsError::DomainError("probability outside [0,1]".into()));
    }
    if n_clients < 1 {
        return Err(StatsError::DomainError("n_clients must be >= 1".into()));
    }
    let mut bound = trivial * BigRational::from_integer(BigInt::from(n_clients));
    if bound > BigRational::one() {
        bound = BigRational::one();
    }
    let confidence = BigRational::one() - &bound;
    Ok(EffectiveConfidence {
        trivial_bound: bound,
        confidence,
    })
}

/// Expected accuracy after the gateway rewrites an `r_w` fraction of
/// responses: `acc * (1 - r_w)`.
pub fn utility_loss(r_w: &BigRational, acc: &BigRational) -> Result<BigRational, StatsError> {
    for (name, v) in [("r_w", r_w), ("acc", acc)] {
        if v.is_negative() || *v > BigRational::one() {
            return Err(StatsError::DomainError(format!("{name} outside [0,1]")));
        }
    }
    Ok(acc * (BigRational::one() - r_w))
}

/// Size -> log10(trivial probability) rows for plotting the decay curve.
pub fn sweep(m: u64, e: &BigRational, t_max: u64) -> Result<Vec<(u64, f64)>, StatsError> {
    check_common(m, e)?;
    let sizes: Vec<u64> = (1..=t_max).collect();
    let rows = crate::par::map_collect(&sizes, |&t| {
        let p = trivial_prob(m, e, t).expect("validated above");
        (t, p.log10)
    });
    Ok(rows)
}

/// Parses a plain decimal, optionally with a scientific exponent, into an
/// exact rational: `"0.5"`, `"5.4e-26"`.
pub fn parse_decimal(s: &str) -> Result<BigRational, StatsError> {
    let s = s.trim();
    let (mantissa, exp) = match s.split_once(['e', 'E']) {
        Some((m, x)) => {
            let exp: i32 = x
                .parse()
                .map_err(|_| StatsError::ParseError(format!("exponent in {s:?}")))?;
            (m, exp)
        }
        None => (s, 0),
    };
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(rest) => (-1, rest),
        None => (1, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = match mantissa.split_once('.') {
        Some((i, f)) => (i, f),
        None => (mantissa, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(StatsError::ParseError(format!("empty number in {s:?}")));
    }
    if !int_part.chars().all(|c| c.is_ascii_digit())
        || !frac_part.chars().all(|c| c.is_ascii_digit())
    {
        return Err(StatsError::ParseError(format!("bad digits in {s:?}")));
    }
    let digits = format!("{int_part}{frac_part}");
    let num: BigInt = digits
        .parse()
        .map_err(|_| StatsError::ParseError(s.to_string()))?;
    let mut value = BigRational::new(
        num * BigInt::from(sign),
        BigInt::from(10u32).pow(frac_part.len() as u32),
    );
    let ten = BigRational::from_integer(BigInt::from(10));
    match exp.cmp(&0) {
        std::cmp::Ordering::Greater => {
            for _ in 0..exp {
                value *= &ten;
            }
        }
        std::cmp::Ordering::Less => {
            for _ in 0..(-exp) {
                value /= &ten;
            }
        }
        std::cmp::Ordering::Equal => {}
    }
    Ok(value)
}

/// Parses probability expressions made of decimals, powers, products and
/// quotients: `"2^-64"`, `"2^-64/10^6"`, `"0.5"`, `"1e-6"`, `"3/4"`.
pub fn parse_prob_expr(s: &str) -> Result<BigRational, StatsError> {
    fn factor(tok: &str) -> Result<BigRational, StatsError> {
        let tok = tok.trim();
        if let Some((base, exp)) = tok.split_once('^') {
            let base: u64 = base
                .trim()
                .parse()
                .map_err(|_| StatsError::ParseError(format!("base in {tok:?}")))?;
            let exp: i64 = exp
                .trim()
                .parse()
                .map_err(|_| StatsError::ParseError(format!("exponent in {tok:?}")))?;
            if base == 0 {
                return Err(StatsError::ParseError("zero base".into()));
            }
            let mag = BigInt::from(base).pow(exp.unsigned_abs() as u32);
            return Ok(if exp >= 0 {
                BigRational::from_integer(mag)
            } else {
                BigRational::new(BigInt::one(), mag)
            });
        }
        parse_decimal(tok)
    }

    let s = s.trim();
    if s.is_empty() {
        return Err(StatsError::ParseError("empty expression".into()));
    }
    let mut value = BigRational::one();
    let mut op = '*';
    let mut start = 0;
    let chars: Vec<char> = s.chars().collect();
    let mut i = 0;
    while i <= chars.len() {
        let at_op = i < chars.len() && (chars[i] == '*' || chars[i] == '/')
            // a '-' after 'e' or '^' belongs to the number
            && !(i > 0 && matches!(chars[i - 1], 'e' | 'E' | '^'));
        if i == chars.len() || at_op {
            let tok: String = chars[start..i].iter().collect();
            let f = factor(&tok)?;
            match op {
                '*' => value *= f,
                '/' => {
                    if f.is_zero() {
                        return Err(StatsError::ParseError("division by zero".into()));
                    }
                    value /= f;
                }
                _ => unreachable!(),
            }
            if i < chars.len() {
                op = chars[i];
                start = i + 1;
            }
        }
        i += 1;
    }
    Ok(value)
}
