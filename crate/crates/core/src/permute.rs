//! The backdoor function: a keyed pseudo-random permutation of the top-k
//! prediction probabilities that always displaces the leading class.
//!
//! The permutation key is the high half of the input's HMAC, decoded as a
//! mixed-radix integer into Fisher-Yates swap draws. 128 bits cover every
//! permutation of up to 34 slots (log2(34!) ~ 127.8), which caps `k`.
//! Probability values are moved, never recomputed, so the output is exactly
//! a rearrangement of the input vector.

use thiserror::Error;

use crate::hashcore::HashSplit;

/// Hard cap on permuted slots imposed by the 128-bit key budget.
pub const MAX_PERMUTED_SLOTS: usize = 34;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PermuteError {
    #[error("prediction vector needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("k = {k} exceeds min(m, 34) = {max}")]
    KTooLarge { k: usize, max: usize },
    #[error("k must be at least 2, got {0}")]
    KTooSmall(usize),
    #[error("invalid prediction vector: {0}")]
    BadVector(String),
}

/// A length-m probability vector; the unit exchanged on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVector {
    probs: Vec<f64>,
}

impl PredictionVector {
    /// Validates range and normalization (sum within 1e-6 of 1).
    pub fn new(probs: Vec<f64>) -> Result<Self, PermuteError> {
        if probs.len() < 2 {
            return Err(PermuteError::TooFewClasses(probs.len()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(PermuteError::BadVector(format!(
                    "prob[{i}] = {p} outside [0,1]"
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(PermuteError::BadVector(format!(
                "sum = {sum} not within 1e-6 of 1"
            )));
        }
        Ok(PredictionVector { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest probability, ties broken by lowest class index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Wire form: decimal strings with 9 fractional digits.
    pub fn to_wire(&self) -> Vec<String> {
        self.probs.iter().map(|p| format!("{p:.9}")).collect()
    }
}

/// A keyed rearrangement of the k most probable slots.
///
/// Slot s refers to `positions[s]`, the class index holding the s-th largest
/// probability (ties resolved toward lower class indices, so slot 0 is the
/// argmax). `dest[s]` is the slot where slot s's value lands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationPlan {
    positions: Vec<usize>,
    dest: Vec<usize>,
}

impl PermutationPlan {
    pub fn k(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn dest(&self) -> &[usize] {
        &self.dest
    }

    /// Class index where the pre-permutation argmax value lands; the class
    /// recorded as the backdoored answer.
    pub fn backdoored_class(&self) -> usize {
        self.positions[self.dest[0]]
    }

    fn apply(&self, probs: &[f64]) -> Vec<f64> {
        let mut out = probs.to_vec();
        for (s, &d) in self.dest.iter().enumerate() {
            out[self.positions[d]] = probs[self.positions[s]];
        }
        out
    }
}

/// Mixed-radix Fisher-Yates: draw j in [0, i] as `state mod (i+1)` and swap
/// slot i with slot i-j, consuming the key from the low end. j = 0 leaves
/// the step idle, so a zero key yields the identity arrangement.
///
/// Returns the source map: `arr[s]` is the slot whose value lands at slot s.
fn keyed_shuffle(k_pi: u128, k: usize) -> Vec<usize> {
    let mut arr: Vec<usize> = (0..k).collect();
    let mut state = k_pi;
    for i in (1..k).rev() {
        let base = (i + 1) as u128;
        let j = (state % base) as usize;
        state /= base;
        arr.swap(i, i - j);
    }
    arr
}

fn invert(arr: &[usize]) -> Vec<usize> {
    let mut dest = vec![0; arr.len()];
    for (s, &src) in arr.iter().enumerate() {
        dest[src] = s;
    }
    dest
}

/// Derives the permutation plan for one input.
///
/// Selects the k largest slots, shuffles them with the keyed draws, then, if
/// the argmax slot ended up fixed, composes the cyclic shift s -> s+1 (mod k)
/// so the leading value always moves; one composition suffices.
pub fn derive_plan(
    k_pi: u128,
    probs: &PredictionVector,
    k: usize,
) -> Result<PermutationPlan, PermuteError> {
    let m = probs.num_classes();
    if m < 2 {
        return Err(PermuteError::TooFewClasses(m));
    }
    if k < 2 {
        return Err(PermuteError::KTooSmall(k));
    }
    let max = m.min(MAX_PERMUTED_SLOTS);
    if k > max {
        return Err(PermuteError::KTooLarge { k, max });
    }

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        probs.probs[b]
            .partial_cmp(&probs.probs[a])
            .expect("probs validated finite")
            .then(a.cmp(&b))
    });
    let positions: Vec<usize> = order.into_iter().take(k).collect();

    let mut arr = keyed_shuffle(k_pi, k);
    // arr[0] == 0 means the argmax slot kept its own value
    while arr[0] == 0 {
        arr.rotate_right(1);
    }
    Ok(PermutationPlan {
        positions,
        dest: invert(&arr),
    })
}

/// A backdoored prediction: the rearranged vector plus the class index that
/// now carries the original top probability.
#[derive(Debug, Clone, PartialEq)]
pub struct BackdooredPrediction {
    pub probs: PredictionVector,
    pub backdoored_class: usize,
}

/// Applies the keyed top-k permutation to an honest prediction.
///
/// The output is a rearrangement of the input multiset; entries outside the
/// top k are untouched; `backdoored_class` always differs from the input
/// argmax.
pub fn backdoor(
    split: &HashSplit,
    f_vx: &PredictionVector,
    k: usize,
) -> Result<BackdooredPrediction, PermuteError> {
    let plan = derive_plan(split.hi, f_vx, k)?;
    let out = plan.apply(f_vx.probs());
    Ok(BackdooredPrediction {
        probs: PredictionVector { probs: out },
        backdoored_class: plan.backdoored_class(),
    })
}
