//! Judge-side machinery: the mismatch statistic, the five-step ownership
//! demonstration, and the contest procedure.
//!
//! The judge holds the claimant's bundle and model plus a pointer to the
//! suspect's prediction API. Verification is deliberately boring: recompute
//! commitments, check anteriority on the bulletin, query the suspect over
//! the trigger inputs, and compare the mismatch ratio against the tolerated
//! error rate in exact arithmetic. The reported confidence folds in a union
//! bound over every watermark registered for the model.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use serde::Serialize;
use thiserror::Error;

use crate::bulletin::{Bulletin, BulletinError, Ruling};
use crate::digest::to_hex;
use crate::hashcore::CanonicalInput;
use crate::model::{LoadedModel, ModelError};
use crate::stats::{self, StatsError};
use crate::triggerstore::WatermarkBundle;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("suspect unreachable: {0}")]
    Unreachable(String),
}

/// A queryable prediction endpoint that answers with a class index.
pub trait ClassOracle: Sync {
    fn class_of(&self, input: &CanonicalInput) -> Result<usize, OracleError>;
}

/// A queryable prediction endpoint that answers with the full vector at
/// wire precision (9-fractional-digit decimal strings).
pub trait VectorOracle: Sync {
    fn predict_wire(&self, input: &CanonicalInput) -> Result<Vec<String>, OracleError>;
}

impl ClassOracle for LoadedModel {
    fn class_of(&self, input: &CanonicalInput) -> Result<usize, OracleError> {
        self.classify(input)
            .map_err(|e| OracleError::Unreachable(e.to_string()))
    }
}

impl VectorOracle for LoadedModel {
    fn predict_wire(&self, input: &CanonicalInput) -> Result<Vec<String>, OracleError> {
        Ok(self
            .predict(input)
            .map_err(|e| OracleError::Unreachable(e.to_string()))?
            .to_wire())
    }
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("bundle is empty")]
    EmptyBundle,
    #[error(transparent)]
    SuspectUnreachable(#[from] OracleError),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error(transparent)]
    Bulletin(#[from] BulletinError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("precondition failed: {0}")]
    Precondition(String),
}

/// The mismatch ratio between a suspect's answers and the recorded
/// backdoored classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LStatistic {
    pub mismatches: u64,
    pub size: u64,
    pub value: f64,
}

impl LStatistic {
    pub fn exact(&self) -> BigRational {
        BigRational::new(BigInt::from(self.mismatches), BigInt::from(self.size))
    }
}

/// Queries the suspect over every bundle input and counts answers that
/// differ from the recorded backdoored class. Queries may fan out in
/// parallel; aggregation is by bundle order either way.
pub fn l_statistic(
    bundle: &WatermarkBundle,
    suspect: &dyn ClassOracle,
) -> Result<LStatistic, VerifyError> {
    if bundle.is_empty() {
        return Err(VerifyError::EmptyBundle);
    }
    let answers = crate::par::map_collect(bundle.records(), |rec| {
        suspect.class_of(&rec.input).map(|c| c != rec.b_class)
    });
    let mut mismatches = 0u64;
    for a in answers {
        if a? {
            mismatches += 1;
        }
    }
    let size = bundle.size() as u64;
    Ok(LStatistic {
        mismatches,
        size,
        value: mismatches as f64 / size as f64,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StepOutcome {
    pub step: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegisteredCountSource {
    Board,
    Override,
}

/// Full judge verdict for one watermark against one suspect endpoint.
#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub client_id: String,
    pub bundle_size: u64,
    pub e: f64,
    pub e_exact: String,
    pub l_value: Option<f64>,
    pub l_mismatches: Option<u64>,
    pub passed: bool,
    pub failed_step: Option<u8>,
    pub steps: Vec<StepOutcome>,
    pub n_registered: u64,
    pub n_registered_source: RegisteredCountSource,
    /// Union bound `min(1, n_registered * P(L < e))` for this bundle size.
    pub effective_trivial_prob: f64,
    pub effective_trivial_prob_log10: f64,
}

fn rational_str(r: &BigRational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

/// Runs the five-step ownership demonstration.
///
/// 1. recompute the bundle digest and locate its registration;
/// 2. recompute the victim model digest and match the registered linkage;
/// 3. anteriority: the watermark must postdate the model commitment;
/// 4. query the suspect: `L < e`, compared exactly;
/// 5. every recorded backdoored class differs from the victim's honest
///    class on that input.
///
/// `n_registered_override` substitutes the bulletin's watermark count in the
/// confidence correction (used to price a fleet larger than the test board).
pub fn judge_verify(
    board: &Bulletin,
    bundle: &WatermarkBundle,
    victim: &LoadedModel,
    suspect: &dyn ClassOracle,
    e: &BigRational,
    n_registered_override: Option<u64>,
) -> Result<VerificationReport, VerifyError> {
    let m = victim.num_classes() as u64;
    let random_match = BigRational::new(BigInt::from(m - 1), BigInt::from(m));
    if *e <= BigRational::new(BigInt::from(0), BigInt::one()) || *e >= random_match {
        return Err(VerifyError::DomainError(format!(
            "e must lie in (0, (m-1)/m) = (0, {}/{m})",
            m - 1
        )));
    }
    if bundle.is_empty() {
        return Err(VerifyError::EmptyBundle);
    }

    let mut steps: Vec<StepOutcome> = Vec::with_capacity(5);
    let push = |steps: &mut Vec<StepOutcome>, step, name, passed, detail: String| {
        steps.push(StepOutcome {
            step,
            name,
            passed,
            detail,
        });
        passed
    };

    let wm_digest = bundle.digest();
    let registration = board
        .entries()
        .iter()
        .find(|en| {
            en.kind == crate::bulletin::EntryKind::WatermarkCommitment
                && en.digest == to_hex(&wm_digest)
        })
        .cloned();
    let step1 = push(
        &mut steps,
        1,
        "locate_registration",
        registration.is_some(),
        match &registration {
            Some(en) => format!(
                "watermark {} registered at index {}",
                &en.digest[..12],
                en.index
            ),
            None => format!("watermark {} not found on the bulletin", to_hex(&wm_digest)),
        },
    );

    let linked_hex = registration
        .as_ref()
        .and_then(|en| en.linked_model_digest.clone());
    let victim_hex = to_hex(&victim.digest());
    let step2 = push(
        &mut steps,
        2,
        "match_model_digest",
        step1 && linked_hex.as_deref() == Some(victim_hex.as_str()),
        match &linked_hex {
            Some(l) => format!(
                "registered linkage {}, victim model {}",
                &l[..12],
                &victim_hex[..12]
            ),
            None => "no registration to compare against".into(),
        },
    );

    let step3 = {
        let (passed, detail) = if step2 {
            match board.check_anteriority(wm_digest, victim.digest(), None) {
                Ok(Ruling::WatermarkValid) => {
                    (true, "watermark postdates model commitment".to_string())
                }
                Ok(other) => (false, format!("anteriority ruling: {other:?}")),
                Err(e) => (false, format!("anteriority check failed: {e}")),
            }
        } else {
            (false, "skipped: linkage unresolved".to_string())
        };
        push(&mut steps, 3, "anteriority", passed, detail)
    };

    let l = l_statistic(bundle, suspect)?;
    let step4 = push(
        &mut steps,
        4,
        "mismatch_ratio",
        l.exact() < *e,
        format!(
            "L = {}/{} = {:.4}, e = {}",
            l.mismatches,
            l.size,
            l.value,
            rational_str(e)
        ),
    );

    let mut bad_inputs = 0u64;
    for rec in bundle.records() {
        if victim.classify(&rec.input)? == rec.b_class {
            bad_inputs += 1;
        }
    }
    let step5 = push(
        &mut steps,
        5,
        "victim_disagrees",
        bad_inputs == 0,
        format!(
            "{bad_inputs} trigger(s) where the victim's honest class equals the backdoored class"
        ),
    );

    let (n_registered, n_registered_source) = match n_registered_override {
        Some(n) => (n, RegisteredCountSource::Override),
        None => (
            board.count_watermarks(victim.digest())?,
            RegisteredCountSource::Board,
        ),
    };
    let trivial = stats::trivial_prob(m, e, bundle.size() as u64)?;
    let eff = stats::effective_confidence(&trivial.exact, n_registered.max(1))?;
    let effective_trivial_prob = eff.trivial_bound.to_f64().unwrap_or(f64::NAN);
    let effective_trivial_prob_log10 = stats::log10_rational(&eff.trivial_bound);

    let passed = step1 && step2 && step3 && step4 && step5;
    Ok(VerificationReport {
        client_id: bundle.client_id().to_string(),
        bundle_size: bundle.size() as u64,
        e: e.to_f64().unwrap_or(f64::NAN),
        e_exact: rational_str(e),
        l_value: Some(l.value),
        l_mismatches: Some(l.mismatches),
        passed,
        failed_step: steps.iter().find(|s| !s.passed).map(|s| s.step),
        steps,
        n_registered,
        n_registered_source,
        effective_trivial_prob,
        effective_trivial_prob_log10,
    })
}

/// Outcome of an ownership contest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "ruling", rename_all = "snake_case")]
pub enum ContestOutcome {
    /// The provided model matches the API and was committed first.
    ContesterWins,
    ClaimantWins {
        reason: String,
    },
    /// The provided model does not reproduce the API's responses.
    MismatchRejected {
        input_digest: String,
    },
}

/// Adjudicates a contested verdict: the alleged original model must
/// reproduce the suspect API exactly (full vectors at wire precision) over
/// every bundle input, then anteriority of its commitment decides.
pub fn contest(
    board: &Bulletin,
    bundle: &WatermarkBundle,
    suspect: &dyn VectorOracle,
    provided: &LoadedModel,
) -> Result<ContestOutcome, VerifyError> {
    if bundle.is_empty() {
        return Err(VerifyError::EmptyBundle);
    }
    for rec in bundle.records() {
        let api = suspect.predict_wire(&rec.input)?;
        let own = provided
            .predict(&rec.input)
            .map_err(|e| VerifyError::Precondition(format!("provided model cannot answer: {e}")))?
            .to_wire();
        if api != own {
            return Ok(ContestOutcome::MismatchRejected {
                input_digest: to_hex(&rec.input.digest()),
            });
        }
    }
    match board.check_anteriority(
        bundle.digest(),
        bundle.model_digest(),
        Some(provided.digest()),
    )? {
        Ruling::ContesterWins => Ok(ContestOutcome::ContesterWins),
        Ruling::ClaimantWins => Ok(ContestOutcome::ClaimantWins {
            reason: "contester's model commitment postdates the claimant's".into(),
        }),
        Ruling::ContesterUnregistered => Ok(ContestOutcome::ClaimantWins {
            reason: "contester never committed its model and cannot refute".into(),
        }),
        other => Err(VerifyError::Precondition(format!(
            "watermark no longer rules valid: {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::sha3_256;
    use crate::hashcore::{canonicalize, Dtype};
    use crate::model::{Backend, ModelSpec};
    use crate::triggerstore::TriggerStore;
    use std::collections::BTreeMap;

    fn input(tag: u8) -> CanonicalInput {
        canonicalize(Dtype::U8, &[4], vec![tag, tag ^ 0x5a, 3, 4]).unwrap()
    }

    /// Suspect that answers a fixed class per input digest, with a default.
    struct TableOracle {
        answers: BTreeMap<[u8; 32], usize>,
        fallback: usize,
    }

    impl ClassOracle for TableOracle {
        fn class_of(&self, x: &CanonicalInput) -> Result<usize, OracleError> {
            Ok(*self.answers.get(&x.digest()).unwrap_or(&self.fallback))
        }
    }

    fn victim_model(inputs: &[CanonicalInput], m: usize) -> LoadedModel {
        // lookup model answering class 0 for every known input
        let mut entries = BTreeMap::new();
        let mut probs = vec![0.0; m];
        probs[0] = 0.9;
        probs[1] = 0.1;
        for x in inputs {
            entries.insert(crate::digest::to_hex(&x.digest()), probs.clone());
        }
        LoadedModel::from_spec(&ModelSpec {
            model_id: "victim".into(),
            m,
            input_shape: vec![4],
            backend: Backend::Lookup { entries },
        })
        .unwrap()
    }

    struct Fixture {
        board: Bulletin,
        bundle: WatermarkBundle,
        victim: LoadedModel,
        _dir: tempfile::TempDir,
    }

    fn fixture(n: u8, register: bool, wm_first: bool) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let inputs: Vec<CanonicalInput> = (0..n).map(input).collect();
        let victim = victim_model(&inputs, 4);
        let store = TriggerStore::open(&dir.path().join("triggers")).unwrap();
        for (i, x) in inputs.iter().enumerate() {
            // victim's honest class is 0; backdoored class cycles over 1..3
            store
                .record_trigger(
                    "alice",
                    x,
                    1 + (i % 3),
                    0,
                    4,
                    format!("2026-08-10T00:00:{i:02}Z"),
                )
                .unwrap();
        }
        let bundle = store.bundle("alice", victim.digest()).unwrap();
        let mut board = Bulletin::open(&dir.path().join("board.jsonl")).unwrap();
        if register {
            if wm_first {
                board
                    .publish_watermark(
                        bundle.digest(),
                        victim.digest(),
                        "2026-08-10T01:00:00Z".into(),
                    )
                    .unwrap();
                board
                    .publish_model(victim.digest(), "2026-08-10T01:00:01Z".into())
                    .unwrap();
            } else {
                board
                    .publish_model(victim.digest(), "2026-08-10T01:00:00Z".into())
                    .unwrap();
                board
                    .publish_watermark(
                        bundle.digest(),
                        victim.digest(),
                        "2026-08-10T01:00:01Z".into(),
                    )
                    .unwrap();
            }
        }
        Fixture {
            board,
            bundle,
            victim,
            _dir: dir,
        }
    }

    fn perfect_suspect(bundle: &WatermarkBundle) -> TableOracle {
        let answers = bundle
            .records()
            .iter()
            .map(|r| (r.input.digest(), r.b_class))
            .collect();
        TableOracle {
            answers,
            fallback: 0,
        }
    }

    fn e_half() -> BigRational {
        BigRational::new(BigInt::from(1), BigInt::from(2))
    }

    #[test]
    fn l_statistic_ratios() {
        let f = fixture(4, true, false);
        let perfect = perfect_suspect(&f.bundle);
        assert_eq!(l_statistic(&f.bundle, &perfect).unwrap().value, 0.0);

        let hostile = TableOracle {
            answers: BTreeMap::new(),
            fallback: 0,
        };
        assert_eq!(l_statistic(&f.bundle, &hostile).unwrap().value, 1.0);

        // 3 of 4 match -> L = 0.25
        let mut answers: BTreeMap<[u8; 32], usize> = f
            .bundle
            .records()
            .iter()
            .map(|r| (r.input.digest(), r.b_class))
            .collect();
        let first = f.bundle.records()[0].input.digest();
        answers.insert(first, 0);
        let partial = TableOracle {
            answers,
            fallback: 0,
        };
        assert_eq!(l_statistic(&f.bundle, &partial).unwrap().value, 0.25);
    }

    #[test]
    fn empty_bundle_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = TriggerStore::open(dir.path()).unwrap();
        store.ensure_client("quiet").unwrap();
        let bundle = store.bundle("quiet", [0u8; 32]).unwrap();
        let oracle = TableOracle {
            answers: BTreeMap::new(),
            fallback: 0,
        };
        assert!(matches!(
            l_statistic(&bundle, &oracle),
            Err(VerifyError::EmptyBundle)
        ));
    }

    #[test]
    fn full_protocol_passes_on_perfect_retention() {
        let f = fixture(8, true, false);
        let suspect = perfect_suspect(&f.bundle);
        let report =
            judge_verify(&f.board, &f.bundle, &f.victim, &suspect, &e_half(), None).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.l_value, Some(0.0));
        assert_eq!(report.failed_step, None);
        assert_eq!(report.n_registered, 1);
        assert_eq!(report.n_registered_source, RegisteredCountSource::Board);
        assert!(report.steps.iter().all(|s| s.passed));
    }

    #[test]
    fn zero_retention_fails_step_4() {
        let f = fixture(8, true, false);
        let suspect = TableOracle {
            answers: BTreeMap::new(),
            fallback: 0,
        };
        let report =
            judge_verify(&f.board, &f.bundle, &f.victim, &suspect, &e_half(), None).unwrap();
        assert!(!report.passed);
        assert_eq!(report.failed_step, Some(4));
        assert_eq!(report.l_value, Some(1.0));
    }

    #[test]
    fn premature_registration_fails_step_3() {
        let f = fixture(8, true, true);
        let suspect = perfect_suspect(&f.bundle);
        let report =
            judge_verify(&f.board, &f.bundle, &f.victim, &suspect, &e_half(), None).unwrap();
        assert!(!report.passed);
        assert_eq!(report.failed_step, Some(3));
        // L was still perfect; only anteriority failed
        assert_eq!(report.l_value, Some(0.0));
    }

    #[test]
    fn unregistered_watermark_fails_step_1() {
        let f = fixture(8, false, false);
        let suspect = perfect_suspect(&f.bundle);
        let report =
            judge_verify(&f.board, &f.bundle, &f.victim, &suspect, &e_half(), None).unwrap();
        assert!(!report.passed);
        assert_eq!(report.failed_step, Some(1));
    }

    #[test]
    fn exact_boundary_is_strict() {
        // 4 of 8 mismatches at e = 1/2: L == e must fail
        let f = fixture(8, true, false);
        let mut answers: BTreeMap<[u8; 32], usize> = f
            .bundle
            .records()
            .iter()
            .map(|r| (r.input.digest(), r.b_class))
            .collect();
        for rec in f.bundle.records().iter().take(4) {
            answers.insert(rec.input.digest(), 0);
        }
        let suspect = TableOracle {
            answers,
            fallback: 0,
        };
        let report =
            judge_verify(&f.board, &f.bundle, &f.victim, &suspect, &e_half(), None).unwrap();
        assert_eq!(report.l_value, Some(0.5));
        assert_eq!(report.failed_step, Some(4));
    }

    #[test]
    fn override_count_feeds_confidence() {
        let f = fixture(8, true, false);
        let suspect = perfect_suspect(&f.bundle);
        let report = judge_verify(
            &f.board,
            &f.bundle,
            &f.victim,
            &suspect,
            &e_half(),
            Some(1_000_000),
        )
        .unwrap();
        assert_eq!(report.n_registered, 1_000_000);
        assert_eq!(report.n_registered_source, RegisteredCountSource::Override);
        // p(m=4, e=1/2, t=8) * 1e6 clamps to 1
        assert_eq!(report.effective_trivial_prob, 1.0);
    }

    #[test]
    fn e_domain_enforced() {
        let f = fixture(4, true, false);
        let suspect = perfect_suspect(&f.bundle);
        // (m-1)/m = 3/4 for m = 4
        let too_big = BigRational::new(BigInt::from(3), BigInt::from(4));
        assert!(matches!(
            judge_verify(&f.board, &f.bundle, &f.victim, &suspect, &too_big, None),
            Err(VerifyError::DomainError(_))
        ));
    }

    #[test]
    fn pass_rate_matches_binomial_tail() {
        // odd size keeps floor(e*t)/t strictly under e, so the tail formula
        // and the strict L < e rule agree term for term
        let t = 25u64;
        let rho = 0.66f64;
        let e = e_half();
        let f = fixture(t as u8, true, false);
        let cutoff = stats::mismatch_cutoff(&e, t);
        assert!(cutoff * 2 < t);

        struct PerTrial<'a> {
            rho: f64,
            trial: u32,
            answers: BTreeMap<[u8; 32], usize>,
            _marker: std::marker::PhantomData<&'a ()>,
        }
        impl ClassOracle for PerTrial<'_> {
            fn class_of(&self, x: &CanonicalInput) -> Result<usize, OracleError> {
                let d = x.digest();
                let h = sha3_256(&[&self.trial.to_le_bytes()[..], &d].concat());
                let u = u64::from_le_bytes(h[..8].try_into().unwrap()) as f64 / u64::MAX as f64;
                if u < self.rho {
                    Ok(self.answers[&d])
                } else {
                    Ok(0) // fixture b_class is never 0
                }
            }
        }

        let answers: BTreeMap<[u8; 32], usize> = f
            .bundle
            .records()
            .iter()
            .map(|r| (r.input.digest(), r.b_class))
            .collect();
        let trials = 10_000u32;
        let mut passes = 0u32;
        for trial in 0..trials {
            let oracle = PerTrial {
                rho,
                trial,
                answers: answers.clone(),
                _marker: Default::default(),
            };
            let l = l_statistic(&f.bundle, &oracle).unwrap();
            if l.exact() < e {
                passes += 1;
            }
        }

        // closed-form tail: P(mismatches <= cutoff) with mismatch prob 1-rho
        let mut p_pass = 0.0f64;
        for i in 0..=cutoff {
            let mut c = 1.0f64;
            for j in 0..i {
                c = c * (t - j) as f64 / (j + 1) as f64;
            }
            p_pass += c * (1.0 - rho).powi(i as i32) * rho.powi((t - i) as i32);
        }
        let sigma = (trials as f64 * p_pass * (1.0 - p_pass)).sqrt();
        let observed = passes as f64;
        let expected = trials as f64 * p_pass;
        assert!(
            (observed - expected).abs() < 3.0 * sigma,
            "observed {observed}, expected {expected} +- {sigma}"
        );
    }

    #[test]
    fn contest_outcomes() {
        let f = fixture(6, true, false);
        // suspect endpoint IS the victim model here; the contester hands in
        // the same model file, so wire vectors match exactly
        let same_model = LoadedModel::from_bytes(f.victim.raw_bytes().to_vec()).unwrap();
        let outcome = contest(&f.board, &f.bundle, &f.victim, &same_model).unwrap();
        // contester's digest equals the claimant's model digest, whose first
        // occurrence is the claimant's own registration: not earlier
        assert!(matches!(outcome, ContestOutcome::ClaimantWins { .. }));

        // a model that disagrees on one input is rejected outright
        let mut m2 = f.victim.spec().clone();
        if let Backend::Lookup { entries } = &mut m2.backend {
            let k = entries.keys().next().unwrap().clone();
            entries.insert(k, vec![0.1, 0.9, 0.0, 0.0]);
        }
        m2.model_id = "contester".into();
        let different = LoadedModel::from_spec(&m2).unwrap();
        let outcome = contest(&f.board, &f.bundle, &f.victim, &different).unwrap();
        assert!(matches!(outcome, ContestOutcome::MismatchRejected { .. }));
    }

    #[test]
    fn contest_honors_earlier_commitment() {
        // adversary registered an identical model before the claimant
        let dir = tempfile::tempdir().unwrap();
        let inputs: Vec<CanonicalInput> = (0..4).map(input).collect();
        let victim = victim_model(&inputs, 4);
        // byte-different but behaviorally identical model file
        let mut spec2 = victim.spec().clone();
        spec2.model_id = "earlier-owner".into();
        let contester_model = LoadedModel::from_spec(&spec2).unwrap();

        let store = TriggerStore::open(&dir.path().join("t")).unwrap();
        for (i, x) in inputs.iter().enumerate() {
            store
                .record_trigger("alice", x, 1, 0, 4, format!("2026-08-10T00:00:{i:02}Z"))
                .unwrap();
        }
        let bundle = store.bundle("alice", victim.digest()).unwrap();

        let mut board = Bulletin::open(&dir.path().join("b.jsonl")).unwrap();
        board
            .publish_model(contester_model.digest(), "2026-08-09T00:00:00Z".into())
            .unwrap();
        board
            .publish_model(victim.digest(), "2026-08-10T00:00:00Z".into())
            .unwrap();
        board
            .publish_watermark(
                bundle.digest(),
                victim.digest(),
                "2026-08-10T00:00:01Z".into(),
            )
            .unwrap();

        let outcome = contest(&board, &bundle, &victim, &contester_model).unwrap();
        assert_eq!(outcome, ContestOutcome::ContesterWins);
    }
}
