use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Counterexamples kept per report; the full count goes into the statistics.
pub const MAX_COUNTEREXAMPLES: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Supported,
    Violated,
    Inconclusive,
}

/// A point where a checked inequality fails, with the quantities involved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub point: Vec<f64>,
    pub values: BTreeMap<String, f64>,
}

/// Numerical evidence for one theorem, lemma or corollary.
///
/// A registered check holds one sub-report per case in `cases`; its own
/// verdict is the merge of theirs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub theorem_id: String,
    /// Case name inside a registered check; empty on the top-level report.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub case: String,
    pub verdict: Verdict,
    pub statistics: BTreeMap<String, f64>,
    pub counterexamples: Vec<Counterexample>,
    pub tolerances: BTreeMap<String, f64>,
    /// SHA-256 of the JSON-encoded inputs.
    pub inputs_hash: String,
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cases: Vec<TheoremReport>,
}

pub fn hash_json(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("json value serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl TheoremReport {
    /// Empty report, inconclusive until a check decides otherwise.
    pub fn new(theorem_id: &str, inputs: &serde_json::Value) -> Self {
        Self {
            theorem_id: theorem_id.to_string(),
            case: String::new(),
            verdict: Verdict::Inconclusive,
            statistics: BTreeMap::new(),
            counterexamples: Vec::new(),
            tolerances: BTreeMap::new(),
            inputs_hash: hash_json(inputs),
            notes: Vec::new(),
            cases: Vec::new(),
        }
    }

    /// Records a statistic; non-finite values are replaced by a note so the
    /// report stays serializable.
    pub fn stat(&mut self, name: &str, value: f64) {
        if value.is_finite() {
            self.statistics.insert(name.to_string(), value);
        } else {
            self.notes.push(format!("statistic `{name}` is not finite ({value})"));
        }
    }

    pub fn tolerance(&mut self, name: &str, value: f64) {
        if value.is_finite() {
            self.tolerances.insert(name.to_string(), value);
        } else {
            self.notes.push(format!("tolerance `{name}` is not finite ({value})"));
        }
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    /// Adds a counterexample (up to [`MAX_COUNTEREXAMPLES`]).
    pub fn counterexample(&mut self, point: &[f64], values: &[(&str, f64)]) {
        if self.counterexamples.len() < MAX_COUNTEREXAMPLES {
            self.counterexamples.push(Counterexample {
                point: point.to_vec(),
                values: values
                    .iter()
                    .filter(|(_, v)| v.is_finite())
                    .map(|(k, v)| (k.to_string(), *v))
                    .collect(),
            });
        }
    }

    /// Violated when counterexamples were recorded, otherwise supported.
    pub fn decide(&mut self) {
        self.verdict = if self.counterexamples.is_empty() {
            Verdict::Supported
        } else {
            Verdict::Violated
        };
    }

    /// Marks a failed precondition: the check does not apply.
    pub fn inapplicable(mut self, reason: impl Into<String>) -> Self {
        self.verdict = Verdict::Inconclusive;
        self.notes.push(format!("precondition failed: {}", reason.into()));
        self
    }

    pub fn with_case(mut self, case: &str) -> Self {
        self.case = case.to_string();
        self
    }

    /// Top-level report from case reports: violated if any case is,
    /// supported if any case is and none is violated, else inconclusive.
    pub fn merge(theorem_id: &str, inputs: &serde_json::Value, cases: Vec<TheoremReport>) -> Self {
        let mut report = Self::new(theorem_id, inputs);
        report.verdict = if cases.iter().any(|c| c.verdict == Verdict::Violated) {
            Verdict::Violated
        } else if cases.iter().any(|c| c.verdict == Verdict::Supported) {
            Verdict::Supported
        } else {
            Verdict::Inconclusive
        };
        for c in &cases {
            for ce in &c.counterexamples {
                if report.counterexamples.len() < MAX_COUNTEREXAMPLES {
                    report.counterexamples.push(ce.clone());
                }
            }
        }
        let count = |v: Verdict| cases.iter().filter(|c| c.verdict == v).count() as f64;
        report.stat("cases_supported", count(Verdict::Supported));
        report.stat("cases_violated", count(Verdict::Violated));
        report.stat("cases_inconclusive", count(Verdict::Inconclusive));
        report.cases = cases;
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn case(v: Verdict) -> TheoremReport {
        let mut r = TheoremReport::new("t", &json!(null));
        r.verdict = v;
        if v == Verdict::Violated {
            r.counterexample(&[0.0], &[("err", 1.0)]);
        }
        r
    }

    #[test]
    fn merge_rule() {
        use Verdict::*;
        let m = |vs: &[Verdict]| TheoremReport::merge("t", &json!(null), vs.iter().map(|&v| case(v)).collect()).verdict;
        assert_eq!(m(&[Supported, Inconclusive]), Supported);
        assert_eq!(m(&[Supported, Violated]), Violated);
        assert_eq!(m(&[Inconclusive, Inconclusive]), Inconclusive);
        assert_eq!(m(&[]), Inconclusive);
    }

    #[test]
    fn non_finite_statistics_become_notes() {
        let mut r = TheoremReport::new("t", &json!(1));
        r.stat("a", f64::NAN);
        r.stat("b", 2.0);
        assert_eq!(r.statistics.len(), 1);
        assert_eq!(r.notes.len(), 1);
        assert!(serde_json::to_string(&r).is_ok());
    }

    #[test]
    fn counterexamples_are_capped_and_decide_verdict() {
        let mut r = TheoremReport::new("t", &json!(1));
        r.decide();
        assert_eq!(r.verdict, Verdict::Supported);
        for i in 0..40 {
            r.counterexample(&[i as f64], &[("v", 1.0)]);
        }
        r.decide();
        assert_eq!(r.counterexamples.len(), MAX_COUNTEREXAMPLES);
        assert_eq!(r.verdict, Verdict::Violated);
    }
}
