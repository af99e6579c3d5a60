//! Follow-up suggestions for abnormal results.
//!
//! Rules are data: the defaults ship as `data/advice.json` and a
//! deployment can load its own file with the same shape.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{TestKind, TrendFlag, TrendRule};

const DEFAULT_RULES: &str = include_str!("../data/advice.json");

#[derive(Debug, Error)]
pub enum AdviceError {
    #[error("advice rules: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("advice rules: {0}")]
    Io(#[from] std::io::Error),
}

/// Fires when the named result field is strictly above the limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Threshold {
    pub field: String,
    pub above: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdviceRule {
    pub id: String,
    pub kind: TestKind,
    /// Any one of these firing triggers the rule.
    #[serde(default)]
    pub any: Vec<Threshold>,
    /// Or a screening flag on the patient's history.
    #[serde(default)]
    pub trend: Option<TrendRule>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Advice {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdviceRules {
    pub rules: Vec<AdviceRule>,
}

impl Default for AdviceRules {
    fn default() -> Self {
        Self::parse(DEFAULT_RULES).expect("bundled advice rules parse")
    }
}

impl AdviceRules {
    pub fn parse(json: &str) -> Result<Self, AdviceError> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AdviceError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Suggestions for one result, given its named fields and the
    /// patient's current trend flag (if any).
    pub fn evaluate(&self, kind: TestKind, fields: &[(String, f64)], trend: Option<&TrendFlag>) -> Vec<Advice> {
        let value = |name: &str| fields.iter().find(|(k, _)| k == name).map(|(_, v)| *v);
        self.rules
            .iter()
            .filter(|r| r.kind == kind)
            .filter(|r| {
                r.any.iter().any(|t| value(&t.field).is_some_and(|v| v > t.above))
                    || r.trend.is_some_and(|rule| trend.is_some_and(|f| f.rule == rule))
            })
            .map(|r| Advice { id: r.id.clone(), text: r.text.clone() })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fields(pairs: &[(&str, f64)]) -> Vec<(String, f64)> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn ids(a: Vec<Advice>) -> Vec<String> {
        a.into_iter().map(|a| a.id).collect()
    }

    #[test]
    fn default_rules() {
        let rules = AdviceRules::default();
        assert_eq!(ids(rules.evaluate(TestKind::Temperature, &fields(&[("celsius", 38.0)]), None)), Vec::<String>::new());
        assert_eq!(ids(rules.evaluate(TestKind::Temperature, &fields(&[("celsius", 38.4)]), None)), ["fever"]);
        let bp = |sp, dp| fields(&[("systolic", sp), ("diastolic", dp)]);
        assert!(rules.evaluate(TestKind::BloodPressure, &bp(140.0, 90.0), None).is_empty());
        assert_eq!(ids(rules.evaluate(TestKind::BloodPressure, &bp(120.0, 95.0), None)), ["high-blood-pressure"]);
        assert_eq!(ids(rules.evaluate(TestKind::BloodPressure, &bp(150.0, 80.0), None)), ["high-blood-pressure"]);
    }

    #[test]
    fn trend_rule() {
        let rules = AdviceRules::default();
        let flag = TrendFlag { patient_id: "p".into(), rule: TrendRule::WeightDecline, severity: 0.1, evidence: vec![] };
        let w = fields(&[("kg", 60.0)]);
        assert!(rules.evaluate(TestKind::Weight, &w, None).is_empty());
        assert_eq!(ids(rules.evaluate(TestKind::Weight, &w, Some(&flag))), ["weight-decline"]);
        // A weight flag says nothing about a temperature reading.
        assert!(rules.evaluate(TestKind::Temperature, &fields(&[("celsius", 37.0)]), Some(&flag)).is_empty());
    }

    #[test]
    fn custom_rules() {
        let rules = AdviceRules::parse(r#"[{"id":"low","kind":"eye_power","any":[{"field":"diopters","above":5}],"text":"see an optometrist"}]"#).unwrap();
        assert_eq!(rules.evaluate(TestKind::EyePower, &fields(&[("diopters", 6.0)]), None)[0].text, "see an optometrist");
        assert!(AdviceRules::parse(r#"[{"id":"x","kind":"eye_power","text":"t","when":1}]"#).is_err());
    }
}
