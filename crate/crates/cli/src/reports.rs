//! Structured result files written by the commands. Each re-reads to an
//! equal value.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use intent_core::evaluation::{ForbiddenMass, KSweepPoint};
use intent_core::hashtags::{Metric, Pooling};
use intent_core::{Error, Result};

pub const METRICS_VERSION: u32 = 1;
pub const SWEEP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMetric {
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub positives: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalMetrics {
    pub version: u32,
    pub images: usize,
    pub threshold: f64,
    pub macro_f1: f64,
    /// Macro F1 over classes with at least one positive.
    pub macro_f1_present: f64,
    pub per_class: Vec<ClassMetric>,
    /// Mean F1 per content group plus "All", when a group table is given.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub content_groups: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub difficulty_groups: BTreeMap<String, f64>,
    /// Present when content sets are configured and masks are available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forbidden_mass: Option<ForbiddenMass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepReport {
    pub version: u32,
    pub metric: Metric,
    pub pooling: Pooling,
    pub points: Vec<KSweepPoint>,
    /// Whether the curve rises then stays flat or falls (tolerance 0.01).
    pub rise_then_flat_or_peak: bool,
}

macro_rules! json_file {
    ($ty:ty, $version:expr, $what:literal) => {
        impl $ty {
            pub fn from_json_str(s: &str) -> Result<Self> {
                let v: $ty = serde_json::from_str(s).map_err(|e| Error::parse($what, e))?;
                if v.version != $version {
                    return Err(Error::Input(format!("unsupported {} version {}", $what, v.version)));
                }
                Ok(v)
            }

            pub fn to_json_string(&self) -> String {
                serde_json::to_string_pretty(self).expect("report serializes") + "\n"
            }
        }
    };
}

json_file!(EvalMetrics, METRICS_VERSION, "metrics");
json_file!(SweepReport, SWEEP_VERSION, "sweep report");

impl SweepReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("k\tmacro_f1\n");
        for p in &self.points {
            out.push_str(&format!("{}\t{:.6}\n", p.k, p.macro_f1));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_round_trip() {
        let m = EvalMetrics {
            version: METRICS_VERSION,
            images: 3,
            threshold: 0.5,
            macro_f1: 1.0 / 3.0,
            macro_f1_present: 0.1 + 0.2,
            per_class: vec![ClassMetric {
                class_id: 0,
                name: Some("Attractive".into()),
                positives: 2,
                f1: 2.0 / 3.0,
            }],
            content_groups: [("All".to_string(), 0.3)].into(),
            difficulty_groups: BTreeMap::new(),
            forbidden_mass: Some(ForbiddenMass {
                mean_mass: 1e-300,
                mean_fraction: 0.123456789,
            }),
        };
        let text = m.to_json_string();
        let back = EvalMetrics::from_json_str(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json_string(), text);
        assert!(EvalMetrics::from_json_str(&text.replace("\"version\": 1", "\"version\": 9")).is_err());

        let s = SweepReport {
            version: SWEEP_VERSION,
            metric: Metric::Cosine,
            pooling: Pooling::Distinct,
            points: vec![KSweepPoint { k: 25, macro_f1: 0.7 }, KSweepPoint { k: 50, macro_f1: 0.8 }],
            rise_then_flat_or_peak: true,
        };
        assert_eq!(SweepReport::from_json_str(&s.to_json_string()).unwrap(), s);
        assert_eq!(s.to_tsv(), "k\tmacro_f1\n25\t0.700000\n50\t0.800000\n");
    }
}
