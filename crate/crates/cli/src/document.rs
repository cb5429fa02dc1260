//! Versioned on-disk formats: spec documents in, result documents out.
//!
//! A result document is self-contained: it echoes the input (with a content
//! hash), the tolerance it was produced under, and everything needed to
//! re-evaluate the strategy from scratch, so `verify` needs no other file.
//! Slice numbering in documents and tables is 1-based with slice 1 next to
//! the sink; the library itself indexes from 0.

use serde::{Deserialize, Serialize};
use slicenet_core::{
    ConditionCheck, Configuration, EnergyProfile, FlowState, Lifespan, NetworkSpec,
    OptimalityReport, Strategy,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Network description as read from disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecDocument {
    pub schema: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub n: usize,
    pub b: Vec<f64>,
    pub d: Vec<f64>,
    pub g: Vec<f64>,
}

impl SpecDocument {
    pub fn from_network(spec: &NetworkSpec, label: Option<String>) -> Self {
        SpecDocument {
            schema: SCHEMA_VERSION,
            label,
            n: spec.len(),
            b: spec.batteries().to_vec(),
            d: spec.distances().to_vec(),
            g: spec.events().to_vec(),
        }
    }

    /// Validates the document into a network spec; the message names the
    /// offending field.
    pub fn to_network(&self) -> Result<NetworkSpec, String> {
        if self.schema != SCHEMA_VERSION {
            return Err(format!(
                "unsupported schema version {} (this tool reads version {SCHEMA_VERSION})",
                self.schema
            ));
        }
        for (name, len) in [
            ("b", self.b.len()),
            ("d", self.d.len()),
            ("g", self.g.len()),
        ] {
            if len != self.n {
                return Err(format!("field {name} has {len} entries but n = {}", self.n));
            }
        }
        NetworkSpec::new(self.b.clone(), self.d.clone(), self.g.clone()).map_err(|e| e.to_string())
    }

    /// Content hash over the slice data, independent of label and
    /// formatting. Floats hash by their shortest round-trip form.
    pub fn content_hash(&self) -> String {
        let canonical = format!("{}|{:?}|{:?}|{:?}", self.n, self.b, self.d, self.g);
        format!("fnv1a64:{:016x}", fnv1a64(canonical.as_bytes()))
    }
}

/// 64-bit FNV-1a: tiny, dependency-free, stable across platforms. Guards
/// against accidental edits, not adversaries.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &byte in bytes {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl ToolInfo {
    pub fn current() -> Self {
        ToolInfo {
            name: "slicenet".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

/// Copy of the input the result was computed from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputEcho {
    pub hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub n: usize,
    pub b: Vec<f64>,
    pub d: Vec<f64>,
    pub g: Vec<f64>,
}

impl InputEcho {
    pub fn to_spec_document(&self) -> SpecDocument {
        SpecDocument {
            schema: SCHEMA_VERSION,
            label: self.label.clone(),
            n: self.n,
            b: self.b.clone(),
            d: self.d.clone(),
            g: self.g.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowsDoc {
    pub slid: Vec<f64>,
    pub ejected: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyDoc {
    pub per_slice: Vec<f64>,
    pub per_sensor: Vec<f64>,
}

/// One plateau-edge condition; `slice` is 1-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionDoc {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required: Option<f64>,
}

impl ConditionDoc {
    pub fn from_check(check: &ConditionCheck) -> Self {
        match *check {
            ConditionCheck::Void => ConditionDoc {
                status: "void".into(),
                slice: None,
                probability: None,
                required: None,
            },
            ConditionCheck::Holds { slice, probability } => ConditionDoc {
                status: "holds".into(),
                slice: Some(slice + 1),
                probability: Some(probability),
                required: None,
            },
            ConditionCheck::Violated {
                slice,
                probability,
                required,
            } => ConditionDoc {
                status: "violated".into(),
                slice: Some(slice + 1),
                probability: Some(probability),
                required: Some(required),
            },
        }
    }
}

/// Plateau shape and edge conditions; indices are 1-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimalityDoc {
    pub max_value: f64,
    pub plateau_end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_below: Option<usize>,
    pub left_condition: ConditionDoc,
    pub right_condition: ConditionDoc,
    pub interior_ok: bool,
    pub optimal: bool,
}

impl OptimalityDoc {
    pub fn from_report(report: &OptimalityReport) -> Self {
        OptimalityDoc {
            max_value: report.max_value,
            plateau_end: report.plateau_end + 1,
            first_below: report.first_below.map(|l| l + 1),
            left_condition: ConditionDoc::from_check(&report.left_condition),
            right_condition: ConditionDoc::from_check(&report.right_condition),
            interior_ok: report.interior_ok,
            optimal: report.optimal,
        }
    }
}

/// Self-contained outcome of `optimize` or `evaluate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultDocument {
    pub schema: u32,
    pub tool: ToolInfo,
    /// Relative tolerance all checks in this document used.
    pub tolerance: f64,
    pub input: InputEcho,
    /// Sliding probabilities, slice 1 first.
    pub p: Vec<f64>,
    pub flows: FlowsDoc,
    pub energy: EnergyDoc,
    /// `1 / max per-sensor energy`; absent when no slice spends anything.
    #[serde(default)]
    pub lifespan: Option<f64>,
    pub optimality: OptimalityDoc,
}

impl ResultDocument {
    pub fn new(
        spec: &NetworkSpec,
        label: Option<String>,
        tolerance: f64,
        strategy: &Strategy,
        flow: &FlowState,
        profile: &EnergyProfile,
        report: &OptimalityReport,
    ) -> Self {
        let spec_doc = SpecDocument::from_network(spec, label.clone());
        let per_slice = (0..spec.len())
            .map(|i| slicenet_core::slice_energy(flow, spec, i))
            .collect();
        ResultDocument {
            schema: SCHEMA_VERSION,
            tool: ToolInfo::current(),
            tolerance,
            input: InputEcho {
                hash: spec_doc.content_hash(),
                label,
                n: spec.len(),
                b: spec.batteries().to_vec(),
                d: spec.distances().to_vec(),
                g: spec.events().to_vec(),
            },
            p: strategy.probabilities().to_vec(),
            flows: FlowsDoc {
                slid: flow.slid().to_vec(),
                ejected: flow.ejected().to_vec(),
            },
            energy: EnergyDoc {
                per_slice,
                per_sensor: profile.per_sensor().to_vec(),
            },
            lifespan: match profile.lifespan() {
                Lifespan::Finite(v) => Some(v),
                Lifespan::Unbounded => None,
            },
            optimality: OptimalityDoc::from_report(report),
        }
    }

    pub fn schema_check(&self) -> Result<(), String> {
        if self.schema != SCHEMA_VERSION {
            return Err(format!(
                "unsupported schema version {} (this tool reads version {SCHEMA_VERSION})",
                self.schema
            ));
        }
        Ok(())
    }

    /// Rebuilds the validated spec and strategy embedded in the document.
    pub fn to_configuration(&self) -> Result<Configuration, String> {
        let spec = self.input.to_spec_document().to_network()?;
        let strategy = Strategy::new(self.p.clone()).map_err(|e| e.to_string())?;
        Configuration::new(spec, strategy).map_err(|e| e.to_string())
    }

    /// Per-slice table with a header row: slice (1-based), then the spec
    /// and result columns. Floats print in shortest round-trip form, so
    /// parsing the table back recovers the exact document values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slice,b,d,g,F,J,E,e,p\n");
        for i in 0..self.input.n {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                i + 1,
                self.input.b[i],
                self.input.d[i],
                self.input.g[i],
                self.flows.slid[i],
                self.flows.ejected[i],
                self.energy.per_slice[i],
                self.energy.per_sensor[i],
                self.p[i],
            ));
        }
        out
    }
}
