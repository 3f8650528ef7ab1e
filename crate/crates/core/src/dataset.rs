//! Training-data records and distillation tuples.
//!
//! A [`VulnRecord`] is one JSON file per exploit family:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "name": "Log4j",
//!   "cve": ["CVE-2021-44228", "CVE-2021-45046"],
//!   "vd": "free-text vulnerability description",
//!   "devices": ["web-server"],
//!   "pcap_pos": ["log4j_pos.pcap"],
//!   "pcap_neg": ["log4j_neg.pcap"],
//!   "proto": "http",
//!   "distilled": ["alert tcp any any -> any 80 (content:\"jndi:ldap\"; sid:1;)"]
//! }
//! ```
//!
//! `pcaps_pos` / `pcaps_neg` are accepted as aliases. Capture paths are
//! relative to the record file. Unknown fields are kept and written back.
//!
//! Distillation tuples are JSON lines preceded by a header line.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::rules::parse_rule;

pub const SCHEMA_VERSION: u64 = 1;
pub const DISTILLATION_FORMAT: &str = "refn-distillation";

/// One schema violation, addressed by a JSON-path-like field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn join_errors(v: &[FieldError]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: schema violations: {}", join_errors(.violations))]
    Schema { file: PathBuf, violations: Vec<FieldError> },
    #[error("{record}: missing capture files: {missing:?}")]
    MissingCapture { record: PathBuf, missing: Vec<PathBuf> },
    #[error("split ratio {0} is outside (0, 1)")]
    InvalidRatio(f64),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn cve_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^CVE-\d{4}-\d{4,}$").expect("valid regex"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnRecord {
    pub name: String,
    pub cve: Vec<String>,
    pub vd: String,
    pub devices: Vec<String>,
    pub pcap_pos: Vec<PathBuf>,
    pub pcap_neg: Vec<PathBuf>,
    pub proto: String,
    pub distilled: Option<Vec<String>>,
    /// Fields this version does not know about, preserved verbatim.
    pub extra: Map<String, Value>,
    /// Directory capture paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl VulnRecord {
    pub fn resolve(&self, capture: &Path) -> PathBuf {
        self.base_dir.join(capture)
    }

    pub fn positive_captures(&self) -> impl Iterator<Item = PathBuf> + '_ {
        self.pcap_pos.iter().map(|p| self.resolve(p))
    }

    pub fn negative_captures(&self) -> impl Iterator<Item = PathBuf> + '_ {
        self.pcap_neg.iter().map(|p| self.resolve(p))
    }

    pub fn to_json(&self) -> Value {
        let mut obj = self.extra.clone();
        obj.insert("schema_version".into(), SCHEMA_VERSION.into());
        obj.insert("name".into(), self.name.clone().into());
        obj.insert("cve".into(), self.cve.clone().into());
        obj.insert("vd".into(), self.vd.clone().into());
        obj.insert("devices".into(), self.devices.clone().into());
        let paths = |v: &[PathBuf]| -> Value {
            v.iter()
                .map(|p| Value::String(p.to_string_lossy().into_owned()))
                .collect()
        };
        obj.insert("pcap_pos".into(), paths(&self.pcap_pos));
        obj.insert("pcap_neg".into(), paths(&self.pcap_neg));
        obj.insert("proto".into(), self.proto.clone().into());
        if let Some(d) = &self.distilled {
            obj.insert("distilled".into(), d.clone().into());
        }
        Value::Object(obj)
    }

    /// Validates a JSON value, reporting every violation.
    pub fn from_json(value: &Value, base_dir: &Path) -> Result<Self, Vec<FieldError>> {
        let mut errs = Vec::new();
        let err = |errs: &mut Vec<FieldError>, path: &str, message: &str| {
            errs.push(FieldError {
                path: path.to_string(),
                message: message.to_string(),
            })
        };
        let Some(obj) = value.as_object() else {
            return Err(vec![FieldError {
                path: "$".into(),
                message: "expected a JSON object".into(),
            }]);
        };
        let mut extra = obj.clone();
        for k in [
            "schema_version",
            "name",
            "cve",
            "vd",
            "devices",
            "pcap_pos",
            "pcaps_pos",
            "pcap_neg",
            "pcaps_neg",
            "proto",
            "distilled",
        ] {
            extra.remove(k);
        }

        if let Some(v) = obj.get("schema_version") {
            if v.as_u64() != Some(SCHEMA_VERSION) {
                err(&mut errs, "schema_version", &format!("unsupported version {v}"));
            }
        }

        let string = |errs: &mut Vec<FieldError>, key: &str, non_empty: bool| -> String {
            match obj.get(key) {
                Some(Value::String(s)) if !non_empty || !s.trim().is_empty() => s.clone(),
                Some(Value::String(_)) => {
                    err(errs, key, "must not be empty");
                    String::new()
                }
                Some(_) => {
                    err(errs, key, "expected a string");
                    String::new()
                }
                None => {
                    err(errs, key, "missing required field");
                    String::new()
                }
            }
        };
        let strings = |errs: &mut Vec<FieldError>, key: &str, value: Option<&Value>| -> Vec<String> {
            match value {
                Some(Value::Array(items)) => items
                    .iter()
                    .enumerate()
                    .filter_map(|(i, v)| match v {
                        Value::String(s) => Some(s.clone()),
                        _ => {
                            err(errs, &format!("{key}[{i}]"), "expected a string");
                            None
                        }
                    })
                    .collect(),
                Some(_) => {
                    err(errs, key, "expected an array of strings");
                    Vec::new()
                }
                None => {
                    err(errs, key, "missing required field");
                    Vec::new()
                }
            }
        };
        let aliased = |errs: &mut Vec<FieldError>, key: &str, alias: &str| -> Vec<PathBuf> {
            let (name, v) = match (obj.get(key), obj.get(alias)) {
                (Some(_), Some(_)) => {
                    err(errs, key, &format!("both '{key}' and '{alias}' given"));
                    return Vec::new();
                }
                (Some(v), None) => (key, Some(v)),
                (None, Some(v)) => (alias, Some(v)),
                (None, None) => (key, None),
            };
            let list = strings(errs, name, v);
            if v.is_some() && list.is_empty() && matches!(v, Some(Value::Array(a)) if a.is_empty()) {
                err(errs, name, "needs at least one capture");
            }
            list.into_iter().map(PathBuf::from).collect()
        };

        let name = string(&mut errs, "name", true);
        let cve = strings(&mut errs, "cve", obj.get("cve"));
        for (i, id) in cve.iter().enumerate() {
            if !cve_regex().is_match(id) {
                err(
                    &mut errs,
                    &format!("cve[{i}]"),
                    &format!("{id:?} does not match CVE-YYYY-NNNN"),
                );
            }
        }
        let vd = string(&mut errs, "vd", false);
        let devices = strings(&mut errs, "devices", obj.get("devices"));
        let pcap_pos = aliased(&mut errs, "pcap_pos", "pcaps_pos");
        let pcap_neg = aliased(&mut errs, "pcap_neg", "pcaps_neg");
        let proto = string(&mut errs, "proto", false);
        let distilled = match obj.get("distilled") {
            None | Some(Value::Null) => None,
            v => Some(strings(&mut errs, "distilled", v)),
        };

        if !errs.is_empty() {
            return Err(errs);
        }
        Ok(VulnRecord {
            name,
            cve,
            vd,
            devices,
            pcap_pos,
            pcap_neg,
            proto,
            distilled,
            extra,
            base_dir: base_dir.to_path_buf(),
        })
    }
}

/// Loads and validates a record, then checks that its captures exist.
pub fn load_record(path: &Path) -> Result<VulnRecord, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| DatasetError::Schema {
        file: path.to_path_buf(),
        violations: vec![FieldError {
            path: "$".into(),
            message: format!("invalid JSON: {e}"),
        }],
    })?;
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let record = VulnRecord::from_json(&value, &base).map_err(|violations| DatasetError::Schema {
        file: path.to_path_buf(),
        violations,
    })?;
    let missing: Vec<PathBuf> = record
        .positive_captures()
        .chain(record.negative_captures())
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(DatasetError::MissingCapture {
            record: path.to_path_buf(),
            missing,
        });
    }
    Ok(record)
}

pub fn write_record(record: &VulnRecord, path: &Path) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(&record.to_json()).expect("JSON values serialize");
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Record files of a dataset directory: `*.json` at the top level and
/// `*/record.json` one level down, in path order.
pub fn record_paths(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            let nested = path.join("record.json");
            if nested.is_file() {
                out.push(nested);
            }
        } else if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationTuple {
    pub vulns: Vec<String>,
    pub prompt: String,
    pub filters: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<f64>>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl DistillationTuple {
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if self.filters.is_empty() {
            errs.push(FieldError {
                path: "filters".into(),
                message: "needs at least one filter".into(),
            });
        }
        for (i, f) in self.filters.iter().enumerate() {
            if let Err(e) = parse_rule(f) {
                errs.push(FieldError {
                    path: format!("filters[{i}]"),
                    message: format!("{f:?}: {e}"),
                });
            }
        }
        if let Some(r) = &self.rewards {
            if r.len() != self.filters.len() {
                errs.push(FieldError {
                    path: "rewards".into(),
                    message: format!("{} rewards for {} filters", r.len(), self.filters.len()),
                });
            }
        }
        errs
    }
}

#[derive(Serialize, Deserialize)]
struct DistillationHeader {
    schema_version: u64,
    format: String,
}

pub fn write_distillation(tuples: &[DistillationTuple], path: &Path) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let header = DistillationHeader {
        schema_version: SCHEMA_VERSION,
        format: DISTILLATION_FORMAT.into(),
    };
    let mut write_line = |v: String| writeln!(w, "{v}").map_err(io_err(path));
    write_line(serde_json::to_string(&header).expect("header serializes"))?;
    for t in tuples {
        write_line(serde_json::to_string(t).expect("tuple serializes"))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_distillation(path: &Path) -> Result<Vec<DistillationTuple>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let schema = |violations| DatasetError::Schema {
        file: path.to_path_buf(),
        violations,
    };
    let mut lines = BufReader::new(file).lines();
    let header_line = match lines.next() {
        Some(l) => l.map_err(io_err(path))?,
        None => {
            return Err(schema(vec![FieldError {
                path: "line 1".into(),
                message: "missing header".into(),
            }]))
        }
    };
    match serde_json::from_str::<DistillationHeader>(&header_line) {
        Ok(h) if h.format == DISTILLATION_FORMAT && h.schema_version == SCHEMA_VERSION => {}
        _ => {
            return Err(schema(vec![FieldError {
                path: "line 1".into(),
                message: format!("bad header {header_line:?}"),
            }]))
        }
    }
    let mut out = Vec::new();
    let mut errs = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 2;
        match serde_json::from_str::<DistillationTuple>(&line) {
            Ok(t) => {
                let v = t.validate();
                if v.is_empty() {
                    out.push(t);
                } else {
                    errs.extend(v.into_iter().map(|e| FieldError {
                        path: format!("line {lineno}: {}", e.path),
                        message: e.message,
                    }));
                }
            }
            Err(e) => errs.push(FieldError {
                path: format!("line {lineno}"),
                message: e.to_string(),
            }),
        }
    }
    if errs.is_empty() {
        Ok(out)
    } else {
        Err(schema(errs))
    }
}

/// Seeded shuffle, then `ceil(n * ratio)` items go to the training side.
pub fn split<T>(mut records: Vec<T>, ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidRatio(ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    let n_train = ((records.len() as f64 * ratio) - 1e-9).ceil().max(0.0) as usize;
    let held = records.split_off(n_train.min(records.len()));
    Ok((records, held))
}
