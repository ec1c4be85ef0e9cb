//! Experiment reports and their JSON / CSV forms.
//!
//! JSON follows struct field order, so output is byte-stable for a fixed
//! input. CSV uses a long layout (`section,name,field,value`) that keeps every
//! field of the report and parses back to an identical value.

use std::io::Write;
use std::path::Path;

use qet_core::model::SignConvention;
use qet_core::protocol::ProtocolVariant;
use serde::{Deserialize, Serialize};

use crate::config::{Format, OutputSpec};
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableRow {
    pub name: String,
    /// Exact density-matrix value.
    pub analytic: f64,
    /// The same quantity read off the circuit's exact outcome distribution.
    pub exact_circuit: f64,
    pub sampled: f64,
    /// Sample standard deviation over √shots.
    pub sampled_stderr: f64,
    pub noisy: Option<f64>,
    pub mitigated: Option<f64>,
}

/// A sender's deposited energy. `printed_form` carries the opposite sign,
/// the form in which the deposit is often written down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Deposit {
    pub name: String,
    pub value: f64,
    pub printed_form: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub deposits: Vec<Deposit>,
    pub e_receiver: f64,
    /// Sum of the sender-receiver coupling expectations.
    pub v_total: f64,
    pub efficiency_v_only: f64,
    pub phi_used: f64,
    pub phi_mode: String,
    pub sign_convention: SignConvention,
    /// Closed-form receiver energy; minimal model only.
    pub closed_form_e_receiver: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub profile: String,
    pub shots: u64,
    pub mitigation: bool,
    pub tool_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentReport {
    pub variant: ProtocolVariant,
    pub h: f64,
    pub k: f64,
    pub rows: Vec<ObservableRow>,
    pub summary: Summary,
    pub provenance: Provenance,
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub(crate) fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse().map_err(|_| CliError::Report(format!("{what}: '{s}' is not a number")))
}

pub(crate) fn parse_opt(s: &str, what: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_f64(s, what).map(Some)
    }
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| CliError::Report(format!("{what}: unknown value '{s}'")))
}

fn enum_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("unit enums serialize to strings"),
    }
}

pub(crate) fn csv_string(header: &[&str], records: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in records {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("fields are UTF-8")
}

pub(crate) fn csv_records(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| CliError::Report(e.to_string()))?.iter().map(String::from).collect();
    let records = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()).map_err(|e| CliError::Report(e.to_string())))
        .collect::<Result<_>>()?;
    Ok((header, records))
}

const REPORT_HEADER: [&str; 4] = ["section", "name", "field", "value"];

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Report(e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        let mut rec = Vec::new();
        let mut push = |section: &str, name: &str, field: &str, value: String| {
            rec.push(vec![section.to_string(), name.to_string(), field.to_string(), value]);
        };
        push("experiment", "", "variant", enum_name(&self.variant));
        push("experiment", "", "h", fmt_f64(self.h));
        push("experiment", "", "k", fmt_f64(self.k));
        for r in &self.rows {
            push("observable", &r.name, "analytic", fmt_f64(r.analytic));
            push("observable", &r.name, "exact_circuit", fmt_f64(r.exact_circuit));
            push("observable", &r.name, "sampled", fmt_f64(r.sampled));
            push("observable", &r.name, "sampled_stderr", fmt_f64(r.sampled_stderr));
            push("observable", &r.name, "noisy", fmt_opt(r.noisy));
            push("observable", &r.name, "mitigated", fmt_opt(r.mitigated));
        }
        let s = &self.summary;
        for d in &s.deposits {
            push("deposit", &d.name, "value", fmt_f64(d.value));
            push("deposit", &d.name, "printed_form", fmt_f64(d.printed_form));
        }
        push("summary", "", "e_receiver", fmt_f64(s.e_receiver));
        push("summary", "", "v_total", fmt_f64(s.v_total));
        push("summary", "", "efficiency_v_only", fmt_f64(s.efficiency_v_only));
        push("summary", "", "phi_used", fmt_f64(s.phi_used));
        push("summary", "", "phi_mode", s.phi_mode.clone());
        push("summary", "", "sign_convention", enum_name(&s.sign_convention));
        push("summary", "", "closed_form_e_receiver", fmt_opt(s.closed_form_e_receiver));
        let p = &self.provenance;
        push("provenance", "", "seed", p.seed.to_string());
        push("provenance", "", "profile", p.profile.clone());
        push("provenance", "", "shots", p.shots.to_string());
        push("provenance", "", "mitigation", p.mitigation.to_string());
        push("provenance", "", "tool_version", p.tool_version.clone());
        csv_string(&REPORT_HEADER, &rec)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (header, records) = csv_records(text)?;
        if header != REPORT_HEADER {
            return Err(CliError::Report(format!("unexpected CSV header {header:?}")));
        }
        let mut variant = None;
        let (mut h, mut k) = (None, None);
        let mut rows: Vec<ObservableRow> = Vec::new();
        let mut deposits: Vec<Deposit> = Vec::new();
        let mut fields = std::collections::BTreeMap::new();
        for r in &records {
            let [section, name, field, value] = r.as_slice() else {
                return Err(CliError::Report(format!("record {r:?} does not have four fields")));
            };
            let what = format!("{section}.{name}.{field}");
            match section.as_str() {
                "experiment" => match field.as_str() {
                    "variant" => variant = Some(parse_enum(value, &what)?),
                    "h" => h = Some(parse_f64(value, &what)?),
                    "k" => k = Some(parse_f64(value, &what)?),
                    _ => return Err(CliError::Report(format!("unknown field {what}"))),
                },
                "observable" => {
                    if rows.last().map(|row| &row.name) != Some(name) {
                        rows.push(ObservableRow {
                            name: name.clone(),
                            analytic: f64::NAN,
                            exact_circuit: f64::NAN,
                            sampled: f64::NAN,
                            sampled_stderr: f64::NAN,
                            noisy: None,
                            mitigated: None,
                        });
                    }
                    let row = rows.last_mut().expect("pushed above");
                    match field.as_str() {
                        "analytic" => row.analytic = parse_f64(value, &what)?,
                        "exact_circuit" => row.exact_circuit = parse_f64(value, &what)?,
                        "sampled" => row.sampled = parse_f64(value, &what)?,
                        "sampled_stderr" => row.sampled_stderr = parse_f64(value, &what)?,
                        "noisy" => row.noisy = parse_opt(value, &what)?,
                        "mitigated" => row.mitigated = parse_opt(value, &what)?,
                        _ => return Err(CliError::Report(format!("unknown field {what}"))),
                    }
                }
                "deposit" => {
                    if deposits.last().map(|d| &d.name) != Some(name) {
                        deposits.push(Deposit { name: name.clone(), value: f64::NAN, printed_form: f64::NAN });
                    }
                    let d = deposits.last_mut().expect("pushed above");
                    match field.as_str() {
                        "value" => d.value = parse_f64(value, &what)?,
                        "printed_form" => d.printed_form = parse_f64(value, &what)?,
                        _ => return Err(CliError::Report(format!("unknown field {what}"))),
                    }
                }
                "summary" | "provenance" => {
                    fields.insert(field.clone(), value.clone());
                }
                _ => return Err(CliError::Report(format!("unknown section '{section}'"))),
            }
        }
        let mut take = |key: &str| fields.remove(key).ok_or_else(|| CliError::Report(format!("missing field {key}")));
        let summary = Summary {
            deposits,
            e_receiver: parse_f64(&take("e_receiver")?, "e_receiver")?,
            v_total: parse_f64(&take("v_total")?, "v_total")?,
            efficiency_v_only: parse_f64(&take("efficiency_v_only")?, "efficiency_v_only")?,
            phi_used: parse_f64(&take("phi_used")?, "phi_used")?,
            phi_mode: take("phi_mode")?,
            sign_convention: parse_enum(&take("sign_convention")?, "sign_convention")?,
            closed_form_e_receiver: parse_opt(&take("closed_form_e_receiver")?, "closed_form_e_receiver")?,
        };
        let provenance = Provenance {
            seed: take("seed")?.parse().map_err(|_| CliError::Report("seed is not an integer".into()))?,
            profile: take("profile")?,
            shots: take("shots")?.parse().map_err(|_| CliError::Report("shots is not an integer".into()))?,
            mitigation: take("mitigation")?.parse().map_err(|_| CliError::Report("mitigation is not a boolean".into()))?,
            tool_version: take("tool_version")?,
        };
        if let Some(extra) = fields.keys().next() {
            return Err(CliError::Report(format!("unknown field {extra}")));
        }
        let missing = |w: &str| CliError::Report(format!("missing experiment field {w}"));
        let report = ExperimentReport {
            variant: variant.ok_or_else(|| missing("variant"))?,
            h: h.ok_or_else(|| missing("h"))?,
            k: k.ok_or_else(|| missing("k"))?,
            rows,
            summary,
            provenance,
        };
        if report.rows.iter().any(|r| [r.analytic, r.exact_circuit, r.sampled, r.sampled_stderr].iter().any(|v| v.is_nan())) {
            return Err(CliError::Report("observable row with missing fields".into()));
        }
        Ok(report)
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => self.to_json(),
            Format::Csv => self.to_csv(),
        }
    }

    /// Reads a report, choosing the parser from the file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::config::read_to_string(path)?;
        match Format::from_path(path) {
            Format::Json => Self::from_json(&text),
            Format::Csv => Self::from_csv(&text),
        }
        .map_err(|e| CliError::Report(format!("{}: {e}", path.display())))
    }

    pub fn row(&self, name: &str) -> Option<&ObservableRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Writes to the configured file, or stdout when there is none.
pub fn emit(text: &str, output: Option<&OutputSpec>) -> Result<()> {
    match output {
        Some(o) => std::fs::write(&o.path, text).map_err(|e| CliError::io(&o.path, e)),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::io("<stdout>", e)),
    }
}
