//! Side-by-side comparison of experiment reports, optionally against a file
//! of published reference values.

use std::collections::BTreeMap;
use std::path::Path;

use qet_core::protocol::ProtocolVariant;
use serde::{Deserialize, Serialize};

use crate::config::NO_PROFILE;
use crate::error::{CliError, Result};
use crate::report::{csv_records, csv_string, fmt_f64, fmt_opt, parse_f64, parse_opt, ExperimentReport};

pub const BUNDLED_REFERENCE: &str = include_str!("../data/reference_values.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceValue {
    pub variant: ProtocolVariant,
    pub h: f64,
    pub k: f64,
    /// Report row name, or several joined by `+` for a sum.
    pub observable: String,
    #[serde(default)]
    pub label: Option<String>,
    pub source: String,
    pub value: f64,
    #[serde(default)]
    pub stderr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceTable {
    #[serde(default)]
    pub value: Vec<ReferenceValue>,
}

impl ReferenceTable {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("reference values: {e}")))
    }

    pub fn bundled() -> Self {
        Self::from_toml_str(BUNDLED_REFERENCE).expect("bundled reference values parse")
    }

    /// `Ok(None)` plus a warning when the file does not exist.
    pub fn load(path: &Path) -> Result<(Option<Self>, Option<String>)> {
        if !path.exists() {
            return Ok((None, Some(format!("reference file {} not found; reference columns omitted", path.display()))));
        }
        Ok((Some(Self::from_toml_str(&crate::config::read_to_string(path)?)?), None))
    }

    fn lookup(&self, variant: ProtocolVariant, h: f64, k: f64, observable: &str, source: &str) -> Option<f64> {
        self.value
            .iter()
            .find(|v| v.variant == variant && v.h == h && v.k == k && v.observable == observable && v.source == source)
            .map(|v| v.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareRow {
    pub param_set: String,
    pub observable: String,
    /// `analytic`, `simulator`, or `<profile> mitigated` / `<profile> unmitigated`.
    pub source: String,
    pub value: f64,
    pub stderr: Option<f64>,
    pub reference_value: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareTable {
    /// False when no reference file was used; the reference columns are
    /// then left out of the CSV.
    pub with_reference: bool,
    pub rows: Vec<CompareRow>,
}

fn param_set(r: &ExperimentReport) -> String {
    format!("{} (h={}, k={})", r.variant.name(), r.h, r.k)
}

/// One value with its error bar per source, for a single observable.
type Sources = Vec<(String, f64, Option<f64>)>;

fn sources_for(group: &[&ExperimentReport], name: &str) -> Option<Sources> {
    let first = group[0];
    let row = first.row(name)?;
    let mut out = vec![("analytic".to_string(), row.analytic, None), ("simulator".to_string(), row.sampled, Some(row.sampled_stderr))];
    for r in group {
        if r.provenance.profile == NO_PROFILE {
            continue;
        }
        let row = r.row(name)?;
        if let Some(v) = row.mitigated {
            out.push((format!("{} mitigated", r.provenance.profile), v, None));
        }
        if let Some(v) = row.noisy {
            out.push((format!("{} unmitigated", r.provenance.profile), v, None));
        }
    }
    Some(out)
}

/// Sums component sources pointwise; error bars add in quadrature.
fn combine(parts: &[Sources]) -> Sources {
    parts[0]
        .iter()
        .enumerate()
        .map(|(i, (source, _, _))| {
            let value = parts.iter().map(|p| p[i].1).sum();
            let stderr = parts.iter().map(|p| p[i].2.map(|s| s * s)).sum::<Option<f64>>().map(f64::sqrt);
            (source.clone(), value, stderr)
        })
        .collect()
}

pub fn compare(reports: &[ExperimentReport], reference: Option<&ReferenceTable>) -> Result<CompareTable> {
    if reports.is_empty() {
        return Err(CliError::Config("compare needs at least one report".into()));
    }
    let mut groups: Vec<Vec<&ExperimentReport>> = Vec::new();
    for r in reports {
        match groups.iter_mut().find(|g| g[0].variant == r.variant && g[0].h == r.h && g[0].k == r.k) {
            Some(g) => g.push(r),
            None => groups.push(vec![r]),
        }
    }
    let mut rows = Vec::new();
    for group in &groups {
        let first = group[0];
        let names: Vec<&str> = first.rows.iter().map(|r| r.name.as_str()).collect();
        let mut profiles = Vec::new();
        for r in group {
            let other: Vec<&str> = r.rows.iter().map(|r| r.name.as_str()).collect();
            if other != names {
                return Err(CliError::Report(format!("reports for {} have different observables", param_set(first))));
            }
            for (a, b) in first.rows.iter().zip(&r.rows) {
                if (a.analytic - b.analytic).abs() > 1e-9 {
                    return Err(CliError::Report(format!(
                        "reports for {} disagree on the exact value of {} (different angle settings?)",
                        param_set(first),
                        a.name
                    )));
                }
            }
            if r.provenance.profile != NO_PROFILE {
                if profiles.contains(&r.provenance.profile) {
                    return Err(CliError::Report(format!("two reports for {} with profile {}", param_set(first), r.provenance.profile)));
                }
                profiles.push(r.provenance.profile.clone());
            }
        }
        let mut observables: BTreeMap<String, Sources> = BTreeMap::new();
        for name in &names {
            observables.insert(name.to_string(), sources_for(group, name).expect("rows checked above"));
        }
        if let Some(table) = reference {
            for v in table.value.iter().filter(|v| v.variant == first.variant && v.h == first.h && v.k == first.k) {
                if observables.contains_key(&v.observable) || !v.observable.contains('+') {
                    continue;
                }
                let parts: Option<Vec<Sources>> = v.observable.split('+').map(|n| sources_for(group, n.trim())).collect();
                if let Some(parts) = parts {
                    observables.insert(v.observable.clone(), combine(&parts));
                }
            }
        }
        for (observable, sources) in observables {
            let mut sources = sources;
            // analytic, simulator, then the device sources alphabetically.
            sources[2..].sort_by(|a, b| a.0.cmp(&b.0));
            for (source, value, stderr) in sources {
                let reference_value =
                    reference.and_then(|t| t.lookup(first.variant, first.h, first.k, &observable, &source));
                rows.push(CompareRow {
                    param_set: param_set(first),
                    observable: observable.clone(),
                    source,
                    value,
                    stderr,
                    reference_value,
                    delta: reference_value.map(|r| value - r),
                });
            }
        }
    }
    Ok(CompareTable { with_reference: reference.is_some(), rows })
}

impl CompareTable {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("table serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Report(e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        let mut header = vec!["param_set", "observable", "source", "value", "stderr"];
        if self.with_reference {
            header.extend(["reference_value", "delta"]);
        }
        let records: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut rec = vec![r.param_set.clone(), r.observable.clone(), r.source.clone(), fmt_f64(r.value), fmt_opt(r.stderr)];
                if self.with_reference {
                    rec.extend([fmt_opt(r.reference_value), fmt_opt(r.delta)]);
                }
                rec
            })
            .collect();
        csv_string(&header, &records)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (header, records) = csv_records(text)?;
        let with_reference = match header.len() {
            5 => false,
            7 => true,
            _ => return Err(CliError::Report(format!("unexpected comparison header {header:?}"))),
        };
        let rows = records
            .iter()
            .map(|r| {
                if r.len() != header.len() {
                    return Err(CliError::Report(format!("record {r:?} has the wrong width")));
                }
                Ok(CompareRow {
                    param_set: r[0].clone(),
                    observable: r[1].clone(),
                    source: r[2].clone(),
                    value: parse_f64(&r[3], "value")?,
                    stderr: parse_opt(&r[4], "stderr")?,
                    reference_value: if with_reference { parse_opt(&r[5], "reference_value")? } else { None },
                    delta: if with_reference { parse_opt(&r[6], "delta")? } else { None },
                })
            })
            .collect::<Result<_>>()?;
        Ok(CompareTable { with_reference, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::pipeline::run;

    fn simo_13(profile: &str) -> ExperimentReport {
        let mut c = ExperimentConfig::new(ProtocolVariant::Simo, 1.0, 3.0);
        if profile != NO_PROFILE {
            c.backend_profile = profile.into();
            c.mitigation = true;
        }
        run(&c).unwrap()
    }

    #[test]
    fn bundled_reference_parses() {
        let t = ReferenceTable::bundled();
        assert_eq!(t.lookup(ProtocolVariant::Simo, 1.0, 3.0, "V02", "ibm_kyiv mitigated"), Some(-0.198));
        assert_eq!(t.lookup(ProtocolVariant::Minimal, 1.5, 1.0, "E_a", "analytic"), Some(1.2481));
    }

    #[test]
    fn kyiv_row_carries_reference_value() {
        let table = compare(&[simo_13(NO_PROFILE), simo_13("ibm_kyiv")], Some(&ReferenceTable::bundled())).unwrap();
        let row = table.rows.iter().find(|r| r.observable == "V02" && r.source == "ibm_kyiv mitigated").unwrap();
        assert_eq!(row.reference_value, Some(-0.198));
        assert_eq!(row.delta, Some(row.value + 0.198));
        assert_eq!(CompareTable::from_csv(&table.to_csv()).unwrap(), table);
        assert_eq!(CompareTable::from_json(&table.to_json()).unwrap(), table);
    }

    #[test]
    fn noiseless_report_degenerates_to_analytic_and_simulator() {
        let table = compare(&[simo_13(NO_PROFILE)], None).unwrap();
        assert!(table.rows.iter().all(|r| r.source == "analytic" || r.source == "simulator"));
        assert!(!table.to_csv().contains("reference_value"));
        assert_eq!(CompareTable::from_csv(&table.to_csv()).unwrap(), table);
    }

    #[test]
    fn summed_observables_come_from_reference_keys() {
        let r = run(&ExperimentConfig::new(ProtocolVariant::Miso, 1.0, 4.0)).unwrap();
        let table = compare(std::slice::from_ref(&r), Some(&ReferenceTable::bundled())).unwrap();
        let sum = table.rows.iter().find(|x| x.observable == "V02+V12" && x.source == "analytic").unwrap();
        assert!((sum.value - r.summary.v_total).abs() < 1e-12);
        assert_eq!(sum.reference_value, Some(-0.46));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = simo_13(NO_PROFILE);
        let mut b = simo_13("ibm_kyiv");
        b.rows.pop();
        assert!(compare(&[a.clone(), b], None).is_err());
        assert!(compare(&[simo_13("ibm_kyiv"), simo_13("ibm_kyiv")], None).is_err());
        assert!(compare(&[], None).is_err());
    }

    #[test]
    fn missing_reference_file_is_a_warning() {
        let (table, warning) = ReferenceTable::load(Path::new("/nonexistent/reference.toml")).unwrap();
        assert!(table.is_none());
        assert!(warning.unwrap().contains("omitted"));
    }
}
