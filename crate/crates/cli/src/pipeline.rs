//! Experiment pipeline: model, exact protocol pass, circuits, sampling,
//! readout noise and mitigation.

use std::collections::BTreeMap;

use qet_core::circuit::{
    build_deposit_circuits, build_protocol_circuits, estimate_observable, simulate_exact, IdealSampler, Sampler,
};
use qet_core::model::{build, compute_angles, ModelInstance, ModelParams};
use qet_core::noise::{estimate_calibration_matrix, mitigate, MitigationMethod, NoisySampler};
use qet_core::protocol::{self, optimize_phi, ProtocolResult, ProtocolVariant};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, PhiMode, SweepConfig};
use crate::error::{CliError, Result};
use crate::report::{
    csv_records, csv_string, fmt_f64, parse_f64, Deposit, ExperimentReport, ObservableRow, Provenance, Summary,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Agreement required between the density-matrix and circuit paths.
pub const EXACT_TOL: f64 = 1e-9;

pub fn build_model(variant: ProtocolVariant, h: f64, k: f64) -> Result<ModelInstance> {
    let params = ModelParams::new(h, k, variant.model_variant()).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(build(params)?)
}

fn analytic_value(result: &ProtocolResult, name: &str) -> Result<f64> {
    let missing = || CliError::Invariant(format!("no exact value for observable {name}"));
    let digit = |c: char| c.to_digit(10).map(|d| d as usize).ok_or_else(missing);
    let chars: Vec<char> = name.chars().collect();
    match chars.as_slice() {
        ['E', '_', 'a'] => Ok(result.deposit_alice),
        ['E', '_', 'c'] => result.deposit_charlie.ok_or_else(missing),
        ['H', n] => result.h_terms.get(&digit(*n)?).copied().ok_or_else(missing),
        ['V', i, j] => result.v_terms.get(&(digit(*i)?, digit(*j)?)).copied().ok_or_else(missing),
        _ => Err(missing()),
    }
}

pub fn resolve_phi(model: &ModelInstance, variant: ProtocolVariant, mode: PhiMode) -> Result<f64> {
    Ok(match mode {
        PhiMode::ClosedForm => protocol::closed_form_phi(model, variant)?,
        PhiMode::Optimized => optimize_phi(model, variant)?.phi,
        PhiMode::Explicit(phi) => phi,
    })
}

pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let variant = config.variant;
    let model = build_model(variant, config.h, config.k)?;
    let angles = compute_angles(&model, variant.senders()[0], variant.receivers()[0])?;
    let phi = resolve_phi(&model, variant, config.phi_mode)?;
    let exact = protocol::run(&model, variant, phi)?;

    let closed_form_e_receiver = (variant == ProtocolVariant::Minimal).then(|| angles.closed_form_receiver_energy());
    if let (Some(cf), PhiMode::ClosedForm) = (closed_form_e_receiver, config.phi_mode) {
        if (cf - exact.receiver_energy).abs() > EXACT_TOL {
            return Err(CliError::Invariant(format!(
                "closed-form receiver energy {cf} differs from the density-matrix value {}",
                exact.receiver_energy
            )));
        }
    }

    let mut circuits = build_deposit_circuits(&model, variant)?;
    circuits.extend(build_protocol_circuits(&model, variant, phi)?);

    let noisy = config.profile()?.map(NoisySampler::new);
    let calibration = match (&noisy, config.mitigation) {
        (Some(s), true) => Some(estimate_calibration_matrix(s, model.n_qubits(), config.shots, config.seed)?),
        _ => None,
    };

    let mut rows = Vec::with_capacity(circuits.len());
    for (name, pc) in &circuits {
        let analytic = analytic_value(&exact, name)?;
        let estimate = |d| estimate_observable(&BTreeMap::from([(name.clone(), d)]), &pc.observable);
        let exact_circuit = estimate(simulate_exact(&pc.mid)?.distribution)?.value;
        if (exact_circuit - analytic).abs() > EXACT_TOL {
            return Err(CliError::Invariant(format!(
                "{name}: circuit value {exact_circuit} differs from density-matrix value {analytic}"
            )));
        }
        let sampled = estimate_observable(
            &BTreeMap::from([(name.clone(), IdealSampler.sample(&pc.mid, config.shots, config.seed)?)]),
            &pc.observable,
        )?;
        let (noisy_value, mitigated) = match &noisy {
            Some(s) => {
                let hist = s.sample(&pc.mid, config.shots, config.seed)?;
                let raw = estimate_observable(&BTreeMap::from([(name.clone(), hist.clone())]), &pc.observable)?.value;
                let mitigated = match &calibration {
                    Some(m) => {
                        let q = mitigate(&hist, m, MitigationMethod::Nnls)?;
                        Some(estimate_observable(&BTreeMap::from([(name.clone(), q)]), &pc.observable)?.value)
                    }
                    None => None,
                };
                (Some(raw), mitigated)
            }
            None => (None, None),
        };
        rows.push(ObservableRow {
            name: name.clone(),
            analytic,
            exact_circuit,
            sampled: sampled.value,
            sampled_stderr: sampled.stderr,
            noisy: noisy_value,
            mitigated,
        });
    }

    let mut deposits = vec![Deposit { name: "E_a".into(), value: exact.deposit_alice, printed_form: -exact.deposit_alice }];
    if let Some(c) = exact.deposit_charlie {
        deposits.push(Deposit { name: "E_c".into(), value: c, printed_form: -c });
    }
    Ok(ExperimentReport {
        variant,
        h: config.h,
        k: config.k,
        rows,
        summary: Summary {
            deposits,
            e_receiver: exact.receiver_energy,
            v_total: exact.extracted_v(),
            efficiency_v_only: exact.efficiency_v_only,
            phi_used: phi,
            phi_mode: config.phi_mode.label(),
            sign_convention: angles.sign_convention,
            closed_form_e_receiver,
        },
        provenance: Provenance {
            seed: config.seed,
            profile: config.backend_profile.clone(),
            shots: config.shots,
            mitigation: config.mitigation,
            tool_version: TOOL_VERSION.into(),
        },
    })
}

/// Largest coupling value tolerated as "not positive".
pub const V_SIGN_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub h: f64,
    pub k: f64,
    pub summary: Summary,
    /// Sender-receiver couplings at the energy-optimal angle.
    pub optimal_v: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepReport {
    pub variant: ProtocolVariant,
    pub points: Vec<SweepPoint>,
    /// One line per point whose optimal-angle couplings are all nonpositive,
    /// or per offending term otherwise.
    pub assertions: Vec<String>,
    pub all_v_nonpositive: bool,
    pub provenance: Provenance,
}

impl SweepReport {
    fn assemble(variant: ProtocolVariant, points: Vec<SweepPoint>, provenance: Provenance) -> Self {
        let mut assertions = Vec::new();
        let mut ok = true;
        for p in &points {
            let bad: Vec<_> = p.optimal_v.iter().filter(|(_, &v)| v > V_SIGN_TOL).collect();
            if bad.is_empty() {
                assertions.push(format!("ok   (h, k) = ({}, {}): all V <= {V_SIGN_TOL:e}", p.h, p.k));
            }
            for (name, v) in bad {
                ok = false;
                assertions.push(format!("FAIL (h, k) = ({}, {}): {name} = {v} > {V_SIGN_TOL:e}", p.h, p.k));
            }
        }
        SweepReport { variant, points, assertions, all_v_nonpositive: ok, provenance }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Report(e.to_string()))
    }

    fn v_names(&self) -> Vec<String> {
        self.points.first().map(|p| p.optimal_v.keys().cloned().collect()).unwrap_or_default()
    }

    /// One row per grid point; assertions are rebuilt from the data on parse.
    pub fn to_csv(&self) -> String {
        let v_names = self.v_names();
        let deposit_names: Vec<String> =
            self.points.first().map(|p| p.summary.deposits.iter().map(|d| d.name.clone()).collect()).unwrap_or_default();
        let mut header: Vec<String> = ["variant", "h", "k"].map(String::from).to_vec();
        header.extend(deposit_names.iter().map(|n| format!("deposit_{n}")));
        header.extend(
            ["e_receiver", "v_total", "efficiency_v_only", "phi_used", "phi_mode", "sign_convention", "closed_form_e_receiver"]
                .map(String::from),
        );
        header.extend(v_names.iter().map(|n| format!("optimal_{n}")));
        header.extend(["seed", "profile", "shots", "mitigation", "tool_version"].map(String::from));
        let p = &self.provenance;
        let records: Vec<Vec<String>> = self
            .points
            .iter()
            .map(|pt| {
                let s = &pt.summary;
                let mut r = vec![enum_str(&self.variant), fmt_f64(pt.h), fmt_f64(pt.k)];
                r.extend(s.deposits.iter().map(|d| fmt_f64(d.value)));
                r.extend([
                    fmt_f64(s.e_receiver),
                    fmt_f64(s.v_total),
                    fmt_f64(s.efficiency_v_only),
                    fmt_f64(s.phi_used),
                    s.phi_mode.clone(),
                    enum_str(&s.sign_convention),
                    crate::report::fmt_opt(s.closed_form_e_receiver),
                ]);
                r.extend(pt.optimal_v.values().map(|v| fmt_f64(*v)));
                r.extend([p.seed.to_string(), p.profile.clone(), p.shots.to_string(), p.mitigation.to_string(), p.tool_version.clone()]);
                r
            })
            .collect();
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        csv_string(&header_refs, &records)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (header, records) = csv_records(text)?;
        let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| CliError::Report(format!("missing column {name}")));
        let deposit_cols: Vec<(String, usize)> =
            header.iter().enumerate().filter_map(|(i, h)| h.strip_prefix("deposit_").map(|n| (n.to_string(), i))).collect();
        let v_cols: Vec<(String, usize)> =
            header.iter().enumerate().filter_map(|(i, h)| h.strip_prefix("optimal_").map(|n| (n.to_string(), i))).collect();
        let first = records.first().ok_or_else(|| CliError::Report("sweep CSV has no rows".into()))?;
        let get = |r: &Vec<String>, name: &str| -> Result<String> { Ok(r[col(name)?].clone()) };
        let bad = |what: &str| CliError::Report(format!("{what} is malformed"));
        let variant = serde_json::from_value(serde_json::Value::String(get(first, "variant")?)).map_err(|_| bad("variant"))?;
        let provenance = Provenance {
            seed: get(first, "seed")?.parse().map_err(|_| bad("seed"))?,
            profile: get(first, "profile")?,
            shots: get(first, "shots")?.parse().map_err(|_| bad("shots"))?,
            mitigation: get(first, "mitigation")?.parse().map_err(|_| bad("mitigation"))?,
            tool_version: get(first, "tool_version")?,
        };
        let mut points = Vec::new();
        for r in &records {
            if r.len() != header.len() {
                return Err(bad("row width"));
            }
            let num = |name: &str| -> Result<f64> { parse_f64(&get(r, name)?, name) };
            let summary = Summary {
                deposits: deposit_cols
                    .iter()
                    .map(|(n, i)| {
                        let v = parse_f64(&r[*i], n)?;
                        Ok(Deposit { name: n.clone(), value: v, printed_form: -v })
                    })
                    .collect::<Result<_>>()?,
                e_receiver: num("e_receiver")?,
                v_total: num("v_total")?,
                efficiency_v_only: num("efficiency_v_only")?,
                phi_used: num("phi_used")?,
                phi_mode: get(r, "phi_mode")?,
                sign_convention: serde_json::from_value(serde_json::Value::String(get(r, "sign_convention")?))
                    .map_err(|_| bad("sign_convention"))?,
                closed_form_e_receiver: crate::report::parse_opt(&get(r, "closed_form_e_receiver")?, "closed_form_e_receiver")?,
            };
            let optimal_v = v_cols.iter().map(|(n, i)| Ok((n.clone(), parse_f64(&r[*i], n)?))).collect::<Result<_>>()?;
            points.push(SweepPoint { h: num("h")?, k: num("k")?, summary, optimal_v });
        }
        Ok(Self::assemble(variant, points, provenance))
    }
}

fn enum_str<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("unit enums serialize to strings"),
    }
}

/// Couplings between a sender and a receiver; receiver-receiver terms are
/// not extraction channels.
fn crosses(variant: ProtocolVariant, i: usize, j: usize) -> bool {
    let (s, r) = (variant.senders(), variant.receivers());
    (s.contains(&i) && r.contains(&j)) || (s.contains(&j) && r.contains(&i))
}

/// Runs every grid point independently (in parallel) and merges the
/// summaries in grid order. Returns the report and the grid warnings.
pub fn sweep(config: &SweepConfig) -> Result<(SweepReport, Vec<String>)> {
    let (grid, warnings) = config.grid()?;
    let variant = config.variant;
    let points: Vec<Result<SweepPoint>> = grid
        .par_iter()
        .map(|&(h, k)| {
            let report = run(&config.point(h, k))?;
            let model = build_model(variant, h, k)?;
            let best = protocol::run(&model, variant, optimize_phi(&model, variant)?.phi)?;
            let optimal_v = best
                .v_terms
                .iter()
                .filter(|&(&(i, j), _)| crosses(variant, i, j))
                .map(|(&(i, j), &v)| (format!("V{i}{j}"), v))
                .collect();
            Ok(SweepPoint { h, k, summary: report.summary, optimal_v })
        })
        .collect();
    let points = points.into_iter().collect::<Result<Vec<_>>>()?;
    let provenance = Provenance {
        seed: config.seed,
        profile: config.backend_profile.clone(),
        shots: config.shots,
        mitigation: config.mitigation,
        tool_version: TOOL_VERSION.into(),
    };
    Ok((SweepReport::assemble(variant, points, provenance), warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_rows_agree_with_circuits() {
        for (variant, h, k) in [(ProtocolVariant::Minimal, 1.5, 1.0), (ProtocolVariant::Miso, 1.0, 4.0), (ProtocolVariant::Simo, 1.0, 3.0)] {
            let r = run(&ExperimentConfig::new(variant, h, k)).unwrap();
            for row in &r.rows {
                assert!((row.analytic - row.exact_circuit).abs() <= EXACT_TOL, "{}", row.name);
                assert!(row.noisy.is_none() && row.mitigated.is_none());
            }
        }
    }

    #[test]
    fn row_names_by_variant() {
        let names = |v| run(&ExperimentConfig::new(v, 1.0, 3.0)).unwrap().rows.into_iter().map(|r| r.name).collect::<Vec<_>>();
        assert_eq!(names(ProtocolVariant::Minimal), ["E_a", "H1", "V01"]);
        assert_eq!(names(ProtocolVariant::Miso), ["E_a", "E_c", "H2", "V02", "V12"]);
        assert_eq!(names(ProtocolVariant::Simo), ["E_a", "H1", "H2", "V01", "V02"]);
    }

    #[test]
    fn minimal_summary_matches_closed_forms() {
        let r = run(&ExperimentConfig::new(ProtocolVariant::Minimal, 1.0, 1.5)).unwrap();
        let params = ModelParams::minimal(1.0, 1.5).unwrap();
        assert!((r.summary.phi_used - qet_core::model::minimal_closed_form_phi(params)).abs() < 1e-12);
        assert!((r.summary.closed_form_e_receiver.unwrap() - r.summary.e_receiver).abs() < EXACT_TOL);
        let e_a = 1.0 / (1.0f64 + 2.25).sqrt();
        assert!((r.summary.deposits[0].value - e_a).abs() < 1e-9);
        assert_eq!(r.summary.deposits[0].printed_form, -r.summary.deposits[0].value);
    }

    #[test]
    fn decoupled_limit_extracts_nothing() {
        let r = run(&ExperimentConfig::new(ProtocolVariant::Minimal, 1.0, 1e-6)).unwrap();
        for row in r.rows.iter().filter(|r| r.name != "E_a") {
            assert!(row.analytic.abs() < 1e-5, "{} = {}", row.name, row.analytic);
        }
        assert!(r.summary.e_receiver.abs() < 1e-5);
    }

    #[test]
    fn identical_configs_give_identical_reports() {
        let mut c = ExperimentConfig::new(ProtocolVariant::Simo, 1.0, 3.0);
        c.backend_profile = "ibm_kyiv".into();
        c.mitigation = true;
        c.seed = 11;
        assert_eq!(run(&c).unwrap().to_json(), run(&c).unwrap().to_json());
        let mut d = c.clone();
        d.seed = 12;
        assert_ne!(run(&c).unwrap().rows, run(&d).unwrap().rows);
    }

    #[test]
    fn mitigation_fills_both_noisy_columns() {
        let mut c = ExperimentConfig::new(ProtocolVariant::Miso, 1.0, 4.0);
        c.backend_profile = "ibm_sherbrooke".into();
        c.mitigation = true;
        c.shots = 20_000;
        let r = run(&c).unwrap();
        assert!(r.rows.iter().all(|row| row.noisy.is_some() && row.mitigated.is_some()));
    }

    #[test]
    fn sweep_grid_has_nonpositive_couplings() {
        let axis = [0.5, 1.0, 2.0, 3.0, 4.0];
        let config = SweepConfig {
            variant: ProtocolVariant::Simo,
            h: axis.to_vec(),
            k: axis.to_vec(),
            points: vec![],
            shots: 256,
            seed: 1,
            backend_profile: "none".into(),
            mitigation: false,
            phi_mode: PhiMode::ClosedForm,
            output: None,
        };
        let (report, warnings) = sweep(&config).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(report.points.len(), 25);
        assert!(report.all_v_nonpositive, "{:?}", report.assertions);
        assert_eq!(SweepReport::from_csv(&report.to_csv()).unwrap(), report);
        assert_eq!(SweepReport::from_json(&report.to_json()).unwrap(), report);
    }

    #[test]
    fn single_point_sweep_equals_run() {
        let config = SweepConfig {
            variant: ProtocolVariant::Miso,
            h: vec![],
            k: vec![],
            points: vec![[1.0, 4.0], [1.0, 4.0]],
            shots: 1024,
            seed: 5,
            backend_profile: "none".into(),
            mitigation: false,
            phi_mode: PhiMode::Optimized,
            output: None,
        };
        let (report, warnings) = sweep(&config).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(report.points.len(), 1);
        assert_eq!(report.points[0].summary, run(&config.point(1.0, 4.0)).unwrap().summary);
    }
}
