//! Fast internal-consistency checks for an installed binary.

use qet_core::circuit::{build_protocol_circuits, defer_measurements, simulate_exact};
use qet_core::linalg::{eigh, Expectation};
use qet_core::protocol::{closed_form_phi, passivity_check, ProtocolVariant};

use crate::config::ExperimentConfig;
use crate::pipeline::{build_model, run};
use crate::report::ExperimentReport;

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

const CASES: [(ProtocolVariant, f64, f64); 3] =
    [(ProtocolVariant::Minimal, 1.0, 1.5), (ProtocolVariant::Miso, 1.0, 4.0), (ProtocolVariant::Simo, 1.0, 3.0)];

fn check(name: &'static str, f: impl FnOnce() -> crate::error::Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check { name, passed: false, detail: e.to_string() },
    }
}

pub fn run_all() -> Vec<Check> {
    vec![
        check("zero-mean terms", || {
            let mut worst = 0.0f64;
            for (v, h, k) in CASES {
                let m = build_model(v, h, k)?;
                for op in m.locals.iter().map(|t| &t.operator).chain(m.couplings.iter().map(|c| &c.operator)) {
                    worst = worst.max(m.ground.expectation(op)?.abs());
                }
            }
            Ok((worst <= 1e-9, format!("max |<term>| = {worst:.1e}")))
        }),
        check("passivity", || {
            let mut worst = f64::INFINITY;
            for (i, (v, h, k)) in CASES.into_iter().enumerate() {
                let m = build_model(v, h, k)?;
                worst = worst.min(eigh(&m.total)?.eigenvalues[0]);
                let report = passivity_check(&m, v.senders(), v.receivers(), &[], 20, i as u64)?;
                worst = worst.min(report.min_defect());
            }
            Ok((worst >= -1e-9, format!("min eigenvalue / extraction defect {worst:.1e}")))
        }),
        check("circuits match density matrices", || {
            for (v, h, k) in CASES {
                run(&ExperimentConfig::new(v, h, k))?;
            }
            Ok((true, "every row within 1e-9".into()))
        }),
        check("deferred measurement", || {
            let mut worst = 0.0f64;
            for (v, h, k) in CASES {
                let m = build_model(v, h, k)?;
                for pc in build_protocol_circuits(&m, v, closed_form_phi(&m, v)?)?.values() {
                    let a = simulate_exact(&pc.mid)?.distribution;
                    let b = simulate_exact(&defer_measurements(&pc.mid)?)?.distribution;
                    worst = worst.max(a.max_abs_diff(&b));
                }
            }
            Ok((worst <= 1e-12, format!("max distribution difference {worst:.1e}")))
        }),
        check("report round trip", || {
            let mut c = ExperimentConfig::new(ProtocolVariant::Simo, 1.0, 3.0);
            c.backend_profile = "ibm_kyiv".into();
            c.mitigation = true;
            let r = run(&c)?;
            let same = ExperimentReport::from_json(&r.to_json())? == r && ExperimentReport::from_csv(&r.to_csv())? == r;
            let deterministic = run(&c)?.to_json() == r.to_json();
            Ok((same && deterministic, format!("json/csv round trip {same}, deterministic {deterministic}")))
        }),
    ]
}
