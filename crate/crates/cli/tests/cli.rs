use std::path::Path;
use std::process::{Command, Output};

use qet_cli::compare::CompareTable;
use qet_cli::pipeline::SweepReport;
use qet_cli::report::ExperimentReport;

fn qet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qet")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_from_flags_prints_json() {
    let o = qet(&["run", "--variant", "miso", "--h", "1", "--k", "4", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = ExperimentReport::from_json(&stdout(&o)).unwrap();
    assert_eq!(r.provenance.shots, 1024);
    assert_eq!(r.rows.len(), 5);
    for row in &r.rows {
        assert!((row.analytic - row.exact_circuit).abs() <= 1e-9);
    }
}

#[test]
fn run_from_config_writes_csv_that_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("simo.csv");
    let config = write(
        dir.path(),
        "simo.toml",
        &format!(
            "variant = \"simo\"\nh = 1.0\nk = 3.0\nseed = 9\nbackend_profile = \"ibm_kyiv\"\nmitigation = true\n\n[output]\npath = \"{}\"\n",
            out.display()
        ),
    );
    let o = qet(&["run", "--config", &config]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = ExperimentReport::from_csv(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(r.rows.iter().all(|row| row.noisy.is_some() && row.mitigated.is_some()));
    assert_eq!(r.provenance.profile, "ibm_kyiv");
}

#[test]
fn flags_override_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "c.toml", "variant = \"simo\"\nh = 1.0\nk = 3.0\n");
    let o = qet(&["run", "--config", &config, "--shots", "64", "--phi", "optimized", "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = ExperimentReport::from_csv(&stdout(&o)).unwrap();
    assert_eq!(r.provenance.shots, 64);
    assert_eq!(r.summary.phi_mode, "optimized");
}

#[test]
fn identical_configs_give_byte_identical_reports() {
    let args = ["run", "--variant", "simo", "--h", "1", "--k", "3", "--seed", "42", "--profile", "ibm_brisbane", "--mitigation"];
    let a = qet(&args);
    let b = qet(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write(dir.path(), "u.toml", "variant = \"simo\"\nh = 1.0\nk = 3.0\ncolour = \"blue\"\n");
    let negative = write(dir.path(), "n.toml", "variant = \"simo\"\nh = -1.0\nk = 3.0\n");
    for args in [
        vec!["run", "--config", unknown.as_str()],
        vec!["run", "--config", negative.as_str()],
        vec!["run", "--config", "/nonexistent/config.toml"],
        vec!["run", "--variant", "simo", "--h", "1"],
        vec!["run", "--variant", "simo", "--h", "1", "--k", "3", "--profile", "ibm_nowhere"],
        vec!["run", "--variant", "quad", "--h", "1", "--k", "3"],
    ] {
        let o = qet(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn sweep_deduplicates_and_checks_signs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(
        dir.path(),
        "sweep.toml",
        "variant = \"simo\"\nh = [0.5, 1.0, 2.0, 3.0, 4.0]\nk = [0.5, 1.0, 2.0, 3.0, 4.0]\npoints = [[1.0, 3.0]]\nshots = 256\n",
    );
    let o = qet(&["sweep", "--config", &config]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("duplicate grid point"));
    let r = SweepReport::from_json(&stdout(&o)).unwrap();
    assert_eq!(r.points.len(), 25);
    assert!(r.all_v_nonpositive);
    let o = qet(&["sweep", "--config", &config, "--format", "csv"]);
    assert_eq!(SweepReport::from_csv(&stdout(&o)).unwrap(), r);
}

#[test]
fn compare_with_and_without_reference_values() {
    let dir = tempfile::tempdir().unwrap();
    let ideal = dir.path().join("ideal.json");
    let kyiv = dir.path().join("kyiv.csv");
    for (path, extra) in [(&ideal, vec![]), (&kyiv, vec!["--profile", "ibm_kyiv", "--mitigation"])] {
        let mut args = vec!["run", "--variant", "simo", "--h", "1", "--k", "3", "--output", path.to_str().unwrap()];
        args.extend(extra);
        assert!(qet(&args).status.success());
    }
    let (ideal, kyiv) = (ideal.to_str().unwrap(), kyiv.to_str().unwrap());

    let o = qet(&["compare", ideal, kyiv, "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = CompareTable::from_csv(&stdout(&o)).unwrap();
    let row = table.rows.iter().find(|r| r.observable == "V02" && r.source == "ibm_kyiv mitigated").unwrap();
    assert_eq!(row.reference_value, Some(-0.198));

    let o = qet(&["compare", ideal, "--reference", "/nonexistent/values.toml", "--format", "csv"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("warning"));
    assert!(stdout(&o).starts_with("param_set,observable,source,value,stderr\n"));

    let o = qet(&["compare", ideal, "--no-reference"]);
    let table = CompareTable::from_json(&stdout(&o)).unwrap();
    assert!(table.rows.iter().all(|r| r.source == "analytic" || r.source == "simulator"));
}

#[test]
fn profiles_list_names_bundled_devices() {
    let o = qet(&["profiles", "list"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for name in ["ibm_brisbane", "ibm_kyiv", "ibm_sherbrooke"] {
        assert!(text.contains(name), "{text}");
    }
}

#[test]
fn selftest_passes() {
    let o = qet(&["selftest"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(!stdout(&o).contains("FAIL"));
}
