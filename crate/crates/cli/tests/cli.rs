use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo")
}

/// A private copy of the demo inputs, optionally edited.
struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        for f in ["network.toml", "certificate.toml", "run.toml"] {
            std::fs::copy(demo_dir().join(f), dir.path().join(f)).unwrap();
        }
        Workspace { dir }
    }

    fn edit(&self, file: &str, from: &str, to: &str) {
        let p = self.dir.path().join(file);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains(from), "{from:?} not in {file}");
        std::fs::write(&p, text.replacen(from, to, 1)).unwrap();
    }

    fn append(&self, file: &str, extra: &str) {
        let p = self.dir.path().join(file);
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, text + extra).unwrap();
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, cmd: &str, extra: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_impabs"))
            .arg(cmd)
            .arg("--config")
            .arg(self.dir.path().join("run.toml"))
            .args(extra)
            .env("IMPABS_OUT_DIR", self.out())
            .output()
            .unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_exit_codes() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run("validate", &[])), 0);

    let bad = Workspace::new();
    bad.edit("network.toml", "-x1 + 0.5*w1 + u1", "-x1 + * w1");
    let o = bad.run("validate", &[]);
    assert_eq!(code(&o), 2);
    let text = std::fs::read_to_string(demo_dir().join("network.toml")).unwrap();
    let line = text.lines().position(|l| l.contains("-x1 + 0.5*w1 + u1")).unwrap() + 1;
    assert!(stderr(&o).contains(&format!("line {line}")), "{}", stderr(&o));

    let shape = Workspace::new();
    shape.edit("network.toml", "coupling = [0.0, 1.0,\n            1.0, 0.0]", "coupling = [0.0, 1.0, 1.0]");
    assert_eq!(code(&shape.run("validate", &[])), 2);

    let none = Command::new(env!("CARGO_BIN_EXE_impabs")).arg("validate").output().unwrap();
    assert_eq!(code(&none), 2);
}

#[test]
fn abstract_exit_codes_and_counts() {
    let ws = Workspace::new();
    let o = ws.run("abstract", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ws.out().join("abstract_report.json")).unwrap()).unwrap();
    for s in report["subsystems"].as_array().unwrap() {
        assert_eq!(s["report"]["abstract_states"], 63);
    }
    let first = std::fs::read(ws.out().join("tables/00_left.json")).unwrap();
    assert_eq!(code(&ws.run("abstract", &[])), 0);
    assert_eq!(first, std::fs::read(ws.out().join("tables/00_left.json")).unwrap());

    let coarse = Workspace::new();
    coarse.edit("run.toml", "eta_x = 0.05", "eta_x = 1.5");
    assert_eq!(code(&coarse.run("abstract", &[])), 2);
}

#[test]
fn certify_exit_codes() {
    let ws = Workspace::new();
    let o = ws.run("certify", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let dwell = Workspace::new();
    dwell.edit("certificate.toml", "kappa_c = 0.5\nkappa_d = 0.25", "kappa_c = 0.0\nkappa_d = 2.0");
    let o = dwell.run("certify", &[]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("dwell_time"), "{}", stderr(&o));

    let lmi = Workspace::new();
    lmi.edit("certificate.toml", "0.5, -1.0]", "0.5, 1.0]");
    let o = lmi.run("certify", &[]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("compositionality_lmi"), "{}", stderr(&o));

    let missing = Workspace::new();
    missing.edit("run.toml", "certificate = \"certificate.toml\"", "certificate = \"nowhere.toml\"");
    assert_eq!(code(&missing.run("certify", &[])), 2);
}

#[test]
fn downstream_commands_need_their_inputs() {
    let ws = Workspace::new();
    for cmd in ["compose", "verify", "simulate", "synthesize"] {
        let o = ws.run(cmd, &[]);
        assert_eq!(code(&o), 2, "{cmd}: {}", stderr(&o));
    }
}

#[test]
fn corrupted_table_is_an_input_error() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run("abstract", &[])), 0);
    assert_eq!(code(&ws.run("certify", &[])), 0);
    let p = ws.out().join("tables/00_left.json");
    let text = std::fs::read_to_string(&p).unwrap();
    std::fs::write(&p, text.replacen("\"format_version\": 1", "\"format_version\": 99", 1).replacen("\"format_version\":1", "\"format_version\":99", 1)).unwrap();
    let o = ws.run("verify", &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("version"), "{}", stderr(&o));
    let o = ws.run("compose", &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn binary_tables_round_trip_through_the_pipeline() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run("abstract", &["--binary"])), 0);
    assert!(ws.out().join("tables/00_left.bin").exists());
    assert!(!ws.out().join("tables/00_left.json").exists());
    let o = ws.run("compose", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ws.out().join("compose_report.json")).unwrap()).unwrap();
    assert_eq!(report["state_count"], 63 * 63);
    assert_eq!(report["format_version"], 1);
}

#[test]
fn sabotaged_bound_fails_with_trace() {
    let ws = Workspace::new();
    ws.edit("run.toml", "runs = 1000\nhorizon = 50", "runs = 50\nhorizon = 20");
    for cmd in ["abstract", "certify", "verify"] {
        let o = ws.run(cmd, &[]);
        assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
    }
    assert_eq!(code(&ws.run("simulate", &[])), 0);
    ws.edit("run.toml", "runs = 50", "runs = 50\neps_tilde_override = 1e-6");
    let o = ws.run("simulate", &[]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let traces: Vec<_> = std::fs::read_dir(ws.out().join("traces")).unwrap().collect();
    assert!(!traces.is_empty());
    let csv = std::fs::read_to_string(traces[0].as_ref().unwrap().path()).unwrap();
    assert!(csv.starts_with("step,time,x1,x2,xh1,xh2,c1,c2,s_tilde,envelope,deviation,eps_hat"));
}

#[test]
fn synthesize_exit_codes() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run("abstract", &[])), 0);
    let o = ws.run("synthesize", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    ws.edit("run.toml", "safe = [[[0.0, 0.6]], [[0.0, 0.6]]]", "safe = [[[0.1, 0.7]], [[0.1, 0.7]]]");
    assert_eq!(code(&ws.run("synthesize", &[])), 1);
    ws.append("run.toml", "");
    ws.edit("run.toml", "safe = [[[0.1, 0.7]], [[0.1, 0.7]]]", "safe = [[[0.1, 0.7]]]");
    assert_eq!(code(&ws.run("synthesize", &[])), 2);
}

#[test]
fn seed_flag_is_recorded() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run("certify", &["--seed", "99"])), 0);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ws.out().join("certify_report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 99);
}
