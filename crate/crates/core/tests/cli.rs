use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_branchctl"))
}

fn experiment(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("experiments")
        .join(name)
        .display()
        .to_string()
}

#[test]
fn help_and_version() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--config",
        "--out",
        "--seed",
        "--reps",
        "--threads",
        "Exit codes",
    ] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    let out = bin().arg("--version").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn missing_config_flag_is_usage_error() {
    assert_eq!(bin().output().unwrap().status.code(), Some(2));
    assert_eq!(
        bin().args(["--config"]).output().unwrap().status.code(),
        Some(2)
    );
}

#[test]
fn successful_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "--config",
            &experiment("extinction.toml"),
            "--reps",
            "2000",
            "--seed",
            "5",
        ])
        .arg("--out")
        .arg(dir.path())
        .args(["--threads", "1"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["reps"], 2000);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("task,kind,check,estimate,stderr,target,band,pass"));
}

fn write_case(dir: &Path, body: &str) -> String {
    let model = Path::new(env!("CARGO_MANIFEST_DIR")).join("models/critical_binary.toml");
    let path = dir.join("case.toml");
    let text = body.replace("MODEL", &model.display().to_string().replace('\\', "/"));
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

const BASE: &str = r#"
model = "MODEL"

[simulation]
horizon = 1.0
step = 0.1
reps = 100
seed = 1
initial = [[0.0]]
"#;

#[test]
fn unknown_key_is_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_case(dir.path(), &format!("{BASE}bogus = 1\n"));
    let out = bin().args(["--config", &cfg]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cfl_violation_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{BASE}\n[grid]\nx_lo = -1.0\nx_hi = 1.0\nn_x = 21\nn_t = 1\n\n[[task]]\nkind = \"solve\"\nname = \"s\"\n"
    );
    let cfg = write_case(dir.path(), &body);
    let out = bin()
        .args(["--config", &cfg])
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn missing_model_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("case.toml");
    let body = format!("{BASE}\n[[task]]\nkind = \"moment\"\nname = \"m\"\n");
    std::fs::write(&path, body.replace("MODEL", "/nonexistent/model.toml")).unwrap();
    let out = bin().arg("--config").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}
