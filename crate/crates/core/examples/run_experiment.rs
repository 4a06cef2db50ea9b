//! Runs a bundled experiment file the way the `branchctl` binary does and
//! lists the reports it wrote.

use std::path::{Path, PathBuf};

use branchctl::experiment::{run, RunOptions};

pub fn run_example(
    file: &str,
    out: &Path,
    reps: Option<usize>,
) -> Result<bool, Box<dyn std::error::Error>> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("experiments")
        .join(file);
    let opts = RunOptions {
        out: Some(out.to_path_buf()),
        seed: None,
        reps,
    };
    let outcome = run(&config, &opts)?;
    for t in &outcome.manifest.tasks {
        println!(
            "{:<4} {:<24} {}",
            if t.pass { "PASS" } else { "FAIL" },
            t.name,
            t.file
        );
    }
    Ok(outcome.manifest.all_pass)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    let file = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "verify_all.toml".into());
    let out: PathBuf = std::env::temp_dir().join("branchctl-example");
    let ok = run_example(&file, &out, None)?;
    println!("reports in {}", out.display());
    std::process::exit(if ok { 0 } else { 1 });
}
