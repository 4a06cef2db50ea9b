use std::path::Path;

use branchctl::ModelParams;

#[test]
fn bundled_models_load_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("models");
    let mut count = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let m = ModelParams::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let report = m.validate(&m.probe_lattice(-5.0, 5.0, 41));
        assert!(
            report.violations.is_empty(),
            "{}: {:?}",
            path.display(),
            report.violations
        );
        count += 1;
    }
    assert_eq!(count, 6);
}
