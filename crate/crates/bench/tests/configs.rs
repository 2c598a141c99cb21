use mast_bench::config::ExperimentConfig;
use mast_bench::experiment;

#[test]
fn shipped_configs_load_and_prepare() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            let p = experiment::prepare(&cfg).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert!(p.gamma > 0.0, "{}", path.display());
            seen += 1;
        }
    }
    assert!(seen >= 5);
}
