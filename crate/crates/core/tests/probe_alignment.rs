//! Rank agreement between probe forgetting and full-run accuracy on the desk
//! benchmark. Reported, not asserted. Run with `cargo test -- --ignored`.

use cilcomp::experiments::{prepare, probe_rates, run_pipeline, RunConfig};
use cilcomp::selection::spearman;

#[test]
#[ignore = "trains one full run per probed quality (about 10 minutes)"]
fn probe_forgetting_tracks_full_runs() {
    let root = tempfile::tempdir().unwrap();
    let path = |p: &str| format!("{:?}", root.path().join(p).display().to_string());
    let base = [
        format!("output_dir={}", path("probe")),
        format!("cache_dir={}", path("cache")),
        "compression.candidates=[{method=\"jpeg\", qualities=[10, 25, 50, 75]}]".to_string(),
    ];
    let cfg = RunConfig::from_toml(include_str!("../../../configs/desk.toml"), &base).unwrap();
    let probes = probe_rates(&cfg, &prepare(&cfg).unwrap()).unwrap();
    let mut forgetting = Vec::new();
    let mut last = Vec::new();
    for r in &probes.results {
        let mut o = base.to_vec();
        o[0] = format!("output_dir={}", path(&r.codec.label()));
        o.push("compression.candidates=[]".into());
        o.push(format!("compression.fixed={{method=\"jpeg\", quality={}}}", r.codec.quality));
        let rec = run_pipeline(&RunConfig::from_toml(include_str!("../../../configs/desk.toml"), &o).unwrap()).unwrap();
        println!("{}: forgetting {:+.3}, final accuracy {:.3}", r.codec, r.forgetting, rec.last_accuracy.unwrap());
        forgetting.push(r.forgetting);
        last.push(rec.last_accuracy.unwrap());
    }
    println!("spearman(forgetting, final accuracy) = {:?}", spearman(&forgetting, &last));
}
