//! The full search, infer, retrain and eval pipeline on a small config.

use udanas::pipeline::{cmd_report, manifest_path, LoadedConfig, RunConfig};

const CONFIG: &str = r#"
profile = "toy"
seed = 2
schemes = ["confidence", "energy"]

[data]
n_source = 16
n_target = 16
n_eval = 8
image_hw = 16

[search]
iterations = 60
warmup_iterations = 20

[retrain]
iterations = 120

[infer]
m = 3
budget_flops = "2.5G"
"#;

fn main() -> udanas::Result<()> {
    let cfg = LoadedConfig::in_memory(RunConfig::from_str_any(CONFIG)?)?;
    let out = std::env::temp_dir().join("udanas_pipeline_report");
    let report = cmd_report(&cfg, &out)?;
    for s in &report.subnets {
        println!(
            "#{} {:<10} {} mIoU {:.3} MACs@256 {} params {}{}",
            s.rank,
            s.candidate.scheme.to_string(),
            s.candidate.description,
            s.metrics.target_miou,
            s.candidate.flops,
            s.candidate.params,
            if s.selected { "  (selected)" } else { "" }
        );
    }
    println!("outputs and manifest in {}", manifest_path(&out).display());
    Ok(())
}
