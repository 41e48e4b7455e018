//! A short architecture search inside the teacher-student loop, then
//! retraining of the MAP subnet with and without target pseudo-labels.

use udanas::data::{generate, ShiftParams};
use udanas::infer::map_brute_force;
use udanas::nn::SupernetOptions;
use udanas::selftrain::{retrain, search_loop, SelfTrainConfig};
use udanas::space::SupernetSpec;

fn main() -> udanas::Result<()> {
    let spec = SupernetSpec::desk_default();
    let data = generate(1, 40, 40, 16, 5, 16, ShiftParams::desk_default())?;
    let cfg = SelfTrainConfig {
        iterations: 60,
        warmup_iterations: 20,
        ema_decay: 0.99,
        recall_ce: false,
        k_random: 1,
        seed: 1,
        ..SelfTrainConfig::default()
    };
    let out = search_loop(&spec, &spec.build_search_mrf()?, &data, &cfg, SupernetOptions::default())?;
    for e in out.log.iter().step_by(15) {
        println!(
            "iter {:3}: src {:.3} tgt {:.3} quality {:.2} |factors| {:.3}",
            e.iteration, e.loss_src, e.loss_tgt, e.quality_mean, e.factor_l2
        );
    }
    let map = spec.decode(&map_brute_force(&out.mrf)?.assignment)?;
    println!("MAP subnet: {}", map.describe(&spec));

    let retrain_cfg = SelfTrainConfig { warmup_iterations: 0, k_random: 0, iterations: 200, ..cfg };
    let source_only = retrain(&spec, &map, &data, &SelfTrainConfig { lambda_t: 0.0, ..retrain_cfg.clone() }, SupernetOptions::default())?;
    let adapted = retrain(&spec, &map, &data, &retrain_cfg, SupernetOptions::default())?;
    println!("target mIoU: source-only {:.3}, self-trained {:.3}", source_only.metrics.target_miou, adapted.metrics.target_miou);
    Ok(())
}
