//! Five-seed comparison of joint single-LoRA training, per-cell LoRAs and
//! the dual-gate mixture on fully conflicting eras.

use tea_moelora::config::RunConfig;
use tea_moelora::router::RoutingMode;
use tea_moelora::synthdata;
use tea_moelora::training::{self, Variant};

fn main() -> tea_moelora::Result<()> {
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|n| (0..n.parse().expect("seed count")).collect())
        .unwrap_or_else(|| (0..5).collect());
    println!("seed  per-cell  no-moe  separate");
    for seed in seeds {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        let data = synthdata::generate(&cfg.synth_spec())?;
        let per_cell = training::train_per_cell(&cfg, &data)?;
        let runs = training::run_ablation_suite(
            &cfg,
            &data,
            &[
                Variant {
                    mode: RoutingMode::NoMoe,
                    granularity: None,
                },
                Variant {
                    mode: RoutingMode::SeparateGates,
                    granularity: None,
                },
            ],
            true,
        )?;
        println!(
            "{seed:>4}  {:.4}    {:.4}  {:.4}",
            per_cell.mean_test_accuracy(),
            runs[0].mean_test_accuracy(),
            runs[1].mean_test_accuracy()
        );
    }
    Ok(())
}
