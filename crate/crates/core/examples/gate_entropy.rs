//! Mean gate entropy of the dual-gate model against the single-signal
//! ablations, per axis, across seeds.

use tea_moelora::analysis::{self, Axis};
use tea_moelora::config::RunConfig;
use tea_moelora::router::RoutingMode;
use tea_moelora::synthdata;
use tea_moelora::training;

fn entropy(
    cfg: &RunConfig,
    data: &synthdata::Splits,
    mode: RoutingMode,
    axis: Axis,
) -> tea_moelora::Result<f64> {
    let mut c = cfg.clone();
    c.train.mode = mode;
    let run = training::train(&c, data)?;
    let m = analysis::utilization(&run.model, &data.test, axis)?;
    Ok(analysis::smoothness(&m)?.entropy)
}

fn main() -> tea_moelora::Result<()> {
    let n: u64 = std::env::args()
        .nth(1)
        .map_or(5, |s| s.parse().expect("seed count"));
    println!("seed  tea.task  task-only  tea.era  era-only");
    for seed in 0..n {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        let data = synthdata::generate(&cfg.synth_spec())?;
        let tea = {
            let mut c = cfg.clone();
            c.train.mode = RoutingMode::SeparateGates;
            let run = training::train(&c, &data)?;
            let t =
                analysis::smoothness(&analysis::utilization(&run.model, &data.test, Axis::Task)?)?;
            let e =
                analysis::smoothness(&analysis::utilization(&run.model, &data.test, Axis::Era)?)?;
            (t.entropy, e.entropy)
        };
        let task_only = entropy(&cfg, &data, RoutingMode::TaskOnly, Axis::Task)?;
        let era_only = entropy(&cfg, &data, RoutingMode::EraOnly, Axis::Era)?;
        println!(
            "{seed:>4}  {:.4}    {:.4}     {:.4}   {:.4}",
            tea.0, task_only, tea.1, era_only
        );
    }
    Ok(())
}
