//! Exit criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use tea_moelora::adapters::{
    lora_forward, tea_forward, trainable_param_count, AdapterShape, ExpertParams, FrozenLinear,
    TeaAdapterLayer,
};
use tea_moelora::analysis::{self, Axis, UtilizationMatrix};
use tea_moelora::backbone::{freeze_check, AdaptedModel};
use tea_moelora::checkpoint::Checkpoint;
use tea_moelora::cli::{self, ABLATION_FILE, METRICS_FILE};
use tea_moelora::config::{Overrides, RunConfig};
use tea_moelora::gradcheck::{self, GradcheckSettings};
use tea_moelora::router::{Granularity, RouterDims, RouterParams, RoutingMode};
use tea_moelora::seed::rng_for;
use tea_moelora::synthdata;
use tea_moelora::tape::Tape;
use tea_moelora::tensor::Tensor;
use tea_moelora::training::{self, Optimizer, Variant};

const GRAD_TOL: f64 = 1e-5;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const EQUIV_TOL: f64 = 1e-12;
const GATE_SUM_TOL: f64 = 1e-12;
const SEEDS: u64 = 5;
const REQUIRED_WINS: usize = 4;
const SUITE_BUDGET: Duration = Duration::from_secs(600);

type Outcome = Result<String, String>;

fn check(cond: bool, ok: impl Into<String>, bad: impl Into<String>) -> Outcome {
    if cond {
        Ok(ok.into())
    } else {
        Err(bad.into())
    }
}

fn criterion_1_gradients() -> Outcome {
    let started = Instant::now();
    let settings = GradcheckSettings::default();
    let rep =
        gradcheck::model_gradcheck(&RunConfig::default(), &settings).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let worst = rep.worst().expect("tensors checked");
    let detail = format!(
        "{} tensor checks over {} seeds, max relative error {:.2e} ({}, {}), {:.1}s",
        rep.checks.len(),
        settings.seeds.len(),
        worst.relative_error,
        worst.name,
        worst.mode,
        elapsed.as_secs_f64()
    );
    let exit = cli::cmd_gradcheck(None);
    check(
        settings.seeds.len() == 10
            && rep.max_relative_error() <= GRAD_TOL
            && elapsed < GRADCHECK_BUDGET
            && exit == 0,
        detail.clone(),
        format!("{detail}, cmd_gradcheck exit {exit}"),
    )
}

fn random_layer(seed: u64, d_in: usize, d_out: usize, rank: usize, n: usize) -> TeaAdapterLayer {
    let mut rng = rng_for(seed, "acceptance.layer");
    let base = FrozenLinear::random(d_in, d_out, &mut rng);
    let shape = AdapterShape {
        rank,
        n_experts: n,
        alpha: 2.0 * rank as f64,
        dropout_rate: 0.1,
    };
    let mut layer = TeaAdapterLayer::new(0, base, shape, &mut rng).unwrap();
    for e in &mut layer.experts {
        e.b = Tensor::randn(e.b.shape(), 1.0, &mut rng).with_requires_grad(true);
    }
    layer
}

fn one_hot(n: usize, k: usize) -> Tensor {
    Tensor::vector((0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
}

fn lockstep_no_moe_vs_unit_gates(seed_value: u64) -> tea_moelora::Result<f64> {
    let mut base = RunConfig::default();
    base.seed = seed_value;
    base.data.train_per_cell = 60;
    base.data.dev_per_cell = 10;
    base.data.test_per_cell = 10;
    base.train.epochs = 3;
    base.train.n_experts = 1;
    let data = synthdata::generate(&base.synth_spec())?;

    let mut models = Vec::new();
    for mode in [RoutingMode::NoMoe, RoutingMode::SeparateGates] {
        let mut c = base.clone();
        c.train.mode = mode;
        models.push(AdaptedModel::new(c.model_config()?, seed_value)?);
    }
    let mut opts = [
        Optimizer::new(base.train.optimizer, base.train.learning_rate),
        Optimizer::new(base.train.optimizer, base.train.learning_rate),
    ];
    let mut shuffle = rng_for(seed_value, "shuffle");
    let mut dropouts = [
        rng_for(seed_value, "dropout"),
        rng_for(seed_value, "dropout"),
    ];
    let mut worst: f64 = 0.0;
    for _ in 0..base.train.epochs {
        for batch in synthdata::batch_iter(&data.train, base.train.batch_size, &mut shuffle)? {
            let mut losses = [0.0; 2];
            for k in 0..2 {
                let mut tape = Tape::new();
                let loss = training::joint_loss(
                    &models[k],
                    &mut tape,
                    &data.train,
                    &batch,
                    Some(&mut dropouts[k]),
                )?;
                losses[k] = tape.value(loss).data()[0];
                tape.backward(loss)?;
                models[k].accumulate_grads(&tape)?;
                opts[k].step(&mut models[k]);
            }
            worst = worst.max((losses[0] - losses[1]).abs());
            for (name, t) in models[0].named_tensors() {
                if name.starts_with("router") {
                    continue;
                }
                worst = worst.max(t.max_abs_diff(models[1].tensor(&name).expect("same layout")));
            }
        }
    }
    Ok(worst)
}

fn criterion_2_equivalences() -> Outcome {
    let mut worst_a: f64 = 0.0;
    let mut worst_b: f64 = 0.0;
    for s in 0..10 {
        let mut rng = rng_for(s, "acceptance.x");
        let x = Tensor::randn(&[5, 7], 1.0, &mut rng);

        let single = random_layer(s, 7, 6, 4, 1);
        let one = Tensor::vector(vec![1.0]);
        let tea = tea_forward(&single, &x, &one, &one, false, &mut rng).unwrap();
        worst_a = worst_a.max(tea.max_abs_diff(&lora_forward(&single, &x).unwrap()));

        let layer = random_layer(s, 7, 6, 8, 4);
        for k in 0..4 {
            let w = one_hot(4, k);
            let tea = tea_forward(&layer, &x, &w, &w, false, &mut rng).unwrap();
            let solo = TeaAdapterLayer::from_parts(
                0,
                layer.base.clone(),
                vec![ExpertParams {
                    a: layer.experts[k].a.clone(),
                    b: layer.experts[k].b.clone(),
                }],
                layer.lambda,
                0.0,
            )
            .unwrap();
            worst_b = worst_b.max(tea.max_abs_diff(&lora_forward(&solo, &x).unwrap()));
        }
    }
    let mut worst_c: f64 = 0.0;
    for s in 0..3 {
        worst_c = worst_c.max(lockstep_no_moe_vs_unit_gates(s).map_err(|e| e.to_string())?);
    }
    let detail =
        format!("(a) {worst_a:.1e}, (b) {worst_b:.1e}, (c) {worst_c:.1e} vs {EQUIV_TOL:.0e}");
    check(
        worst_a <= EQUIV_TOL && worst_b <= EQUIV_TOL && worst_c <= EQUIV_TOL,
        detail.clone(),
        detail,
    )
}

fn criterion_3_param_count() -> Outcome {
    let (d_in, d_out, rank) = (32, 32, 8);
    let expected = rank * (d_in + d_out);
    let mut counts = Vec::new();
    for n in [1, 2, 4, 8] {
        let layer = random_layer(n as u64, d_in, d_out, rank, n);
        let summed: usize = layer.experts.iter().map(|e| e.a.len() + e.b.len()).sum();
        if summed != trainable_param_count(&layer) || layer.experts[0].rank() != rank / n {
            return Err(format!(
                "N={n}: tensors hold {summed}, reported {}",
                trainable_param_count(&layer)
            ));
        }
        counts.push(summed);
    }
    let detail = format!("counts {counts:?} for N in [1, 2, 4, 8], expected {expected}");
    check(
        counts.iter().all(|&c| c == expected),
        detail.clone(),
        detail,
    )
}

fn criterion_4_frozen_backbone() -> Outcome {
    let cfg = RunConfig::default();
    let data = synthdata::generate(&cfg.synth_spec()).map_err(|e| e.to_string())?;
    let init = AdaptedModel::new(cfg.model_config().unwrap(), cfg.seed).unwrap();
    let snapshot = init.frozen_snapshot();
    let run = training::train(&cfg, &data).map_err(|e| e.to_string())?;
    let ok = run.result.freeze_ok && freeze_check(&run.model, &snapshot);
    check(
        ok,
        format!(
            "frozen tensors bit-identical after {} epochs",
            cfg.train.epochs
        ),
        "a frozen tensor changed during training",
    )
}

fn criterion_5_routing() -> Outcome {
    let mut worst: f64 = 0.0;
    for s in 0..100 {
        let mut rng = rng_for(s, "acceptance.router");
        let n = 1 + (s as usize % 8);
        let dims = RouterDims {
            n_tasks: 4,
            n_eras: 2,
            n_experts: n,
            d_task: 16,
            d_era: 16,
            d_hidden: 32,
        };
        let r = RouterParams::new("router", dims, &mut rng).unwrap();
        for mode in RoutingMode::ALL {
            if mode == RoutingMode::NoMoe && n != 1 {
                continue;
            }
            for t in 0..4 {
                for e in 0..2 {
                    let (wt, we) = r.route(mode, t, e).unwrap();
                    for w in [wt, we] {
                        worst = worst.max((w.sum() - 1.0).abs());
                        if w.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                            return Err(format!("component outside [0, 1] in {mode}"));
                        }
                    }
                }
            }
        }
    }

    let mut rng = rng_for(0, "acceptance.zero");
    let dims = RouterDims {
        n_tasks: 4,
        n_eras: 2,
        n_experts: 8,
        d_task: 16,
        d_era: 16,
        d_hidden: 32,
    };
    let mut r = RouterParams::new("router", dims, &mut rng).unwrap();
    r.task_proj = Tensor::zeros(r.task_proj.shape()).with_requires_grad(true);
    r.era_proj = Tensor::zeros(r.era_proj.shape()).with_requires_grad(true);
    r.concat_out = Tensor::zeros(r.concat_out.shape()).with_requires_grad(true);
    let mut uniform = true;
    for mode in [
        RoutingMode::SeparateGates,
        RoutingMode::ConcatSingleGate,
        RoutingMode::TaskOnly,
        RoutingMode::EraOnly,
    ] {
        let (wt, we) = r.route(mode, 1, 1).unwrap();
        uniform &= wt.data().iter().chain(we.data()).all(|&v| v == 1.0 / 8.0);
    }

    // One optimizer step on a batch of dataset 2 only.
    let mut cfg = RunConfig::default();
    cfg.data.train_per_cell = 20;
    let data = synthdata::generate(&cfg.synth_spec()).unwrap();
    let mut model = AdaptedModel::new(cfg.model_config().unwrap(), cfg.seed).unwrap();
    // Non-zero up-projections so the router receives gradient on the first step.
    let mut brng = rng_for(1, "acceptance.B");
    for layer in &mut model.layers {
        for e in &mut layer.experts {
            let fresh = Tensor::randn(e.b.shape(), 0.1, &mut brng);
            e.b.data_mut().copy_from_slice(fresh.data());
        }
    }
    let before = model.routers[0].task_embed.clone();
    let batch = synthdata::cell_batches(&data.train, 8)
        .unwrap()
        .into_iter()
        .find(|b| b.task_id == 2 && b.era_id == 0)
        .unwrap();
    let mut tape = Tape::new();
    let loss = training::joint_loss(&model, &mut tape, &data.train, &batch, None).unwrap();
    tape.backward(loss).unwrap();
    model.accumulate_grads(&tape).unwrap();
    Optimizer::new(cfg.train.optimizer, cfg.train.learning_rate).step(&mut model);
    let after = &model.routers[0].task_embed;
    let seen_moved = before.row(2) != after.row(2);
    let unseen_fixed = [0, 1, 3].iter().all(|&t| {
        before
            .row(t)
            .iter()
            .zip(after.row(t))
            .all(|(a, b)| a.to_bits() == b.to_bits())
    });

    let detail = format!(
        "max |sum-1| {worst:.1e}, zero projections uniform: {uniform}, seen row moved: {seen_moved}, unseen rows fixed: {unseen_fixed}"
    );
    check(
        worst <= GATE_SUM_TOL && uniform && seen_moved && unseen_fixed,
        detail.clone(),
        detail,
    )
}

fn criterion_6_negative_transfer() -> Outcome {
    let started = Instant::now();
    let rows: Vec<tea_moelora::Result<(f64, f64, f64)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..SEEDS)
            .map(|seed_value| {
                s.spawn(move || {
                    let mut cfg = RunConfig::default();
                    cfg.seed = seed_value;
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
                        false,
                    )?;
                    Ok((
                        per_cell.mean_test_accuracy(),
                        runs[0].mean_test_accuracy(),
                        runs[1].mean_test_accuracy(),
                    ))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let rows: Vec<(f64, f64, f64)> = rows
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let wins_i = rows.iter().filter(|(sep, joint, _)| joint < sep).count();
    let wins_ii = rows.iter().filter(|(_, joint, tea)| tea > joint).count();
    let table: Vec<String> = rows
        .iter()
        .map(|(a, b, c)| format!("{a:.3}/{b:.3}/{c:.3}"))
        .collect();
    let detail = format!(
        "per-cell/no-moe/separate {}; (i) {wins_i}/{SEEDS}, (ii) {wins_ii}/{SEEDS}, {:.0}s",
        table.join(" "),
        elapsed.as_secs_f64()
    );
    check(
        wins_i >= REQUIRED_WINS && wins_ii >= REQUIRED_WINS && elapsed < SUITE_BUDGET,
        detail.clone(),
        detail,
    )
}

fn gate_entropy(
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

fn criterion_7_smoothness() -> Outcome {
    let uniform =
        analysis::smoothness(&UtilizationMatrix::new(vec![vec![0.125; 8]]).unwrap()).unwrap();
    let mut hot = vec![0.0; 8];
    hot[5] = 1.0;
    let one_hot = analysis::smoothness(&UtilizationMatrix::new(vec![hot]).unwrap()).unwrap();
    let ln8 = 8f64.ln();
    // (1/8)(7/8)^2 + (7/8)(1/8)^2
    let one_hot_var = 7.0 / 64.0;
    let closed_form = uniform.variance == 0.0
        && uniform.max_min == 0.0
        && (uniform.entropy - ln8).abs() <= 1e-15
        && (uniform.entropy - 2.07944).abs() < 5e-6
        && one_hot.entropy == 0.0
        && one_hot.max_min == 1.0
        && (one_hot.variance - one_hot_var).abs() <= 1e-15;

    let rows: Vec<tea_moelora::Result<[f64; 4]>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..SEEDS)
            .map(|seed_value| {
                s.spawn(move || {
                    let mut cfg = RunConfig::default();
                    cfg.seed = seed_value;
                    let data = synthdata::generate(&cfg.synth_spec())?;
                    let mut c = cfg.clone();
                    c.train.mode = RoutingMode::SeparateGates;
                    let tea = training::train(&c, &data)?;
                    let tea_task = analysis::smoothness(&analysis::utilization(
                        &tea.model,
                        &data.test,
                        Axis::Task,
                    )?)?;
                    let tea_era = analysis::smoothness(&analysis::utilization(
                        &tea.model,
                        &data.test,
                        Axis::Era,
                    )?)?;
                    Ok([
                        tea_task.entropy,
                        gate_entropy(&cfg, &data, RoutingMode::TaskOnly, Axis::Task)?,
                        tea_era.entropy,
                        gate_entropy(&cfg, &data, RoutingMode::EraOnly, Axis::Era)?,
                    ])
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let rows: Vec<[f64; 4]> = rows
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let wins = rows.iter().filter(|r| r[0] < r[1] && r[2] < r[3]).count();
    let corridor = rows.iter().all(|r| r[0] > 0.0 && r[0] < ln8);
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("task {:.3}<{:.3}? era {:.3}<{:.3}?", r[0], r[1], r[2], r[3]))
        .collect();
    let detail = format!(
        "closed forms {}; dual-gate lower on both axes in {wins}/{SEEDS} seeds [{}]; task entropy in (0, ln 8): {corridor}",
        if closed_form { "ok" } else { "WRONG" },
        table.join("; ")
    );
    check(
        closed_form && wins >= REQUIRED_WINS && corridor,
        detail.clone(),
        detail,
    )
}

fn criterion_8_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let code = cli::cmd_train(
            None,
            &Overrides {
                out: Some(out.clone()),
                ..Overrides::default()
            },
        );
        if code != 0 {
            return Err(format!("cmd_train exited {code}"));
        }
        bytes.push(std::fs::read(out.join(METRICS_FILE)).map_err(|e| e.to_string())?);
    }
    let csv_equal = bytes[0] == bytes[1];

    let ck_path = tmp.path().join("a").join(cli::CHECKPOINT_FILE);
    let ck = Checkpoint::load(&ck_path).map_err(|e| e.to_string())?;
    let model = ck.restore_model().map_err(|e| e.to_string())?;
    let again = tmp.path().join("again.bin");
    Checkpoint::from_model(&model, &ck.config)
        .save(&again)
        .map_err(|e| e.to_string())?;
    let reloaded = Checkpoint::load(&again).map_err(|e| e.to_string())?;
    let tensors_equal = ck.tensors.len() == reloaded.tensors.len()
        && ck
            .tensors
            .iter()
            .zip(&reloaded.tensors)
            .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b));
    let file_equal = std::fs::read(&ck_path).ok() == std::fs::read(&again).ok();
    let detail = format!(
        "metrics CSV identical: {csv_equal}, {} tensors bit-exact: {tensors_equal}, checkpoint bytes identical: {file_equal}",
        ck.tensors.len()
    );
    check(
        csv_equal && tensors_equal && file_equal,
        detail.clone(),
        detail,
    )
}

fn criterion_9_ablation() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = tmp.path().join("ablate");
    let code = cli::cmd_ablate(
        None,
        &Overrides {
            out: Some(out.clone()),
            ..Overrides::default()
        },
    );
    if code != 0 {
        return Err(format!("cmd_ablate exited {code}"));
    }
    let mut reader = csv::Reader::from_path(out.join(ABLATION_FILE)).map_err(|e| e.to_string())?;
    let header: Vec<String> = reader
        .headers()
        .unwrap()
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        rows.push((rec[0].to_string(), rec[1].to_string()));
    }
    let mut expected = vec![
        ("no-moe".to_string(), "n/a".to_string()),
        ("era-only".to_string(), "n/a".to_string()),
    ];
    for mode in [
        RoutingMode::TaskOnly,
        RoutingMode::SeparateGates,
        RoutingMode::ConcatSingleGate,
    ] {
        for g in [Granularity::Coarse, Granularity::Fine] {
            expected.push((mode.to_string(), g.to_string()));
        }
    }
    let mut got = rows.clone();
    got.sort();
    expected.sort();
    let detail = format!("{} rows: {:?}", rows.len(), rows);
    check(
        header == ["variant", "granularity", "cell", "accuracy", "loss"] && got == expected,
        detail.clone(),
        format!("{detail}, header {header:?}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient correctness", criterion_1_gradients),
        ("2 structural equivalences", criterion_2_equivalences),
        ("3 parameter-count identity", criterion_3_param_count),
        ("4 frozen-backbone invariance", criterion_4_frozen_backbone),
        ("5 routing contracts", criterion_5_routing),
        ("6 negative transfer", criterion_6_negative_transfer),
        ("7 smoothness metrics", criterion_7_smoothness),
        ("8 determinism and persistence", criterion_8_determinism),
        ("9 ablation completeness", criterion_9_ablation),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
