use std::fs;

use hyperphm::analysis::BudgetReport;
use hyperphm::autodiff::GradCheck;
use hyperphm::data::{load_cifar, make_synthetic, ChannelStats, DatasetSplit};
use hyperphm::layers::InitSpec;
use hyperphm::models::{build_model, Model};
use hyperphm::training::{evaluate, train, EpochMetrics, RunDir};
use hyperphm::verify::{fault_param, gradcheck_target, run_suite};
use hyperphm::{Error, Result};
use serde_json::json;

use crate::config::{RunConfig, DATA_ROOT_ENV};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } | Error::NonFinite { .. } => EXIT_DIVERGED,
        _ => EXIT_CONFIG,
    }
}

pub struct Data {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub stats: ChannelStats,
}

fn load_data(cfg: &RunConfig, classes: usize, input_size: usize) -> Result<Data> {
    let (train, val, stats) = match cfg.dataset.cifar() {
        None => {
            let (train, val) =
                make_synthetic(classes, cfg.synthetic_per_class, cfg.synthetic_size, cfg.synthetic_seed)?;
            let stats = ChannelStats::compute(&train);
            (train, val, stats)
        }
        Some(variant) => {
            if classes != variant.classes() {
                return Err(Error::config(
                    "classes",
                    format!("{} has {} classes, not {classes}", cfg.dataset, variant.classes()),
                ));
            }
            let root = cfg.data_root.as_ref().ok_or_else(|| {
                Error::config(
                    "data_root",
                    format!("required for {}; pass --data-root or set {DATA_ROOT_ENV}", cfg.dataset),
                )
            })?;
            let (train, val) = load_cifar(root, variant)?;
            let stats = ChannelStats::cached(root, &cfg.dataset.to_string(), &train)?;
            (train, val, stats)
        }
    };
    let side = train.image_shape()[1];
    if side != input_size {
        return Err(Error::config(
            "synthetic_size",
            format!("images are {side}x{side} but the model expects {input_size}x{input_size}"),
        ));
    }
    Ok(Data { train, val, stats })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn print_epoch(m: &EpochMetrics, epochs: usize) {
    println!(
        "epoch {:>3}/{epochs}  lr {:.5}  train_loss {:.4}  train_top1 {:6.2}  val_loss {}  val_top1 {}",
        m.epoch,
        m.lr,
        m.train_loss,
        m.train_top1,
        fmt_opt(m.val_loss),
        m.val_top1.map_or_else(|| "-".to_string(), |v| format!("{v:6.2}")),
    );
}

pub fn train_cmd(cfg: &RunConfig, echo: &str) -> Result<u8> {
    let spec = cfg.architecture(&cfg.arch)?;
    let tc = cfg.train_config();
    let data = load_data(cfg, spec.classes, spec.input_size)?;
    let run = RunDir::create(cfg.default_run_dir())?;
    fs::write(run.path.join("config.toml"), echo)?;
    let mut model = build_model::<f32>(&spec, &InitSpec::new(cfg.seed))?;
    println!(
        "training {} ({} params, backend {}) on {} train / {} val images; run dir {}",
        spec.name,
        model.params.numel(),
        model
            .head
            .phm_n()
            .map_or_else(|| "dense".to_string(), |n| format!("phm n = {n}")),
        data.train.len(),
        data.val.len(),
        run.path.display()
    );
    let outcome = train(&mut model, &data.train, &data.val, &data.stats, &tc, Some(&run), |m| {
        print_epoch(m, tc.epochs)
    })?;
    if let (Some(e), Some(top1)) = (outcome.best_epoch, outcome.best_val_top1) {
        println!("best val_top1 {top1:.2} at epoch {e}");
    }
    Ok(EXIT_OK)
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<u8> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("checkpoint", "required; pass --checkpoint"))?;
    let (mut model, meta) = Model::<f32>::load(path)?;
    let classes = model.classes();
    if let Some(c) = cfg.classes.filter(|&c| c != classes) {
        return Err(Error::config(
            "classes",
            format!("checkpoint has {classes} classes, not {c}"),
        ));
    }
    let data = load_data(cfg, classes, model.spec.input_size)?;
    let (loss, top1) = evaluate(&mut model, &data.val, &data.stats, cfg.batch)?;
    println!(
        "{} epoch {}: val_loss {loss:.4}  val_top1 {top1:.2} over {} images",
        model.spec.name,
        meta.get("epoch").and_then(|e| e.as_u64()).unwrap_or(0),
        data.val.len()
    );
    println!(
        "{}",
        json!({"val_loss": loss, "val_top1": top1, "images": data.val.len()})
    );
    Ok(EXIT_OK)
}

pub fn verify_cmd(cfg: &RunConfig, as_json: bool) -> Result<u8> {
    let report = run_suite(cfg.seed)?;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for c in &report.checks {
            println!("{c}");
        }
        println!("\n{}\n", report.phm5);
    }
    let failures = report.failures();
    println!(
        "verify: {}/{} checks passed in {:.2} s",
        report.checks.len() - failures.len(),
        report.checks.len(),
        report.elapsed_s
    );
    if failures.is_empty() {
        return Ok(EXIT_OK);
    }
    for f in failures {
        eprintln!("failed: {}: {}", f.name, f.detail);
    }
    Ok(EXIT_VERIFY)
}

/// `18` expands to the budget rows of that depth; anything else is a
/// comma-separated preset list.
fn comparison_rows(compare: &str) -> Vec<String> {
    match compare.trim().parse::<usize>() {
        Ok(depth) => ["resnet", "quat", "vect", "qphm", "vphm"]
            .iter()
            .map(|f| format!("{f}{depth}"))
            .collect(),
        Err(_) => compare
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
    }
}

fn budget(cfg: &RunConfig, arch: &str) -> Result<BudgetReport> {
    let spec = cfg.architecture(arch)?;
    let model = build_model::<f32>(&spec, &InitSpec::new(cfg.seed))?;
    BudgetReport::new(&model, (cfg.latency_reps > 0).then_some(cfg.latency_reps))
}

pub fn analyze_cmd(cfg: &RunConfig, as_json: bool) -> Result<u8> {
    let Some(compare) = &cfg.compare else {
        let report = budget(cfg, &cfg.arch)?;
        if as_json {
            println!("{}", serde_json::to_string_pretty(&report)?);
        } else {
            print!("{}", report.render(cfg.per_layer));
        }
        return Ok(EXIT_OK);
    };
    let reports = comparison_rows(compare)
        .iter()
        .map(|arch| budget(cfg, arch))
        .collect::<Result<Vec<_>>>()?;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
        return Ok(EXIT_OK);
    }
    println!(
        "{:<10} {:>10} {:>9} {:>9} {:>9} {:>8} {:>11}",
        "model", "params", "params_M", "MACs_G", "FLOPs_G", "phm_n", "latency_ms"
    );
    for r in &reports {
        println!(
            "{:<10} {:>10} {:>9.3} {:>9.3} {:>9.3} {:>8} {:>11}",
            r.model,
            r.total_params,
            r.total_params as f64 / 1e6,
            r.macs as f64 / 1e9,
            r.flops as f64 / 1e9,
            r.phm_n.map_or_else(|| "-".to_string(), |n| n.to_string()),
            r.latency
                .as_ref()
                .map_or_else(|| "-".to_string(), |l| format!("{:.3}", l.median_ms)),
        );
    }
    let params = |name: &str| {
        reports
            .iter()
            .find(|r| r.model.starts_with(name))
            .map(|r| r.total_params)
    };
    for (a, b) in [("qphm", "resnet"), ("vect", "quat"), ("vphm", "qphm")] {
        if let (Some(x), Some(y)) = (params(a), params(b)) {
            println!("{a} < {b} in params: {}", if x < y { "yes" } else { "no" });
        }
    }
    Ok(EXIT_OK)
}

pub fn gradcheck_cmd(cfg: &RunConfig, inject_wrong_sign: bool) -> Result<u8> {
    println!("gradcheck eps {:e} threshold {:e}", cfg.eps, cfg.threshold);
    let mut worst: Option<(String, f64, String)> = None;
    let mut failed = 0;
    for target in &cfg.targets {
        let mut check = GradCheck::new(cfg.eps);
        if inject_wrong_sign {
            check.flip_sign_of = fault_param(target).map(String::from);
        }
        let report = gradcheck_target(target, &check, cfg.seed)?;
        let passed = report.passes(cfg.threshold);
        failed += usize::from(!passed);
        println!(
            "[{}] {target}: max rel err {:.3e} at {} ({} tensors)",
            if passed { "PASS" } else { "FAIL" },
            report.max_rel_err,
            report.worst,
            report.params.len()
        );
        if worst.as_ref().is_none_or(|w| report.max_rel_err > w.1) {
            worst = Some((target.clone(), report.max_rel_err, report.worst));
        }
    }
    if failed == 0 {
        return Ok(EXIT_OK);
    }
    if let Some((target, err, path)) = worst {
        eprintln!("gradcheck: {failed} target(s) above threshold; worst {target} {path} rel err {err:.3e}");
    }
    Ok(EXIT_VERIFY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Dataset;

    #[test]
    fn depth_expands_to_budget_rows() {
        assert_eq!(
            comparison_rows("50"),
            ["resnet50", "quat50", "vect50", "qphm50", "vphm50"]
        );
        assert_eq!(comparison_rows("quat18, vphm18"), ["quat18", "vphm18"]);
    }

    #[test]
    fn divergence_maps_to_three() {
        assert_eq!(
            exit_code(&Error::Divergence {
                epoch: 1,
                loss: f64::NAN
            }),
            EXIT_DIVERGED
        );
        assert_eq!(exit_code(&Error::config("lr", "bad")), EXIT_CONFIG);
    }

    #[test]
    fn synthetic_size_must_match_model() {
        let cfg = RunConfig {
            dataset: Dataset::Synthetic,
            synthetic_size: 16,
            ..RunConfig::default()
        };
        assert!(matches!(load_data(&cfg, 10, 32), Err(Error::Config { .. })));
    }
}
