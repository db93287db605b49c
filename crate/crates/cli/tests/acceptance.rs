//! One test per acceptance criterion. Each prints a `PASS`/`FAIL` line on
//! stderr, bypassing the test harness capture, then asserts.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use hyperphm::analysis::{count_params, estimate_flops};
use hyperphm::autodiff::GradCheck;
use hyperphm::layers::InitSpec;
use hyperphm::models::{build_model, ArchitectureSpec, Model};
use hyperphm::params::ParamGroup;
use hyperphm::training::{lr_at, EpochMetrics, TrainConfig};
use hyperphm::verify::{
    bridge_max_error, gradcheck_target, layer_oracle_errors, phm5_reference_report, BRIDGE_TOL, GRADCHECK_MENU,
    ORACLE_TOL,
};
use hyperphm::Error;

const BIN: &str = env!("CARGO_BIN_EXE_hyperphm");

fn report(id: u32, name: &str, passed: bool, detail: &str) -> bool {
    let line = format!(
        "{} criterion {id:>2} {name}: {detail}\n",
        if passed { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    passed
}

fn hyperphm(args: &[&str]) -> (Output, Duration) {
    let t0 = Instant::now();
    let out = Command::new(BIN)
        .args(args)
        .env_remove("HYPERPHM_DATA_ROOT")
        .output()
        .expect("spawn hyperphm");
    (out, t0.elapsed())
}

fn model(arch: &str, classes: usize) -> Model<f32> {
    let spec = ArchitectureSpec::preset(arch, classes).unwrap();
    build_model(&spec, &InitSpec::new(0)).unwrap()
}

#[test]
fn criterion_01_algebra_identity_suite() {
    let (out, elapsed) = hyperphm(&["verify"]);
    let text = String::from_utf8_lossy(&out.stdout);
    let required = [
        "hamilton unit identities",
        "hamilton product component formula",
        "tau cyclic right shift",
        "L-matrix rule",
        "kronecker mixed product",
        "structure matrices tile the grid",
    ];
    let missing: Vec<_> = required
        .iter()
        .filter(|n| !text.contains(&format!("[PASS] {n}")))
        .collect();
    let ok = out.status.code() == Some(0) && missing.is_empty() && elapsed < Duration::from_secs(10);
    assert!(report(
        1,
        "algebra identity suite",
        ok,
        &format!(
            "exit {:?}, {:.2} s (limit 10 s), missing {missing:?}",
            out.status.code(),
            elapsed.as_secs_f64()
        ),
    ));
}

#[test]
fn criterion_02_five_dimensional_reference_table() {
    let r = phm5_reference_report().unwrap();
    let d = r.deviations.first();
    let ok = r.matching == 24
        && r.deviations.len() == 1
        && d.is_some_and(|d| (d.row, d.col) == (4, 2) && d.kronecker_sum == "+P_y" && d.reference == "-P_y")
        && r.library_matches_reference_a;
    let (out, _) = hyperphm(&["verify"]);
    let reported =
        String::from_utf8_lossy(&out.stdout).contains("cell (4,2): Kronecker sum gives +P_y, reference prints -P_y");
    assert!(report(
        2,
        "5-D reference table",
        ok && reported,
        &format!(
            "{}/25 exact matches, deviations {:?}, reported by verify: {reported}",
            r.matching, r.deviations
        ),
    ));
}

#[test]
fn criterion_03_phm4_hamilton_bridge() {
    let err = bridge_max_error(1000, 2024).unwrap();
    assert!(report(
        3,
        "PHM(n=4) vs Hamilton product",
        err < BRIDGE_TOL,
        &format!("1000 pairs, max abs err {err:.2e} (< {BRIDGE_TOL:.0e})"),
    ));
}

#[test]
fn criterion_04_layer_oracle_equivalence() {
    let [q, v, p, _] = layer_oracle_errors(100, 77).unwrap();
    let ok = q < ORACLE_TOL && v < ORACLE_TOL && p < ORACLE_TOL;
    assert!(report(
        4,
        "layer oracle equivalence",
        ok,
        &format!("100 instances each: quaternion {q:.2e}, vectormap {v:.2e}, phm {p:.2e} (< {ORACLE_TOL:.0e})"),
    ));
}

#[test]
fn criterion_05_gradient_checks() {
    let t0 = Instant::now();
    let check = GradCheck::new(1e-5);
    let mut worst = Vec::new();
    let mut ok = true;
    for name in GRADCHECK_MENU {
        let r = gradcheck_target(name, &check, 0).unwrap();
        ok &= r.passes(1e-5);
        worst.push(format!("{name} {:.1e}", r.max_rel_err));
    }
    let (out, _) = hyperphm(&["gradcheck", "--eps", "1e-5", "--threshold", "1e-5"]);
    let elapsed = t0.elapsed();
    ok &= out.status.code() == Some(0) && elapsed < Duration::from_secs(120);
    assert!(report(
        5,
        "gradient checks",
        ok,
        &format!(
            "eps 1e-5, threshold 1e-5: {}; cli exit {:?}; {:.2} s (limit 120 s)",
            worst.join(", "),
            out.status.code(),
            elapsed.as_secs_f64()
        ),
    ));
}

#[test]
fn criterion_06_budget_reproduction() {
    // (preset, reference params in millions, tolerance)
    let params = [
        ("resnet18", 11.1, 0.02),
        ("resnet34", 21.2, 0.02),
        ("resnet50", 23.5, 0.02),
        ("quat18", 8.5, 0.03),
        ("vect18", 7.3, 0.03),
        ("qphm18", 8.5, 0.03),
        ("vphm18", 7.3, 0.03),
        ("quat50", 18.08, 0.03),
        ("vphm50", 15.5, 0.03),
        ("qphm50", 18.07, 0.03),
    ];
    // Reference compute column for the real-valued rows, in G, compared
    // against multiply-accumulates.
    let compute = [("resnet18", 0.56), ("resnet34", 1.16), ("resnet50", 1.30)];
    let mut counts = std::collections::HashMap::new();
    let mut ok = true;
    let mut lines = Vec::new();
    for (arch, reference, tol) in params {
        let m = model(arch, 100);
        let n = count_params(&m).total;
        let rel = n as f64 / (reference * 1e6) - 1.0;
        ok &= rel.abs() <= tol;
        lines.push(format!("{arch} {:.3}M ({:+.1}%)", n as f64 / 1e6, 100.0 * rel));
        counts.insert(arch, n);
    }
    for (arch, reference) in compute {
        let m = model(arch, 100);
        let f = estimate_flops(&m, 32).unwrap();
        let g = f.macs as f64 / 1e9;
        let rel = g / reference - 1.0;
        ok &= rel.abs() <= 0.10;
        lines.push(format!("{arch} {g:.3} GMAC ({:+.1}%)", 100.0 * rel));
    }
    counts.insert("qphm34", count_params(&model("qphm34", 100)).total);
    let orderings = [
        counts["qphm18"] < counts["resnet18"],
        counts["qphm34"] < counts["resnet34"],
        counts["qphm50"] < counts["resnet50"],
        counts["vect18"] < counts["quat18"],
    ];
    ok &= orderings.iter().all(|&o| o);
    assert!(report(
        6,
        "budget reproduction",
        ok,
        &format!(
            "{}; orderings qphm<resnet (18/34/50), vect<quat: {orderings:?}",
            lines.join(", ")
        ),
    ));
}

#[test]
fn criterion_07_weight_sharing_ratio() {
    let mut ok = true;
    let mut lines = Vec::new();
    for (arch, n) in [("quat18", 4), ("vect18", 3), ("quat50", 4), ("vect50", 3)] {
        let m = model(arch, 100);
        let kernels: usize = m
            .params
            .iter()
            .filter(|(_, _, p)| p.group == ParamGroup::Kernel)
            .map(|(_, _, p)| p.value.len())
            .sum();
        let real_plan: usize = m
            .conv_layers(32)
            .unwrap()
            .iter()
            .map(|(c, _)| c.in_ch * c.out_ch * c.spec.kernel * c.spec.kernel)
            .sum();
        ok &= n * kernels == real_plan;
        lines.push(format!(
            "{arch} {kernels}/{real_plan} = 1/{}",
            real_plan as f64 / kernels as f64
        ));
    }
    assert!(report(7, "weight-sharing ratio", ok, &lines.join(", ")));
}

#[test]
fn criterion_08_divisibility_enforcement() {
    let mut ok = true;
    let mut notes = Vec::new();
    for family in ["rphm", "qphm", "vphm"] {
        for depth in [18, 26, 34, 35, 50] {
            let arch = format!("{family}{depth}");
            let build = |classes| {
                let spec = ArchitectureSpec::preset(&arch, classes).unwrap();
                build_model::<f32>(&spec, &InitSpec::new(0))
            };
            let prime = matches!(build(29), Err(Error::NoPhmDimension { k: 29, .. }));
            let n28 = build(28).ok().and_then(|m| m.head.phm_n());
            let n30 = build(30).ok().and_then(|m| m.head.phm_n());
            ok &= prime && n28.is_some() && n30.is_some();
            notes.push(format!("{arch}: 29 rejected {prime}, n(28) {n28:?}, n(30) {n30:?}"));
        }
    }
    assert!(report(8, "divisibility enforcement", ok, &notes.join("; ")));
}

#[test]
fn criterion_09_schedule_reproduction() {
    let cfg = TrainConfig::default();
    let mid = cfg.warmup_epochs + (cfg.epochs - cfg.warmup_epochs) / 2;
    let (at_warmup, at_mid, at_end) = (lr_at(10, &cfg), lr_at(mid, &cfg), lr_at(120, &cfg));
    let boundary_jump = (lr_at(11, &cfg) - lr_at(10, &cfg)).abs();
    let max_cosine_step = (11..120)
        .map(|e| (lr_at(e + 1, &cfg) - lr_at(e, &cfg)).abs())
        .fold(0.0, f64::max);
    let ok = (at_warmup - 0.1).abs() < 1e-12
        && (at_mid - 0.05).abs() < 1e-12
        && at_end.abs() < 1e-12
        && boundary_jump <= max_cosine_step;
    assert!(report(
        9,
        "schedule reproduction",
        ok,
        &format!(
            "lr(10) = {at_warmup}, lr({mid}) = {at_mid:.6}, lr(120) = {at_end:.1e}, boundary step {boundary_jump:.2e} <= cosine step {max_cosine_step:.2e}"
        ),
    ));
}

fn read_metrics(run: &Path) -> Vec<EpochMetrics> {
    fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Narrow QPHM-18 on 200 synthetic training and 100 validation images.
fn learnability_args<'a>(run: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "train",
        "--arch",
        "qphm18",
        "--narrow",
        "8",
        "--dataset",
        "synthetic",
        "--classes",
        "10",
        "--epochs",
        "50",
        "--run-dir",
        run,
        "--set",
        "synthetic_per_class=20",
        "--set",
        "synthetic_seed=7",
        "--set",
        "warmup=5",
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn criterion_10_desk_scale_learnability() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("learn");
    let run_s = run.to_str().unwrap();
    let (out, elapsed) = hyperphm(&learnability_args(run_s, &["--batch", "20", "--lr", "0.1"]));
    let m = read_metrics(&run);
    let best_train = m.iter().map(|e| e.train_top1).fold(0.0, f64::max);
    let best_val = m.iter().filter_map(|e| e.val_top1).fold(0.0, f64::max);
    let learned = out.status.success()
        && m.len() == 50
        && best_train > 90.0
        && best_val > 70.0
        && elapsed < Duration::from_secs(600);

    // Same run with lr = 0: full batch, no augmentation or shuffling, so every
    // epoch sees identical inputs and the train metrics must not move.
    let frozen_run = dir.path().join("frozen");
    let (out0, _) = hyperphm(&learnability_args(
        frozen_run.to_str().unwrap(),
        &[
            "--batch",
            "200",
            "--lr",
            "0",
            "--set",
            "augment=false",
            "--set",
            "shuffle=false",
        ],
    ));
    let f = read_metrics(&frozen_run);
    let constant = f
        .windows(2)
        .all(|w| w[0].train_top1 == w[1].train_top1 && w[0].train_loss == w[1].train_loss);
    let max_train0 = f.iter().map(|e| e.train_top1).fold(0.0, f64::max);
    let max_val0 = f.iter().filter_map(|e| e.val_top1).fold(0.0, f64::max);
    let chance = out0.status.success() && f.len() == 50 && constant && max_train0 <= 20.0 && max_val0 <= 20.0;

    assert!(report(
        10,
        "desk-scale learnability",
        learned && chance,
        &format!(
            "best train {best_train:.1}% (> 90), best val {best_val:.1}% (> 70) in {:.0} s (limit 600 s); lr=0: train {max_train0:.1}% constant {constant}, val max {max_val0:.1}% (chance band <= 20%)",
            elapsed.as_secs_f64()
        ),
    ));
}

#[test]
fn criterion_11_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<_> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    let mut codes = Vec::new();
    for run in &runs {
        let (out, _) = hyperphm(&[
            "train",
            "--arch",
            "vphm18",
            "--narrow",
            "8",
            "--dataset",
            "synthetic",
            "--epochs",
            "3",
            "--batch",
            "16",
            "--seed",
            "11",
            "--deterministic",
            "--run-dir",
            run.to_str().unwrap(),
            "--set",
            "synthetic_per_class=4",
            "--set",
            "synthetic_size=16",
        ]);
        codes.push(out.status.code());
    }
    let a = fs::read(runs[0].join("metrics.jsonl")).unwrap_or_default();
    let b = fs::read(runs[1].join("metrics.jsonl")).unwrap_or_default();
    let ok = codes.iter().all(|c| *c == Some(0)) && !a.is_empty() && a == b;
    assert!(report(
        11,
        "determinism",
        ok,
        &format!(
            "exit codes {codes:?}, metrics {} bytes, byte-identical {}",
            a.len(),
            a == b
        ),
    ));
}
