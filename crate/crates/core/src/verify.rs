//! Algebra identity suite, layer-versus-oracle equivalence, the 5-D PHM
//! reference table comparison, and the gradient-check menu.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::algebra::{
    assemble_h, build_l_matrix, build_phm_sign_matrices, hamilton_product, kron, permute_tau, Quaternion, SignMatrixSet,
};
use crate::autodiff::{GradCheck, GradReport};
use crate::error::{Error, Result};
use crate::layers::{
    phm_linear, quaternion_conv2d, vectormap_conv2d, Algebra, ConvLayer, Head, InitSpec, PhmLinearParams,
    QuaternionConv2dParams, VectormapConv2dParams,
};
use crate::models::{BlockKind, Buffers, ResidualBlock};
use crate::oracle::{
    naive_conv2d, naive_kron, naive_matmul, phm_linear_materialized, quaternion_conv2d_literal, vectormap_conv2d_loop,
};
use crate::params::ParamStore;
use crate::tensor::{conv2d, matmul, ConvSpec, Mode, RunningStats, Tensor};

/// Tolerance for layer-versus-oracle relative error.
pub const ORACLE_TOL: f64 = 1e-10;
/// Tolerance for the PHM(n = 4) versus Hamilton product comparison.
pub const BRIDGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{mark}] {}: {}", self.name, self.detail)
    }
}

// ---------------------------------------------------------------------------
// 5-D reference table

/// Symbol names of the scalar blocks `S_1..S_5`.
pub const PHM5_SYMBOLS: [&str; 5] = ["P_r", "P_w", "P_x", "P_y", "P_z"];

/// Reference structure matrices `A_1..A_5` of the 5-D PHM layer.
pub const REFERENCE_A5: [[[i8; 5]; 5]; 5] = [
    [
        [1, 0, 0, 0, 0],
        [0, 1, 0, 0, 0],
        [0, 0, 1, 0, 0],
        [0, 0, 0, 1, 0],
        [0, 0, 0, 0, 1],
    ],
    [
        [0, 1, 0, 0, 0],
        [0, 0, 1, 0, 0],
        [0, 0, 0, -1, 0],
        [0, 0, 0, 0, -1],
        [-1, 0, 0, 0, 0],
    ],
    [
        [0, 0, 1, 0, 0],
        [0, 0, 0, -1, 0],
        [0, 0, 0, 0, 1],
        [-1, 0, 0, 0, 0],
        [0, -1, 0, 0, 0],
    ],
    [
        [0, 0, 0, 1, 0],
        [0, 0, 0, 0, -1],
        [-1, 0, 0, 0, 0],
        [0, 1, 0, 0, 0],
        [0, 0, -1, 0, 0],
    ],
    [
        [0, 0, 0, 0, 1],
        [-1, 0, 0, 0, 0],
        [0, -1, 0, 0, 0],
        [0, 0, -1, 0, 0],
        [0, 0, 0, 1, 0],
    ],
];

/// Reference `H` as (sign, symbol index) per cell.
pub const REFERENCE_H5: [[(i8, usize); 5]; 5] = [
    [(1, 0), (1, 1), (1, 2), (1, 3), (1, 4)],
    [(-1, 4), (1, 0), (1, 1), (-1, 2), (-1, 3)],
    [(-1, 3), (-1, 4), (1, 0), (-1, 1), (1, 2)],
    [(-1, 2), (-1, 3), (-1, 4), (1, 0), (-1, 1)],
    [(-1, 1), (-1, 2), (-1, 3), (1, 4), (1, 0)],
];

fn symbol(sign: i8, idx: usize) -> String {
    format!("{}{}", if sign < 0 { "-" } else { "+" }, PHM5_SYMBOLS[idx])
}

#[derive(Debug, Clone, Serialize)]
pub struct CellDeviation {
    /// One-based row and column.
    pub row: usize,
    pub col: usize,
    pub kronecker_sum: String,
    pub reference: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Phm5Report {
    pub cells: usize,
    pub matching: usize,
    pub deviations: Vec<CellDeviation>,
    /// Whether the library's own 5-D sign matrices equal the reference A_i.
    pub library_matches_reference_a: bool,
}

impl fmt::Display for Phm5Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "5-D PHM: sum_i A_i (x) S_i with scalar S_i matches the reference H at {}/{} cells",
            self.matching, self.cells
        )?;
        for d in &self.deviations {
            writeln!(
                f,
                "  cell ({},{}): Kronecker sum gives {}, reference prints {}",
                d.row, d.col, d.kronecker_sum, d.reference
            )?;
        }
        write!(
            f,
            "  library A_1..A_5 {} the reference matrices",
            if self.library_matches_reference_a {
                "equal"
            } else {
                "differ from"
            }
        )
    }
}

/// Expands `sum_i A_i (x) [S_i]` symbolically and compares it with
/// [`REFERENCE_H5`] cell by cell, without tolerance.
pub fn phm5_reference_report() -> Result<Phm5Report> {
    let matrices = REFERENCE_A5
        .iter()
        .map(|m| m.iter().flatten().copied().collect())
        .collect();
    let set = SignMatrixSet::from_matrices(5, matrices)?;
    let mut deviations = Vec::new();
    let mut matching = 0;
    for (i, row) in REFERENCE_H5.iter().enumerate() {
        for (j, &(sign, idx)) in row.iter().enumerate() {
            let terms: Vec<(i8, usize)> = (0..5)
                .filter(|&t| set.get(t, i, j) != 0)
                .map(|t| (set.get(t, i, j), t))
                .collect();
            let computed = match terms.as_slice() {
                [(s, t)] => symbol(*s, *t),
                [] => "0".to_string(),
                many => many.iter().map(|(s, t)| symbol(*s, *t)).collect::<Vec<_>>().join(" "),
            };
            if terms == [(sign, idx)] {
                matching += 1;
            } else {
                deviations.push(CellDeviation {
                    row: i + 1,
                    col: j + 1,
                    kronecker_sum: computed,
                    reference: symbol(sign, idx),
                });
            }
        }
    }
    let ours = build_phm_sign_matrices(5)?;
    Ok(Phm5Report {
        cells: 25,
        matching,
        deviations,
        library_matches_reference_a: (0..5).all(|t| ours.matrix(t) == set.matrix(t)),
    })
}

// ---------------------------------------------------------------------------
// identity suite

fn rand_q(rng: &mut ChaCha8Rng) -> Quaternion<f64> {
    Quaternion::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
    )
}

fn max_diff4(a: [f64; 4], b: [f64; 4]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_hamilton_units() -> Check {
    let u = |t: usize| {
        let mut c = [0.0; 4];
        c[t] = 1.0;
        Quaternion::from_array(c)
    };
    let (one, i, j, k) = (u(0), u(1), u(2), u(3));
    let cases = [
        ("i^2 = -1", i * i, -one),
        ("j^2 = -1", j * j, -one),
        ("k^2 = -1", k * k, -one),
        ("ijk = -1", i * j * k, -one),
        ("ij = k", i * j, k),
        ("jk = i", j * k, i),
        ("ki = j", k * i, j),
        ("ji = -k", j * i, -k),
        ("kj = -i", k * j, -i),
        ("ik = -j", i * k, -j),
    ];
    let failed: Vec<&str> = cases.iter().filter(|(_, a, b)| a != b).map(|(n, _, _)| *n).collect();
    Check::new(
        "hamilton unit identities",
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} identities hold exactly", cases.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

fn check_product_formula(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    let mut norm_worst = 0.0f64;
    for _ in 0..1000 {
        let (p, q) = (rand_q(rng), rand_q(rng));
        let (rr, xx, yy, zz) = (p.r, p.x, p.y, p.z);
        let (r, x, y, z) = (q.r, q.x, q.y, q.z);
        let expect = [
            rr * r - xx * x - yy * y - zz * z,
            rr * x + xx * r + yy * z - zz * y,
            rr * y - xx * z + yy * r + zz * x,
            rr * z + xx * y - yy * x + zz * r,
        ];
        worst = worst.max(max_diff4(hamilton_product(p, q).to_array(), expect));
        let n = (p * q).norm_sqr();
        norm_worst = norm_worst.max((n - p.norm_sqr() * q.norm_sqr()).abs() / n.max(1e-300));
    }
    Check::new(
        "hamilton product component formula",
        worst < 1e-12 && norm_worst < 1e-12,
        format!("1000 pairs, max abs err {worst:.2e}, norm multiplicativity rel err {norm_worst:.2e}"),
    )
}

fn check_tau() -> Check {
    let mut ok = permute_tau(&[1, 2, 3], 1) == [3, 1, 2];
    for d in 1..=8usize {
        let v: Vec<usize> = (0..d).collect();
        ok &= permute_tau(&v, d) == v;
        for p in 1..d {
            ok &= permute_tau(&v, p) != v;
        }
        let mut sorted = permute_tau(&v, 1);
        sorted.sort_unstable();
        ok &= sorted == v;
    }
    Check::new(
        "tau cyclic right shift",
        ok,
        "tau([v1,v2,v3]) = [v3,v1,v2]; tau is a bijection of order D for D = 1..8",
    )
}

fn check_l_matrix() -> Check {
    let expected: [(usize, Vec<i8>); 3] = [
        (1, vec![1]),
        (3, vec![1, 1, 1, -1, 1, 1, -1, 1, 1]),
        (
            5,
            vec![
                1, 1, 1, 1, 1, -1, 1, 1, -1, -1, -1, -1, 1, -1, 1, -1, 1, -1, 1, -1, -1, -1, -1, 1, 1,
            ],
        ),
    ];
    let mut bad = Vec::new();
    for (d, want) in &expected {
        let got: Vec<i8> = build_l_matrix(*d)
            .map(|l| l.rows().into_iter().flatten().map(|v| v as i8).collect())
            .unwrap_or_default();
        if &got != want {
            bad.push(d.to_string());
        }
    }
    Check::new(
        "L-matrix rule",
        bad.is_empty(),
        if bad.is_empty() {
            "D = 1, 3, 5 match the hand-evaluated case rule".to_string()
        } else {
            format!("mismatch for D = {}", bad.join(", "))
        },
    )
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::rand_uniform(&[r, c], -1.0, 1.0, rng)
}

fn check_kron(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    let mut impl_worst = 0.0f64;
    for _ in 0..50 {
        let (m, n, p, q, s) = (
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(1..4),
        );
        let t = rng.random_range(1..4);
        let (a, b) = (rand_mat(rng, m, n), rand_mat(rng, p, q));
        let (c, d) = (rand_mat(rng, n, s), rand_mat(rng, q, t));
        let lhs = naive_matmul(&naive_kron(&a, &b).unwrap(), &naive_kron(&c, &d).unwrap()).unwrap();
        let rhs = naive_kron(&naive_matmul(&a, &c).unwrap(), &naive_matmul(&b, &d).unwrap()).unwrap();
        worst = worst.max(lhs.rel_err(&rhs));
        impl_worst = impl_worst.max(kron(&a, &b).unwrap().rel_err(&naive_kron(&a, &b).unwrap()));
    }
    Check::new(
        "kronecker mixed product",
        worst < 1e-12 && impl_worst == 0.0,
        format!("(A(x)B)(C(x)D) = (AC)(x)(BD) rel err {worst:.2e}; kron vs index oracle {impl_worst:.1e}"),
    )
}

fn check_sign_sets() -> Check {
    let mut bad = Vec::new();
    for n in 1..=8 {
        match build_phm_sign_matrices(n) {
            Ok(set) if set.tiles_grid() && (0..n).all(|t| set.is_signed_permutation(t)) => {}
            _ => bad.push(n.to_string()),
        }
    }
    Check::new(
        "structure matrices tile the grid",
        bad.is_empty(),
        if bad.is_empty() {
            "A_1..A_N are signed permutations covering each cell once, N = 1..8".to_string()
        } else {
            format!("failed for N = {}", bad.join(", "))
        },
    )
}

/// PHM with `n = 4` and `1 x 1` blocks equals the Hamilton product.
pub fn bridge_max_error(pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = PhmLinearParams::<f64>::new(4, 4, 4, &InitSpec::new(seed))?;
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let (p, q) = (rand_q(&mut rng), rand_q(&mut rng));
        for (t, c) in p.to_array().into_iter().enumerate() {
            params.s_blocks[t] = Tensor::from_f64(&[1, 1], &[c])?;
        }
        let x = Tensor::from_f64(&[1, 4], &q.to_array())?;
        let y = phm_linear(&x, &params)?;
        let expect = hamilton_product(p, q).to_array();
        worst = worst.max(max_diff4(y.data().try_into().expect("4 outputs"), expect));
    }
    Ok(worst)
}

fn check_bridge(seed: u64) -> Check {
    match bridge_max_error(1000, seed) {
        Ok(e) => Check::new(
            "PHM(n=4) equals Hamilton product",
            e < BRIDGE_TOL,
            format!("1000 random pairs, max abs err {e:.2e} (tol {BRIDGE_TOL:.0e})"),
        ),
        Err(e) => Check::new("PHM(n=4) equals Hamilton product", false, e.to_string()),
    }
}

fn within(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.rel_err(b)
}

fn rand_spec(rng: &mut ChaCha8Rng) -> ConvSpec {
    let k = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..=2);
    ConvSpec::new(k, stride, rng.random_range(0..=k / 2)).expect("valid spec")
}

/// Worst relative error of each layer against its oracle over `instances`
/// random configurations with all extents at most 8.
pub fn layer_oracle_errors(instances: usize, seed: u64) -> Result<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 4];
    for i in 0..instances {
        let init = InitSpec::new(seed.wrapping_add(i as u64));
        let batch = rng.random_range(1..=2);
        let hw = rng.random_range(3..=8);

        let spec = rand_spec(&mut rng);
        let (cin, cout) = (4 * rng.random_range(1..=2), 4 * rng.random_range(1..=2));
        let qp = QuaternionConv2dParams::<f64>::new(cin, cout, spec, &init)?;
        let x = Tensor::rand_uniform(&[batch, cin, hw, hw], -1.0, 1.0, &mut rng);
        worst[0] = worst[0].max(within(
            &quaternion_conv2d(&x, &qp)?,
            &quaternion_conv2d_literal(&x, &qp)?,
        ));

        let d = rng.random_range(2..=5);
        let spec = rand_spec(&mut rng);
        let mut vp = VectormapConv2dParams::<f64>::new(d, d, d * rng.random_range(1..=2), spec, &init)?;
        for v in vp.l.data_mut() {
            *v *= rng.random_range(0.5..1.5);
        }
        let x = Tensor::rand_uniform(&[batch, d, hw, hw], -1.0, 1.0, &mut rng);
        worst[1] = worst[1].max(within(&vectormap_conv2d(&x, &vp)?, &vectormap_conv2d_loop(&x, &vp)?));

        let n = rng.random_range(1..=5);
        let (dd, kk) = (
            n * rng.random_range(1..=8 / n.max(1)),
            n * rng.random_range(1..=8 / n.max(1)),
        );
        let mut pp = PhmLinearParams::<f64>::new(n, dd, kk, &init)?;
        pp.bias = Tensor::rand_uniform(&[kk], -1.0, 1.0, &mut rng);
        let x = Tensor::rand_uniform(&[batch, dd], -1.0, 1.0, &mut rng);
        worst[2] = worst[2].max(within(&phm_linear(&x, &pp)?, &phm_linear_materialized(&x, &pp)?));

        let spec = rand_spec(&mut rng);
        let (c, o) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let x = Tensor::rand_uniform(&[batch, c, hw, hw], -1.0, 1.0, &mut rng);
        let k = Tensor::rand_uniform(&[o, c, spec.kernel, spec.kernel], -1.0, 1.0, &mut rng);
        worst[3] = worst[3].max(within(&conv2d(&x, &k, spec)?, &naive_conv2d(&x, &k, spec)?));
    }
    Ok(worst)
}

fn check_layers(seed: u64) -> Vec<Check> {
    match layer_oracle_errors(100, seed) {
        Ok(w) => [
            ("quaternion_conv2d vs sixteen-convolution oracle", w[0]),
            ("vectormap_conv2d vs per-group loop oracle", w[1]),
            ("phm_linear vs materialized-H oracle", w[2]),
            ("conv2d vs direct-loop oracle", w[3]),
        ]
        .into_iter()
        .map(|(name, e)| Check::new(name, e < ORACLE_TOL, format!("100 instances, max rel err {e:.2e}")))
        .collect(),
        Err(e) => vec![Check::new("layer oracles", false, e.to_string())],
    }
}

fn check_matmul(rng: &mut ChaCha8Rng) -> Check {
    let a = rand_mat(rng, 5, 7);
    let b = rand_mat(rng, 7, 3);
    let e = within(&matmul(&a, &b).unwrap(), &naive_matmul(&a, &b).unwrap());
    Check::new(
        "matmul vs triple-loop oracle",
        e < 1e-12,
        format!("5x7 . 7x3 rel err {e:.2e}"),
    )
}

fn check_phm5(report: &Phm5Report) -> Check {
    let only_42 = report.deviations.len() == 1 && {
        let d = &report.deviations[0];
        d.row == 4 && d.col == 2 && d.kronecker_sum == "+P_y" && d.reference == "-P_y"
    };
    Check::new(
        "5-D PHM reference table",
        report.matching == 24 && only_42 && report.library_matches_reference_a,
        format!(
            "{}/25 cells match; deviation at {}",
            report.matching,
            report
                .deviations
                .iter()
                .map(|d| format!("({},{}) {} vs {}", d.row, d.col, d.kronecker_sum, d.reference))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn check_assemble_h(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for n in 1..=6 {
        let set = build_phm_sign_matrices(n).unwrap();
        let s: Vec<Tensor<f64>> = (0..n).map(|_| rand_mat(rng, 2, 3)).collect();
        let h = assemble_h(&set, &s).unwrap();
        let mut reference = Tensor::zeros(&[2 * n, 3 * n]);
        for (t, st) in s.iter().enumerate() {
            let a: Tensor<f64> = set.to_tensors()[t].clone();
            reference.accumulate(&naive_kron(&a, st).unwrap()).unwrap();
        }
        worst = worst.max(within(&h, &reference));
    }
    Check::new(
        "assemble_h equals sum of Kronecker products",
        worst < 1e-12,
        format!("N = 1..6, rel err {worst:.2e}"),
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub phm5: Phm5Report,
    pub elapsed_s: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Runs every identity and oracle check.
pub fn run_suite(seed: u64) -> Result<VerifyReport> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phm5 = phm5_reference_report()?;
    let mut checks = vec![
        check_hamilton_units(),
        check_product_formula(&mut rng),
        check_tau(),
        check_l_matrix(),
        check_kron(&mut rng),
        check_sign_sets(),
        check_assemble_h(&mut rng),
        check_bridge(seed),
        check_matmul(&mut rng),
    ];
    checks.extend(check_layers(seed));
    checks.push(check_phm5(&phm5));
    Ok(VerifyReport {
        checks,
        phm5,
        elapsed_s: t0.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// gradient-check menu

/// Targets understood by [`gradcheck_target`].
pub const GRADCHECK_MENU: [&str; 5] = ["phm4", "phm5", "quatconv", "vectconv", "block"];

/// Parameter of each menu target whose analytic gradient a fault-injection
/// run negates.
pub fn fault_param(target: &str) -> Option<&'static str> {
    match target {
        "phm4" => Some("phm4.s1"),
        "phm5" => Some("phm5.s1"),
        "quatconv" => Some("quatconv.x"),
        "vectconv" => Some("vectconv.l"),
        "block" => Some("block.conv2.x"),
        _ => None,
    }
}

/// Runs `check` on one small layer or block in wide precision. The block is
/// a quaternion bottleneck with a projection shortcut and batch norm in
/// eval mode.
pub fn gradcheck_target(name: &str, check: &GradCheck, seed: u64) -> Result<GradReport> {
    let init = InitSpec::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut store = ParamStore::<f64>::new();
    match name {
        "phm4" | "phm5" => {
            let n = if name == "phm4" { 4 } else { 5 };
            let head = Head::phm(&mut store, name, n, 2 * n, n, false, &init)?;
            let bias = store.id(&format!("{name}.bias")).expect("bias registered");
            store.get_mut(bias).value = Tensor::rand_uniform(&[n], -0.5, 0.5, &mut rng);
            let x = Tensor::rand_uniform(&[3, 2 * n], -1.0, 1.0, &mut rng);
            check.run(&mut store, |g, p| {
                let xv = g.constant(x.clone());
                let y = head.forward(g, p, xv)?;
                Ok(g.half_sum_squares(y))
            })
        }
        "quatconv" | "vectconv" => {
            let (algebra, cin, cout) = if name == "quatconv" {
                (Algebra::Quaternion, 4, 8)
            } else {
                (Algebra::Vectormap(3), 6, 6)
            };
            let layer = ConvLayer::new(&mut store, name, algebra, cin, cout, ConvSpec::same(3, 1)?, &init)?;
            if let Some(l) = store.id(&format!("{name}.l")) {
                for v in store.get_mut(l).value.data_mut() {
                    *v *= rng.random_range(0.5..1.5);
                }
            }
            let x = Tensor::rand_uniform(&[2, cin, 5, 5], -1.0, 1.0, &mut rng);
            check.run(&mut store, |g, p| {
                let xv = g.constant(x.clone());
                let y = layer.forward(g, p, xv)?;
                Ok(g.half_sum_squares(y))
            })
        }
        "block" => {
            let mut buffers = Buffers::new();
            let block = ResidualBlock::new(
                &mut store,
                &mut buffers,
                "block",
                Algebra::Quaternion,
                BlockKind::Bottleneck,
                8,
                4,
                2,
                &init,
            )?;
            for s in &mut buffers.stats {
                let c = s.channels();
                *s = RunningStats {
                    mean: (0..c).map(|_| rng.random_range(-0.2..0.2)).collect(),
                    var: (0..c).map(|_| rng.random_range(0.5..1.5)).collect(),
                    initialized: true,
                };
            }
            let ids: Vec<_> = store
                .iter()
                .filter(|(_, n, _)| n.ends_with(".gamma") || n.ends_with(".beta"))
                .map(|(id, n, _)| (id, n.ends_with(".gamma")))
                .collect();
            for (id, is_gamma) in ids {
                let shape = store.value(id).shape().to_vec();
                let (lo, hi) = if is_gamma { (0.5, 1.5) } else { (-0.3, 0.3) };
                store.get_mut(id).value = Tensor::rand_uniform(&shape, lo, hi, &mut rng);
            }
            let x = Tensor::rand_uniform(&[2, 8, 6, 6], -1.0, 1.0, &mut rng);
            check.run(&mut store, |g, p| {
                let xv = g.constant(x.clone());
                let y = block.forward(g, p, xv, &mut buffers.stats, Mode::Eval)?;
                Ok(g.half_sum_squares(y))
            })
        }
        other => Err(Error::config(
            "target",
            format!("unknown gradcheck target `{other}`; expected one of {GRADCHECK_MENU:?}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_table_single_deviation() {
        let r = phm5_reference_report().unwrap();
        assert_eq!(r.matching, 24);
        assert_eq!(r.deviations.len(), 1);
        let d = &r.deviations[0];
        assert_eq!((d.row, d.col), (4, 2));
        assert_eq!(d.kronecker_sum, "+P_y");
        assert_eq!(d.reference, "-P_y");
        assert!(r.library_matches_reference_a);
    }

    #[test]
    fn bridge_holds() {
        assert!(bridge_max_error(200, 3).unwrap() < BRIDGE_TOL);
    }

    #[test]
    fn quick_suite_passes() {
        let report = run_suite(11).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn gradcheck_menu_passes() {
        for name in GRADCHECK_MENU {
            let r = gradcheck_target(name, &GradCheck::new(1e-5), 0).unwrap();
            assert!(r.passes(1e-5), "{name}: {} at {}", r.max_rel_err, r.worst);
        }
    }

    #[test]
    fn flipped_sign_is_detected() {
        for name in GRADCHECK_MENU {
            let mut check = GradCheck::new(1e-5);
            check.flip_sign_of = fault_param(name).map(String::from);
            let r = gradcheck_target(name, &check, 0).unwrap();
            assert!(!r.passes(1e-5), "{name}");
        }
    }

    #[test]
    fn unknown_target_is_config_error() {
        assert!(matches!(
            gradcheck_target("nope", &GradCheck::new(1e-5), 0),
            Err(Error::Config { .. })
        ));
    }
}
