//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary (no libtest harness) so the summary lines are
//! always printed, and exits nonzero if any criterion fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ndarray::Array3;
use rayon::prelude::*;
use serde_json::Value;

use seqpack_core::block::{mamba_block_forward_counted, BlockDims, BlockParams, FlopCounter};
use seqpack_core::flops::{flops_estimate, ModelConfig};
use seqpack_core::gradcheck::{ConvInstance, SsmInstance, DEFAULT_STEP};
use seqpack_core::lengths::{gen_lengths, LengthDistributionSpec};
use seqpack_core::packing::{
    padding_rate, plan_fifo, plan_greedy_sorted, plan_pad_to_max, PackPlan,
};
use seqpack_core::verify::{
    conv_isolation_trial, random_lane, rational_scan_mismatches, scan_case_len, scan_deviation,
    ssm_isolation_trial, PuiCase, Tolerances,
};

const SEED: u64 = 20240601;

/// operator, precision, worst deviation, tolerance, passed
type PuiRow = (String, &'static str, f64, f64, bool);

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    passed: bool,
    summary: String,
}

fn verdict(passed: bool, summary: String) -> Verdict {
    Verdict { passed, summary }
}

fn seed_for(criterion: u64, case: usize) -> u64 {
    SEED.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (criterion << 40) ^ case as u64
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

/// 200 batches; conv / ssm / block packed outputs against the per-sequence
/// serial operators.
fn criterion_1() -> Verdict {
    let start = Instant::now();
    let tol = Tolerances::default();
    let gated = ["conv1d_pack", "ssm_pack", "mamba_block"];
    let results: Vec<Vec<PuiRow>> = (0..200)
        .into_par_iter()
        .map(|case| {
            let c = PuiCase::random(seed_for(1, case)).expect("case");
            let mut out = Vec::new();
            for r in c.run::<f32>(true, &tol).expect("f32 run") {
                out.push((r.operator, "f32", r.max_rel_dev, r.tolerance, r.passed));
            }
            for r in c.run::<f64>(true, &tol).expect("f64 run") {
                out.push((r.operator, "f64", r.max_rel_dev, r.tolerance, r.passed));
            }
            out
        })
        .collect();
    let mut parts = Vec::new();
    let mut ok = true;
    for op in gated {
        for prec in ["f32", "f64"] {
            let rows: Vec<_> = results
                .iter()
                .flatten()
                .filter(|(name, p, ..)| name == op && *p == prec)
                .collect();
            let worst = rows.iter().map(|r| r.2).fold(0.0, f64::max);
            let all = rows.len() == 200 && rows.iter().all(|r| r.4);
            ok &= all;
            parts.push(format!(
                "{op}/{prec} worst {worst:.2e} (tol {:.0e})",
                rows[0].3
            ));
        }
    }
    let elapsed = start.elapsed();
    ok &= within(elapsed, 60);
    verdict(
        ok,
        format!(
            "200 batches; {}; {:.1}s",
            parts.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

/// 100 packs; mutating one sequence leaves every other sequence's outputs and
/// gradients bit-identical.
fn criterion_2() -> Verdict {
    let start = Instant::now();
    let leaks: Vec<String> = (0..100)
        .into_par_iter()
        .flat_map_iter(|case| {
            let s = seed_for(2, case);
            [
                conv_isolation_trial::<f32>(s, true)
                    .expect("conv f32")
                    .map(|l| format!("conv f32 {l:?}")),
                conv_isolation_trial::<f64>(s, true)
                    .expect("conv f64")
                    .map(|l| format!("conv f64 {l:?}")),
                ssm_isolation_trial::<f32>(s)
                    .expect("ssm f32")
                    .map(|l| format!("ssm f32 {l:?}")),
                ssm_isolation_trial::<f64>(s)
                    .expect("ssm f64")
                    .map(|l| format!("ssm f64 {l:?}")),
            ]
            .into_iter()
            .flatten()
        })
        .collect();
    let elapsed = start.elapsed();
    let ok = leaks.is_empty() && within(elapsed, 30);
    let detail = leaks.first().cloned().unwrap_or_else(|| "no leaks".into());
    verdict(
        ok,
        format!(
            "100 packs x (conv, ssm) x (f32, f64); {detail}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// 1000 lanes with lengths up to 4097 in both precisions, plus exact
/// rational lanes up to length 16.
fn criterion_3() -> Verdict {
    let start = Instant::now();
    let lanes: Vec<(usize, f64, f64)> = (0..1000)
        .into_par_iter()
        .map(|case| {
            let s = seed_for(3, case);
            let len = scan_case_len(s, case, 4097);
            let (a, b) = random_lane(s, len);
            (
                len,
                scan_deviation::<f32>(&a, &b).0,
                scan_deviation::<f64>(&a, &b).0,
            )
        })
        .collect();
    let worst32 = lanes.iter().map(|l| l.1).fold(0.0, f64::max);
    let worst64 = lanes.iter().map(|l| l.2).fold(0.0, f64::max);
    let non_pow2 = lanes.iter().filter(|l| !l.0.is_power_of_two()).count();
    let max_len = lanes.iter().map(|l| l.0).max().unwrap_or(0);
    let rational_bad = rational_scan_mismatches(SEED, 16, 8);
    let elapsed = start.elapsed();
    let ok = worst32 <= 1e-4 && worst64 <= 1e-10 && rational_bad.is_empty() && within(elapsed, 60);
    verdict(
        ok,
        format!(
            "1000 lanes (max len {max_len}, {non_pow2} non-power-of-two); worst f32 {worst32:.2e} (tol 1e-4), \
             f64 {worst64:.2e} (tol 1e-10); rational L<=16: {} mismatches; {:.1}s",
            rational_bad.len(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Central differences, step 1e-6, 50 instances per operator.
fn criterion_4() -> Verdict {
    let start = Instant::now();
    let ssm: Vec<f64> = (0..50)
        .into_par_iter()
        .map(|case| {
            let inst = SsmInstance::random(seed_for(4, case)).expect("ssm instance");
            assert!(inst.plan.capacity <= 8);
            inst.check(DEFAULT_STEP).expect("ssm check").max_rel_err()
        })
        .collect();
    let conv: Vec<f64> = (0..50)
        .into_par_iter()
        .map(|case| {
            let inst = ConvInstance::random(seed_for(4, 1000 + case)).expect("conv instance");
            inst.check(DEFAULT_STEP).expect("conv check").max_rel_err()
        })
        .collect();
    let ws = ssm.iter().copied().fold(0.0, f64::max);
    let wc = conv.iter().copied().fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let ok = ws <= 1e-5 && wc <= 1e-5 && within(elapsed, 60);
    verdict(
        ok,
        format!(
            "50+50 instances, L<=8, step {DEFAULT_STEP:e}; worst ssm {ws:.2e}, conv {wc:.2e} (tol 1e-5); {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn corpus_lengths() -> Vec<usize> {
    gen_lengths(&LengthDistributionSpec::corpus_like(100_000, SEED)).expect("lengths")
}

/// Padding rates on 100,000 synthetic lengths (57..=2048, mean 646).
fn criterion_5() -> Verdict {
    let start = Instant::now();
    let lengths = corpus_lengths();
    let mean = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
    let pad = padding_rate(&plan_pad_to_max(&lengths, 2048).unwrap()).unwrap();
    let fifo = padding_rate(&plan_fifo(&lengths, 4096).unwrap()).unwrap();
    let greedy = padding_rate(&plan_greedy_sorted(&lengths, 4096).unwrap()).unwrap();
    let elapsed = start.elapsed();
    let ok = (0.60..=0.72).contains(&pad)
        && (0.08..=0.28).contains(&fifo)
        && greedy <= 0.02
        && (633.0..=659.0).contains(&mean)
        && within(elapsed, 30);
    verdict(
        ok,
        format!(
            "sample mean {mean:.1}; pad-to-max@2048 {pad:.4} in [0.60,0.72]; fifo@4096 {fifo:.4} in [0.08,0.28]; \
             greedy@4096 {greedy:.4} <= 0.02; {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn counted(dims: BlockDims, plan: &PackPlan) -> FlopCounter {
    let params = BlockParams::<f64>::init(dims, 3);
    let x = Array3::from_shape_fn(
        (plan.num_packs(), plan.capacity, dims.model_dim),
        |(p, t, c)| ((p * 7 + t * 3 + c) % 11) as f64 * 0.1 - 0.5,
    );
    let counter = FlopCounter::new();
    mamba_block_forward_counted(&x, &plan.position_indices(), &params, &counter).expect("forward");
    counter
}

/// FLOP ratio packed/padded equals the slot ratio exactly; analytic model
/// equals the per-operator counters; preset ratio equals the per-layer
/// cost ratio.
fn criterion_6() -> Verdict {
    let lengths = corpus_lengths();
    let model = ModelConfig::preset("mamba-1.4b").unwrap();
    let padded = plan_pad_to_max(&lengths, 4096).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, packed) in [
        ("fifo", plan_fifo(&lengths, 4096).unwrap()),
        ("greedy", plan_greedy_sorted(&lengths, 4096).unwrap()),
    ] {
        let fp = flops_estimate(&model, &packed).unwrap();
        let fd = flops_estimate(&model, &padded).unwrap();
        // slots = tokens / (1 - rate) and tokens agree, so the FLOP ratio
        // must equal the slot ratio with no rounding at all.
        let exact = fp * padded.total_slots() as u128 == fd * packed.total_slots() as u128
            && packed.total_slots() - packed.padding_slots()
                == padded.total_slots() - padded.padding_slots();
        ok &= exact;
        parts.push(format!(
            "{name} ratio {:.6} = slots {}/{} {}",
            fp as f64 / fd as f64,
            packed.total_slots(),
            padded.total_slots(),
            if exact { "exact" } else { "MISMATCH" }
        ));
    }

    let tiny = BlockDims {
        model_dim: 4,
        expanded_dim: 8,
        state_dim: 3,
        conv_width: 4,
    };
    let cfg = ModelConfig::from_block_dims("tiny", 1, tiny).unwrap();
    let small = [5, 3, 8, 1, 2, 7, 4];
    let mut discrepancy: u128 = 0;
    for plan in [
        plan_pad_to_max(&small, 8).unwrap(),
        plan_greedy_sorted(&small, 8).unwrap(),
    ] {
        let counter = counted(tiny, &plan);
        for (kind, per_slot) in cfg.per_slot_breakdown() {
            discrepancy +=
                (counter.get(kind) as u128).abs_diff(per_slot * plan.total_slots() as u128);
        }
        discrepancy += (counter.total() as u128).abs_diff(flops_estimate(&cfg, &plan).unwrap());
    }
    ok &= discrepancy == 0;
    parts.push(format!("counter discrepancy {discrepancy}"));

    let big = ModelConfig::preset("mamba-1.4b").unwrap();
    let base = ModelConfig::preset("mamba-110m").unwrap();
    let slots = 1_000_000;
    let lhs = big.flops_for_slots(slots) * (base.layers as u128 * base.per_slot_layer());
    let rhs = base.flops_for_slots(slots) * (big.layers as u128 * big.per_slot_layer());
    ok &= lhs == rhs;
    parts.push(format!(
        "1.4b/110m at equal slots {:.4} = analytic {:.4}",
        big.flops_for_slots(slots) as f64 / base.flops_for_slots(slots) as f64,
        (big.layers as u128 * big.per_slot_layer()) as f64
            / (base.layers as u128 * base.per_slot_layer()) as f64
    ));
    verdict(ok, parts.join("; "))
}

fn run_cli(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_seqpack"))
        .args(args)
        .output()
        .expect("spawn seqpack");
    (
        out.status.success(),
        String::from_utf8(out.stdout).expect("utf8"),
    )
}

fn strip_timings(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.retain(|k, _| k != "wall_time_seconds" && k != "environment");
            map.values_mut().for_each(strip_timings);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timings),
        _ => {}
    }
}

/// `verify` and `compare-strategies` twice, then at 1 and 8 threads.
fn criterion_7() -> Verdict {
    let start = Instant::now();
    let verify = [
        "verify",
        "--seed",
        "7",
        "--format",
        "json",
        "--pui-batches",
        "40",
        "--gradient-instances",
        "10",
        "--scan-lanes",
        "100",
        "--isolation-trials",
        "30",
    ];
    let compare = [
        "compare-strategies",
        "--seed",
        "7",
        "--format",
        "json",
        "--count",
        "20000",
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, base) in [
        ("verify", &verify[..]),
        ("compare-strategies", &compare[..]),
    ] {
        let runs: Vec<(bool, Value)> = [None, None, Some("1"), Some("8")]
            .into_iter()
            .map(|threads| {
                let mut args = base.to_vec();
                if let Some(t) = threads {
                    args.extend(["--threads", t]);
                }
                let (success, text) = run_cli(&args);
                let mut v: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
                strip_timings(&mut v);
                (success, v)
            })
            .collect();
        let same = runs
            .iter()
            .all(|r| r.0 && r.1 != Value::Null && r.1 == runs[0].1);
        ok &= same;
        parts.push(format!(
            "{name}: 2 runs + threads 1/8 {}",
            if same { "identical" } else { "DIFFER" }
        ));
    }
    verdict(
        ok,
        format!(
            "{}; {:.1}s",
            parts.join("; "),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("packing invariance (forward)", criterion_1),
        ("exact isolation", criterion_2),
        ("scan oracle equivalence", criterion_3),
        ("gradient correctness", criterion_4),
        ("padding rates", criterion_5),
        ("FLOP accounting", criterion_6),
        ("deterministic reproducibility", criterion_7),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let v = run();
        if !v.passed {
            failed += 1;
        }
        println!(
            "criterion {} {:<30} {}  {}",
            i + 1,
            name,
            if v.passed { "PASS" } else { "FAIL" },
            v.summary
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
