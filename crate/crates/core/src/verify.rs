//! Randomized invariant suites behind the `verify` command.
//!
//! Every case draws its own RNG from the run seed, the suite and the case
//! number, so cases can run in parallel and the report is the same for any
//! thread count. Reports carry no timestamps or timings.

use ndarray::{Array1, Array2, Array3};
use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{conv1d_forward_unmasked, conv1d_pack_backward, conv1d_pack_forward, ConvParams};
use crate::error::{Error, Result};
use crate::gradcheck::{ConvInstance, GradCheck, SsmInstance, DEFAULT_STEP};
use crate::packing::{
    pack_rows, plan_fifo, plan_greedy_sorted, reverse_from_positions, PackPlan, SequenceBatch,
};
use crate::pui::{pui_check, random_conv, registry_with, Location, OperatorClass, PuiReport};
use crate::real::{lit, Precision, Real};
use crate::scan::{parallel_scan, serial_scan};
use crate::ssm::{ssm_backward_packed, ssm_forward_packed, SsmParams, SsmSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Pui,
    Gradients,
    ScanOracle,
    Isolation,
    All,
}

impl Suite {
    pub const CONCRETE: [Suite; 4] = [
        Suite::Pui,
        Suite::Gradients,
        Suite::ScanOracle,
        Suite::Isolation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Pui => "pui",
            Suite::Gradients => "gradients",
            Suite::ScanOracle => "scan-oracle",
            Suite::Isolation => "isolation",
            Suite::All => "all",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Suite::Pui => 1,
            Suite::Gradients => 2,
            Suite::ScanOracle => 3,
            Suite::Isolation => 4,
            Suite::All => 0,
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Suite::All,
            Suite::Pui,
            Suite::Gradients,
            Suite::ScanOracle,
            Suite::Isolation,
        ]
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown suite `{s}`")))
    }
}

/// Deliberate bugs for checking that the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Convolution that ignores position indices.
    UnmaskedConv,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unmasked-conv" => Ok(Fault::UnmaskedConv),
            _ => Err(Error::InvalidConfig(format!("unknown fault `{s}`"))),
        }
    }
}

/// Relative tolerances (normwise: max deviation over max reference
/// magnitude).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub conv_f32: f64,
    pub ssm_f32: f64,
    pub block_f32: f64,
    pub conv_f64: f64,
    pub ssm_f64: f64,
    pub block_f64: f64,
    pub scan_f32: f64,
    pub scan_f64: f64,
    pub gradient: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            conv_f32: 1e-4,
            ssm_f32: 1e-4,
            block_f32: 1e-3,
            conv_f64: 1e-10,
            ssm_f64: 1e-10,
            block_f64: 1e-8,
            scan_f32: 1e-4,
            scan_f64: 1e-10,
            gradient: 1e-5,
        }
    }
}

impl Tolerances {
    pub const KEYS: [&'static str; 9] = [
        "conv-f32",
        "ssm-f32",
        "block-f32",
        "conv-f64",
        "ssm-f64",
        "block-f64",
        "scan-f32",
        "scan-f64",
        "gradient",
    ];

    fn slot(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "conv-f32" => &mut self.conv_f32,
            "ssm-f32" => &mut self.ssm_f32,
            "block-f32" => &mut self.block_f32,
            "conv-f64" => &mut self.conv_f64,
            "ssm-f64" => &mut self.ssm_f64,
            "block-f64" => &mut self.block_f64,
            "scan-f32" => &mut self.scan_f32,
            "scan-f64" => &mut self.scan_f64,
            "gradient" => &mut self.gradient,
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        if value < 0.0 || value.is_nan() {
            return Err(Error::InvalidConfig(format!(
                "tolerance {key}={value} must be non-negative"
            )));
        }
        let slot = self.slot(key).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "unknown tolerance `{key}`, expected one of {:?}",
                Self::KEYS
            ))
        })?;
        *slot = value;
        Ok(())
    }

    /// Parses `key=value`.
    pub fn apply_override(&mut self, text: &str) -> Result<()> {
        let (key, value) = text
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got `{text}`")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|e| Error::InvalidConfig(format!("tolerance `{text}`: {e}")))?;
        self.set(key.trim(), value)
    }

    fn pui(&self, operator: &str, class: OperatorClass, precision: Precision) -> f64 {
        if class != OperatorClass::SequenceWise {
            return 0.0;
        }
        let f32 = precision == Precision::F32;
        match operator {
            "ssm_pack" if f32 => self.ssm_f32,
            "ssm_pack" => self.ssm_f64,
            "mamba_block" if f32 => self.block_f32,
            "mamba_block" => self.block_f64,
            _ if f32 => self.conv_f32,
            _ => self.conv_f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub suite: Suite,
    pub seed: u64,
    pub tolerances: Tolerances,
    pub fault: Option<Fault>,
    pub pui_batches: usize,
    pub gradient_instances: usize,
    pub scan_lanes: usize,
    pub scan_max_len: usize,
    pub isolation_trials: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            suite: Suite::All,
            seed: 0,
            tolerances: Tolerances::default(),
            fault: None,
            pui_batches: 200,
            gradient_instances: 50,
            scan_lanes: 1000,
            scan_max_len: 4097,
            isolation_trials: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub case: usize,
    pub case_seed: u64,
    pub detail: String,
    pub location: Option<Location>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: Suite,
    pub check: String,
    pub precision: Option<Precision>,
    pub cases: usize,
    pub tolerance: f64,
    /// Largest relative deviation over all cases (mismatch count for
    /// bit-exact checks).
    pub worst: f64,
    pub passed: bool,
    /// The worst failing case, if any.
    pub counterexample: Option<Counterexample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub seed: u64,
    pub fault: Option<Fault>,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

pub fn case_seed(seed: u64, suite: Suite, case: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ suite.tag().rotate_left(48));
    rng.set_stream(case as u64);
    rng.random()
}

struct Outcome {
    value: f64,
    passed: bool,
    detail: String,
    location: Option<Location>,
}

/// Folds per-case outcomes into one result, keeping the worst failure (or
/// the worst case overall when everything passed, without counterexample).
fn summarize(
    suite: Suite,
    check: &str,
    precision: Option<Precision>,
    tolerance: f64,
    seed: u64,
    outcomes: Vec<Outcome>,
) -> CheckResult {
    let cases = outcomes.len();
    let passed = outcomes.iter().all(|o| o.passed);
    let worst = outcomes
        .iter()
        .map(|o| o.value)
        .fold(0.0, |a: f64, b| if b.is_nan() || b > a { b } else { a });
    let counterexample = outcomes
        .into_iter()
        .enumerate()
        .filter(|(_, o)| !o.passed)
        .max_by(|(i, a), (j, b)| a.value.total_cmp(&b.value).then(j.cmp(i)))
        .map(|(case, o)| Counterexample {
            case,
            case_seed: case_seed(seed, suite, case),
            detail: o.detail,
            location: o.location,
        });
    CheckResult {
        suite,
        check: check.to_string(),
        precision,
        cases,
        tolerance,
        worst,
        passed,
        counterexample,
    }
}

pub fn run_verify(config: &VerifyConfig) -> Result<VerifyReport> {
    let suites: Vec<Suite> = match config.suite {
        Suite::All => Suite::CONCRETE.to_vec(),
        s => vec![s],
    };
    let mut checks = Vec::new();
    for suite in suites {
        checks.extend(match suite {
            Suite::Pui => pui_suite(config)?,
            Suite::Gradients => gradient_suite(config)?,
            Suite::ScanOracle => scan_suite(config)?,
            Suite::Isolation => isolation_suite(config)?,
            Suite::All => unreachable!(),
        });
    }
    Ok(VerifyReport {
        suite: config.suite,
        seed: config.seed,
        fault: config.fault,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

/// A random batch for the packing-invariance suite: up to 8 sequences of
/// length 1 to 32 at capacity 64, up to 4 channels and 4 states.
#[derive(Debug, Clone)]
pub struct PuiCase {
    pub sequences: Vec<Array2<f64>>,
    pub plan: PackPlan,
    pub channels: usize,
    pub states: usize,
    pub op_seed: u64,
}

pub const PUI_CAPACITY: usize = 64;

impl PuiCase {
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.random_range(1..=8);
        let channels = rng.random_range(1..=4);
        let states = rng.random_range(1..=4);
        let lengths: Vec<usize> = (0..count).map(|_| rng.random_range(1..=32)).collect();
        let plan = if rng.random::<bool>() {
            plan_fifo(&lengths, PUI_CAPACITY)?
        } else {
            plan_greedy_sorted(&lengths, PUI_CAPACITY)?
        };
        let sequences = lengths
            .iter()
            .map(|&l| Array2::from_shape_fn((l, channels), |_| rng.random_range(-2.0..2.0)))
            .collect();
        Ok(Self {
            sequences,
            plan,
            channels,
            states,
            op_seed: rng.random(),
        })
    }

    pub fn batch<T: Real>(&self) -> Result<SequenceBatch<T>> {
        SequenceBatch::new(self.sequences.iter().map(|s| s.mapv(lit)).collect())
    }

    /// Packing-invariance reports for every registered operator.
    pub fn run<T: Real>(
        &self,
        masked_conv: bool,
        tolerances: &Tolerances,
    ) -> Result<Vec<PuiReport>> {
        let batch = self.batch::<T>()?;
        registry_with::<T>(self.channels, self.states, self.op_seed, masked_conv)
            .iter()
            .map(|op| {
                let tol = tolerances.pui(op.name(), op.class(), T::PRECISION);
                pui_check(op.as_ref(), &batch, &self.plan, tol)
            })
            .collect()
    }
}

fn pui_suite(config: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let masked = config.fault != Some(Fault::UnmaskedConv);
    let mut out = Vec::new();
    for precision in [Precision::F32, Precision::F64] {
        let per_case: Vec<Vec<PuiReport>> = (0..config.pui_batches)
            .into_par_iter()
            .map(|case| {
                let c = PuiCase::random(case_seed(config.seed, Suite::Pui, case))?;
                match precision {
                    Precision::F32 => c.run::<f32>(masked, &config.tolerances),
                    Precision::F64 => c.run::<f64>(masked, &config.tolerances),
                }
            })
            .collect::<Result<_>>()?;
        let Some(first) = per_case.first() else {
            continue;
        };
        for (k, template) in first.iter().enumerate() {
            let outcomes = per_case
                .iter()
                .map(|reports| {
                    let r = &reports[k];
                    Outcome {
                        value: r.max_rel_dev,
                        passed: r.passed,
                        detail: format!("max abs deviation {:e}", r.max_abs_dev),
                        location: r.worst_location,
                    }
                })
                .collect();
            out.push(summarize(
                Suite::Pui,
                &template.operator,
                Some(precision),
                template.tolerance,
                config.seed,
                outcomes,
            ));
        }
    }
    Ok(out)
}

fn grad_outcome(check: GradCheck, tolerance: f64) -> Outcome {
    let worst = check.worst().cloned();
    let value = check.max_rel_err();
    Outcome {
        value,
        passed: value <= tolerance,
        detail: worst.map_or_else(String::new, |t| {
            format!(
                "tensor {} flat index {:?}, abs error {:e}",
                t.tensor, t.worst_index, t.max_abs_err
            )
        }),
        location: None,
    }
}

fn gradient_suite(config: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let tol = config.tolerances.gradient;
    let n = config.gradient_instances;
    let ssm: Vec<Outcome> = (0..n)
        .into_par_iter()
        .map(|case| {
            let inst = SsmInstance::random(case_seed(config.seed, Suite::Gradients, case))?;
            Ok(grad_outcome(inst.check(DEFAULT_STEP)?, tol))
        })
        .collect::<Result<_>>()?;
    let conv: Vec<Outcome> = (0..n)
        .into_par_iter()
        .map(|case| {
            let inst = ConvInstance::random(case_seed(config.seed, Suite::Gradients, n + case))?;
            Ok(grad_outcome(inst.check(DEFAULT_STEP)?, tol))
        })
        .collect::<Result<_>>()?;
    Ok(vec![
        summarize(
            Suite::Gradients,
            "ssm_backward_packed",
            Some(Precision::F64),
            tol,
            config.seed,
            ssm,
        ),
        summarize(
            Suite::Gradients,
            "conv1d_pack_backward",
            Some(Precision::F64),
            tol,
            config.seed,
            conv,
        ),
    ])
}

/// One scan lane: coefficients in `[0.5, 1)` with occasional resets to 0,
/// inputs in `[-1, 1)`.
pub fn random_lane(seed: u64, len: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = (0..len)
        .map(|_| {
            if rng.random_range(0..64) == 0 {
                0.0
            } else {
                rng.random_range(0.5..1.0)
            }
        })
        .collect();
    let b = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    (a, b)
}

/// Normwise relative deviation of `parallel_scan` from `serial_scan`.
pub fn scan_deviation<T: Real>(a: &[f64], b: &[f64]) -> (f64, Option<usize>) {
    let a: Vec<T> = a.iter().map(|&v| lit(v)).collect();
    let b: Vec<T> = b.iter().map(|&v| lit(v)).collect();
    let fast = parallel_scan(&a, &b);
    let slow = serial_scan(&a, &b);
    let mut max_abs = 0f64;
    let mut scale = 0f64;
    let mut at = None;
    for (i, (f, s)) in fast.iter().zip(&slow).enumerate() {
        let dev = (f.to_f64_lossy() - s.to_f64_lossy()).abs();
        scale = scale.max(s.to_f64_lossy().abs());
        if dev > max_abs || dev.is_nan() {
            max_abs = dev;
            at = Some(i);
        }
    }
    let rel = if max_abs == 0.0 {
        0.0
    } else {
        max_abs / scale.max(f64::MIN_POSITIVE)
    };
    (rel, at)
}

/// Lane length for scan case `case`; the first cases pin the extremes.
pub fn scan_case_len(seed: u64, case: usize, max_len: usize) -> usize {
    const PINNED: [usize; 6] = [1, 2, 3, 4096, 4097, 2047];
    match PINNED.get(case) {
        Some(&l) if l <= max_len => l,
        _ => ChaCha8Rng::seed_from_u64(seed ^ 0x5eed).random_range(1..=max_len),
    }
}

/// Exact comparison on rationals for every length up to `max_len`.
pub fn rational_scan_mismatches(
    seed: u64,
    max_len: usize,
    lanes_per_len: usize,
) -> Vec<(usize, usize)> {
    let mut bad = Vec::new();
    for len in 1..=max_len {
        for lane in 0..lanes_per_len {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((len * 1000 + lane) as u64));
            let mut draw = || {
                BigRational::new(
                    BigInt::from(rng.random_range(-9i64..=9)),
                    BigInt::from(rng.random_range(1i64..=9)),
                )
            };
            let a: Vec<BigRational> = (0..len).map(|_| draw()).collect();
            let b: Vec<BigRational> = (0..len).map(|_| draw()).collect();
            if parallel_scan(&a, &b) != serial_scan(&a, &b) {
                bad.push((len, lane));
            }
        }
    }
    bad
}

fn scan_suite(config: &VerifyConfig) -> Result<Vec<CheckResult>> {
    if config.scan_max_len == 0 {
        return Err(Error::InvalidLength("scan_max_len must be positive".into()));
    }
    let mut out = Vec::new();
    for (precision, tol) in [
        (Precision::F32, config.tolerances.scan_f32),
        (Precision::F64, config.tolerances.scan_f64),
    ] {
        let outcomes: Vec<Outcome> = (0..config.scan_lanes)
            .into_par_iter()
            .map(|case| {
                let seed = case_seed(config.seed, Suite::ScanOracle, case);
                let len = scan_case_len(seed, case, config.scan_max_len);
                let (a, b) = random_lane(seed, len);
                let (rel, at) = match precision {
                    Precision::F32 => scan_deviation::<f32>(&a, &b),
                    Precision::F64 => scan_deviation::<f64>(&a, &b),
                };
                Outcome {
                    value: rel,
                    passed: rel <= tol,
                    detail: format!("lane length {len}, worst position {at:?}"),
                    location: None,
                }
            })
            .collect();
        out.push(summarize(
            Suite::ScanOracle,
            "parallel_scan",
            Some(precision),
            tol,
            config.seed,
            outcomes,
        ));
    }
    let bad = rational_scan_mismatches(config.seed, 16, 4);
    out.push(CheckResult {
        suite: Suite::ScanOracle,
        check: "parallel_scan_rational".into(),
        precision: None,
        cases: 16 * 4,
        tolerance: 0.0,
        worst: bad.len() as f64,
        passed: bad.is_empty(),
        counterexample: bad.first().map(|&(len, lane)| Counterexample {
            case: (len - 1) * 4 + lane,
            case_seed: config.seed,
            detail: format!("lane {lane} of length {len} differs from the serial scan"),
            location: None,
        }),
    });
    Ok(out)
}

/// First slot of a sequence other than `victim` where two runs disagree in
/// any bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leak {
    pub tensor: String,
    pub location: Location,
    pub mismatches: usize,
}

fn compare_other_sequences<T: Real>(
    tensor: &str,
    before: &Array3<T>,
    after: &Array3<T>,
    plan: &PackPlan,
    victim: usize,
) -> Option<Leak> {
    let mut first = None;
    let mut mismatches = 0;
    let width = before.dim().2;
    for (id, (p, off)) in plan.placements().into_iter().enumerate() {
        if id == victim {
            continue;
        }
        for t in 0..plan.lengths[id] {
            for k in 0..width {
                if before[[p, off + t, k]].bits() != after[[p, off + t, k]].bits() {
                    mismatches += 1;
                    first.get_or_insert(Location {
                        sequence: id,
                        position: t,
                        channel: k,
                    });
                }
            }
        }
    }
    first.map(|location| Leak {
        tensor: tensor.to_string(),
        location,
        mismatches,
    })
}

/// One pack holding every sequence of a random trial, with some padding.
fn single_pack_plan(rng: &mut ChaCha8Rng) -> Result<PackPlan> {
    let count = rng.random_range(2..=5);
    let lengths: Vec<usize> = (0..count).map(|_| rng.random_range(1..=16)).collect();
    let capacity = lengths.iter().sum::<usize>() + rng.random_range(0..=3);
    PackPlan::new(capacity, vec![(0..count).collect()], lengths)
}

fn rows<T: Real>(
    rng: &mut ChaCha8Rng,
    lengths: &[usize],
    width: usize,
    lo: f64,
    hi: f64,
) -> Vec<Array2<T>> {
    lengths
        .iter()
        .map(|&l| Array2::from_shape_fn((l, width), |_| lit(rng.random_range(lo..hi))))
        .collect()
}

/// Runs the packed SSM forward and backward, replaces one sequence's inputs
/// and reruns; returns the first bit that changed elsewhere.
pub fn ssm_isolation_trial<T: Real>(seed: u64) -> Result<Option<Leak>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = single_pack_plan(&mut rng)?;
    let channels = rng.random_range(1..=4);
    let states = rng.random_range(1..=4);
    let a = Array2::from_shape_fn((channels, states), |_| {
        lit::<T>(-rng.random_range(0.1..2.0))
    });
    let d = Array1::from_shape_fn(channels, |_| lit::<T>(rng.random_range(-1.0..1.0)));
    let draw = |rng: &mut ChaCha8Rng, len: usize| SsmSequence {
        delta: Array2::from_shape_fn((len, channels), |_| lit(rng.random_range(0.01..1.0))),
        b: Array2::from_shape_fn((len, states), |_| lit(rng.random_range(-1.0..1.0))),
        c: Array2::from_shape_fn((len, states), |_| lit(rng.random_range(-1.0..1.0))),
        x: Array2::from_shape_fn((len, channels), |_| lit(rng.random_range(-1.0..1.0))),
    };
    let mut seqs: Vec<SsmSequence<T>> = plan.lengths.iter().map(|&l| draw(&mut rng, l)).collect();
    let dy = pack_rows(
        &rows::<T>(&mut rng, &plan.lengths, channels, -1.0, 1.0),
        &plan,
    )?;
    let pos = plan.position_indices();

    let run = |seqs: &[SsmSequence<T>]| -> Result<_> {
        let params = SsmParams::packed(a.clone(), d.clone(), seqs, &plan)?;
        let y = ssm_forward_packed(&params, &pos)?;
        let g = ssm_backward_packed(&params, &pos, &dy)?;
        Ok((y, g))
    };
    let (y0, g0) = run(&seqs)?;
    let victim = rng.random_range(0..plan.num_sequences());
    seqs[victim] = draw(&mut rng, plan.lengths[victim]);
    let (y1, g1) = run(&seqs)?;

    Ok(compare_other_sequences("y", &y0, &y1, &plan, victim)
        .or_else(|| compare_other_sequences("dx", &g0.dx, &g1.dx, &plan, victim))
        .or_else(|| compare_other_sequences("ddelta", &g0.ddelta, &g1.ddelta, &plan, victim))
        .or_else(|| compare_other_sequences("db", &g0.db, &g1.db, &plan, victim))
        .or_else(|| compare_other_sequences("dc", &g0.dc, &g1.dc, &plan, victim)))
}

/// Same as [`ssm_isolation_trial`] for the convolution; `masked == false`
/// swaps in the forward pass that ignores position indices.
pub fn conv_isolation_trial<T: Real>(seed: u64, masked: bool) -> Result<Option<Leak>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = single_pack_plan(&mut rng)?;
    let channels = rng.random_range(1..=4);
    let width = rng.random_range(2..=4);
    let params: ConvParams<T> = random_conv(&mut rng, channels, width);
    let mut xs = rows::<T>(&mut rng, &plan.lengths, channels, -1.0, 1.0);
    let dy = pack_rows(
        &rows::<T>(&mut rng, &plan.lengths, channels, -1.0, 1.0),
        &plan,
    )?;
    let pos = plan.position_indices();
    let rev = reverse_from_positions(&pos);

    let run = |xs: &[Array2<T>]| -> Result<_> {
        let x = pack_rows(xs, &plan)?;
        let y = if masked {
            conv1d_pack_forward(&x, &params, &pos)?
        } else {
            conv1d_forward_unmasked(&x, &params)?
        };
        let g = conv1d_pack_backward(&x, &params, &pos, &rev, &dy)?;
        Ok((y, g.dx))
    };
    let (y0, dx0) = run(&xs)?;
    let victim = rng.random_range(0..plan.num_sequences());
    xs[victim] = rows::<T>(
        &mut rng,
        &plan.lengths[victim..=victim],
        channels,
        -1.0,
        1.0,
    )
    .remove(0);
    let (y1, dx1) = run(&xs)?;

    Ok(compare_other_sequences("y", &y0, &y1, &plan, victim)
        .or_else(|| compare_other_sequences("dx", &dx0, &dx1, &plan, victim)))
}

fn leak_outcome(leak: Option<Leak>) -> Outcome {
    match leak {
        None => Outcome {
            value: 0.0,
            passed: true,
            detail: String::new(),
            location: None,
        },
        Some(l) => Outcome {
            value: l.mismatches as f64,
            passed: false,
            detail: format!(
                "{} differs in {} entries outside the mutated sequence",
                l.tensor, l.mismatches
            ),
            location: Some(l.location),
        },
    }
}

fn isolation_suite(config: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let masked = config.fault != Some(Fault::UnmaskedConv);
    let n = config.isolation_trials;
    let mut out = Vec::new();
    for precision in [Precision::F32, Precision::F64] {
        let conv: Vec<Outcome> = (0..n)
            .into_par_iter()
            .map(|case| {
                let seed = case_seed(config.seed, Suite::Isolation, case);
                let leak = match precision {
                    Precision::F32 => conv_isolation_trial::<f32>(seed, masked)?,
                    Precision::F64 => conv_isolation_trial::<f64>(seed, masked)?,
                };
                Ok(leak_outcome(leak))
            })
            .collect::<Result<_>>()?;
        out.push(summarize(
            Suite::Isolation,
            "conv1d_pack",
            Some(precision),
            0.0,
            config.seed,
            conv,
        ));
        let ssm: Vec<Outcome> = (0..n)
            .into_par_iter()
            .map(|case| {
                let seed = case_seed(config.seed, Suite::Isolation, n + case);
                let leak = match precision {
                    Precision::F32 => ssm_isolation_trial::<f32>(seed)?,
                    Precision::F64 => ssm_isolation_trial::<f64>(seed)?,
                };
                Ok(leak_outcome(leak))
            })
            .collect::<Result<_>>()?;
        out.push(summarize(
            Suite::Isolation,
            "ssm_pack",
            Some(precision),
            0.0,
            config.seed,
            ssm,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(suite: Suite) -> VerifyConfig {
        VerifyConfig {
            suite,
            seed: 11,
            pui_batches: 20,
            gradient_instances: 5,
            scan_lanes: 30,
            scan_max_len: 600,
            isolation_trials: 20,
            ..VerifyConfig::default()
        }
    }

    #[test]
    fn all_suites_pass_on_a_small_run() {
        let report = run_verify(&small(Suite::All)).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{c:?}");
        }
        assert!(report.passed);
        let suites: std::collections::BTreeSet<_> =
            report.checks.iter().map(|c| c.suite.name()).collect();
        assert_eq!(suites.len(), 4);
    }

    #[test]
    fn unmasked_conv_fault_is_caught_with_a_location() {
        let cfg = VerifyConfig {
            fault: Some(Fault::UnmaskedConv),
            ..small(Suite::Isolation)
        };
        let report = run_verify(&cfg).unwrap();
        assert!(!report.passed);
        let conv = report
            .checks
            .iter()
            .find(|c| c.check == "conv1d_pack" && !c.passed)
            .unwrap();
        let cx = conv.counterexample.as_ref().unwrap();
        assert!(cx.location.is_some());
        assert!(report
            .checks
            .iter()
            .filter(|c| c.check == "ssm_pack")
            .all(|c| c.passed));

        let pui = run_verify(&VerifyConfig {
            fault: Some(Fault::UnmaskedConv),
            ..small(Suite::Pui)
        })
        .unwrap();
        let bad = pui
            .checks
            .iter()
            .find(|c| c.check == "conv1d_unmasked")
            .unwrap();
        assert!(!bad.passed && bad.counterexample.as_ref().unwrap().location.is_some());
    }

    #[test]
    fn same_seed_same_report() {
        let cfg = small(Suite::All);
        let a = serde_json::to_string(&run_verify(&cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&run_verify(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tolerance_overrides() {
        let mut t = Tolerances::default();
        t.apply_override("ssm-f32=0.5").unwrap();
        assert_eq!(t.ssm_f32, 0.5);
        assert!(t.apply_override("bogus=1").is_err());
        assert!(t.apply_override("gradient").is_err());
        assert!(t.apply_override("gradient=-1").is_err());
    }

    #[test]
    fn zero_tolerance_fails_inexact_checks() {
        let mut cfg = small(Suite::ScanOracle);
        cfg.tolerances.scan_f32 = 0.0;
        cfg.scan_lanes = 10;
        let report = run_verify(&cfg).unwrap();
        let f32_check = report
            .checks
            .iter()
            .find(|c| c.precision == Some(Precision::F32))
            .unwrap();
        assert!(!f32_check.passed);
        assert!(f32_check.counterexample.is_some());
    }

    #[test]
    fn suite_names_parse() {
        for s in ["pui", "gradients", "scan-oracle", "isolation", "all"] {
            assert_eq!(s.parse::<Suite>().unwrap().name(), s);
        }
        assert!("x".parse::<Suite>().is_err());
        assert_eq!(
            "unmasked-conv".parse::<Fault>().unwrap(),
            Fault::UnmaskedConv
        );
    }
}
