//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero when the set of failing criteria differs from [`EXPECTED_FAILURES`].

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use sbq::bench::{run_error_sweep, SweepSpec};
use sbq::bitpack::packed_len;
use sbq::quant::{channel_params, round_clip, ChannelParams};
use sbq::ste::{fake_quant_vjp, grad_check, relative_error, FakeQuantTape};
use sbq::tensor::{randn_with, write_t2d};
use sbq::train::{median, train_toy, Method, TrainConfig};
use sbq::{
    fake_quant, pack_codes, quantize_subch_clip, unpack_codes, ClipGrid, CodesTensor, QuantConfig,
    QuantMode, Rng, Tensor2D,
};

/// Clipping cannot lower the asymmetric mean absolute error of a group with
/// four or fewer entries (see the `clipping_cannot_help_groups_of_four_or_fewer`
/// unit test), so the 8-sub-channel clip gain at N=32 is an exact tie.
const EXPECTED_FAILURES: &[u32] = &[1];

struct Outcome {
    id: u32,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: u32, title: &'static str, pass: bool, detail: impl Into<String>) -> Outcome {
    let o = Outcome {
        id,
        title,
        pass,
        detail: detail.into(),
    };
    println!(
        "{} criterion {:>2}: {} ({})",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.title,
        o.detail
    );
    o
}

fn random_shape(rng: &mut Rng) -> (usize, usize, usize) {
    let rows = 1 + rng.below(6) as usize;
    let subchannels = [1usize, 2, 4, 8][rng.below(4) as usize];
    let cols = subchannels * (1 + rng.below(16) as usize);
    (rows, cols, subchannels)
}

fn random_bits(rng: &mut Rng) -> u8 {
    [1u8, 2, 4, 8][rng.below(4) as usize]
}

fn sweep_ordering() -> Outcome {
    let t0 = Instant::now();
    let spec = SweepSpec::default();
    let curve = run_error_sweep(&spec).expect("default sweep runs");
    let elapsed = t0.elapsed();
    let summary = curve.summary();
    let mean = |m: &str, n: usize| summary[&(m.to_string(), n)].mean;

    let mut failures = Vec::new();
    let mut ties_only = true;
    for &n in &spec.widths {
        if !(mean("asym-1sub", n) > mean("asym-4sub", n)
            && mean("asym-4sub", n) > mean("asym-8sub", n))
        {
            failures.push(format!("ordering at N={n}"));
            ties_only = false;
        }
        for s in [4usize, 8] {
            let plain = format!("asym-{s}sub");
            let clipped = format!("asym-{s}sub-clip");
            let gap = curve.paired_gap(&plain, &clipped, n).expect("paired cells");
            // differences below floating-point resolution are not reductions
            let resolved = gap.mean > 1e-9 * mean(&plain, n);
            if !(resolved && gap.mean >= 2.0 * gap.se) {
                failures.push(format!(
                    "{clipped} at N={n}: gap {:.2e}, se {:.2e}",
                    gap.mean, gap.se
                ));
                ties_only &= n / s <= 4;
            }
        }
    }
    let fast = elapsed < Duration::from_secs(60);
    let detail = format!(
        "{} seeds, {:.2?}{}{}",
        spec.seeds,
        elapsed,
        if failures.is_empty() {
            String::new()
        } else {
            format!("; failing: {}", failures.join("; "))
        },
        if !failures.is_empty() && ties_only {
            "; all failures are groups of <= 4 entries"
        } else {
            ""
        },
    );
    assert!(
        ties_only && fast,
        "criterion 1 failed beyond the known tie: {detail}"
    );
    outcome(
        1,
        "error ordering across widths",
        failures.is_empty() && fast,
        detail,
    )
}

fn clip_dominance() -> Outcome {
    let mut rng = Rng::new(2);
    let mut worst = f64::NEG_INFINITY;
    let mut ok = true;
    for i in 0..1000 {
        let (rows, cols, s) = random_shape(&mut rng);
        let w = randn_with(rows, cols, &mut rng).unwrap();
        let bits = random_bits(&mut rng);
        let grid = if i % 2 == 0 {
            ClipGrid::COARSE
        } else {
            ClipGrid::FINE
        };
        let searched =
            quantize_subch_clip(&w, &QuantConfig::subchannel_clip(bits, s, grid)).unwrap();
        let one = quantize_subch_clip(
            &w,
            &QuantConfig::subchannel_clip(bits, s, ClipGrid::unclipped()),
        )
        .unwrap();
        worst = worst.max(searched.mae - one.mae);
        ok &= searched.mae <= one.mae;
    }
    outcome(
        2,
        "clip search never loses to clip 1.0",
        ok,
        format!("1000 tensors, max(searched - unclipped) = {worst:.3e}"),
    )
}

fn reduction() -> Outcome {
    let mut rng = Rng::new(3);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (rows, cols, _) = random_shape(&mut rng);
        let w = randn_with(rows, cols, &mut rng).unwrap();
        let cfg = QuantConfig::asymmetric(random_bits(&mut rng));
        let a = quantize_subch_clip(&w, &cfg).unwrap();
        let b = fake_quant(&w, &cfg).unwrap();
        let same = a
            .deq
            .data()
            .iter()
            .zip(b.deq.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
            && a.codes == b.codes
            && a.params == b.params;
        mismatches += usize::from(!same);
    }
    outcome(
        3,
        "one sub-channel with grid {1.0} equals fake_quant",
        mismatches == 0,
        format!("1000 tensors, {mismatches} mismatches"),
    )
}

fn reconstruction_bound() -> Outcome {
    let mut rng = Rng::new(4);
    let mut violations = 0;
    let mut combos = 0;
    for mode in [QuantMode::Asymmetric, QuantMode::Symmetric] {
        for bits in [1u8, 2, 4, 8] {
            let cfg = QuantConfig {
                bits,
                mode,
                ..QuantConfig::default()
            };
            if mode == QuantMode::Symmetric && bits == 1 {
                // zero magnitude levels: the configuration is rejected
                assert!(cfg.validate().is_err());
                continue;
            }
            combos += 1;
            for _ in 0..1000 {
                let (rows, cols, _) = random_shape(&mut rng);
                let w = randn_with(rows, cols, &mut rng).unwrap();
                let f = fake_quant(&w, &cfg).unwrap();
                for r in 0..rows {
                    let scale = f.params.channel(r).scale;
                    for c in 0..cols {
                        violations += usize::from(
                            (w.get(r, c) - f.deq.get(r, c)).abs() > scale / 2.0 + 1e-12,
                        );
                    }
                }
            }
        }
    }
    outcome(
        4,
        "|w - deq| <= scale/2 at clip 1",
        violations == 0,
        format!("{combos} mode/bit combinations x 1000 tensors, {violations} violations; symmetric 1-bit rejected as a config error"),
    )
}

fn bucket_utilization() -> Outcome {
    let witness = Tensor2D::from_rows(&[[-1.0, -0.3, 0.3, 1.0], [0.0, 1.0, 2.0, 3.0]]).unwrap();
    let sym = fake_quant(&witness, &QuantConfig::symmetric(2))
        .unwrap()
        .codes;
    let asym = fake_quant(&witness, &QuantConfig::asymmetric(2))
        .unwrap()
        .codes;
    let per_row = |q: &CodesTensor, r: usize| {
        let row = &q.codes()[r * q.cols()..(r + 1) * q.cols()];
        row.iter().collect::<BTreeSet<_>>().len()
    };
    let witnesses_ok = (0..2).all(|r| per_row(&sym, r) <= 3 && per_row(&asym, r) == 4);

    let mut rng = Rng::new(5);
    let mut sym_max = 0;
    for _ in 0..1000 {
        let w = randn_with(4, 64, &mut rng).unwrap();
        sym_max = sym_max.max(
            fake_quant(&w, &QuantConfig::symmetric(2))
                .unwrap()
                .codes
                .distinct()
                .len(),
        );
    }
    outcome(
        5,
        "2-bit symmetric uses at most 3 codes, asymmetric uses 4",
        witnesses_ok && sym_max <= 3,
        format!("witness rows sym {:?} asym {:?}; max symmetric codes over 1000 random tensors = {sym_max}", sym.distinct(), asym.distinct()),
    )
}

fn pack_round_trip() -> Outcome {
    let mut rng = Rng::new(6);
    let mut failures = 0;
    let mut two_bit_len_ok = true;
    for _ in 0..10_000 {
        let bits = random_bits(&mut rng);
        let mode = if bits >= 2 && rng.below(2) == 1 {
            QuantMode::Symmetric
        } else {
            QuantMode::Asymmetric
        };
        let n = 1 + rng.below(200) as usize;
        let (lo, hi) = (mode.min_code(bits), mode.max_code(bits));
        let codes: Vec<i32> = (0..n)
            .map(|_| lo + rng.below((hi - lo + 1) as u64) as i32)
            .collect();
        let q = CodesTensor::new(1, n, mode, bits, codes).unwrap();
        let blob = pack_codes(&q).unwrap();
        if bits == 2 {
            two_bit_len_ok &=
                blob.bytes.len() == n.div_ceil(4) && packed_len(n, 2) == n.div_ceil(4);
        }
        failures += usize::from(unpack_codes(&blob, mode).unwrap() != q);
    }
    outcome(
        6,
        "pack/unpack identity, 2-bit payload = ceil(n/4) bytes",
        failures == 0 && two_bit_len_ok,
        format!("10000 code tensors, {failures} mismatches"),
    )
}

/// Frozen-code surrogate built directly from the quantizer formulas. The
/// recorded forward pass fixes the clip factors, the integer codes, the
/// rounding offsets, the clamp decisions and which entries set the range.
struct Surrogate {
    mode: QuantMode,
    bits: u8,
    stop_gradient_scale: bool,
    group: usize,
    base: Vec<ChannelParams>,
    extrema: Vec<(usize, usize)>,
    codes: Vec<f64>,
    offsets: Vec<Option<f64>>,
}

impl Surrogate {
    fn params(&self, g: usize, row: &[f64]) -> ChannelParams {
        let base = self.base[g];
        if self.stop_gradient_scale {
            return base;
        }
        let (imax, imin) = self.extrema[g];
        match self.mode {
            QuantMode::Asymmetric if row[imax] == row[imin] => ChannelParams {
                min_val: row[imin],
                ..base
            },
            QuantMode::Symmetric if row[imax] == 0.0 => base,
            _ => {
                let pick = if self.mode == QuantMode::Asymmetric {
                    [row[imax], row[imin]]
                } else {
                    [row[imax], -row[imax]]
                };
                channel_params(self.mode, &pick, self.bits, base.clip)
            }
        }
    }

    fn record(w: &Tensor2D, cfg: &QuantConfig) -> Self {
        let (_, tape) = FakeQuantTape::forward(w, cfg).unwrap();
        let group = w.cols() / cfg.subchannels;
        let (lo, hi) = (cfg.mode.min_code(cfg.bits), cfg.mode.max_code(cfg.bits));
        let mut s = Surrogate {
            mode: cfg.mode,
            bits: cfg.bits,
            stop_gradient_scale: cfg.stop_gradient_scale,
            group,
            base: Vec::new(),
            extrema: Vec::new(),
            codes: Vec::new(),
            offsets: Vec::new(),
        };
        for (row, clip) in w.data().chunks_exact(group).zip(tape.clips()) {
            let p = channel_params(cfg.mode, row, cfg.bits, clip);
            let first = |better: &dyn Fn(f64, f64) -> bool| {
                (0..row.len()).fold(0, |b, i| if better(row[i], row[b]) { i } else { b })
            };
            let extrema = match cfg.mode {
                QuantMode::Asymmetric => (first(&|a, b| a > b), first(&|a, b| a < b)),
                QuantMode::Symmetric => {
                    let i = first(&|a, b| a.abs() > b.abs());
                    (i, i)
                }
            };
            for &v in row {
                let u = (v - p.min_val) / p.scale;
                let q = round_clip(u, cfg.mode, cfg.bits);
                let k = u.round_ties_even();
                let inside = k >= lo as f64 && k <= hi as f64;
                s.codes.push(q as f64);
                s.offsets.push(inside.then_some(q as f64 - u));
            }
            s.base.push(p);
            s.extrema.push(extrema);
        }
        s
    }

    fn eval(&self, w: &Tensor2D) -> Vec<f64> {
        let mut out = Vec::with_capacity(w.len());
        for (g, row) in w.data().chunks_exact(self.group).enumerate() {
            let p = self.params(g, row);
            for (j, &v) in row.iter().enumerate() {
                let i = g * self.group + j;
                let q = match self.offsets[i] {
                    Some(off) => (v - p.min_val) / p.scale + off,
                    None => self.codes[i],
                };
                out.push(q * p.scale + p.min_val);
            }
        }
        out
    }
}

fn grad_checks() -> Outcome {
    let mut rng = Rng::new(7);
    let mut details = Vec::new();
    let mut ok = true;
    for stop in [true, false] {
        let cfg = QuantConfig {
            stop_gradient_scale: stop,
            ..QuantConfig::subchannel_clip(2, 2, ClipGrid::COARSE)
        };
        let mut worst = 0.0f64;
        let mut probes = 0;
        while probes < 100 {
            let rows = 1 + rng.below(3) as usize;
            let cols = cfg.subchannels * [4usize, 8][rng.below(2) as usize];
            let w = randn_with(rows, cols, &mut rng).unwrap();
            let s = Surrogate::record(&w, &cfg);
            let near_half = s
                .offsets
                .iter()
                .flatten()
                .any(|o| (o.abs() - 0.5).abs() < 1e-3);
            if near_half {
                continue;
            }
            probes += 1;
            let proj = randn_with(rows, cols, &mut rng).unwrap();
            let (deq, analytic) = fake_quant_vjp(&w, &cfg, &proj).unwrap();
            assert!(s
                .eval(&w)
                .iter()
                .zip(deq.data())
                .all(|(a, b)| (a - b).abs() < 1e-12));
            let phi = |x: &Tensor2D| {
                s.eval(x)
                    .iter()
                    .zip(proj.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };
            let h = 1e-4;
            for k in 0..w.len() {
                let mut plus = w.clone();
                plus.data_mut()[k] += h;
                let mut minus = w.clone();
                minus.data_mut()[k] -= h;
                let numeric = (phi(&plus) - phi(&minus)) / (2.0 * h);
                worst = worst.max(relative_error(analytic.data()[k], numeric));
            }
        }
        let lib = grad_check(&cfg, 70 + stop as u64).unwrap();
        ok &= worst <= 1e-5 && lib.max_rel_error <= 1e-5 && lib.degenerate_grad_finite;
        details.push(format!(
            "stop_gradient_scale={stop}: 100 probes, max rel {worst:.2e} (library check {:.2e})",
            lib.max_rel_error
        ));
    }
    outcome(
        7,
        "STE gradients match frozen-code finite differences",
        ok,
        details.join("; "),
    )
}

/// Runs the `size` subcommand in-process and reads its `total_mb` line.
fn size_mb(args: &[&str]) -> f64 {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = sbq::cli::run(["sbq", "size"].iter().chain(args), &mut out, &mut err);
    assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));
    let text = String::from_utf8(out).unwrap();
    let line = text
        .lines()
        .find(|l| l.starts_with("total_mb="))
        .expect("total_mb line");
    line["total_mb=".len()..].parse().unwrap()
}

fn size_reconciliation() -> Outcome {
    let within = |x: f64, target: f64, tol: f64| (x - target).abs() <= tol * target;
    let float = size_mb(&["--float"]);
    let mut ok = within(float, 474.5, 0.01);
    let mut parts = vec![format!("float {float:.1} MB vs 474.5")];
    for (method, subchannels, target) in [
        ("sym", "1", 53.8),
        ("asym", "1", 54.0),
        ("asym-sc", "1", 54.0),
        ("subch-clip", "4", 55.3),
    ] {
        let got = size_mb(&["--method", method, "--subchannels", subchannels]);
        ok &= within(got, target, 0.10);
        parts.push(format!("{method} S={subchannels} {got:.2} MB vs {target}"));
    }
    outcome(
        8,
        "model size against the reference table",
        ok,
        parts.join(", "),
    )
}

fn toy_ordering() -> Outcome {
    let t0 = Instant::now();
    let finals = |method: Method, msqe_weight: f64| -> Vec<sbq::train::TrainRun> {
        (0..10)
            .map(|seed| {
                let cfg = TrainConfig {
                    msqe_weight,
                    ..TrainConfig::new(method, seed)
                };
                train_toy(&cfg).expect("toy training converges")
            })
            .collect()
    };
    let loss = |runs: &[sbq::train::TrainRun]| {
        median(&runs.iter().map(|r| r.final_loss()).collect::<Vec<_>>())
    };
    let msqe = |runs: &[sbq::train::TrainRun]| {
        median(&runs.iter().map(|r| r.final_msqe()).collect::<Vec<_>>())
    };
    let sym = loss(&finals(Method::I2Wsym, 0.0));
    let asym = loss(&finals(Method::I2Wasym, 0.0));
    let asym_sc = loss(&finals(Method::I2WasymSc, 0.0));
    let plain = msqe(&finals(Method::I2WasymScSubchClip, 0.0));
    let regularized = msqe(&finals(Method::I2WasymScSubchClip, 1.0));
    let elapsed = t0.elapsed();
    let ok =
        asym < sym && asym_sc <= asym && regularized <= plain && elapsed < Duration::from_secs(300);
    outcome(
        9,
        "toy training ordering and MSQE effect",
        ok,
        format!(
            "median loss sym {sym:.4} > asym {asym:.4} >= asym-sc {asym_sc:.4}; median MSQE {regularized:.3e} (weight 1) vs {plain:.3e} (weight 0); {elapsed:.1?}"
        ),
    )
}

fn run_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_sbq"))
        .args(args)
        .stdout(std::process::Stdio::null())
        .status()
        .expect("binary starts");
    assert!(status.success(), "sbq {args:?} failed with {status}");
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    write_t2d(&sbq::randn(8, 64, 11).unwrap(), Path::new(&p("w.t2d"))).unwrap();
    // `{}` is replaced by the run tag; the last argument is the output file
    let runs: [&[&str]; 5] = [
        &[
            "quantize",
            "w.t2d",
            "--method",
            "subch-clip",
            "--out",
            "{}.sbq",
        ],
        &["dequantize", "{}.sbq", "--out", "{}.t2d"],
        &["sweep", "--seed", "3", "--out", "{}.csv"],
        &["size", "--subchannels", "4", "--out", "{}.txt"],
        &[
            "train-toy",
            "--method",
            "subch-clip",
            "--steps",
            "200",
            "--seed",
            "5",
            "--out",
            "{}.trace.csv",
        ],
    ];
    let mut differing = Vec::new();
    for args in runs {
        let mut outputs = Vec::new();
        for tag in ["a", "b"] {
            let args: Vec<String> = args
                .iter()
                .map(|a| {
                    if a.contains('.') {
                        p(&a.replace("{}", tag))
                    } else {
                        a.to_string()
                    }
                })
                .collect();
            run_cli(&args.iter().map(String::as_str).collect::<Vec<_>>());
            outputs.push(std::fs::read(args.last().unwrap()).unwrap());
        }
        if outputs[0] != outputs[1] {
            differing.push(args[0]);
        }
    }
    outcome(
        10,
        "CLI outputs are byte-identical across runs",
        differing.is_empty(),
        format!("5 subcommands run twice, differing: {differing:?}"),
    )
}

fn main() {
    let started = Instant::now();
    let outcomes = [
        sweep_ordering(),
        clip_dominance(),
        reduction(),
        reconstruction_bound(),
        bucket_utilization(),
        pack_round_trip(),
        grad_checks(),
        size_reconciliation(),
        toy_ordering(),
        cli_determinism(),
    ];
    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!(
        "{} of {} criteria pass ({:.1?}); expected failures: {:?}",
        outcomes.len() - failed.len(),
        outcomes.len(),
        started.elapsed(),
        EXPECTED_FAILURES
    );
    if failed != EXPECTED_FAILURES {
        for o in outcomes
            .iter()
            .filter(|o| !o.pass && !EXPECTED_FAILURES.contains(&o.id))
        {
            eprintln!("unexpected failure: criterion {} ({})", o.id, o.title);
        }
        for id in EXPECTED_FAILURES.iter().filter(|id| !failed.contains(id)) {
            eprintln!("criterion {id} passed but is listed as an expected failure");
        }
        std::process::exit(1);
    }
}
