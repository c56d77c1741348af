//! Quantization error versus channel width for per-channel, sub-channel
//! and clipped sub-channel quantization of standard-normal weights.
//!
//! Prints mean MAE (and standard error) per method and width, then the
//! paired gaps between neighbouring methods. Gaps below floating-point
//! resolution print as `tie`. Pass a path to also write the per-seed CSV.
//!
//! Run with: `cargo run --release --example error_sweep [-- out.csv]`

use sbq::bench::{run_error_sweep, write_csv, SweepSpec};

fn main() -> sbq::Result<()> {
    let spec = SweepSpec::default();
    let t0 = std::time::Instant::now();
    let curve = run_error_sweep(&spec)?;
    println!(
        "{} tensors of {} channels per width, {} bits, {:.2?}\n",
        spec.seeds,
        spec.channels,
        spec.bits,
        t0.elapsed()
    );

    print!("{:<16}", "method");
    for n in &spec.widths {
        print!("{:>18}", format!("N={n}"));
    }
    println!();
    let summary = curve.summary();
    for m in &spec.methods {
        print!("{:<16}", m.name);
        for &n in &spec.widths {
            let s = summary[&(m.name.clone(), n)];
            print!("{:>18}", format!("{:.4} ±{:.4}", s.mean, s.se));
        }
        println!();
    }

    println!("\npaired gap (worse - better) in standard errors:");
    let pairs = [
        ("asym-1sub", "asym-4sub"),
        ("asym-4sub", "asym-8sub"),
        ("asym-4sub", "asym-4sub-clip"),
        ("asym-8sub", "asym-8sub-clip"),
    ];
    for (worse, better) in pairs {
        print!("{:<30}", format!("{worse} > {better}"));
        for &n in &spec.widths {
            let g = curve
                .paired_gap(worse, better, n)
                .expect("both methods ran");
            if g.mean <= 1e-9 * summary[&(worse.to_string(), n)].mean {
                print!("{:>10}", "tie");
            } else {
                print!("{:>10.1}", g.mean / g.se);
            }
        }
        println!();
    }

    if let Some(path) = std::env::args().nth(1) {
        write_csv(&curve, &path)?;
        println!("\nwrote {path}");
    }
    Ok(())
}
