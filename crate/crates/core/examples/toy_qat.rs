//! Toy quantization-aware training: compares the QAT methods on a small
//! teacher/student regression problem and reports median final losses.
//!
//! Run with: `cargo run --release --example toy_qat [-- <seeds> <steps> <msqe_weight>]`

use rayon::prelude::*;
use sbq::train::{median, train_toy, Method, TrainConfig};

fn main() -> sbq::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let regularized: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1.0);

    println!(
        "{:<20} {:>14} {:>14} {:>14}",
        "method", "median loss", "median task", "median msqe"
    );
    for method in Method::ALL {
        for msqe_weight in [0.0, regularized] {
            if method == Method::Float && msqe_weight > 0.0 {
                continue;
            }
            let runs = (0..seeds)
                .into_par_iter()
                .map(|seed| {
                    train_toy(&TrainConfig {
                        steps,
                        msqe_weight,
                        ..TrainConfig::new(method, seed)
                    })
                })
                .collect::<sbq::Result<Vec<_>>>()?;
            let pick = |f: fn(&sbq::train::TrainRun) -> f64| {
                median(&runs.iter().map(f).collect::<Vec<_>>())
            };
            println!(
                "{:<20} {:>14.6e} {:>14.6e} {:>14.6e}  (msqe_weight={msqe_weight})",
                method.to_string(),
                pick(|r| r.final_loss()),
                pick(|r| r.final_task_loss()),
                pick(|r| r.final_msqe()),
            );
        }
    }
    Ok(())
}
