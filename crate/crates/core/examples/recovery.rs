//! Fits the default synthetic cohort and reports how well the generating
//! parameters are recovered.
//!
//!     cargo run --release -p dkt-core --example recovery

use dkt_core::stats::{shift_r2, stage_grid, trajectory_mae, DEFAULT_GRID_POINTS};
use dkt_core::synth::{default_spec, generate};

fn main() -> dkt_core::Result<()> {
    let spec = default_spec();
    let (data, truth) = generate(&spec)?;
    let config = spec.model_config()?;
    let started = std::time::Instant::now();
    let (model, diag) = dkt_core::fit(&data, &config)?;
    println!(
        "{} sweeps in {:.1} s, converged {}, objective {:.4}",
        diag.sweeps,
        started.elapsed().as_secs_f64(),
        diag.converged,
        diag.trace.last().unwrap()
    );
    let grid = stage_grid(0.0, 1.0, DEFAULT_GRID_POINTS);
    println!("trajectory MAE {:.4}", trajectory_mae(&spec.theta, &model.theta, &grid)?);
    for (d, disease) in config.diseases.iter().enumerate() {
        let idx: Vec<usize> = (0..data.subjects.len()).filter(|&i| data.subjects[i].disease == d).collect();
        let t: Vec<f64> = idx.iter().map(|&i| truth.beta[i]).collect();
        let e: Vec<f64> = idx.iter().map(|&i| model.beta[i]).collect();
        println!("time-shift R² {disease}: {:.4}", shift_r2(&t, &e)?);
    }
    Ok(())
}
