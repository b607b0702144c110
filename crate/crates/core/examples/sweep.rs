//! Trains one config over several seeds and prints held-out mIoU.
//!
//! `cargo run --release --example sweep -- <config.toml> <seeds> [iterations]`
//! with seeds comma-separated, e.g. `0,1,2`.

use std::process::ExitCode;
use std::time::Instant;

use panoda::config::RunConfig;
use panoda::eval::evaluate_model;
use panoda::scene::synthesize;
use panoda::trainer::{run_training, TrainState};

fn sweep(args: &[String]) -> panoda::Result<()> {
    let base = RunConfig::load(args[0].as_ref())?;
    let seeds = args[1]
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|e| panoda::Error::invalid(format!("seed {s:?}: {e}"))))
        .collect::<panoda::Result<Vec<_>>>()?;
    let iters = args
        .get(2)
        .map(|s| s.parse::<u64>().map_err(|e| panoda::Error::invalid(format!("iterations {s:?}: {e}"))))
        .transpose()?;

    let sy = &base.synth;
    let d = &base.data;
    let src = synthesize(sy.seed, &d.source_split, sy.source_count, sy.complexity, &sy.source_camera, true)?;
    let tgt = synthesize(sy.seed, &d.target_split, sy.target_count, sy.complexity, &sy.target_camera, false)?;
    let sval = synthesize(sy.seed, &d.source_val_split, sy.val_count, sy.complexity, &sy.source_camera, true)?;
    let tval = synthesize(sy.seed, &d.target_val_split, sy.val_count, sy.complexity, &sy.target_camera, true)?;

    for seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        if let Some(n) = iters {
            cfg.train.max_iter = n;
        }
        let start = Instant::now();
        let state = run_training(&cfg, TrainState::init(&cfg)?, &src, &tgt, None, |_| {})?;
        let t = evaluate_model(&state.generator, &tval, cfg.eval.size, "sweep", &d.target_val_split)?;
        let s = evaluate_model(&state.generator, &sval, cfg.train.source_size, "sweep", &d.source_val_split)?;
        println!(
            "seed {seed}: target {:.4} source {:.4} ({:.1}s)",
            t.miou,
            s.miou,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 2 {
        eprintln!("usage: sweep <config.toml> <seed,seed,...> [iterations]");
        return ExitCode::from(64);
    }
    match sweep(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
