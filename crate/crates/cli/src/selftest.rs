use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Result};
use fallsafe_core::config::Config;
use fallsafe_core::detector::{Classification, Detector, EmbeddingCache, ScoreFn};
use fallsafe_core::dynamics::check_invariance_sampled;
use fallsafe_core::embedding::embed_concepts;
use fallsafe_core::qp::reference::{active_set_oracle, random_infeasible_qp, random_strictly_convex_qp};
use fallsafe_core::qp::{solve_qp, QpMethod, QpStatus, SolverSettings};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn qp_oracle(seed: u64) -> Check {
    let mut failures = Vec::new();
    for (name, method) in [("admm", QpMethod::Admm), ("active set", QpMethod::ActiveSet)] {
        let settings = SolverSettings { method, ..SolverSettings::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..200 {
            let prob = random_strictly_convex_qp(&mut rng);
            let (x, f) = active_set_oracle(&prob).ok_or(format!("oracle failed on problem {i}"))?;
            let res = solve_qp(&prob, &settings).map_err(|e| e.to_string())?;
            let dx = (&res.x - &x).amax();
            let df = (res.objective - f).abs();
            if res.status != QpStatus::Solved || dx > 1e-5 || df > 1e-7 {
                failures.push(format!("{name} problem {i}: {:?}, dx {dx:.1e}, df {df:.1e}", res.status));
            }
        }
        for i in 0..20 {
            let prob = random_infeasible_qp(&mut rng);
            let res = solve_qp(&prob, &settings).map_err(|e| e.to_string())?;
            if res.status != QpStatus::PrimalInfeasible {
                failures.push(format!("{name} infeasible problem {i}: {:?}", res.status));
            }
        }
    }
    if failures.is_empty() {
        Ok("2 x 200 solved problems match, 2 x 20 infeasible reported".into())
    } else {
        Err(failures.join("; "))
    }
}

fn region_invariance(cfg: &Config, seed: u64) -> Check {
    let mpc = cfg.mpc_config().map_err(|e| e.to_string())?;
    let mut failures = Vec::new();
    for r in &mpc.recovery {
        let rep = check_invariance_sampled(&r.set, &mpc.dynamics, &mpc.input_set, 1000, seed ^ r.id as u64)
            .map_err(|e| format!("region {} ({}): {e}", r.id, r.label))?;
        if rep.feasible != rep.samples {
            failures.push(format!(
                "region {} ({}): {}/{} samples can stay, worst violation {:.2e}",
                r.id, r.label, rep.feasible, rep.samples, rep.worst_violation
            ));
        }
    }
    if failures.is_empty() {
        Ok(format!("{} regions, 1000 samples each", mpc.recovery.len()))
    } else {
        Err(failures.join("; "))
    }
}

/// Calibrates on nominal scene draws and measures the false-positive rate
/// on a fresh holdout from the same generator.
fn calibration_fpr(cfg: &Config, seed: u64) -> Check {
    let det = &cfg.detector;
    let scene = &cfg.scenarios.scene_concepts;
    let alpha = det.alpha;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let size = rng.gen_range(1..=3.min(scene.len()));
        let picks: Vec<&String> = scene.choose_multiple(rng, size).collect();
        embed_concepts(&picks, det.dim, det.seed).map_err(|e| e.to_string())
    };
    let rows = (0..3000).map(|_| draw(&mut rng)).collect::<Result<Vec<_>, _>>()?;
    let cache = EmbeddingCache::from_rows(&rows).map_err(|e| e.to_string())?;
    let detector = Detector::calibrate(cache, ScoreFn::MaxCos, alpha).map_err(|e| e.to_string())?;
    let m = 2000;
    let mut flagged = 0;
    for _ in 0..m {
        let e = draw(&mut rng)?;
        if detector.classify(&e).map_err(|e| e.to_string())?.1 == Classification::Anomaly {
            flagged += 1;
        }
    }
    let fpr = flagged as f64 / m as f64;
    let bound = (1.0 - alpha) + 3.0 * (alpha * (1.0 - alpha) / m as f64).sqrt();
    let msg = format!("FPR {fpr:.4} at alpha {alpha} (bound {bound:.4})");
    if fpr <= bound {
        Ok(msg)
    } else {
        Err(msg)
    }
}

pub fn run(config: Option<&Path>, seed: u64) -> Result<()> {
    let mut failed = Vec::new();
    let mut report = |name: &str, start: Instant, outcome: Check| {
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS {name:<18} {secs:>7.2} s  {msg}"),
            Err(msg) => {
                println!("FAIL {name:<18} {secs:>7.2} s  {msg}");
                failed.push(name.to_string());
            }
        }
    };

    let start = Instant::now();
    let cfg = match config {
        Some(p) => Config::load(p).and_then(|c| c.validate().map(|_| c)),
        None => Ok(Config::shipped()),
    };
    let cfg = match cfg {
        Ok(c) => {
            report("config", start, Ok("parsed and validated".into()));
            Some(c)
        }
        Err(e) => {
            report("config", start, Err(e.to_string()));
            None
        }
    };

    let start = Instant::now();
    report("qp oracle", start, qp_oracle(seed ^ 0x51ab));
    if let Some(cfg) = &cfg {
        let start = Instant::now();
        report("region invariance", start, region_invariance(cfg, seed));
        let start = Instant::now();
        report("calibration fpr", start, calibration_fpr(cfg, seed));
    }

    if !failed.is_empty() {
        bail!("failing checks: {}", failed.join(", "));
    }
    println!("all checks pass");
    Ok(())
}
