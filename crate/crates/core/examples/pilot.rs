//! Calibration run on the planted task: warm-up, then DPO-REG and plain
//! DPO from the same start, with held-out accuracy and credit metrics.
//!
//! `cargo run --example pilot -- <steps> <seed>...`
//!
//! Environment: `PILOT_LR` (default 5e-5), `PILOT_ALPHA` (default 0.25),
//! `PILOT_CACHE` (directory for warm-up checkpoints), `PILOT_EVAL_AT`
//! (comma-separated steps, default every 50).

use std::path::PathBuf;
use std::time::Instant;

use treg_core::experiment::{annotated_pairs, planted_records, warm_start, PlantedConfig};
use treg_core::losses::LossConfig;
use treg_core::model::{load_checkpoint, save_checkpoint, Checkpoint, Role};
use treg_core::trainer::{TrainConfig, Trainer};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: usize = args.first().map(|s| s.parse()).transpose()?.unwrap_or(500);
    let seeds: Vec<u64> = if args.len() > 1 {
        args[1..].iter().map(|s| s.parse()).collect::<Result<_, _>>()?
    } else {
        vec![0]
    };
    let lr: f64 = env("PILOT_LR", 5e-5);
    let alpha: f64 = env("PILOT_ALPHA", 0.25);
    let eval_at: Vec<usize> = match std::env::var("PILOT_EVAL_AT") {
        Ok(s) => s.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>()?,
        Err(_) => (1..=steps / 50).map(|k| 50 * k).collect(),
    };
    let cache: Option<PathBuf> = std::env::var("PILOT_CACHE").ok().map(PathBuf::from);
    for seed in seeds {
        let t0 = Instant::now();
        let cfg = PlantedConfig {
            data_seed: seed,
            model: treg_core::model::ModelConfig {
                seed,
                ..Default::default()
            },
            ..PlantedConfig::default()
        };
        let (train_records, eval_records) = planted_records(&cfg);
        let cached = cache.as_ref().map(|d| d.join(format!("warm-{seed}.ckpt")));
        let init = match cached.as_ref().filter(|p| p.exists()) {
            Some(p) => load_checkpoint(p)?.model,
            None => {
                let (m, losses) = warm_start(&cfg, &train_records)?;
                println!("seed {seed}: sft loss {:.3} -> {:.3}", losses[0], losses[losses.len() - 1]);
                if let Some(p) = &cached {
                    save_checkpoint(p, &Checkpoint::new(m.clone()))?;
                }
                m
            }
        };
        let evaluator = init.freeze_copy(Role::Evaluator);
        let reference = init.freeze_copy(Role::Reference);
        let ctx = cfg.model.context_len;
        let train = annotated_pairs(&train_records, Some(&evaluator), ctx)?;
        let eval = annotated_pairs(&eval_records, None, ctx)?;
        println!("seed {seed}: setup {:.1}s", t0.elapsed().as_secs_f64());
        let reg = LossConfig {
            alpha,
            ..LossConfig::default()
        };
        for (name, loss) in [("dpo_reg", reg), ("dpo", LossConfig::dpo(0.1))] {
            let t1 = Instant::now();
            let tc = TrainConfig {
                max_steps: Some(steps),
                learning_rate: lr,
                seed,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(tc, loss, init.clone(), reference.clone(), &train)?.with_eval_set(&eval)?;
            for &at in &eval_at {
                t.run_until(at)?;
                let m = t.evaluate()?.expect("eval set");
                let c = m.credit.as_ref().expect("planted");
                println!(
                    "  {name} step {:4}: acc {:.4} margin {:.5} loss {:.5} sign {:.4} loc {:.4} rho {:.4}",
                    t.state().step, m.accuracy, m.mean_margin, m.loss, c.sign_accuracy, c.localization, c.rank_correlation
                );
            }
            t.run()?;
            println!("  {name}: {:.1}s", t1.elapsed().as_secs_f64());
        }
    }
    Ok(())
}
