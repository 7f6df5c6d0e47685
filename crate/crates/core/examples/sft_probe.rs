//! Warm-up length probe: trains the planted-task warm-up for each given
//! step count and reports the credit metrics of the resulting contrastive
//! rewards on held-out records.
//!
//! `cargo run --example sft_probe -- <steps>...` (env `PROBE_LR`, `PROBE_SEED`)

use std::time::Instant;

use treg_core::diagnostics::score_credit;
use treg_core::experiment::{annotated_pairs, planted_records, warm_start, PlantedConfig};
use treg_core::model::Role;
use treg_core::trainer::SftConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let lr: f64 = std::env::var("PROBE_LR").ok().and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let seed: u64 = std::env::var("PROBE_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    for steps in std::env::args().skip(1) {
        let steps: usize = steps.parse()?;
        let cfg = PlantedConfig {
            data_seed: seed,
            sft: SftConfig {
                steps,
                learning_rate: lr,
                warmup_steps: steps / 20,
                ..SftConfig::default()
            },
            ..PlantedConfig::default()
        };
        let t = Instant::now();
        let (train, eval) = planted_records(&cfg);
        let (model, losses) = warm_start(&cfg, &train)?;
        let tail = &losses[losses.len().saturating_sub(50)..];
        let evaluator = model.freeze_copy(Role::Evaluator);
        let pairs = annotated_pairs(&eval, Some(&evaluator), cfg.model.context_len)?;
        let items: Vec<(Vec<f64>, std::ops::Range<usize>)> = pairs
            .iter()
            .map(|p| (p.rewards().unwrap().1.values.clone(), p.planted_span.clone().unwrap()))
            .collect();
        let m = score_credit(items.iter().map(|(r, s)| (r.as_slice(), s.clone()))).unwrap();
        let span_mean: f64 = items
            .iter()
            .map(|(r, s)| r[s.clone()].iter().sum::<f64>() / s.len() as f64)
            .sum::<f64>()
            / items.len() as f64;
        println!(
            "steps {steps} lr {lr}: sft tail loss {:.4}, sign {:.3} loc {:.3} rho {:.3} span mean {:.4} ({:.0}s)",
            tail.iter().sum::<f64>() / tail.len() as f64,
            m.sign_accuracy,
            m.localization,
            m.rank_correlation,
            span_mean,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
