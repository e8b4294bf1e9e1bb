use std::time::Instant;

use ipl_core::analysis::{gate_similarity, GateRecord};
use ipl_core::model::ModelConfig;
use ipl_core::tasks::{gen_synthetic_cls, Dataset, Pattern, TaskConfig, Verbalizer};
use ipl_core::train::{OptimConfig, Trainer};

fn run(model: &ModelConfig, optim: OptimConfig, data: &Dataset) -> ipl_core::Result<()> {
    let t0 = Instant::now();
    let label = format!(
        "batch={} lr={} seed={}",
        optim.batch_size, optim.learning_rate, optim.seed
    );
    let mut trainer = Trainer::new(
        model.clone(),
        optim,
        Pattern::default_cls(),
        Some(Verbalizer::default_cls(model.vocab_size)?),
    )?;
    let mut last_loss = f64::NAN;
    let report = trainer.fit(&data.train, &data.dev, |r| last_loss = r.train_loss)?;
    let eval = trainer.evaluate(&data.dev)?;
    let gates = eval.gates.expect("gates");
    let flat: Vec<f64> = gates.iter().flatten().copied().collect();
    let mean = flat.iter().sum::<f64>() / flat.len() as f64;
    let var = flat.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / flat.len() as f64;
    let (lo, hi) = flat
        .iter()
        .fold((1.0f64, 0.0f64), |(l, h), &g| (l.min(g), h.max(g)));
    let records: Vec<GateRecord> = data
        .dev
        .iter()
        .zip(gates.into_iter().zip(eval.correct.iter()))
        .enumerate()
        .map(|(id, (inst, (g, &c)))| GateRecord {
            id,
            instance_type: inst.instance_type,
            gates: g,
            correct: c,
        })
        .collect();
    let sim = gate_similarity(&records)?;
    println!(
        "{label}: dev={:.4} best_ep={} last_loss={last_loss:.5} gates[{lo:.4},{hi:.4}] mean={mean:.4} sd={:.5} within={:.6} between={:.6} gap={:.6} ({:.0}s)",
        report.best_dev,
        report.best_epoch,
        var.sqrt(),
        sim.within,
        sim.between,
        sim.gap,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn main() -> ipl_core::Result<()> {
    let model = ModelConfig::default();
    let data = gen_synthetic_cls(0, 2000, &TaskConfig::default())?;
    for (batch, lr) in [
        (32usize, 3e-4),
        (32, 1e-3),
        (8, 1e-3),
        (4, 3e-4),
        (4, 1e-3),
    ] {
        run(
            &model,
            OptimConfig {
                batch_size: batch,
                learning_rate: lr,
                ..OptimConfig::default()
            },
            &data,
        )?;
    }
    Ok(())
}
