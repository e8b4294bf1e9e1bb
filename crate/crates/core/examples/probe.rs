use std::time::Instant;

use ipl_core::analysis::{gate_similarity, GateRecord};
use ipl_core::model::ModelConfig;
use ipl_core::tasks::{gen_synthetic_cls, Pattern, TaskConfig, Verbalizer};
use ipl_core::train::{Method, OptimConfig, Trainer};

fn overfit(
    model: &ModelConfig,
    method: Method,
    lr: f64,
    train: &[ipl_core::tasks::Instance],
) -> ipl_core::Result<(usize, f64, f64)> {
    let t0 = Instant::now();
    let optim = OptimConfig {
        learning_rate: lr,
        method,
        ..OptimConfig::default()
    };
    let mut trainer = Trainer::new(
        model.clone(),
        optim,
        Pattern::default_cls(),
        Some(Verbalizer::default_cls(model.vocab_size)?),
    )?;
    let mut steps = 0usize;
    let mut acc = 0.0;
    'outer: loop {
        for chunk in train.chunks(32) {
            trainer.train_step(chunk)?;
            steps += 1;
            if steps % 20 == 0 || steps >= 500 {
                acc = trainer.evaluate(train)?.metric;
                if acc >= 0.99 || steps >= 500 {
                    break 'outer;
                }
            }
        }
    }
    Ok((steps, acc, t0.elapsed().as_secs_f64()))
}

fn full_run(
    model: &ModelConfig,
    method: Method,
    prompt_length: usize,
    seed: u64,
    data: &ipl_core::tasks::Dataset,
) -> ipl_core::Result<(f64, f64, f64)> {
    let t0 = Instant::now();
    let optim = OptimConfig {
        method,
        prompt_length,
        seed,
        ..OptimConfig::default()
    };
    let mut trainer = Trainer::new(
        model.clone(),
        optim,
        Pattern::default_cls(),
        Some(Verbalizer::default_cls(model.vocab_size)?),
    )?;
    let report = trainer.fit(&data.train, &data.dev, |_| {})?;
    let mut gap = f64::NAN;
    if method == Method::Ipl && prompt_length > 0 {
        let eval = trainer.evaluate(&data.dev)?;
        let gates = eval.gates.expect("ipl eval has gates");
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
        gap = gate_similarity(&records)?.gap;
    }
    Ok((report.best_dev, gap, t0.elapsed().as_secs_f64()))
}

fn main() -> ipl_core::Result<()> {
    let model = ModelConfig::default();
    let task = TaskConfig::default();

    let small = gen_synthetic_cls(0, 80, &task)?;
    println!("c8 train size = {}", small.train.len());
    for method in [Method::Ipl, Method::PromptTuning] {
        for lr in [3e-4, 1e-3] {
            let (steps, acc, secs) = overfit(&model, method, lr, &small.train)?;
            println!("c8 {method:?} lr={lr} steps={steps} acc={acc:.4} ({secs:.1}s)");
        }
    }

    let data = gen_synthetic_cls(0, 2000, &task)?;
    for seed in [0u64, 1] {
        let (dev, gap, secs) = full_run(&model, Method::Ipl, 16, seed, &data)?;
        println!("c5 ipl l=16 seed={seed} dev={dev:.4} gap={gap:.4} ({secs:.1}s)");
    }
    let (dev, _, secs) = full_run(&model, Method::PromptTuning, 16, 0, &data)?;
    println!("c6 pt  l=16 seed=0 dev={dev:.4} ({secs:.1}s)");
    let (dev, _, secs) = full_run(&model, Method::Ipl, 0, 0, &data)?;
    println!("c6 ipl l=0  seed=0 dev={dev:.4} ({secs:.1}s)");
    Ok(())
}
