use std::time::Instant;

use ipl_core::analysis::{gate_similarity, GateRecord};
use ipl_core::model::ModelConfig;
use ipl_core::tasks::{gen_synthetic_cls, Dataset, Pattern, TaskConfig, Verbalizer};
use ipl_core::train::{Method, OptimConfig, Trainer};

const LR: f64 = 1e-3;

fn run(
    model: &ModelConfig,
    method: Method,
    prompt_length: usize,
    seed: u64,
    data: &Dataset,
) -> ipl_core::Result<(f64, f64)> {
    let t0 = Instant::now();
    let optim = OptimConfig {
        learning_rate: LR,
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
        let gates = eval.gates.expect("gates");
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
    println!(
        "  {method:?} l={prompt_length} seed={seed}: dev={:.4} gap={gap:.6} ({:.0}s)",
        report.best_dev,
        t0.elapsed().as_secs_f64()
    );
    Ok((report.best_dev, gap))
}

fn main() -> ipl_core::Result<()> {
    let model = ModelConfig::default();
    let data = gen_synthetic_cls(0, 2000, &TaskConfig::default())?;

    let mut ipl = Vec::new();
    let mut pt = Vec::new();
    let mut l0 = Vec::new();
    let mut gaps = Vec::new();
    for seed in 0..5u64 {
        let (dev, gap) = run(&model, Method::Ipl, 16, seed, &data)?;
        ipl.push(dev);
        gaps.push(gap);
        let (dev, _) = run(&model, Method::PromptTuning, 16, seed, &data)?;
        pt.push(dev);
        let (dev, _) = run(&model, Method::Ipl, 0, seed, &data)?;
        l0.push(dev);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("ipl16 mean dev = {:.4}", mean(&ipl));
    println!("pt16  mean dev = {:.4}", mean(&pt));
    println!("ipl0  mean dev = {:.4}", mean(&l0));
    println!("gap   mean     = {:.6}  (per-seed: {gaps:?})", mean(&gaps));

    let small = gen_synthetic_cls(0, 80, &TaskConfig::default())?;
    for method in [Method::Ipl, Method::PromptTuning] {
        let t0 = Instant::now();
        let optim = OptimConfig {
            learning_rate: LR,
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
            for chunk in small.train.chunks(32) {
                trainer.train_step(chunk)?;
                steps += 1;
                if steps % 10 == 0 || steps >= 500 {
                    acc = trainer.evaluate(&small.train)?.metric;
                    if acc >= 0.99 || steps >= 500 {
                        break 'outer;
                    }
                }
            }
        }
        println!(
            "overfit {method:?}: steps={steps} acc={acc:.4} ({:.0}s)",
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
