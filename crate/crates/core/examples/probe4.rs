use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ipl_core::analysis::{gate_similarity, GateRecord};
use ipl_core::model::ModelConfig;
use ipl_core::tasks::{Dataset, Instance, Pattern, Verbalizer, SENTINEL_A, SENTINEL_B, SYM_X, SYM_Y};
use ipl_core::train::{Method, OptimConfig, Trainer};

/// Cue-flip with payloads always at the minimal majority margin:
/// (k+1, k) of one symbol against the other, shuffled.
fn gen_margin1(seed: u64, n_examples: usize, payload_len: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dataset = Dataset::default();
    let half = payload_len / 2;
    for stratum in 0..4u32 {
        let ty = stratum / 2;
        let label = stratum % 2;
        let count = n_examples / 4 + usize::from((n_examples % 4) as u32 > stratum);
        let mut members = Vec::with_capacity(count);
        for _ in 0..count {
            let rule = label ^ ty; // 0 -> X majority, 1 -> Y majority
            let (maj, min) = if rule == 0 { (SYM_X, SYM_Y) } else { (SYM_Y, SYM_X) };
            let mut payload: Vec<u32> = std::iter::repeat(maj)
                .take(half + 1)
                .chain(std::iter::repeat(min).take(half))
                .collect();
            payload.shuffle(&mut rng);
            let sentinel = if ty == 0 { SENTINEL_A } else { SENTINEL_B };
            let pos = rng.gen_range(0..=payload.len());
            payload.insert(pos, sentinel);
            members.push(Instance {
                tokens: payload,
                label: Some(label),
                target: None,
                instance_type: ty,
            });
        }
        let n_dev = (members.len() / 10).max(1);
        let n_test = (members.len() / 10).max(1);
        let n_train = members.len() - n_dev - n_test;
        dataset.test.extend(members.split_off(n_train + n_dev));
        dataset.dev.extend(members.split_off(n_train));
        dataset.train.extend(members);
    }
    for split in [&mut dataset.train, &mut dataset.dev, &mut dataset.test] {
        split.shuffle(&mut rng);
    }
    dataset
}

fn run(
    model: &ModelConfig,
    optim: OptimConfig,
    data: &Dataset,
    tag: &str,
) -> ipl_core::Result<(f64, f64)> {
    let t0 = Instant::now();
    let mut trainer = Trainer::new(
        model.clone(),
        optim,
        Pattern::default_cls(),
        Some(Verbalizer::default_cls(model.vocab_size)?),
    )?;
    let report = trainer.fit(&data.train, &data.dev, |_| {})?;
    let eval = trainer.evaluate(&data.dev)?;
    let (gap, sd) = match eval.gates {
        Some(gates) => {
            let flat: Vec<f64> = gates.iter().flatten().copied().collect();
            let mean = flat.iter().sum::<f64>() / flat.len() as f64;
            let sd = (flat.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / flat.len() as f64)
                .sqrt();
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
            (gate_similarity(&records)?.gap, sd)
        }
        None => (f64::NAN, f64::NAN),
    };
    println!(
        "{tag}: dev={:.4} gate_sd={sd:.4} gap={gap:.6} ({:.0}s)",
        report.best_dev,
        t0.elapsed().as_secs_f64()
    );
    Ok((report.best_dev, gap))
}

fn main() -> ipl_core::Result<()> {
    let model = ModelConfig::default();
    for payload_len in [5usize, 9] {
        let data = gen_margin1(0, 2000, payload_len);
        for (batch, lr, d_h) in [
            (32usize, 1e-3, None),
            (32, 1e-3, Some(8)),
            (32, 7e-4, None),
            (16, 5e-4, None),
            (16, 5e-4, Some(8)),
        ] {
            for seed in [0u64, 1] {
                let optim = OptimConfig {
                    batch_size: batch,
                    learning_rate: lr,
                    d_h,
                    seed,
                    ..OptimConfig::default()
                };
                let tag = format!("m1 p{payload_len} b{batch} lr{lr} dh{d_h:?} s{seed}");
                run(&model, optim, &data, &tag)?;
            }
        }
    }
    Ok(())
}
