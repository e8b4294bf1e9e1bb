//! Measure gate type-structure at stock defaults now that dev-metric
//! ties keep the most-trained snapshot.

use ipl_core::analysis::{gate_similarity, GateRecord};
use ipl_core::model::ModelConfig;
use ipl_core::tasks::{gen_synthetic_cls, Pattern, TaskConfig, Verbalizer};
use ipl_core::train::{Method, OptimConfig, Trainer};
use std::time::Instant;

fn main() {
    let data = gen_synthetic_cls(0, 2000, &TaskConfig::default()).unwrap();
    let mut gaps = Vec::new();
    for seed in 0..5u64 {
        let t0 = Instant::now();
        let model = ModelConfig::default();
        let optim = OptimConfig {
            seed,
            method: Method::Ipl,
            ..OptimConfig::default()
        };
        let mut tr = Trainer::new(
            model.clone(),
            optim,
            Pattern::default_cls(),
            Some(Verbalizer::default_cls(model.vocab_size).unwrap()),
        )
        .unwrap();
        let report = tr.fit(&data.train, &data.dev, |_| {}).unwrap();
        let eval = tr.evaluate(&data.dev).unwrap();
        let gates = eval.gates.as_ref().unwrap();
        let records: Vec<GateRecord> = gates
            .iter()
            .enumerate()
            .map(|(i, g)| GateRecord {
                id: i,
                instance_type: data.dev[i].instance_type,
                gates: g.clone(),
                correct: eval.correct[i],
            })
            .collect();
        let sim = gate_similarity(&records).unwrap();
        let l = gates[0].len();
        let mut mu = [vec![0.0f64; l], vec![0.0f64; l]];
        let mut cnt = [0usize; 2];
        let mut pooled = Vec::new();
        for r in &records {
            let t = r.instance_type as usize;
            cnt[t] += 1;
            for (a, b) in mu[t].iter_mut().zip(&r.gates) {
                *a += b;
            }
            pooled.extend_from_slice(&r.gates);
        }
        for (t, m) in mu.iter_mut().enumerate() {
            for a in m.iter_mut() {
                *a /= cnt[t].max(1) as f64;
            }
        }
        let sep: f64 = mu[0]
            .iter()
            .zip(&mu[1])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
        let sd = (pooled.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>()
            / pooled.len() as f64)
            .sqrt();
        let dev = report.best_dev;
        let be = report.best_epoch;
        let gap = sim.gap;
        let secs = t0.elapsed().as_secs();
        println!(
            "s{seed}: dev={dev:.4} best_epoch={be} sd={sd:.3} sep={sep:.4} gap={gap:.6} ({secs}s)"
        );
        gaps.push(gap);
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    println!("mean gap = {mean_gap:.6}");
}
