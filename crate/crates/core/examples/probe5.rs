//! Optimizer-default grid on the stock iid-payload generator: does any
//! (batch, lr, d_h, payload_len) point give stable training plus a
//! type-separated gate map?

use ipl_core::analysis::{gate_similarity, GateRecord};
use ipl_core::model::ModelConfig;
use ipl_core::tasks::{gen_synthetic_cls, Pattern, TaskConfig, Verbalizer};
use ipl_core::train::{Method, OptimConfig, Trainer};
use std::time::Instant;

fn main() {
    let grid: &[(usize, f64, Option<usize>, usize)] = &[
        (32, 1e-3, None, 5),
        (32, 5e-4, None, 5),
        (32, 7e-4, None, 5),
        (32, 7e-4, Some(8), 5),
        (64, 1e-3, None, 5),
        (64, 1.5e-3, None, 5),
        (64, 1e-3, Some(8), 5),
        (32, 7e-4, None, 3),
        (64, 1e-3, None, 3),
    ];
    for &(batch, lr, d_h, plen) in grid {
        let task = TaskConfig {
            payload_len: plen,
            ..TaskConfig::default()
        };
        let data = gen_synthetic_cls(0, 2000, &task).unwrap();
        for seed in [0u64, 1] {
            let t0 = Instant::now();
            let model = ModelConfig::default();
            let optim = OptimConfig {
                learning_rate: lr,
                batch_size: batch,
                d_h,
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
            // Type-conditional mean gate vectors and their separation.
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
            for t in 0..2 {
                for a in mu[t].iter_mut() {
                    *a /= cnt[t] as f64;
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
            let gap = sim.gap;
            let secs = t0.elapsed().as_secs();
            println!(
                "b{batch} lr{lr} dh{d_h:?} p{plen} s{seed}: dev={dev:.4} sd={sd:.3} sep={sep:.4} gap={gap:.6} ({secs}s)"
            );
        }
    }
}
