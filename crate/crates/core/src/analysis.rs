//! Post-hoc analyses of trained runs: gate exports for visualization,
//! gate-similarity structure across instance types, and prompt-length
//! sweeps.

use std::fs::File;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipl::{GatePolicy, PromptModule};
use crate::model::TransformerLM;
use crate::tasks::{format_pattern, Dataset, Instance, Pattern, Verbalizer};
use crate::train::{evaluate, Method, OptimConfig, Trainer};

/// One instance's gate profile from an evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub id: usize,
    #[serde(rename = "type")]
    pub instance_type: u32,
    pub gates: Vec<f64>,
    pub correct: bool,
}

/// Relevance and attention views of one instance, plot-ready.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub id: usize,
    /// `M * N^T`, `l x n`, before the row mean that feeds the sigmoid.
    pub relevance: Vec<Vec<f64>>,
    /// First-layer attention averaged over heads, restricted to prompt
    /// rows (queries) and instance columns (keys), `l x n`.
    pub attention: Vec<Vec<f64>>,
}

/// Evaluates `split` with gated prompts and writes `gates.jsonl` (one
/// [`GateRecord`] per instance, split order) into `dir`. Instances named
/// in `attention_ids` additionally get an [`AttentionRecord`] line in
/// `attention.jsonl`. Returns the gate records.
///
/// Everything here is a pure function of the parameters and the split,
/// so re-exporting produces byte-identical files.
pub fn export_gates(
    dir: &Path,
    lm: &TransformerLM,
    pm: &PromptModule,
    pattern: &Pattern,
    verbalizer: Option<&Verbalizer>,
    split: &[Instance],
    attention_ids: &[usize],
) -> Result<Vec<GateRecord>> {
    let report = evaluate(lm, pm, Method::Ipl, pattern, verbalizer, split)?;
    let gates = report.gates.expect("ipl evaluation reports gates");
    let records: Vec<GateRecord> = split
        .iter()
        .zip(gates)
        .zip(&report.correct)
        .enumerate()
        .map(|(id, ((inst, gates), &correct))| GateRecord {
            id,
            instance_type: inst.instance_type,
            gates,
            correct,
        })
        .collect();

    let mut f = File::create(dir.join("gates.jsonl"))?;
    for r in &records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }

    if !attention_ids.is_empty() {
        let mut f = File::create(dir.join("attention.jsonl"))?;
        for &id in attention_ids {
            let inst = split.get(id).ok_or(Error::IndexOutOfRange {
                index: id,
                len: split.len(),
            })?;
            let record = attention_record(lm, pm, pattern, inst, id)?;
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
    }
    Ok(records)
}

/// Runs one gated forward and extracts the relevance matrix and the
/// head-averaged first-layer prompt-to-instance attention block.
fn attention_record(
    lm: &TransformerLM,
    pm: &PromptModule,
    pattern: &Pattern,
    inst: &Instance,
    id: usize,
) -> Result<AttentionRecord> {
    let l = pm.l();
    if l == 0 || lm.config().n_layers == 0 {
        return Err(Error::Config(
            "attention export needs a non-empty prompt and at least one layer".into(),
        ));
    }
    // The same sequence the gates were computed from: the rendered
    // pattern for classification, the bare input for generation.
    let tokens = match inst.label {
        Some(_) => format_pattern(inst, pattern, lm.config().mode, lm.config().max_len - l)?.0,
        None => inst.tokens.clone(),
    };
    let n = tokens.len();

    let mut tape = crate::numerics::Tape::new();
    let lv = lm.register(&mut tape);
    let pv = pm.register(&mut tape);
    let valid = vec![true; n];
    let fwd = pm.forward_ipl(&mut tape, &pv, lm, &lv, &tokens, &valid, GatePolicy::Learned)?;

    let rel = tape.value(fwd.relevance.expect("learned gates keep relevance"));
    let relevance: Vec<Vec<f64>> = (0..l).map(|j| rel.row(j).to_vec()).collect();

    let heads = &fwd.output.attentions[0];
    let mut attention = vec![vec![0.0; n]; l];
    for &h in heads {
        let a = tape.value(h);
        for (j, row) in attention.iter_mut().enumerate() {
            for (i, out) in row.iter_mut().enumerate() {
                *out += a.row(j)[l + i] / heads.len() as f64;
            }
        }
    }
    Ok(AttentionRecord {
        id,
        relevance,
        attention,
    })
}

/// Similarity structure of gate vectors across instance types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateSimilarity {
    pub within: f64,
    pub between: f64,
    /// `within - between`; positive means same-type instances get more
    /// similar prompt weightings than cross-type ones.
    pub gap: f64,
    /// All gate vectors were identical, so the similarity structure is
    /// vacuous and the gap is pinned to zero.
    pub degenerate: bool,
}

/// How many records the exact all-pairs computation handles before
/// switching to sampling.
pub const EXACT_PAIR_LIMIT: usize = 1000;
/// Pairs drawn in the sampling regime.
pub const SAMPLED_PAIRS: usize = 100_000;

/// Mean pairwise cosine of gate vectors between same-type instances and
/// between different-type instances. Exact over all pairs up to
/// [`EXACT_PAIR_LIMIT`] records; beyond that, [`SAMPLED_PAIRS`] pairs
/// are drawn uniformly (fixed internal seed, so results are stable).
pub fn gate_similarity(records: &[GateRecord]) -> Result<GateSimilarity> {
    validate_similarity_input(records)?;
    if records
        .iter()
        .all(|r| r.gates == records[0].gates)
    {
        return Ok(GateSimilarity {
            within: 1.0,
            between: 1.0,
            gap: 0.0,
            degenerate: true,
        });
    }

    let mut within = MeanAcc::default();
    let mut between = MeanAcc::default();
    let mut push = |a: &GateRecord, b: &GateRecord| {
        let c = cosine(&a.gates, &b.gates);
        if a.instance_type == b.instance_type {
            within.push(c);
        } else {
            between.push(c);
        }
    };

    if records.len() <= EXACT_PAIR_LIMIT {
        for i in 0..records.len() {
            for j in i + 1..records.len() {
                push(&records[i], &records[j]);
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..SAMPLED_PAIRS {
            let i = rng.gen_range(0..records.len());
            let mut j = rng.gen_range(0..records.len() - 1);
            if j >= i {
                j += 1;
            }
            push(&records[i], &records[j]);
        }
    }
    drop(push);

    let (within, between) = (within.mean()?, between.mean()?);
    Ok(GateSimilarity {
        within,
        between,
        gap: within - between,
        degenerate: false,
    })
}

fn validate_similarity_input(records: &[GateRecord]) -> Result<()> {
    let mut types: Vec<(u32, usize)> = Vec::new();
    for r in records {
        if r.gates.is_empty() || r.gates.len() != records[0].gates.len() {
            return Err(Error::Config(
                "gate vectors must be non-empty and equal-length".into(),
            ));
        }
        match types.iter_mut().find(|(t, _)| *t == r.instance_type) {
            Some((_, c)) => *c += 1,
            None => types.push((r.instance_type, 1)),
        }
    }
    if types.len() < 2 || types.iter().any(|&(_, c)| c < 2) {
        return Err(Error::Config(
            "similarity needs at least two types with two records each".into(),
        ));
    }
    Ok(())
}

#[derive(Default)]
struct MeanAcc {
    sum: f64,
    n: usize,
}

impl MeanAcc {
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }

    fn mean(&self) -> Result<f64> {
        if self.n == 0 {
            return Err(Error::Config(
                "pair sampling produced an empty within/between bucket".into(),
            ));
        }
        Ok(self.sum / self.n as f64)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// One sweep result row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub length: usize,
    pub seed: u64,
    pub dev_metric: f64,
}

/// Standard sweep lengths used in the prompt-length experiment.
pub const SWEEP_LENGTHS: [usize; 7] = [0, 4, 8, 16, 20, 30, 40];

/// Trains one run per (length, seed) on the shared dataset and collects
/// the best dev metric of each. Rows come back in input order, lengths
/// outer, seeds inner.
pub fn prompt_length_sweep(
    model: &crate::model::ModelConfig,
    optim: &OptimConfig,
    lengths: &[usize],
    seeds: &[u64],
    data: &Dataset,
    pattern: &Pattern,
    verbalizer: Option<&Verbalizer>,
) -> Result<Vec<SweepRow>> {
    if lengths.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one length and seed".into()));
    }
    let mut seen = Vec::new();
    for &l in lengths {
        if seen.contains(&l) {
            return Err(Error::Config(format!("duplicate sweep length {l}")));
        }
        seen.push(l);
    }
    let mut rows = Vec::with_capacity(lengths.len() * seeds.len());
    for &length in lengths {
        for &seed in seeds {
            let run = OptimConfig {
                prompt_length: length,
                seed,
                ..optim.clone()
            };
            let mut trainer =
                Trainer::new(model.clone(), run, pattern.clone(), verbalizer.cloned())?;
            let report = trainer.fit(&data.train, &data.dev, |_| {})?;
            rows.push(SweepRow {
                length,
                seed,
                dev_metric: report.best_dev,
            });
        }
    }
    Ok(rows)
}

/// Writes sweep rows as CSV with a `length,seed,dev_metric` header.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "length,seed,dev_metric")?;
    for r in rows {
        writeln!(f, "{},{},{}", r.length, r.seed, r.dev_metric)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Mode, ModelConfig};
    use crate::tasks::{self, gen_synthetic_cls, TaskConfig};

    fn rec(id: usize, ty: u32, gates: &[f64]) -> GateRecord {
        GateRecord {
            id,
            instance_type: ty,
            gates: gates.to_vec(),
            correct: true,
        }
    }

    fn tiny_setup() -> (TransformerLM, PromptModule, Pattern, Verbalizer, Dataset) {
        let model = ModelConfig {
            vocab_size: tasks::RESERVED_TOKENS,
            d_e: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 32,
            mode: Mode::Masked,
            mask_token_id: tasks::MASK,
        };
        let lm = TransformerLM::init(model.clone(), 5).unwrap();
        let pm = PromptModule::init(4, 16, &lm, 6).unwrap();
        let verbalizer = Verbalizer::default_cls(model.vocab_size).unwrap();
        let task = TaskConfig {
            vocab_size: tasks::RESERVED_TOKENS,
            ..TaskConfig::default()
        };
        let data = gen_synthetic_cls(13, 40, &task).unwrap();
        (lm, pm, Pattern::default_cls(), verbalizer, data)
    }

    #[test]
    fn export_writes_one_record_per_instance_and_is_reproducible() {
        let (lm, pm, pattern, verbalizer, data) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let records = export_gates(
            dir.path(),
            &lm,
            &pm,
            &pattern,
            Some(&verbalizer),
            &data.dev,
            &[0, 2],
        )
        .unwrap();
        assert_eq!(records.len(), data.dev.len());
        assert!(records
            .iter()
            .all(|r| r.gates.len() == 4 && r.gates.iter().all(|&s| s > 0.0 && s < 1.0)));

        let gates_a = std::fs::read(dir.path().join("gates.jsonl")).unwrap();
        let attn_a = std::fs::read(dir.path().join("attention.jsonl")).unwrap();
        let lines = gates_a.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count();
        assert_eq!(lines, data.dev.len());

        export_gates(
            dir.path(),
            &lm,
            &pm,
            &pattern,
            Some(&verbalizer),
            &data.dev,
            &[0, 2],
        )
        .unwrap();
        assert_eq!(gates_a, std::fs::read(dir.path().join("gates.jsonl")).unwrap());
        assert_eq!(attn_a, std::fs::read(dir.path().join("attention.jsonl")).unwrap());
    }

    #[test]
    fn attention_record_has_prompt_by_instance_shape() {
        let (lm, pm, pattern, _, data) = tiny_setup();
        let inst = &data.dev[0];
        // Rendered length: Q + payload+sentinel + A + MASK.
        let n = inst.tokens.len() + 3;
        let record = attention_record(&lm, &pm, &pattern, inst, 0).unwrap();
        assert_eq!(record.relevance.len(), 4);
        assert!(record.relevance.iter().all(|row| row.len() == n));
        assert_eq!(record.attention.len(), 4);
        assert!(record.attention.iter().all(|row| row.len() == n));
        // Attention weights are probabilities over the full row, so the
        // prompt-to-instance block sums to at most 1 per row.
        for row in &record.attention {
            let s: f64 = row.iter().sum();
            assert!(s > 0.0 && s <= 1.0 + 1e-9, "row sum {s}");
        }
    }

    #[test]
    fn duplicate_instances_get_identical_gate_records() {
        let (lm, pm, pattern, verbalizer, data) = tiny_setup();
        let mut split = vec![data.dev[0].clone(), data.dev[1].clone(), data.dev[0].clone()];
        split[2].instance_type = data.dev[0].instance_type;
        let dir = tempfile::tempdir().unwrap();
        let records = export_gates(
            dir.path(),
            &lm,
            &pm,
            &pattern,
            Some(&verbalizer),
            &split,
            &[],
        )
        .unwrap();
        assert_eq!(records[0].gates, records[2].gates);
        assert_eq!(records[0].correct, records[2].correct);
    }

    #[test]
    fn orthogonal_types_give_unit_gap() {
        let records = vec![
            rec(0, 0, &[1.0, 0.0]),
            rec(1, 0, &[1.0, 0.0]),
            rec(2, 1, &[0.0, 1.0]),
            rec(3, 1, &[0.0, 1.0]),
        ];
        let sim = gate_similarity(&records).unwrap();
        assert!((sim.within - 1.0).abs() < 1e-12);
        assert!(sim.between.abs() < 1e-12);
        assert!((sim.gap - 1.0).abs() < 1e-12);
        assert!(!sim.degenerate);
    }

    #[test]
    fn identical_gates_are_flagged_degenerate() {
        let records = vec![
            rec(0, 0, &[0.5, 0.5]),
            rec(1, 0, &[0.5, 0.5]),
            rec(2, 1, &[0.5, 0.5]),
            rec(3, 1, &[0.5, 0.5]),
        ];
        let sim = gate_similarity(&records).unwrap();
        assert_eq!(
            sim,
            GateSimilarity {
                within: 1.0,
                between: 1.0,
                gap: 0.0,
                degenerate: true,
            }
        );
    }

    #[test]
    fn similarity_preconditions_are_enforced() {
        // One type only.
        let one_type = vec![rec(0, 0, &[0.1, 0.2]), rec(1, 0, &[0.3, 0.4])];
        assert!(gate_similarity(&one_type).is_err());
        // A type with a single record.
        let lonely = vec![
            rec(0, 0, &[0.1, 0.2]),
            rec(1, 0, &[0.3, 0.4]),
            rec(2, 1, &[0.5, 0.6]),
        ];
        assert!(gate_similarity(&lonely).is_err());
        // Mismatched lengths.
        let ragged = vec![
            rec(0, 0, &[0.1, 0.2]),
            rec(1, 0, &[0.3]),
            rec(2, 1, &[0.5, 0.6]),
            rec(3, 1, &[0.7, 0.8]),
        ];
        assert!(gate_similarity(&ragged).is_err());
    }

    #[test]
    fn similarity_is_stable_under_shuffling() {
        let mut records = Vec::new();
        for i in 0..40 {
            let ty = (i % 2) as u32;
            let base = if ty == 0 { [0.8, 0.2, 0.3] } else { [0.2, 0.7, 0.6] };
            let jitter = 0.01 * (i as f64);
            records.push(rec(i, ty, &[base[0] + jitter * 0.001, base[1], base[2]]));
        }
        let a = gate_similarity(&records).unwrap();
        records.reverse();
        records.swap(3, 17);
        let b = gate_similarity(&records).unwrap();
        assert!((a.within - b.within).abs() < 1e-12);
        assert!((a.between - b.between).abs() < 1e-12);
    }

    #[test]
    fn sampling_regime_matches_exact_structure() {
        // 1200 records force the sampled path; orthogonal construction
        // keeps the expected values exact.
        let mut records = Vec::new();
        for i in 0..1200 {
            let ty = (i % 2) as u32;
            let gates = if ty == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
            records.push(rec(i, ty, &gates));
        }
        let a = gate_similarity(&records).unwrap();
        assert!((a.within - 1.0).abs() < 1e-12);
        assert!(a.between.abs() < 1e-12);
        // Deterministic: same input, same sample.
        let b = gate_similarity(&records).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_produces_one_row_per_length_seed_pair() {
        let (_, _, pattern, verbalizer, data) = tiny_setup();
        let model = ModelConfig {
            vocab_size: tasks::RESERVED_TOKENS,
            d_e: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 32,
            mode: Mode::Masked,
            mask_token_id: tasks::MASK,
        };
        let optim = OptimConfig {
            epochs: 1,
            batch_size: 16,
            learning_rate: 1e-3,
            ..OptimConfig::default()
        };
        let rows = prompt_length_sweep(
            &model,
            &optim,
            &[0, 4],
            &[7, 8],
            &data,
            &pattern,
            Some(&verbalizer),
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(
            rows.iter().map(|r| (r.length, r.seed)).collect::<Vec<_>>(),
            vec![(0, 7), (0, 8), (4, 7), (4, 8)]
        );
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.dev_metric)));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("length,seed,dev_metric"));
        assert_eq!(lines.count(), 4);

        assert!(prompt_length_sweep(
            &model,
            &optim,
            &[4, 4],
            &[7],
            &data,
            &pattern,
            Some(&verbalizer),
        )
        .is_err());
    }
}
