//! Synthetic desk-scale tasks over a closed symbolic vocabulary, with
//! cloze patterns and verbalizers.
//!
//! The classification task is "cue-flip": every instance carries a payload
//! of two symbols plus a sentinel token, and the label rule (majority
//! symbol) is *inverted* for sentinel-B instances. A prompt that adapts to
//! the individual instance can specialize to the sentinel; a fixed prompt
//! cannot. The generation task maps shuffled key-value pairs to the values
//! in canonical key order, joined by a type-dependent separator.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Mode;

// ---- Fixed token ids in the closed vocabulary -------------------------

/// Padding (never attended).
pub const PAD: u32 = 0;
/// Cloze blank scored in masked mode.
pub const MASK: u32 = 1;
/// Verbalizer tokens for labels 0 and 1.
pub const LABEL_TOKENS: [u32; 2] = [2, 3];
/// Sentinel announcing instance type 0 (plain rule).
pub const SENTINEL_A: u32 = 4;
/// Sentinel announcing instance type 1 (inverted rule).
pub const SENTINEL_B: u32 = 5;
/// The two payload symbols the majority rule counts.
pub const SYM_X: u32 = 6;
pub const SYM_Y: u32 = 7;
/// Literal template tokens ("question" / "answer" markers).
pub const LIT_Q: u32 = 8;
pub const LIT_A: u32 = 9;
/// Key tokens k0..k3 for the generation task.
pub const KEY_BASE: u32 = 10;
pub const N_KEYS: usize = 4;
/// Value tokens v0..v7.
pub const VALUE_BASE: u32 = 14;
pub const N_VALUES: usize = 8;
/// Type-dependent separators in generation targets.
pub const SEP_A: u32 = 22;
pub const SEP_B: u32 = 23;
/// First id with no assigned meaning; everything below must fit in vocab.
pub const RESERVED_TOKENS: usize = 24;

// ------------------------------------------------------------------------

/// One labeled (or targeted) example. `instance_type` is the latent cue
/// id; it is never fed to training except through its sentinel token and
/// exists for the gate-clustering analysis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub tokens: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target: Option<Vec<u32>>,
    #[serde(rename = "type")]
    pub instance_type: u32,
}

impl Instance {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::DegenerateInstance);
        }
        for &t in self.tokens.iter().chain(self.target.iter().flatten()) {
            if (t as usize) >= vocab_size {
                return Err(Error::Vocabulary {
                    id: t,
                    vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// A train/dev/test split of instances.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, split) in [
            ("train.jsonl", &self.train),
            ("dev.jsonl", &self.dev),
            ("test.jsonl", &self.test),
        ] {
            let mut w = BufWriter::new(std::fs::File::create(dir.join(name))?);
            for inst in split {
                serde_json::to_writer(&mut w, inst)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<Instance>> {
            let f = std::fs::File::open(dir.join(name))?;
            let mut out = Vec::new();
            for line in std::io::BufReader::new(f).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                out.push(serde_json::from_str(&line)?);
            }
            Ok(out)
        };
        Ok(Self {
            train: read("train.jsonl")?,
            dev: read("dev.jsonl")?,
            test: read("test.jsonl")?,
        })
    }
}

/// Knobs for the synthetic generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Payload symbols per cue-flip instance; odd so majority never ties.
    pub payload_len: usize,
    /// Key-value pairs per generation instance (≤ number of keys).
    pub n_pairs: usize,
    /// Vocabulary the tokens must fit into.
    pub vocab_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            payload_len: 5,
            n_pairs: 3,
            vocab_size: 64,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < RESERVED_TOKENS {
            return Err(Error::Config(format!(
                "vocab_size {} smaller than the {} reserved tokens",
                self.vocab_size, RESERVED_TOKENS
            )));
        }
        if self.payload_len == 0 || self.payload_len % 2 == 0 {
            return Err(Error::Config(format!(
                "payload_len must be odd and positive, got {}",
                self.payload_len
            )));
        }
        if self.n_pairs == 0 || self.n_pairs > N_KEYS {
            return Err(Error::Config(format!(
                "n_pairs must be in 1..={N_KEYS}, got {}",
                self.n_pairs
            )));
        }
        Ok(())
    }
}

/// Majority-symbol rule output for a cue-flip payload: 0 when `SYM_X`
/// outnumbers `SYM_Y`, 1 otherwise. Sentinels and other tokens are ignored.
pub fn payload_rule(tokens: &[u32]) -> u32 {
    let xs = tokens.iter().filter(|&&t| t == SYM_X).count();
    let ys = tokens.iter().filter(|&&t| t == SYM_Y).count();
    u32::from(xs <= ys)
}

/// The label the cue-flip construction assigns to a token sequence:
/// the payload rule, inverted when the sentinel is type B.
pub fn cue_flip_label(tokens: &[u32]) -> u32 {
    let ty = u32::from(tokens.contains(&SENTINEL_B));
    payload_rule(tokens) ^ ty
}

/// Generates the cue-flip classification dataset: `n_examples` instances
/// balanced over (type, label) strata, split 80/10/10 per stratum, each
/// split shuffled deterministically under `seed`.
pub fn gen_synthetic_cls(seed: u64, n_examples: usize, config: &TaskConfig) -> Result<Dataset> {
    config.validate()?;
    if n_examples < 8 {
        return Err(Error::Config(format!(
            "need at least 8 examples (2 per class per type), got {n_examples}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dataset = Dataset::default();

    // Strata in fixed order: (type 0, label 0), (0,1), (1,0), (1,1).
    for stratum in 0..4u32 {
        let ty = stratum / 2;
        let label = stratum % 2;
        let count = n_examples / 4 + usize::from((n_examples % 4) as u32 > stratum);
        let mut members = Vec::with_capacity(count);
        for _ in 0..count {
            let mut payload: Vec<u32> = (0..config.payload_len)
                .map(|_| if rng.gen::<bool>() { SYM_X } else { SYM_Y })
                .collect();
            // The rule output must equal label ^ type; flipping every
            // symbol inverts the majority, so force it when needed.
            if payload_rule(&payload) != label ^ ty {
                for t in payload.iter_mut() {
                    *t = if *t == SYM_X { SYM_Y } else { SYM_X };
                }
            }
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
    Ok(dataset)
}

/// Generates the key-value-to-sequence dataset: inputs are a sentinel plus
/// shuffled (key, value) pairs; targets list the values in canonical key
/// order joined by the type's separator.
pub fn gen_synthetic_gen(seed: u64, n_examples: usize, config: &TaskConfig) -> Result<Dataset> {
    config.validate()?;
    if n_examples < 8 {
        return Err(Error::Config(format!(
            "need at least 8 examples (2 per type), got {n_examples}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dataset = Dataset::default();

    for ty in 0..2u32 {
        let count = n_examples / 2 + usize::from(n_examples % 2 > ty as usize);
        let mut members = Vec::with_capacity(count);
        for _ in 0..count {
            let mut keys: Vec<usize> = (0..N_KEYS).collect();
            keys.shuffle(&mut rng);
            let mut pairs: Vec<(usize, u32)> = keys[..config.n_pairs]
                .iter()
                .map(|&k| (k, VALUE_BASE + rng.gen_range(0..N_VALUES) as u32))
                .collect();
            let sentinel = if ty == 0 { SENTINEL_A } else { SENTINEL_B };
            let sep = if ty == 0 { SEP_A } else { SEP_B };
            let mut tokens = vec![sentinel];
            for &(k, v) in &pairs {
                tokens.push(KEY_BASE + k as u32);
                tokens.push(v);
            }
            pairs.sort_by_key(|&(k, _)| k);
            let mut target = Vec::with_capacity(2 * config.n_pairs - 1);
            for (i, &(_, v)) in pairs.iter().enumerate() {
                if i > 0 {
                    target.push(sep);
                }
                target.push(v);
            }
            members.push(Instance {
                tokens,
                label: None,
                target: Some(target),
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
    Ok(dataset)
}

// ---- Cloze patterns -----------------------------------------------------

/// One element of a cloze template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternItem {
    Literal(u32),
    /// Slot replaced by the instance's tokens.
    Instance,
    /// Slot holding the blank to fill: becomes the mask token in masked
    /// mode; in causal mode the answer is predicted after the preceding
    /// token, so the slot must be final and is dropped from the sequence.
    Mask,
}

/// A cloze template with exactly one instance slot and one mask slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    pub items: Vec<PatternItem>,
}

impl Pattern {
    pub fn new(items: Vec<PatternItem>) -> Result<Self> {
        let masks = items.iter().filter(|i| matches!(i, PatternItem::Mask)).count();
        let slots = items
            .iter()
            .filter(|i| matches!(i, PatternItem::Instance))
            .count();
        if masks != 1 || slots != 1 {
            return Err(Error::Config(format!(
                "pattern needs exactly one mask and one instance slot, got {masks} and {slots}"
            )));
        }
        Ok(Self { items })
    }

    /// The single classification template used by the experiments:
    /// `Q <instance> A <mask>`.
    pub fn default_cls() -> Self {
        Self::new(vec![
            PatternItem::Literal(LIT_Q),
            PatternItem::Instance,
            PatternItem::Literal(LIT_A),
            PatternItem::Mask,
        ])
        .expect("static template is well-formed")
    }
}

/// Renders `inst` through `pat` for the given model mode.
///
/// Returns the token sequence and the mask index *before* any prompt is
/// prepended (callers add the prompt length to recover the absolute
/// position). `budget` is the longest sequence the caller can accept
/// (`max_len - l`).
pub fn format_pattern(
    inst: &Instance,
    pat: &Pattern,
    mode: Mode,
    budget: usize,
) -> Result<(Vec<u32>, usize)> {
    let mut tokens = Vec::with_capacity(pat.items.len() + inst.tokens.len());
    let mut mask_position = None;
    for item in &pat.items {
        match item {
            PatternItem::Literal(t) => tokens.push(*t),
            PatternItem::Instance => tokens.extend_from_slice(&inst.tokens),
            PatternItem::Mask => match mode {
                Mode::Masked => {
                    mask_position = Some(tokens.len());
                    tokens.push(MASK);
                }
                Mode::Causal => {
                    // The answer is generated next, so the blank must end
                    // the template; the preceding position carries it.
                    if !tokens.is_empty() && mask_position.is_none() {
                        mask_position = Some(tokens.len() - 1);
                    } else {
                        return Err(Error::Config(
                            "causal patterns must place the mask last, after at least one token"
                                .into(),
                        ));
                    }
                }
            },
        }
    }
    if mode == Mode::Causal && mask_position != Some(tokens.len() - 1) {
        return Err(Error::Config(
            "causal patterns must place the mask last".into(),
        ));
    }
    if tokens.len() > budget {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max_len: budget,
        });
    }
    Ok((tokens, mask_position.expect("pattern has a mask slot")))
}

// ---- Verbalizers --------------------------------------------------------

/// Injective label-to-token map scored at the mask position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verbalizer {
    /// (label, token) pairs sorted by label id.
    pairs: Vec<(u32, u32)>,
}

impl Verbalizer {
    pub fn new(mut pairs: Vec<(u32, u32)>, vocab_size: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("empty verbalizer".into()));
        }
        pairs.sort_by_key(|&(label, _)| label);
        for window in pairs.windows(2) {
            if window[0].0 == window[1].0 || window[0].1 == window[1].1 {
                return Err(Error::Config(
                    "verbalizer must map distinct labels to distinct tokens".into(),
                ));
            }
        }
        for &(_, token) in &pairs {
            if (token as usize) >= vocab_size {
                return Err(Error::Vocabulary {
                    id: token,
                    vocab_size,
                });
            }
        }
        Ok(Self { pairs })
    }

    /// The standard two-label verbalizer over the reserved label tokens.
    pub fn default_cls(vocab_size: usize) -> Result<Self> {
        Self::new(
            vec![(0, LABEL_TOKENS[0]), (1, LABEL_TOKENS[1])],
            vocab_size,
        )
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.pairs.iter().map(|&(_, t)| t).collect()
    }

    /// Token id for a label, if mapped.
    pub fn token_for(&self, label: u32) -> Option<u32> {
        self.pairs
            .iter()
            .find(|&&(l, _)| l == label)
            .map(|&(_, t)| t)
    }
}

/// Restricts a logits row to the verbalizer tokens and picks the argmax
/// label; exact ties go to the lowest label id. Scores are the raw
/// (unnormalized) logits per label, in label order.
pub fn verbalizer_score(logits_row: &[f64], v: &Verbalizer) -> (u32, Vec<(u32, f64)>) {
    let scores: Vec<(u32, f64)> = v
        .pairs
        .iter()
        .map(|&(label, token)| (label, logits_row[token as usize]))
        .collect();
    let mut best = scores[0];
    for &(label, score) in &scores[1..] {
        if score > best.1 {
            best = (label, score);
        }
    }
    (best.0, scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_seed_deterministic() {
        let cfg = TaskConfig::default();
        let a = gen_synthetic_cls(7, 200, &cfg).unwrap();
        let b = gen_synthetic_cls(7, 200, &cfg).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic_cls(8, 200, &cfg).unwrap();
        assert_ne!(a, c);

        let g1 = gen_synthetic_gen(7, 100, &cfg).unwrap();
        let g2 = gen_synthetic_gen(7, 100, &cfg).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn cue_flip_labels_follow_the_construction_rule() {
        let data = gen_synthetic_cls(3, 400, &TaskConfig::default()).unwrap();
        for inst in data.train.iter().chain(&data.dev).chain(&data.test) {
            assert_eq!(inst.label, Some(cue_flip_label(&inst.tokens)));
            let expected_type = u32::from(inst.tokens.contains(&SENTINEL_B));
            assert_eq!(inst.instance_type, expected_type);
        }
    }

    #[test]
    fn swapping_the_sentinel_flips_the_label() {
        let data = gen_synthetic_cls(5, 100, &TaskConfig::default()).unwrap();
        let inst = data
            .train
            .iter()
            .find(|i| i.instance_type == 0)
            .expect("type-A instance");
        let swapped: Vec<u32> = inst
            .tokens
            .iter()
            .map(|&t| if t == SENTINEL_A { SENTINEL_B } else { t })
            .collect();
        assert_eq!(cue_flip_label(&swapped), 1 - inst.label.unwrap());
    }

    #[test]
    fn classes_and_types_are_balanced() {
        let data = gen_synthetic_cls(11, 2000, &TaskConfig::default()).unwrap();
        let all: Vec<&Instance> = data.train.iter().chain(&data.dev).chain(&data.test).collect();
        assert_eq!(all.len(), 2000);
        let ones = all.iter().filter(|i| i.label == Some(1)).count();
        let type_b = all.iter().filter(|i| i.instance_type == 1).count();
        // Stratified construction gives exact balance at n % 4 == 0.
        assert_eq!(ones, 1000);
        assert_eq!(type_b, 1000);
        // Each split is type-balanced too.
        for split in [&data.train, &data.dev, &data.test] {
            let b = split.iter().filter(|i| i.instance_type == 1).count();
            assert_eq!(2 * b, split.len(), "split of {} has {b} type-B", split.len());
        }
    }

    #[test]
    fn splits_are_80_10_10() {
        let data = gen_synthetic_cls(2, 2000, &TaskConfig::default()).unwrap();
        assert_eq!(data.train.len(), 1600);
        assert_eq!(data.dev.len(), 200);
        assert_eq!(data.test.len(), 200);
    }

    #[test]
    fn cue_flip_is_noiseless_for_the_tabular_oracle() {
        // A classifier that reads (sentinel, payload-rule output) straight
        // off the tokens must score 100% on dev.
        let data = gen_synthetic_cls(13, 1000, &TaskConfig::default()).unwrap();
        for inst in &data.dev {
            assert_eq!(cue_flip_label(&inst.tokens), inst.label.unwrap());
        }
    }

    #[test]
    fn generation_targets_use_canonical_order_and_separator() {
        let cfg = TaskConfig::default();
        let data = gen_synthetic_gen(17, 100, &cfg).unwrap();
        for inst in data.train.iter().chain(&data.dev).chain(&data.test) {
            let target = inst.target.as_ref().unwrap();
            assert_eq!(target.len(), 2 * cfg.n_pairs - 1);
            // Reconstruct the expected target from the input pairs.
            let mut pairs: Vec<(u32, u32)> = inst.tokens[1..]
                .chunks(2)
                .map(|kv| (kv[0], kv[1]))
                .collect();
            pairs.sort_by_key(|&(k, _)| k);
            let sep = if inst.instance_type == 0 { SEP_A } else { SEP_B };
            let mut expected = Vec::new();
            for (i, &(_, v)) in pairs.iter().enumerate() {
                if i > 0 {
                    expected.push(sep);
                }
                expected.push(v);
            }
            assert_eq!(target, &expected);
        }
    }

    #[test]
    fn single_pair_target_is_just_the_value() {
        let cfg = TaskConfig {
            n_pairs: 1,
            ..TaskConfig::default()
        };
        let data = gen_synthetic_gen(19, 20, &cfg).unwrap();
        for inst in data.train.iter() {
            assert_eq!(inst.target.as_ref().unwrap().len(), 1);
            assert_eq!(inst.target.as_ref().unwrap()[0], inst.tokens[2]);
        }
    }

    #[test]
    fn pattern_formats_instance_and_mask() {
        let inst = Instance {
            tokens: vec![SYM_X, SYM_Y],
            label: Some(0),
            target: None,
            instance_type: 0,
        };
        let pat = Pattern::default_cls();
        let (tokens, pos) = format_pattern(&inst, &pat, Mode::Masked, 16).unwrap();
        assert_eq!(tokens, vec![LIT_Q, SYM_X, SYM_Y, LIT_A, MASK]);
        assert_eq!(pos, 4);

        // Causal mode drops the blank; the final position answers.
        let (tokens, pos) = format_pattern(&inst, &pat, Mode::Causal, 16).unwrap();
        assert_eq!(tokens, vec![LIT_Q, SYM_X, SYM_Y, LIT_A]);
        assert_eq!(pos, 3);
    }

    #[test]
    fn degenerate_pattern_appends_mask_only() {
        let inst = Instance {
            tokens: vec![SYM_X, SYM_X],
            label: Some(0),
            target: None,
            instance_type: 0,
        };
        let pat = Pattern::new(vec![PatternItem::Instance, PatternItem::Mask]).unwrap();
        let (tokens, pos) = format_pattern(&inst, &pat, Mode::Masked, 8).unwrap();
        assert_eq!(tokens, vec![SYM_X, SYM_X, MASK]);
        assert_eq!(pos, 2);
    }

    #[test]
    fn format_respects_the_length_budget() {
        let inst = Instance {
            tokens: vec![SYM_X; 10],
            label: Some(0),
            target: None,
            instance_type: 0,
        };
        let err = format_pattern(&inst, &Pattern::default_cls(), Mode::Masked, 8).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { .. }));
    }

    #[test]
    fn pattern_validation_counts_slots() {
        assert!(Pattern::new(vec![PatternItem::Instance]).is_err());
        assert!(Pattern::new(vec![PatternItem::Mask, PatternItem::Mask, PatternItem::Instance]).is_err());
    }

    #[test]
    fn verbalizer_scores_argmax_with_tie_to_lowest_label() {
        let v = Verbalizer::default_cls(64).unwrap();
        let mut row = vec![0.0; 64];
        row[LABEL_TOKENS[0] as usize] = 1.0;
        row[LABEL_TOKENS[1] as usize] = 3.0;
        let (label, scores) = verbalizer_score(&row, &v);
        assert_eq!(label, 1);
        assert_eq!(scores, vec![(0, 1.0), (1, 3.0)]);

        // Exact tie goes to label 0.
        row[LABEL_TOKENS[0] as usize] = 3.0;
        assert_eq!(verbalizer_score(&row, &v).0, 0);

        // Adding a constant to every logit never changes the argmax.
        let shifted: Vec<f64> = row.iter().map(|x| x + 17.5).collect();
        assert_eq!(verbalizer_score(&shifted, &v).0, 0);
    }

    #[test]
    fn verbalizer_rejects_non_injective_maps() {
        assert!(Verbalizer::new(vec![(0, 2), (1, 2)], 64).is_err());
        assert!(Verbalizer::new(vec![(0, 2), (0, 3)], 64).is_err());
        assert!(Verbalizer::new(vec![(0, 99)], 64).is_err());
    }

    #[test]
    fn dataset_round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TaskConfig::default();
        let data = gen_synthetic_cls(23, 120, &cfg).unwrap();
        data.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(data, back);

        let gen = gen_synthetic_gen(23, 60, &cfg).unwrap();
        gen.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), gen);
    }

    #[test]
    fn config_validation_rejects_small_vocab_and_bad_payload() {
        let mut cfg = TaskConfig::default();
        cfg.vocab_size = 10;
        assert!(cfg.validate().is_err());
        let mut cfg = TaskConfig::default();
        cfg.payload_len = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = TaskConfig::default();
        cfg.n_pairs = 9;
        assert!(cfg.validate().is_err());
    }
}
