//! Joint training of the language model and prompt parameters.
//!
//! One optimizer step works on the mean loss of a batch, where each
//! instance contributes its own computation graph (sequences are short
//! enough at this scale that per-example graphs beat padded batching).
//! Classification instances are rendered through a [`Pattern`] and
//! scored with a restricted cross-entropy over the verbalizer tokens;
//! generation instances use next-token cross-entropy over the target
//! continuation. Model selection picks the epoch with the best dev
//! metric.

pub mod checkpoint;
pub mod optim;

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipl::{GatePolicy, PromptModule, PromptVars};
use crate::model::{LmVars, Mode, ModelConfig, TransformerLM};
use crate::numerics::{Tape, Tensor, VarId};
use crate::tasks::{format_pattern, verbalizer_score, Instance, Pattern, Verbalizer};
use optim::{clip_global_norm, Adam, MAX_GRAD_NORM};

/// Which parameters train, and whether prompts are gated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Instance-gated prompts; updates prompt, projections, and model.
    Ipl,
    /// Fixed soft prompts; updates prompt and model.
    PromptTuning,
    /// No prompt at all; updates the model only.
    FinetunePet,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "ipl" => Ok(Method::Ipl),
            "prompt_tuning" => Ok(Method::PromptTuning),
            "finetune_pet" => Ok(Method::FinetunePet),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ipl => "ipl",
            Method::PromptTuning => "prompt_tuning",
            Method::FinetunePet => "finetune_pet",
        })
    }
}

/// Parameter precision. 32-bit runs round every parameter through f32
/// after initialization and after each update; intermediate arithmetic
/// stays in f64 either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum FloatWidth {
    W32,
    W64,
}

impl TryFrom<u32> for FloatWidth {
    type Error = String;

    fn try_from(v: u32) -> std::result::Result<Self, String> {
        match v {
            32 => Ok(FloatWidth::W32),
            64 => Ok(FloatWidth::W64),
            other => Err(format!("float width must be 32 or 64, got {other}")),
        }
    }
}

impl From<FloatWidth> for u32 {
    fn from(w: FloatWidth) -> u32 {
        match w {
            FloatWidth::W32 => 32,
            FloatWidth::W64 => 64,
        }
    }
}

/// Optimization settings; everything a run needs besides the model shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub method: Method,
    pub prompt_length: usize,
    /// Projection width for the gate; defaults to the embedding width.
    pub d_h: Option<usize>,
    pub float_width: FloatWidth,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            method: Method::Ipl,
            prompt_length: 16,
            d_h: None,
            float_width: FloatWidth::W64,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.method == Method::FinetunePet && self.prompt_length != 0 {
            return Err(Error::Config(
                "finetune_pet uses no prompt; set prompt_length to 0".into(),
            ));
        }
        if self.d_h == Some(0) {
            return Err(Error::Config("d_h must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of metrics.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("epoch record serializes")
    }
}

/// Writes one epoch record per line.
pub fn write_metrics(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for r in records {
        writeln!(f, "{}", r.to_json_line())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev: f64,
}

/// Evaluation over one split: accuracy for classification instances,
/// greedy exact match for generation instances.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metric: f64,
    pub correct: Vec<bool>,
    /// Per-instance gate values, present only under [`Method::Ipl`].
    pub gates: Option<Vec<Vec<f64>>>,
}

/// Owns the models and the optimizer state for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    lm: TransformerLM,
    pm: PromptModule,
    optim: OptimConfig,
    pattern: Pattern,
    verbalizer: Option<Verbalizer>,
    adam: Adam,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    /// Fresh models from the two configs. The prompt is seeded from the
    /// run seed (offset so it does not mirror the model draw), and the
    /// batch-order generator from a further offset.
    pub fn new(
        model: ModelConfig,
        optim: OptimConfig,
        pattern: Pattern,
        verbalizer: Option<Verbalizer>,
    ) -> Result<Self> {
        optim.validate()?;
        let lm = TransformerLM::init(model, optim.seed)?;
        let pm = PromptModule::init(
            optim.prompt_length,
            optim.d_h.unwrap_or(lm.config().d_e),
            &lm,
            optim.seed.wrapping_add(1),
        )?;
        Self::from_parts(lm, pm, optim, pattern, verbalizer)
    }

    /// Wraps existing models (e.g. loaded from a checkpoint).
    pub fn from_parts(
        mut lm: TransformerLM,
        mut pm: PromptModule,
        optim: OptimConfig,
        pattern: Pattern,
        verbalizer: Option<Verbalizer>,
    ) -> Result<Self> {
        optim.validate()?;
        if pm.l() != optim.prompt_length {
            return Err(Error::Config(format!(
                "prompt module has {} tokens but config says {}",
                pm.l(),
                optim.prompt_length
            )));
        }
        if optim.prompt_length >= lm.config().max_len {
            return Err(Error::Config(format!(
                "prompt_length {} leaves no room for instances within max_len {}",
                optim.prompt_length,
                lm.config().max_len
            )));
        }
        if optim.float_width == FloatWidth::W32 {
            quantize_f32(&mut lm, &mut pm);
        }
        let shapes: Vec<Vec<usize>> = trainable_params(&lm, &pm, optim.method)
            .into_iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let adam = Adam::new(&shapes)?;
        let rng = ChaCha8Rng::seed_from_u64(optim.seed.wrapping_add(2));
        Ok(Self {
            lm,
            pm,
            optim,
            pattern,
            verbalizer,
            adam,
            rng,
            step: 0,
        })
    }

    pub fn lm(&self) -> &TransformerLM {
        &self.lm
    }

    pub fn pm(&self) -> &PromptModule {
        &self.pm
    }

    pub fn optim(&self) -> &OptimConfig {
        &self.optim
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Test hook: direct mutable access to a parameter by name.
    #[cfg(test)]
    fn param_mut(&mut self, name: &str) -> &mut Tensor {
        let lm_params = self.lm.parameters_mut();
        if let Some(i) = lm_params.iter().position(|(n, _)| n == name) {
            return lm_params.into_iter().nth(i).unwrap().1;
        }
        self.pm
            .parameters_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .expect("parameter exists")
    }

    /// One optimizer step on the mean loss over `batch`. Returns that
    /// loss. A non-finite loss aborts with the current step index.
    pub fn train_step(&mut self, batch: &[Instance]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        self.step += 1;

        let mut tape = Tape::new();
        let lv = self.lm.register(&mut tape);
        let pv = self.pm.register(&mut tape);
        let mut total: Option<VarId> = None;
        for inst in batch {
            let loss = self.instance_loss(&mut tape, &lv, &pv, inst)?;
            total = Some(match total {
                None => loss,
                Some(t) => tape.add(t, loss)?,
            });
        }
        let mean = tape.scale(total.expect("batch is non-empty"), 1.0 / batch.len() as f64);
        let loss_value = tape.value(mean).item();
        if !loss_value.is_finite() {
            return Err(Error::TrainingDiverged { step: self.step });
        }

        let mut grads = tape.backward(mean)?;
        let handles = trainable_handles(&lv, &pv, self.optim.method);
        let mut grad_list: Vec<Option<Tensor>> =
            handles.iter().map(|&var| grads.take(var)).collect();
        clip_global_norm(&mut grad_list, MAX_GRAD_NORM);

        let mut params = trainable_params_mut(&mut self.lm, &mut self.pm, self.optim.method);
        self.adam
            .step(self.optim.learning_rate, &mut params, &grad_list)?;
        drop(params);
        if self.optim.float_width == FloatWidth::W32 {
            quantize_f32(&mut self.lm, &mut self.pm);
        }
        Ok(loss_value)
    }

    /// Full training loop: shuffled batches each epoch, a dev evaluation
    /// per epoch (reported through `on_epoch`), and best-dev model
    /// selection applied to the trainer's models before returning.
    pub fn fit(
        &mut self,
        train: &[Instance],
        dev: &[Instance],
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<FitReport> {
        if train.is_empty() || dev.is_empty() {
            return Err(Error::Config(
                "training needs non-empty train and dev splits".into(),
            ));
        }
        let mut history = Vec::with_capacity(self.optim.epochs);
        let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=self.optim.epochs {
            order.shuffle(&mut self.rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(self.optim.batch_size) {
                let batch: Vec<Instance> = chunk.iter().map(|&i| train[i].clone()).collect();
                loss_sum += self.train_step(&batch)? * batch.len() as f64;
            }
            let dev_report = self.evaluate(dev)?;
            let record = EpochRecord {
                epoch,
                train_loss: loss_sum / train.len() as f64,
                dev_metric: dev_report.metric,
            };
            // On dev-metric ties, prefer the later epoch: the extra
            // training refines parameters the dev metric is blind to
            // (gate projections keep developing after accuracy saturates).
            if best.as_ref().is_none_or(|(_, m, _)| record.dev_metric >= *m) {
                best = Some((epoch, record.dev_metric, self.snapshot()));
            }
            on_epoch(&record);
            history.push(record);
        }
        let (best_epoch, best_dev, snap) = best.expect("at least one epoch ran");
        self.restore(&snap);
        Ok(FitReport {
            history,
            best_epoch,
            best_dev,
        })
    }

    pub fn evaluate(&self, split: &[Instance]) -> Result<EvalReport> {
        evaluate(
            &self.lm,
            &self.pm,
            self.optim.method,
            &self.pattern,
            self.verbalizer.as_ref(),
            split,
        )
    }

    fn instance_loss(
        &self,
        tape: &mut Tape,
        lv: &LmVars,
        pv: &PromptVars,
        inst: &Instance,
    ) -> Result<VarId> {
        match (&inst.label, &inst.target) {
            (Some(label), None) => self.classification_loss(tape, lv, pv, inst, *label),
            (None, Some(target)) => self.generation_loss(tape, lv, pv, inst, target),
            _ => Err(Error::Config(
                "instance must carry exactly one of label or target".into(),
            )),
        }
    }

    fn classification_loss(
        &self,
        tape: &mut Tape,
        lv: &LmVars,
        pv: &PromptVars,
        inst: &Instance,
        label: u32,
    ) -> Result<VarId> {
        let v = self.verbalizer()?;
        let target_idx = verbalizer_index(v, label)?;
        let budget = self.lm.config().max_len - self.pm.l();
        let (tokens, mask_pos) =
            format_pattern(inst, &self.pattern, self.lm.config().mode, budget)?;
        let (logits, _) = method_forward(
            tape,
            &self.lm,
            lv,
            &self.pm,
            pv,
            self.optim.method,
            &tokens,
        )?;
        let row = TransformerLM::mask_logits(tape, logits, &[self.pm.l() + mask_pos])?;
        let idx: Vec<usize> = v.tokens().iter().map(|&t| t as usize).collect();
        let restricted = tape.gather_cols(row, idx)?;
        tape.softmax_cross_entropy(restricted, &[target_idx as u32], &[1.0])
    }

    fn generation_loss(
        &self,
        tape: &mut Tape,
        lv: &LmVars,
        pv: &PromptVars,
        inst: &Instance,
        target: &[u32],
    ) -> Result<VarId> {
        check_generation(self.lm.config(), target)?;
        let mut seq = inst.tokens.clone();
        seq.extend_from_slice(target);
        let (logits, _) = method_forward(
            tape,
            &self.lm,
            lv,
            &self.pm,
            pv,
            self.optim.method,
            &seq,
        )?;
        // Row l + n_in - 1 + k predicts target[k].
        let base = self.pm.l() + inst.tokens.len() - 1;
        let rows: Vec<usize> = (0..target.len()).map(|k| base + k).collect();
        let picked = tape.gather_rows(logits, rows)?;
        tape.softmax_cross_entropy(picked, target, &vec![1.0; target.len()])
    }

    fn verbalizer(&self) -> Result<&Verbalizer> {
        self.verbalizer
            .as_ref()
            .ok_or_else(|| Error::Config("classification instances need a verbalizer".into()))
    }

    fn snapshot(&self) -> Vec<Tensor> {
        self.lm
            .parameters()
            .into_iter()
            .chain(self.pm.parameters())
            .map(|(_, t)| t.clone())
            .collect()
    }

    fn restore(&mut self, snap: &[Tensor]) {
        let params = self
            .lm
            .parameters_mut()
            .into_iter()
            .chain(self.pm.parameters_mut());
        for ((_, p), s) in params.zip(snap) {
            p.data_mut().copy_from_slice(s.data());
        }
    }
}

/// Evaluates a split with frozen parameters. Classification accuracy
/// uses the verbalizer argmax at the mask position; generation decodes
/// greedily for exactly the target length and scores exact match. Gate
/// values are collected per instance under [`Method::Ipl`].
pub fn evaluate(
    lm: &TransformerLM,
    pm: &PromptModule,
    method: Method,
    pattern: &Pattern,
    verbalizer: Option<&Verbalizer>,
    split: &[Instance],
) -> Result<EvalReport> {
    let mut correct = Vec::with_capacity(split.len());
    let mut gates: Vec<Vec<f64>> = Vec::with_capacity(split.len());
    for inst in split {
        let (ok, gate) = match (&inst.label, &inst.target) {
            (Some(label), None) => {
                let v = verbalizer.ok_or_else(|| {
                    Error::Config("classification instances need a verbalizer".into())
                })?;
                eval_classification(lm, pm, method, pattern, v, inst, *label)?
            }
            (None, Some(target)) => eval_generation(lm, pm, method, inst, target)?,
            _ => {
                return Err(Error::Config(
                    "instance must carry exactly one of label or target".into(),
                ))
            }
        };
        correct.push(ok);
        if let Some(g) = gate {
            gates.push(g);
        }
    }
    let metric = correct.iter().filter(|&&c| c).count() as f64 / split.len().max(1) as f64;
    Ok(EvalReport {
        metric,
        correct,
        gates: (method == Method::Ipl).then_some(gates),
    })
}

fn eval_classification(
    lm: &TransformerLM,
    pm: &PromptModule,
    method: Method,
    pattern: &Pattern,
    v: &Verbalizer,
    inst: &Instance,
    label: u32,
) -> Result<(bool, Option<Vec<f64>>)> {
    verbalizer_index(v, label)?;
    let budget = lm.config().max_len - pm.l();
    let (tokens, mask_pos) = format_pattern(inst, pattern, lm.config().mode, budget)?;
    let mut tape = Tape::new();
    let lv = lm.register(&mut tape);
    let pv = pm.register(&mut tape);
    let (logits, gate) = method_forward(&mut tape, lm, &lv, pm, &pv, method, &tokens)?;
    let row = tape.value(logits).row(pm.l() + mask_pos).to_vec();
    let (predicted, _) = verbalizer_score(&row, v);
    Ok((predicted == label, gate.map(|g| g.values(&tape))))
}

fn eval_generation(
    lm: &TransformerLM,
    pm: &PromptModule,
    method: Method,
    inst: &Instance,
    target: &[u32],
) -> Result<(bool, Option<Vec<f64>>)> {
    check_generation(lm.config(), target)?;
    if pm.l() + inst.tokens.len() + target.len() > lm.config().max_len {
        return Err(Error::SequenceTooLong {
            len: pm.l() + inst.tokens.len() + target.len(),
            max_len: lm.config().max_len,
        });
    }
    let mut seq = inst.tokens.clone();
    let mut first_gates: Option<Vec<f64>> = None;
    let mut emitted = Vec::with_capacity(target.len());
    for _ in 0..target.len() {
        let mut tape = Tape::new();
        let lv = lm.register(&mut tape);
        let pv = pm.register(&mut tape);
        let (logits, gate) = method_forward(&mut tape, lm, &lv, pm, &pv, method, &seq)?;
        if first_gates.is_none() {
            // Gates of the bare input prefix, before any emitted token.
            first_gates = Some(gate.map(|g| g.values(&tape)).unwrap_or_default());
        }
        let row = tape.value(logits).row(pm.l() + seq.len() - 1);
        let next = argmax_lowest(row);
        emitted.push(next);
        seq.push(next);
    }
    let gates = (method == Method::Ipl).then(|| first_gates.unwrap_or_default());
    Ok((emitted == target, gates))
}

/// Dispatches the forward pass for a method; gates come back only for
/// [`Method::Ipl`]. Instances are never padded here, so every position
/// is valid.
fn method_forward(
    tape: &mut Tape,
    lm: &TransformerLM,
    lv: &LmVars,
    pm: &PromptModule,
    pv: &PromptVars,
    method: Method,
    tokens: &[u32],
) -> Result<(VarId, Option<crate::ipl::GateVector>)> {
    match method {
        Method::Ipl => {
            let valid = vec![true; tokens.len()];
            let fwd = pm.forward_ipl(tape, pv, lm, lv, tokens, &valid, GatePolicy::Learned)?;
            Ok((fwd.output.logits, Some(fwd.gate)))
        }
        Method::PromptTuning | Method::FinetunePet => {
            let out = pm.forward_prompt_tuning(tape, pv, lm, lv, tokens)?;
            Ok((out.logits, None))
        }
    }
}

fn check_generation(config: &ModelConfig, target: &[u32]) -> Result<()> {
    if config.mode != Mode::Causal {
        return Err(Error::Config(
            "generation instances require causal mode".into(),
        ));
    }
    if target.is_empty() {
        return Err(Error::Config("generation target is empty".into()));
    }
    Ok(())
}

fn verbalizer_index(v: &Verbalizer, label: u32) -> Result<usize> {
    v.pairs()
        .iter()
        .position(|&(l, _)| l == label)
        .ok_or_else(|| Error::Config(format!("label {label} is not in the verbalizer")))
}

fn argmax_lowest(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Settings for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Instances in the probe batch.
    pub batch: usize,
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per parameter group (spread evenly); `None`
    /// checks every coordinate.
    pub samples_per_group: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            batch: 4,
            step: crate::numerics::DEFAULT_STEP,
            samples_per_group: Some(16),
            seed: 0,
        }
    }
}

/// Compares backpropagated gradients against central finite differences
/// for every trainable parameter group, on a batch of synthetic
/// classification instances.
///
/// Parameters are redrawn at generic scales (weights well away from
/// zero, layer-norm gains near one) before checking: finite differences
/// divide rounding noise of the loss by `2 * step`, so coordinates whose
/// true gradient sits below roughly `1e-6` cannot be certified at
/// `step = 1e-5` no matter how correct the backward pass is. A generic
/// parameter point keeps every group's gradients well above that floor;
/// the initialization point, with its near-zero projections, does not.
pub fn grad_check(
    model: ModelConfig,
    optim: OptimConfig,
    check: &GradCheckConfig,
) -> Result<crate::numerics::GradCheckReport> {
    use crate::numerics::finite_diff_check;
    use crate::tasks::{gen_synthetic_cls, TaskConfig};

    let verbalizer = Verbalizer::default_cls(model.vocab_size)?;
    let mut trainer = Trainer::new(model, optim, Pattern::default_cls(), Some(verbalizer))?;
    redraw_generic(&mut trainer.lm, &mut trainer.pm, check.seed);

    let task = TaskConfig {
        vocab_size: trainer.lm.config().vocab_size,
        ..TaskConfig::default()
    };
    let n = check.batch.max(1);
    let data = gen_synthetic_cls(check.seed.wrapping_add(101), (8 * n).max(16), &task)?;
    let batch: Vec<Instance> = data.train[..n].to_vec();

    let grads = trainer.batch_gradients(&batch)?;
    let eval = |name: &str, idx: usize, delta: f64| -> Result<f64> {
        let slot = {
            let mut params = trainable_params_mut(
                &mut trainer.lm,
                &mut trainer.pm,
                trainer.optim.method,
            );
            let (_, t) = params
                .iter_mut()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            let original = t.data()[idx];
            t.data_mut()[idx] = original + delta;
            original
        };
        let loss = trainer.batch_loss(&batch);
        // Restore the exact original bits, not original + d - d.
        let mut params =
            trainable_params_mut(&mut trainer.lm, &mut trainer.pm, trainer.optim.method);
        let (_, t) = params.iter_mut().find(|(n, _)| n == name).expect("found above");
        t.data_mut()[idx] = slot;
        loss
    };
    finite_diff_check(&grads, eval, check.step, check.samples_per_group)
}

impl Trainer {
    /// Mean batch loss without touching optimizer state.
    fn batch_loss(&self, batch: &[Instance]) -> Result<f64> {
        let (tape, _, _, mean) = self.batch_graph(batch)?;
        Ok(tape.value(mean).item())
    }

    /// Backpropagated gradients of the mean batch loss for every
    /// trainable group, as owned `(name, tensor)` pairs.
    fn batch_gradients(&self, batch: &[Instance]) -> Result<Vec<(String, Tensor)>> {
        let (tape, lv, pv, mean) = self.batch_graph(batch)?;
        let mut grads = tape.backward(mean)?;
        let names: Vec<String> = trainable_params(&self.lm, &self.pm, self.optim.method)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let handles = trainable_handles(&lv, &pv, self.optim.method);
        names
            .into_iter()
            .zip(handles)
            .map(|(name, var)| {
                let g = grads
                    .take(var)
                    .ok_or_else(|| Error::Config(format!("no gradient reached {name}")))?;
                Ok((name, g))
            })
            .collect()
    }

    fn batch_graph(&self, batch: &[Instance]) -> Result<(Tape, LmVars, PromptVars, VarId)> {
        let mut tape = Tape::new();
        let lv = self.lm.register(&mut tape);
        let pv = self.pm.register(&mut tape);
        let mut total: Option<VarId> = None;
        for inst in batch {
            let loss = self.instance_loss(&mut tape, &lv, &pv, inst)?;
            total = Some(match total {
                None => loss,
                Some(t) => tape.add(t, loss)?,
            });
        }
        let mean = tape.scale(
            total.ok_or_else(|| Error::Config("empty batch".into()))?,
            1.0 / batch.len() as f64,
        );
        Ok((tape, lv, pv, mean))
    }
}

/// Redraws parameters at scales that keep activations and gradients in
/// a generic range: embeddings and weights O(0.1), gains near 1, small
/// biases, and gate projections sized so pre-sigmoid relevance means
/// stay well inside the sigmoid's linear region.
fn redraw_generic(lm: &mut TransformerLM, pm: &mut PromptModule, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
    let params = lm.parameters_mut().into_iter().chain(pm.parameters_mut());
    for (name, t) in params {
        let short = name.rsplit('.').next().unwrap_or(&name);
        let (center, std) = match short {
            "ln1_g" | "ln2_g" | "ln_f_g" => (1.0, 0.2),
            "ln1_b" | "ln2_b" | "ln_f_b" | "b_q" | "b_v" | "b_o" | "b1" | "b2" => (0.0, 0.05),
            "w_m" | "w_n" => (0.0, 0.05),
            "tok_emb" | "pos_emb" | "p" => (0.0, 0.3),
            _ => (0.0, 0.15),
        };
        let shape = t.shape().to_vec();
        let draw = Tensor::randn(shape, std, &mut rng).expect("shape is valid");
        for (x, d) in t.data_mut().iter_mut().zip(draw.data()) {
            *x = center + d;
        }
    }
}

/// Rounds every parameter through f32.
fn quantize_f32(lm: &mut TransformerLM, pm: &mut PromptModule) {
    let params = lm.parameters_mut().into_iter().chain(pm.parameters_mut());
    for (_, t) in params {
        for x in t.data_mut() {
            *x = *x as f32 as f64;
        }
    }
}

/// The (name, tensor) list a method trains, in update order: model
/// parameters, then prompt parameters.
fn trainable_params<'a>(
    lm: &'a TransformerLM,
    pm: &'a PromptModule,
    method: Method,
) -> Vec<(String, &'a Tensor)> {
    let mut out = lm.parameters();
    match method {
        Method::Ipl => out.extend(pm.parameters()),
        // Prompt tuning trains the prompt itself but not the gate
        // projections, which its forward pass never touches.
        Method::PromptTuning => out.extend(pm.parameters().into_iter().take(1)),
        Method::FinetunePet => {}
    }
    out
}

fn trainable_params_mut<'a>(
    lm: &'a mut TransformerLM,
    pm: &'a mut PromptModule,
    method: Method,
) -> Vec<(String, &'a mut Tensor)> {
    let mut out = lm.parameters_mut();
    match method {
        Method::Ipl => out.extend(pm.parameters_mut()),
        Method::PromptTuning => out.extend(pm.parameters_mut().into_iter().take(1)),
        Method::FinetunePet => {}
    }
    out
}

/// Tape handles aligned with [`trainable_params`].
fn trainable_handles(lv: &LmVars, pv: &PromptVars, method: Method) -> Vec<VarId> {
    let mut out = lv.ordered();
    let prompt = [pv.p(), pv.w_m(), pv.w_n()];
    let keep = match method {
        Method::Ipl => 3,
        Method::PromptTuning => 1,
        Method::FinetunePet => 0,
    };
    out.extend(prompt.into_iter().take(keep).flatten());
    out
}
