//! Training: per-stage cross-entropy with Adam and the published schedules,
//! then self-critical fine-tuning with a CIDEr reward and greedy baseline.
//!
//! Both phases run on a single tape per batch: the model is bound once, every
//! record's unroll shares those leaves, and one backward sweep produces the
//! whole gradient. Updates are single-writer; all randomness flows from one
//! seeded generator, so a fixed seed reproduces checkpoints bitwise.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_checkpoint_expecting, save_checkpoint, Dataset, DatasetRecord, Vocabulary, EOS,
};
use crate::metrics::{build_idf, cider, tokenize, IdfTable};
use crate::stack::{
    bind_model, decode_greedy, decode_sample, prepare_inputs, unroll_teacher_forced, ModelParams,
    StackConfig,
};
use crate::tensor::{NodeId, Tape, Tensor};
use crate::{Error, Result};

fn default_xe_lr() -> f64 {
    5e-4
}
fn default_lr_decay() -> f64 {
    0.8
}
fn default_lr_decay_every() -> usize {
    3
}
fn default_ss_increment() -> f64 {
    0.05
}
fn default_ss_every() -> usize {
    5
}
fn default_ss_cap() -> f64 {
    0.25
}
fn default_batch_size() -> usize {
    78
}
fn default_max_epochs() -> usize {
    100
}
fn default_scst_lr() -> f64 {
    5e-5
}
fn default_scst_start() -> usize {
    30
}
fn default_grad_clip() -> f64 {
    10.0
}
fn default_vocab_min_count() -> usize {
    5
}

/// Training hyperparameters. The defaults are the published settings:
/// cross-entropy at 5e-4 shrunk by 0.8 every 3 epochs, scheduled sampling
/// growing 0.05 every 5 epochs up to 0.25, batch 78, and after 30 epochs
/// self-critical fine-tuning at a constant 5e-5.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_xe_lr")]
    pub xe_lr: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_lr_decay_every")]
    pub lr_decay_every: usize,
    #[serde(default = "default_ss_increment")]
    pub ss_increment: f64,
    #[serde(default = "default_ss_every")]
    pub ss_every: usize,
    #[serde(default = "default_ss_cap")]
    pub ss_cap: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_scst_lr")]
    pub scst_lr: f64,
    #[serde(default = "default_scst_start")]
    pub scst_start: usize,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_vocab_min_count")]
    pub vocab_min_count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stop the cross-entropy phase early once the per-epoch loss (nats per
    /// token per stage) drops below this threshold.
    #[serde(default)]
    pub stop_at_xe: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.xe_lr <= 0.0 || self.scst_lr <= 0.0 || self.lr_decay <= 0.0 {
            return Err(Error::Config("learning rates and decay must be positive".into()));
        }
        if self.ss_increment < 0.0 || !(0.0..=1.0).contains(&self.ss_cap) {
            return Err(Error::Config(
                "scheduled-sampling increment must be nonnegative and cap within [0,1]".into(),
            ));
        }
        if self.batch_size == 0 || self.lr_decay_every == 0 || self.ss_every == 0 {
            return Err(Error::Config("batch size and schedule periods must be positive".into()));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        if self.vocab_min_count == 0 {
            return Err(Error::Config("vocab_min_count must be at least 1".into()));
        }
        Ok(())
    }

    /// Cross-entropy learning rate at `epoch`: xe_lr · decay^⌊epoch/period⌋.
    pub fn lr_schedule(&self, epoch: usize) -> f64 {
        self.xe_lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    /// Scheduled-sampling probability at `epoch`, capped.
    pub fn ss_schedule(&self, epoch: usize) -> f64 {
        (self.ss_increment * (epoch / self.ss_every) as f64).min(self.ss_cap)
    }
}

/// Cross-entropy over concrete distributions: −Σ_stages Σ_steps log p(gold).
/// `stage_dists[i][k]` is stage i's distribution at step k.
pub fn xe_loss(stage_dists: &[Vec<Tensor>], gold: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for dists in stage_dists {
        if dists.len() != gold.len() {
            return Err(Error::Shape(format!(
                "{} distributions for {} gold tokens",
                dists.len(),
                gold.len()
            )));
        }
        // Per-stage subtotal first, so the total decomposes into independent
        // per-stage losses bit-exactly.
        let mut stage_total = 0.0;
        for (dist, &id) in dists.iter().zip(gold) {
            let p = dist
                .values()
                .get(id)
                .copied()
                .ok_or_else(|| Error::Shape(format!("gold token {id} outside distribution")))?;
            stage_total -= p.max(crate::tensor::LOG_CLAMP).ln();
        }
        total += stage_total;
    }
    Ok(total)
}

/// Tape version of [`xe_loss`]; `dists[t][stage]` as produced by the unroll.
pub fn xe_loss_on_tape(tape: &mut Tape, dists: &[Vec<NodeId>], gold: &[usize]) -> Result<NodeId> {
    if dists.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} unrolled steps for {} gold tokens",
            dists.len(),
            gold.len()
        )));
    }
    let mut acc: Option<NodeId> = None;
    for (stage_dists, &id) in dists.iter().zip(gold) {
        for &dist in stage_dists {
            let nll = tape.nll_gather(dist, id)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, nll)?,
                None => nll,
            });
        }
    }
    acc.ok_or_else(|| Error::Data("cross-entropy over an empty sequence".into()))
}

/// Adam moment tables, keyed by parameter name.
#[derive(Debug, Default)]
pub struct AdamState {
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
    step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Missing gradient entries count as
/// zero; a non-finite gradient is a numeric failure naming the parameter.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &HashMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let mc = 1.0 - ADAM_BETA1.powi(t);
    let vc = 1.0 - ADAM_BETA2.powi(t);
    let mut failure = None;
    params.for_each_mut(&mut |name, tensor| {
        let Some(grad) = grads.get(&name) else { return };
        if !grad.is_finite() {
            failure.get_or_insert(name.clone());
            return;
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; tensor.len()]);
        let v = state.v.entry(name).or_insert_with(|| vec![0.0; tensor.len()]);
        for ((p, &g), (mi, vi)) in
            tensor.values_mut().iter_mut().zip(grad.values()).zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*mi / mc) / ((*vi / vc).sqrt() + ADAM_EPS);
        }
    });
    match failure {
        Some(name) => Err(Error::Numeric(format!("non-finite gradient for parameter {name}"))),
        None => Ok(()),
    }
}

/// Scale all gradients down to a global L2 norm of `max_norm` when they
/// exceed it; returns the pre-clip norm.
pub fn clip_gradients(grads: &mut HashMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm: f64 = grads
        .values()
        .map(|t| t.values().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            for g in t.values_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// Gold ids for a caption: tokenized content words (truncated to leave room)
/// plus the trailing `<eos>`.
pub fn encode_gold(vocab: &Vocabulary, caption: &str, t_max: usize) -> Result<Vec<usize>> {
    if t_max < 2 {
        return Err(Error::Config("t_max must leave room for a word and <eos>".into()));
    }
    let mut ids = vocab.encode(caption);
    ids.truncate(t_max - 1);
    ids.push(EOS);
    Ok(ids)
}

/// One cross-entropy update over a batch of (record, gold) pairs; returns the
/// summed loss and the number of gold tokens.
fn xe_batch_grads(
    m: &ModelParams,
    cfg: &StackConfig,
    batch: &[(&DatasetRecord, Vec<usize>)],
    ss_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize, HashMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, m)?;
    let mut acc: Option<NodeId> = None;
    let mut n_tokens = 0;
    for (record, gold) in batch {
        let v0 = feature_rows(record, cfg)?;
        let inputs = prepare_inputs(&mut tape, &bound, cfg, &v0, &record.attribute_ids)?;
        let (dists, _) = unroll_teacher_forced(&mut tape, &bound, cfg, &inputs, gold, ss_prob, rng)?;
        let loss = xe_loss_on_tape(&mut tape, &dists, gold)?;
        n_tokens += gold.len();
        acc = Some(match acc {
            Some(a) => tape.add(a, loss)?,
            None => loss,
        });
    }
    let loss = acc.ok_or_else(|| Error::Data("empty training batch".into()))?;
    let table = tape.backward(loss)?;
    let grads = bound.names.iter().map(|(n, id)| (n.clone(), table.get(*id))).collect();
    Ok((tape.value(loss).values()[0], n_tokens, grads))
}

fn feature_rows(record: &DatasetRecord, cfg: &StackConfig) -> Result<Vec<Tensor>> {
    if record.features.shape() != [cfg.n_v, cfg.d_v] {
        return Err(Error::Data(format!(
            "record {} features {:?} do not match config {}x{}",
            record.image_id,
            record.features.shape(),
            cfg.n_v,
            cfg.d_v
        )));
    }
    Ok((0..cfg.n_v)
        .map(|r| {
            Tensor::vector(record.features.values()[r * cfg.d_v..(r + 1) * cfg.d_v].to_vec())
        })
        .collect())
}

/// Sequence-level reward for self-critical training.
pub trait Reward {
    /// Score a decoded token sequence against a record's references.
    fn score(&self, record: &DatasetRecord, tokens: &[usize]) -> Result<f64>;
}

/// CIDEr against the record's own references, with the IDF table prepared
/// once over the whole training reference corpus.
pub struct CiderReward {
    vocab: Vocabulary,
    idf: IdfTable,
}

impl CiderReward {
    pub fn new(dataset: &Dataset, vocab: Vocabulary) -> Result<Self> {
        let corpus: Vec<Vec<Vec<String>>> = dataset
            .records
            .iter()
            .map(|r| r.references.iter().map(|c| tokenize(c)).collect())
            .collect();
        Ok(CiderReward { vocab, idf: build_idf(&corpus)? })
    }

    pub fn idf(&self) -> &IdfTable {
        &self.idf
    }
}

impl Reward for CiderReward {
    fn score(&self, record: &DatasetRecord, tokens: &[usize]) -> Result<f64> {
        let caption = self.vocab.decode(tokens)?;
        let cand = vec![tokenize(&caption)];
        let refs = vec![record.references.iter().map(|c| tokenize(c)).collect::<Vec<_>>()];
        let (scores, _) = cider(&cand, &refs, &self.idf)?;
        Ok(scores[0])
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScstStats {
    pub mean_reward: f64,
    pub mean_baseline: f64,
}

/// One self-critical step over a batch: per record, a single Monte-Carlo
/// sample scored against the greedy decode's reward as baseline. The loss
/// attaches to the final stage's log-probability of the sample; records with
/// zero advantage contribute exactly zero gradient.
pub fn scst_step(
    m: &ModelParams,
    cfg: &StackConfig,
    batch: &[&DatasetRecord],
    reward: &dyn Reward,
    rng: &mut ChaCha8Rng,
) -> Result<(HashMap<String, Tensor>, ScstStats)> {
    if batch.is_empty() {
        return Err(Error::Data("empty self-critical batch".into()));
    }
    let mut stats = ScstStats::default();
    // Decode first so the replayed unrolls can share one gradient tape.
    let mut contributions = Vec::new();
    for record in batch {
        let v0 = feature_rows(record, cfg)?;
        let greedy = decode_greedy(m, cfg, &v0, &record.attribute_ids)?;
        let baseline = reward.score(record, &greedy.tokens)?;
        let sampled = decode_sample(m, cfg, &v0, &record.attribute_ids, rng)?;
        let r = reward.score(record, &sampled.tokens)?;
        stats.mean_reward += r;
        stats.mean_baseline += baseline;
        let advantage = r - baseline;
        if advantage != 0.0 && !sampled.tokens.is_empty() {
            contributions.push((*record, v0, sampled.tokens, advantage));
        }
    }
    stats.mean_reward /= batch.len() as f64;
    stats.mean_baseline /= batch.len() as f64;

    if contributions.is_empty() {
        return Ok((HashMap::new(), stats));
    }
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, m)?;
    let mut acc: Option<NodeId> = None;
    for (record, v0, tokens, advantage) in &contributions {
        let inputs = prepare_inputs(&mut tape, &bound, cfg, v0, &record.attribute_ids)?;
        // Replaying the sampled tokens teacher-forced reproduces the exact
        // trajectory the sampler took, so the final-stage NLL below is
        // −log p of the sample.
        let (dists, _) = unroll_teacher_forced(&mut tape, &bound, cfg, &inputs, tokens, 0.0, rng)?;
        let mut nll: Option<NodeId> = None;
        for (stage_dists, &id) in dists.iter().zip(tokens.iter()) {
            let final_dist = *stage_dists.last().expect("n_stages >= 1");
            let term = tape.nll_gather(final_dist, id)?;
            nll = Some(match nll {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        let nll = nll.expect("non-empty sample");
        let weighted = tape.scalar_mul(nll, *advantage)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, weighted)?,
            None => weighted,
        });
    }
    let loss = acc.expect("at least one contribution");
    let table = tape.backward(loss)?;
    let grads = bound.names.iter().map(|(n, id)| (n.clone(), table.get(*id))).collect();
    Ok((grads, stats))
}

/// Which training phases to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Xe,
    Scst,
    Both,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub epochs_run: usize,
    /// Last cross-entropy loss in nats per token per stage.
    pub last_xe_loss: Option<f64>,
    pub vocab: Vocabulary,
    pub config: StackConfig,
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch{epoch:04}.svsc"))
}

fn epoch_from_path(path: &Path) -> Option<usize> {
    path.file_stem()?.to_str()?.strip_prefix("epoch")?.parse().ok()
}

/// Full training loop: vocabulary, cross-entropy phase, self-critical phase,
/// a checkpoint per epoch, and a JSON-lines log in `out_dir`.
pub fn train(
    stack_cfg: &StackConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
    phase: Phase,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    dataset.validate()?;
    let vocab = crate::data::build_vocab(&dataset.all_references(), cfg.vocab_min_count)?;
    let mut model_cfg = stack_cfg.clone();
    if model_cfg.d_p == 0 {
        model_cfg.d_p = vocab.len();
    } else if model_cfg.d_p != vocab.len() {
        return Err(Error::Config(format!(
            "configured vocabulary size {} but the corpus builds {} tokens",
            model_cfg.d_p,
            vocab.len()
        )));
    }
    model_cfg.validate()?;
    if model_cfg.n_v != dataset.n_v || model_cfg.d_v != dataset.d_v || model_cfg.n_e != dataset.n_e
    {
        return Err(Error::Data(format!(
            "config (n_v={}, d_v={}, n_e={}) does not match dataset (n_v={}, d_v={}, n_e={})",
            model_cfg.n_v, model_cfg.d_v, model_cfg.n_e, dataset.n_v, dataset.d_v, dataset.n_e
        )));
    }

    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut params, start_epoch) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint_expecting(path, &model_cfg)?;
            let start = epoch_from_path(path).map(|e| e + 1).unwrap_or(0);
            (ckpt.params, start)
        }
        None => (ModelParams::init(&model_cfg, dataset.attribute_vocab.len(), &mut rng), 0),
    };
    let mut adam = AdamState::new();
    let reward = CiderReward::new(dataset, vocab.clone())?;
    let mut log = fs::OpenOptions::new().create(true).append(true).open(out_dir.join("train_log.jsonl"))?;

    let golds: Vec<Vec<usize>> = dataset
        .records
        .iter()
        .map(|r| encode_gold(&vocab, &r.references[0], model_cfg.t_max))
        .collect::<Result<_>>()?;

    let mut last_xe_loss = None;
    let mut last_path = checkpoint_path(out_dir, start_epoch.saturating_sub(1));
    let mut epochs_run = 0;
    let mut epoch = start_epoch;
    if phase == Phase::Scst && epoch < cfg.scst_start {
        epoch = cfg.scst_start;
    }
    while epoch < cfg.max_epochs {
        let scst_phase = epoch >= cfg.scst_start;
        if scst_phase && phase == Phase::Xe {
            break;
        }
        let context = |e: Error, batch: usize| match e {
            Error::Numeric(msg) => {
                Error::Numeric(format!("epoch {epoch}, batch {batch}: {msg}"))
            }
            other => other,
        };
        let line = if !scst_phase {
            let lr = cfg.lr_schedule(epoch);
            let ss_prob = cfg.ss_schedule(epoch);
            let mut total_loss = 0.0;
            let mut total_tokens = 0usize;
            let indices: Vec<usize> = (0..dataset.records.len()).collect();
            for (bi, chunk) in indices.chunks(cfg.batch_size).enumerate() {
                let batch: Vec<(&DatasetRecord, Vec<usize>)> =
                    chunk.iter().map(|&i| (&dataset.records[i], golds[i].clone())).collect();
                let (loss, n_tokens, mut grads) =
                    xe_batch_grads(&params, &model_cfg, &batch, ss_prob, &mut rng)
                        .map_err(|e| context(e, bi))?;
                clip_gradients(&mut grads, cfg.grad_clip);
                adam_step(&mut params, &grads, &mut adam, lr).map_err(|e| context(e, bi))?;
                total_loss += loss;
                total_tokens += n_tokens;
            }
            let xe = total_loss / (model_cfg.n_stages * total_tokens) as f64;
            last_xe_loss = Some(xe);
            serde_json::json!({
                "epoch": epoch, "phase": "xe", "lr": lr, "ss_prob": ss_prob, "xe_loss": xe,
            })
        } else {
            let lr = cfg.scst_lr;
            let mut mean_r = 0.0;
            let mut mean_b = 0.0;
            let indices: Vec<usize> = (0..dataset.records.len()).collect();
            let n_batches = indices.chunks(cfg.batch_size).count();
            for (bi, chunk) in indices.chunks(cfg.batch_size).enumerate() {
                let batch: Vec<&DatasetRecord> =
                    chunk.iter().map(|&i| &dataset.records[i]).collect();
                let (mut grads, stats) =
                    scst_step(&params, &model_cfg, &batch, &reward, &mut rng)
                        .map_err(|e| context(e, bi))?;
                if !grads.is_empty() {
                    clip_gradients(&mut grads, cfg.grad_clip);
                    adam_step(&mut params, &grads, &mut adam, lr).map_err(|e| context(e, bi))?;
                }
                mean_r += stats.mean_reward;
                mean_b += stats.mean_baseline;
            }
            serde_json::json!({
                "epoch": epoch, "phase": "scst", "lr": lr, "ss_prob": 0.0,
                "mean_reward": mean_r / n_batches as f64,
                "mean_baseline": mean_b / n_batches as f64,
            })
        };
        writeln!(log, "{line}")?;
        last_path = checkpoint_path(out_dir, epoch);
        save_checkpoint(&params, &model_cfg, Some(&vocab), &last_path)?;
        epochs_run += 1;
        epoch += 1;
        if let (false, Some(threshold), Some(xe)) = (scst_phase, cfg.stop_at_xe, last_xe_loss) {
            if xe < threshold {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        final_checkpoint: last_path,
        epochs_run,
        last_xe_loss,
        vocab,
        config: model_cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, load_dataset, SyntheticSpec};

    #[test]
    fn lr_schedule_matches_published_values() {
        let cfg = TrainConfig::default();
        assert!((cfg.lr_schedule(0) - 5e-4).abs() < 1e-15);
        assert!((cfg.lr_schedule(3) - 4e-4).abs() < 1e-15);
        assert!((cfg.lr_schedule(7) - 3.2e-4).abs() < 1e-15);
    }

    #[test]
    fn ss_schedule_ramps_and_caps() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.ss_schedule(0), 0.0);
        assert_eq!(cfg.ss_schedule(4), 0.0);
        assert!((cfg.ss_schedule(5) - 0.05).abs() < 1e-15);
        assert!((cfg.ss_schedule(60) - 0.25).abs() < 1e-15);
        assert!((cfg.ss_schedule(1000) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn config_defaults_are_published_settings() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.batch_size, 78);
        assert_eq!(cfg.max_epochs, 100);
        assert_eq!(cfg.scst_start, 30);
        assert!((cfg.scst_lr - 5e-5).abs() < 1e-15);
        assert!((cfg.grad_clip - 10.0).abs() < 1e-15);
        cfg.validate().unwrap();
        assert!(serde_json::from_str::<TrainConfig>("{\"bogus\": 1}").is_err());
    }

    fn one_hot(d: usize, i: usize) -> Tensor {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        Tensor::vector(v)
    }

    #[test]
    fn xe_loss_one_hot_uniform_and_hand_values() {
        // One-hot correct everywhere: exactly zero.
        let gold = vec![1, 2];
        let dists = vec![
            vec![one_hot(4, 1), one_hot(4, 2)],
            vec![one_hot(4, 1), one_hot(4, 2)],
        ];
        assert_eq!(xe_loss(&dists, &gold).unwrap(), 0.0);

        // Uniform: N_s · N_g · ln(d_p).
        let u = Tensor::vector(vec![0.25; 4]);
        let dists = vec![vec![u.clone(), u.clone()], vec![u.clone(), u.clone()]];
        let want = 2.0 * 2.0 * 4f64.ln();
        assert!((xe_loss(&dists, &gold).unwrap() - want).abs() < 1e-12);

        // Hand-set probabilities of the gold token.
        let with_p = |p: f64, i: usize| {
            let mut v = vec![(1.0 - p) / 3.0; 4];
            v[i] = p;
            Tensor::vector(v)
        };
        let dists = vec![
            vec![with_p(0.5, 1), with_p(0.25, 2)],
            vec![with_p(0.1, 1), with_p(0.2, 2)],
        ];
        let want = -(0.5f64.ln() + 0.25f64.ln() + 0.1f64.ln() + 0.2f64.ln());
        assert!((xe_loss(&dists, &gold).unwrap() - want).abs() < 1e-12);

        // Length mismatch rejected.
        assert!(xe_loss(&[vec![one_hot(4, 1)]], &gold).is_err());
    }

    #[test]
    fn xe_loss_decomposes_per_stage_exactly() {
        let with_p = |p: f64, i: usize| {
            let mut v = vec![(1.0 - p) / 4.0; 5];
            v[i] = p;
            Tensor::vector(v)
        };
        let gold = vec![1, 3, 2];
        let s0 = vec![with_p(0.3, 1), with_p(0.6, 3), with_p(0.2, 2)];
        let s1 = vec![with_p(0.4, 1), with_p(0.1, 3), with_p(0.8, 2)];
        let total = xe_loss(&[s0.clone(), s1.clone()], &gold).unwrap();
        let parts =
            xe_loss(&[s0], &gold).unwrap() + xe_loss(&[s1], &gold).unwrap();
        assert_eq!(total, parts);
    }

    fn tiny_model() -> (StackConfig, ModelParams) {
        let cfg = StackConfig {
            n_stages: 2,
            d_v: 3,
            d_e: 2,
            d_h: 3,
            d_a: 2,
            d_s: 2,
            d_p: 5,
            n_v: 2,
            n_e: 2,
            t_max: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ModelParams::init(&cfg, 3, &mut rng);
        (cfg, params)
    }

    #[test]
    fn adam_zero_grad_is_identity_and_first_step_is_signed_lr() {
        let (cfg, params) = tiny_model();
        let mut updated = params.clone();
        let mut state = AdamState::new();
        adam_step(&mut updated, &HashMap::new(), &mut state, 1e-3).unwrap();
        assert_eq!(updated, params);
        assert_eq!(state.step_count(), 1);

        // First step with a large constant gradient moves each entry by
        // almost exactly −lr·sign(g).
        let mut updated = params.clone();
        let mut grads = HashMap::new();
        grads.insert("word_emb".to_string(), {
            let mut g = Tensor::zeros(&[cfg.d_p, cfg.d_s]);
            for (i, v) in g.values_mut().iter_mut().enumerate() {
                *v = if i % 2 == 0 { 2.0 } else { -3.0 };
            }
            g
        });
        let mut state = AdamState::new();
        adam_step(&mut updated, &grads, &mut state, 1e-3).unwrap();
        for (i, (&new, &old)) in
            updated.word_emb.values().iter().zip(params.word_emb.values()).enumerate()
        {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            assert!((new - (old - 1e-3 * sign)).abs() < 1e-8, "entry {i}");
        }

        // Same call from the same state is bit-identical.
        let mut a = params.clone();
        let mut b = params.clone();
        let mut sa = AdamState::new();
        let mut sb = AdamState::new();
        adam_step(&mut a, &grads, &mut sa, 1e-3).unwrap();
        adam_step(&mut b, &grads, &mut sb, 1e-3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_rejects_nan_gradient_by_name() {
        let (cfg, mut params) = tiny_model();
        let mut grads = HashMap::new();
        let mut g = Tensor::zeros(&[cfg.d_p, cfg.d_s]);
        g.values_mut()[0] = f64::NAN;
        grads.insert("word_emb".to_string(), g);
        let mut state = AdamState::new();
        match adam_step(&mut params, &grads, &mut state, 1e-3) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("word_emb"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut grads = HashMap::new();
        grads.insert("a".to_string(), Tensor::vector(vec![3.0, 4.0]));
        let norm = clip_gradients(&mut grads, 10.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert_eq!(grads["a"].values(), &[3.0, 4.0]);

        grads.insert("b".to_string(), Tensor::vector(vec![30.0, 40.0]));
        let norm = clip_gradients(&mut grads, 10.0);
        assert!(norm > 10.0);
        let after: f64 = grads
            .values()
            .map(|t| t.values().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!((after - 10.0).abs() < 1e-9);
    }

    #[test]
    fn xe_updates_reduce_loss_on_a_tiny_batch() {
        let (cfg, mut params) = tiny_model();
        let record = DatasetRecord {
            image_id: "r".into(),
            features: Tensor::new(vec![2, 3], vec![0.5, -0.25, 1.0, -1.0, 0.75, 0.1]).unwrap(),
            attribute_ids: vec![0, 2],
            references: vec!["unused".into()],
        };
        let gold = vec![4, 4, EOS];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut adam = AdamState::new();
        let mut losses = Vec::new();
        for _ in 0..50 {
            let batch = vec![(&record, gold.clone())];
            let (loss, _, mut grads) =
                xe_batch_grads(&params, &cfg, &batch, 0.0, &mut rng).unwrap();
            clip_gradients(&mut grads, 10.0);
            adam_step(&mut params, &grads, &mut adam, 5e-4).unwrap();
            losses.push(loss);
        }
        let up_steps = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(up_steps <= 5, "{up_steps} non-monotone steps: {losses:?}");
        assert!(losses.last().unwrap() < losses.first().unwrap());
    }

    struct ConstantReward(f64);
    impl Reward for ConstantReward {
        fn score(&self, _: &DatasetRecord, _: &[usize]) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn scst_zero_advantage_means_zero_gradient() {
        let (cfg, params) = tiny_model();
        let record = DatasetRecord {
            image_id: "r".into(),
            features: Tensor::new(vec![2, 3], vec![0.1; 6]).unwrap(),
            attribute_ids: vec![1, 2],
            references: vec!["unused".into()],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (grads, stats) =
            scst_step(&params, &cfg, &[&record], &ConstantReward(0.7), &mut rng).unwrap();
        assert!(grads.is_empty());
        assert!((stats.mean_reward - 0.7).abs() < 1e-15);
        assert!((stats.mean_baseline - 0.7).abs() < 1e-15);
        assert!(scst_step(&params, &cfg, &[], &ConstantReward(0.0), &mut rng).is_err());
    }

    #[test]
    fn scst_gradient_matches_finite_difference_at_fixed_tokens() {
        let (cfg, params) = tiny_model();
        let record = DatasetRecord {
            image_id: "r".into(),
            features: Tensor::new(vec![2, 3], vec![0.4, -0.3, 0.2, 0.9, -0.6, 0.05]).unwrap(),
            attribute_ids: vec![0, 1],
            references: vec!["unused".into()],
        };
        let tokens = vec![4, 3, EOS];
        let advantage = 0.8;
        let v0 = feature_rows(&record, &cfg).unwrap();

        // Analytic gradient of advantage · NLL(final stage, tokens).
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &params).unwrap();
        let inputs = prepare_inputs(&mut tape, &bound, &cfg, &v0, &record.attribute_ids).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (dists, _) =
            unroll_teacher_forced(&mut tape, &bound, &cfg, &inputs, &tokens, 0.0, &mut rng)
                .unwrap();
        let mut nll = None;
        for (sd, &id) in dists.iter().zip(&tokens) {
            let term = tape.nll_gather(*sd.last().unwrap(), id).unwrap();
            nll = Some(match nll {
                Some(a) => tape.add(a, term).unwrap(),
                None => term,
            });
        }
        let loss = tape.scalar_mul(nll.unwrap(), advantage).unwrap();
        let table = tape.backward(loss).unwrap();

        // Numeric derivative through a fresh forward at perturbed parameters.
        let eval = |m: &ModelParams| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let run = crate::stack::forward_teacher_forced(
                m, &cfg, &v0, &record.attribute_ids, &tokens, 0.0, &mut rng,
            )
            .unwrap();
            -advantage * run.log_prob(&tokens)
        };
        let eps = 1e-5;
        for (name, id) in bound.names.iter().take(6) {
            let grad = table.get(*id);
            for k in [0usize, grad.len() / 2] {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.for_each_mut(&mut |n, t| {
                    if &n == name {
                        t.values_mut()[k] += eps;
                    }
                });
                minus.for_each_mut(&mut |n, t| {
                    if &n == name {
                        t.values_mut()[k] -= eps;
                    }
                });
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let analytic = grad.values()[k];
                // The 1e-6 floor keeps central-difference cancellation noise
                // from dominating coordinates whose true gradient is ~1e-8.
                let err = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-4, "{name}[{k}]: analytic {analytic}, numeric {numeric}");
            }
        }
    }

    #[test]
    fn train_runs_checkpoints_and_resumes_epoch_numbering() {
        let spec = SyntheticSpec {
            n_images: 4,
            n_v: 2,
            d_v: 4,
            n_e: 2,
            n_attributes: 3,
            vocab_size: 8,
            caption_len: 3,
        };
        let data_dir = tempfile::tempdir().unwrap();
        let manifest = gen_synthetic(&spec, 1, data_dir.path()).unwrap();
        let dataset = load_dataset(&manifest).unwrap();
        let stack_cfg = StackConfig {
            n_stages: 1,
            d_v: 4,
            d_e: 3,
            d_h: 4,
            d_a: 3,
            d_s: 3,
            d_p: 0, // derive from the corpus
            n_v: 2,
            n_e: 2,
            t_max: 5,
        };
        let tcfg = TrainConfig {
            batch_size: 4,
            max_epochs: 2,
            vocab_min_count: 1,
            seed: 9,
            ..TrainConfig::default()
        };
        let out = tempfile::tempdir().unwrap();
        let outcome =
            train(&stack_cfg, &tcfg, &dataset, out.path(), None, Phase::Xe).unwrap();
        assert_eq!(outcome.epochs_run, 2);
        assert!(out.path().join("epoch0000.svsc").exists());
        assert!(out.path().join("epoch0001.svsc").exists());
        assert_eq!(outcome.final_checkpoint, out.path().join("epoch0001.svsc"));
        assert!(outcome.last_xe_loss.unwrap() > 0.0);
        let log = fs::read_to_string(out.path().join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first["epoch"], 0);
        assert_eq!(first["phase"], "xe");
        assert!(first["xe_loss"].as_f64().unwrap() > 0.0);

        // Resuming continues the epoch numbering.
        let more = TrainConfig { max_epochs: 3, ..tcfg.clone() };
        let outcome = train(
            &stack_cfg,
            &more,
            &dataset,
            out.path(),
            Some(&out.path().join("epoch0001.svsc")),
            Phase::Xe,
        )
        .unwrap();
        assert_eq!(outcome.epochs_run, 1);
        assert!(out.path().join("epoch0002.svsc").exists());

        // Fixed seed reproduces the epoch-0 checkpoint bitwise.
        let out2 = tempfile::tempdir().unwrap();
        train(&stack_cfg, &tcfg, &dataset, out2.path(), None, Phase::Xe).unwrap();
        assert_eq!(
            fs::read(out.path().join("epoch0000.svsc")).unwrap(),
            fs::read(out2.path().join("epoch0000.svsc")).unwrap()
        );
    }
}
