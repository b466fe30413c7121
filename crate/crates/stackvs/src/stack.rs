//! Unrolls the decoder-cell stack over stages and time steps.
//!
//! At each time step the coarse stage consumes the final stage's language
//! hidden from the previous step with zero attended vectors; every later
//! stage consumes the carry its predecessor produced at the same step.
//! Within a stage, LSTM states persist across time; each stage owns its own
//! three states. Teacher forcing, greedy, sampled, and beam decoding all run
//! through the same tape-level step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{
    bind_cell, cell_step_on_tape, contribution_ratio, CarryNodes, CellNodes, CellStateNodes,
    DecoderCellParams,
};
use crate::data::{BOS, EOS};
use crate::tensor::{NodeId, Tape, Tensor, LOG_CLAMP};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub n_stages: usize,
    pub d_v: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub d_a: usize,
    /// Word-embedding size.
    pub d_s: usize,
    /// Vocabulary size, at least the four specials.
    pub d_p: usize,
    pub n_v: usize,
    pub n_e: usize,
    pub t_max: usize,
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_stages, self.d_v, self.d_e, self.d_h, self.d_a, self.d_s, self.d_p,
            self.n_v, self.n_e, self.t_max,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("all stack dimensions must be positive".into()));
        }
        if self.d_p < 4 {
            return Err(Error::Config(format!(
                "vocabulary size {} leaves no room for the four specials",
                self.d_p
            )));
        }
        Ok(())
    }
}

/// All trainable state: embedding tables plus one parameter set per stage
/// (weights are not shared across stages).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// d_p x d_s
    pub word_emb: Tensor,
    /// n_attributes x d_e, randomly initialized and trainable.
    pub attr_emb: Tensor,
    pub stages: Vec<DecoderCellParams>,
}

impl ModelParams {
    pub fn init(cfg: &StackConfig, n_attributes: usize, rng: &mut ChaCha8Rng) -> Self {
        use crate::attention::uniform_fan_in;
        ModelParams {
            word_emb: uniform_fan_in(cfg.d_p, cfg.d_s, rng),
            attr_emb: uniform_fan_in(n_attributes, cfg.d_e, rng),
            stages: (0..cfg.n_stages).map(|_| DecoderCellParams::init(cfg, rng)).collect(),
        }
    }

    pub fn zeros(cfg: &StackConfig, n_attributes: usize) -> Self {
        ModelParams {
            word_emb: Tensor::zeros(&[cfg.d_p, cfg.d_s]),
            attr_emb: Tensor::zeros(&[n_attributes, cfg.d_e]),
            stages: (0..cfg.n_stages).map(|_| DecoderCellParams::zeros(cfg)).collect(),
        }
    }

    pub fn n_attributes(&self) -> usize {
        self.attr_emb.rows()
    }

    pub fn for_each(&self, f: &mut impl FnMut(String, &Tensor)) {
        f("word_emb".into(), &self.word_emb);
        f("attr_emb".into(), &self.attr_emb);
        for (i, stage) in self.stages.iter().enumerate() {
            stage.for_each(&format!("stage{i}."), f);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("word_emb".into(), &mut self.word_emb);
        f("attr_emb".into(), &mut self.attr_emb);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.for_each_mut(&format!("stage{i}."), f);
        }
    }

    pub fn validate(&self, cfg: &StackConfig) -> Result<()> {
        cfg.validate()?;
        if self.word_emb.shape() != [cfg.d_p, cfg.d_s] {
            return Err(Error::Shape("word embedding table does not match config".into()));
        }
        if self.attr_emb.cols() != cfg.d_e {
            return Err(Error::Shape("attribute embedding width does not match d_e".into()));
        }
        if self.stages.len() != cfg.n_stages {
            return Err(Error::Shape(format!(
                "{} stage parameter sets for {} stages",
                self.stages.len(),
                cfg.n_stages
            )));
        }
        let mut finite = true;
        self.for_each(&mut |_, t| finite &= t.is_finite());
        if !finite {
            return Err(Error::Numeric("non-finite model parameter".into()));
        }
        for stage in &self.stages {
            stage.validate(cfg)?;
        }
        Ok(())
    }
}

/// Per-(stage, step) attention weights plus the visual contribution ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub stage: usize,
    pub t: usize,
    pub alpha_v: Vec<f64>,
    pub alpha_s: Vec<f64>,
    pub ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionTrace {
    pub rows: Vec<TraceRow>,
}

/// One decoded caption and the evidence behind it.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// Word ids, ending with `<eos>` or cut at t_max.
    pub tokens: Vec<usize>,
    /// Per step, per stage, the raw vocabulary logits.
    pub stage_logits: Vec<Vec<Tensor>>,
    /// Final-stage log probability of the emitted tokens.
    pub log_prob: f64,
    pub trace: AttentionTrace,
}

// ── Tape-level unrolling ────────────────────────────────────────────

pub struct BoundModel {
    pub word_emb: NodeId,
    pub attr_emb: NodeId,
    pub stages: Vec<CellNodes>,
    /// Parameter name to leaf node, in `ModelParams::for_each` order.
    pub names: Vec<(String, NodeId)>,
}

pub fn bind_model(tape: &mut Tape, m: &ModelParams) -> Result<BoundModel> {
    // bind_cell inserts one leaf per tensor in for_each field order, so leaf
    // node ids run densely from `start` in for_each order.
    let start = tape.len();
    let word_emb = tape.leaf(m.word_emb.clone())?;
    let attr_emb = tape.leaf(m.attr_emb.clone())?;
    let mut stages = Vec::with_capacity(m.stages.len());
    for stage in &m.stages {
        stages.push(bind_cell(tape, stage)?);
    }
    let mut names = Vec::new();
    m.for_each(&mut |name, _| {
        names.push((name, NodeId::from_index(start + names.len())));
    });
    Ok(BoundModel { word_emb, attr_emb, stages, names })
}

/// Live state of one unrolled decode: per-stage LSTM states plus the final
/// stage's language hidden from the previous step.
#[derive(Clone)]
pub struct StackState {
    pub stages: Vec<CellStateNodes>,
    pub prev_h_lang: NodeId,
}

pub struct StackInputs {
    pub v0: Vec<NodeId>,
    pub e0: Vec<NodeId>,
    zero_v: NodeId,
    zero_e: NodeId,
}

pub struct StepOutput {
    pub state: StackState,
    /// Raw logits per stage.
    pub stage_logits: Vec<NodeId>,
    /// Softmaxed vocabulary distribution per stage.
    pub stage_dists: Vec<NodeId>,
    /// Trace rows for this step, one per stage (t filled by the caller).
    pub trace: Vec<TraceRow>,
}

pub fn prepare_inputs(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &StackConfig,
    v0: &[Tensor],
    e0_ids: &[usize],
) -> Result<StackInputs> {
    if v0.len() != cfg.n_v {
        return Err(Error::Data(format!("{} visual features, config wants {}", v0.len(), cfg.n_v)));
    }
    if e0_ids.len() != cfg.n_e {
        return Err(Error::Data(format!("{} attribute ids, config wants {}", e0_ids.len(), cfg.n_e)));
    }
    let mut v0n = Vec::with_capacity(v0.len());
    for t in v0 {
        if t.shape() != [cfg.d_v] {
            return Err(Error::Data(format!("feature shape {:?}, config wants [{}]", t.shape(), cfg.d_v)));
        }
        v0n.push(tape.leaf(t.clone())?);
    }
    let mut e0n = Vec::with_capacity(e0_ids.len());
    for &id in e0_ids {
        e0n.push(tape.row_select(bound.attr_emb, id).map_err(|_| {
            Error::Data(format!("attribute id {id} out of range"))
        })?);
    }
    Ok(StackInputs {
        v0: v0n,
        e0: e0n,
        zero_v: tape.leaf(Tensor::zeros(&[cfg.d_v]))?,
        zero_e: tape.leaf(Tensor::zeros(&[cfg.d_e]))?,
    })
}

pub fn initial_state(tape: &mut Tape, cfg: &StackConfig) -> Result<StackState> {
    let mut stages = Vec::with_capacity(cfg.n_stages);
    for _ in 0..cfg.n_stages {
        let mut zero_pair = || -> Result<crate::attention::StateNodes> {
            Ok(crate::attention::StateNodes {
                h: tape.leaf(Tensor::zeros(&[cfg.d_h]))?,
                c: tape.leaf(Tensor::zeros(&[cfg.d_h]))?,
            })
        };
        stages.push(CellStateNodes {
            visual: zero_pair()?,
            semantic: zero_pair()?,
            language: zero_pair()?,
        });
    }
    let prev_h_lang = tape.leaf(Tensor::zeros(&[cfg.d_h]))?;
    Ok(StackState { stages, prev_h_lang })
}

/// Run every stage for one time step. The input word id selects the
/// embedding row fed to both branch LSTMs of every stage.
pub fn stack_step(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &StackConfig,
    inputs: &StackInputs,
    state: &StackState,
    word_id: usize,
) -> Result<StepOutput> {
    if word_id >= cfg.d_p {
        return Err(Error::Data(format!("token id {word_id} >= vocabulary size {}", cfg.d_p)));
    }
    let emb = tape.row_select(bound.word_emb, word_id)?;
    let mut carry = CarryNodes {
        h_lang: state.prev_h_lang,
        v_hat: inputs.zero_v,
        e_hat: inputs.zero_e,
    };
    let mut new_stages = Vec::with_capacity(cfg.n_stages);
    let mut stage_logits = Vec::with_capacity(cfg.n_stages);
    let mut stage_dists = Vec::with_capacity(cfg.n_stages);
    let mut trace = Vec::with_capacity(cfg.n_stages);
    for (i, (cell, st)) in bound.stages.iter().zip(&state.stages).enumerate() {
        let out = cell_step_on_tape(tape, cell, st, emb, &inputs.v0, &inputs.e0, &carry)?;
        let dist = tape.softmax(out.logits)?;
        trace.push(TraceRow {
            stage: i,
            t: 0,
            alpha_v: tape.value(out.alpha_v).values().to_vec(),
            alpha_s: tape.value(out.alpha_s).values().to_vec(),
            ratio: contribution_ratio(tape.value(out.fc_v_out), tape.value(out.fc_s_out)),
        });
        stage_logits.push(out.logits);
        stage_dists.push(dist);
        carry = out.carry;
        new_stages.push(out.state);
    }
    Ok(StepOutput {
        state: StackState { stages: new_stages, prev_h_lang: carry.h_lang },
        stage_logits,
        stage_dists,
        trace,
    })
}

/// Teacher-forced unroll on a caller-provided tape (so a batch can share one
/// tape). `gold` is the content tokens plus a trailing `<eos>`; the implicit
/// `<bos>` is fed at t = 0. With probability `ss_prob` the input at t > 0 is
/// a sample from the final stage's previous distribution instead of
/// `gold[t-1]`.
pub fn unroll_teacher_forced(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &StackConfig,
    inputs: &StackInputs,
    gold: &[usize],
    ss_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<NodeId>>, AttentionTrace)> {
    if gold.is_empty() {
        return Err(Error::Data("empty gold token sequence".into()));
    }
    if gold.len() > cfg.t_max {
        return Err(Error::Data(format!(
            "gold length {} exceeds t_max {}",
            gold.len(),
            cfg.t_max
        )));
    }
    if let Some(&bad) = gold.iter().find(|&&id| id >= cfg.d_p) {
        return Err(Error::Data(format!("token id {bad} >= vocabulary size {}", cfg.d_p)));
    }
    let mut state = initial_state(tape, cfg)?;
    let mut dists: Vec<Vec<NodeId>> = Vec::with_capacity(gold.len());
    let mut trace = AttentionTrace::default();
    for t in 0..gold.len() {
        let input = if t == 0 {
            BOS
        } else if ss_prob > 0.0 && rng.random::<f64>() < ss_prob {
            let final_dist = tape.value(*dists[t - 1].last().expect("n_stages >= 1"));
            sample_categorical(final_dist.values(), rng)
        } else {
            gold[t - 1]
        };
        let out = stack_step(tape, bound, cfg, inputs, &state, input)?;
        for mut row in out.trace {
            row.t = t;
            trace.rows.push(row);
        }
        dists.push(out.stage_dists);
        state = out.state;
    }
    Ok((dists, trace))
}

/// Teacher-forced forward with a fresh tape; returns concrete distributions.
pub struct TeacherForcedRun {
    pub tape: Tape,
    /// [t][stage] softmax distribution node.
    pub stage_dists: Vec<Vec<NodeId>>,
    pub trace: AttentionTrace,
}

impl TeacherForcedRun {
    pub fn dist(&self, t: usize, stage: usize) -> &Tensor {
        self.tape.value(self.stage_dists[t][stage])
    }

    /// Final-stage log probability of `tokens` under the recorded run.
    pub fn log_prob(&self, tokens: &[usize]) -> f64 {
        tokens
            .iter()
            .enumerate()
            .map(|(t, &id)| self.dist(t, self.stage_dists[t].len() - 1).values()[id].max(LOG_CLAMP).ln())
            .sum()
    }
}

pub fn forward_teacher_forced(
    m: &ModelParams,
    cfg: &StackConfig,
    v0: &[Tensor],
    e0_ids: &[usize],
    gold: &[usize],
    ss_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TeacherForcedRun> {
    m.validate(cfg)?;
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, m)?;
    let inputs = prepare_inputs(&mut tape, &bound, cfg, v0, e0_ids)?;
    let (stage_dists, trace) =
        unroll_teacher_forced(&mut tape, &bound, cfg, &inputs, gold, ss_prob, rng)?;
    Ok(TeacherForcedRun { tape, stage_dists, trace })
}

/// Draw from a categorical distribution by inverse CDF.
pub fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Lowest index wins ties, so decoding is deterministic.
fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

enum Picker<'a> {
    Greedy,
    Sample(&'a mut ChaCha8Rng),
}

fn decode_linear(
    m: &ModelParams,
    cfg: &StackConfig,
    v0: &[Tensor],
    e0_ids: &[usize],
    mut picker: Picker<'_>,
) -> Result<Rollout> {
    m.validate(cfg)?;
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, m)?;
    let inputs = prepare_inputs(&mut tape, &bound, cfg, v0, e0_ids)?;
    let mut state = initial_state(&mut tape, cfg)?;
    let mut rollout = Rollout {
        tokens: Vec::new(),
        stage_logits: Vec::new(),
        log_prob: 0.0,
        trace: AttentionTrace::default(),
    };
    let mut prev = BOS;
    for t in 0..cfg.t_max {
        let out = stack_step(&mut tape, &bound, cfg, &inputs, &state, prev)?;
        let final_dist = tape.value(*out.stage_dists.last().expect("n_stages >= 1"));
        let token = match picker {
            Picker::Greedy => argmax_lowest(final_dist.values()),
            Picker::Sample(ref mut rng) => sample_categorical(final_dist.values(), rng),
        };
        rollout.log_prob += final_dist.values()[token].max(LOG_CLAMP).ln();
        rollout
            .stage_logits
            .push(out.stage_logits.iter().map(|&id| tape.value(id).clone()).collect());
        for mut row in out.trace {
            row.t = t;
            rollout.trace.rows.push(row);
        }
        rollout.tokens.push(token);
        state = out.state;
        prev = token;
        if token == EOS {
            break;
        }
    }
    Ok(rollout)
}

/// Deterministic argmax decode of the final stage; this is the SCST baseline.
pub fn decode_greedy(
    m: &ModelParams,
    cfg: &StackConfig,
    v0: &[Tensor],
    e0_ids: &[usize],
) -> Result<Rollout> {
    decode_linear(m, cfg, v0, e0_ids, Picker::Greedy)
}

/// Ancestral sampling from the final stage's distributions.
pub fn decode_sample(
    m: &ModelParams,
    cfg: &StackConfig,
    v0: &[Tensor],
    e0_ids: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    decode_linear(m, cfg, v0, e0_ids, Picker::Sample(rng))
}

struct BeamHyp {
    state: StackState,
    tokens: Vec<usize>,
    log_prob: f64,
    stage_logits: Vec<Vec<Tensor>>,
    trace: Vec<TraceRow>,
}

/// Width-first search ranked by total log probability, no length
/// normalization. Width 1 reproduces greedy decoding exactly.
pub fn decode_beam(
    m: &ModelParams,
    cfg: &StackConfig,
    v0: &[Tensor],
    e0_ids: &[usize],
    beam_width: usize,
) -> Result<Rollout> {
    if beam_width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    m.validate(cfg)?;
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, m)?;
    let inputs = prepare_inputs(&mut tape, &bound, cfg, v0, e0_ids)?;
    let init = initial_state(&mut tape, cfg)?;
    let mut live = vec![BeamHyp {
        state: init,
        tokens: Vec::new(),
        log_prob: 0.0,
        stage_logits: Vec::new(),
        trace: Vec::new(),
    }];
    let mut done: Vec<BeamHyp> = Vec::new();

    for t in 0..cfg.t_max {
        // (score, hyp index, token, step output index)
        let mut candidates: Vec<(f64, usize, usize, usize)> = Vec::new();
        let mut outputs = Vec::with_capacity(live.len());
        for (hi, hyp) in live.iter().enumerate() {
            let prev = *hyp.tokens.last().unwrap_or(&BOS);
            let out = stack_step(&mut tape, &bound, cfg, &inputs, &hyp.state, prev)?;
            let dist = tape.value(*out.stage_dists.last().expect("n_stages >= 1"));
            for (token, &p) in dist.values().iter().enumerate() {
                candidates.push((hyp.log_prob + p.max(LOG_CLAMP).ln(), hi, token, outputs.len()));
            }
            outputs.push(out);
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite scores")
                .then(a.2.cmp(&b.2))
                .then(a.1.cmp(&b.1))
        });
        let mut next_live = Vec::new();
        for &(score, hi, token, oi) in candidates.iter().take(beam_width) {
            let hyp = &live[hi];
            let out = &outputs[oi];
            let mut tokens = hyp.tokens.clone();
            tokens.push(token);
            let mut stage_logits = hyp.stage_logits.clone();
            stage_logits.push(out.stage_logits.iter().map(|&id| tape.value(id).clone()).collect());
            let mut trace = hyp.trace.clone();
            for row in &out.trace {
                let mut row = row.clone();
                row.t = t;
                trace.push(row);
            }
            let next = BeamHyp {
                state: out.state.clone(),
                tokens,
                log_prob: score,
                stage_logits,
                trace,
            };
            if token == EOS {
                done.push(next);
            } else {
                next_live.push(next);
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }
    done.extend(live);
    let best = done
        .into_iter()
        .max_by(|a, b| a.log_prob.partial_cmp(&b.log_prob).expect("finite scores"))
        .expect("beam always yields at least one hypothesis");
    Ok(Rollout {
        tokens: best.tokens,
        stage_logits: best.stage_logits,
        log_prob: best.log_prob,
        trace: AttentionTrace { rows: best.trace },
    })
}
