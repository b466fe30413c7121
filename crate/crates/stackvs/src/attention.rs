//! LSTM cell and the visual/semantic attention scoring heads the decoder
//! cell composes.
//!
//! Both heads share one functional form: a logit per feature from a tanh of
//! four projected inputs (feature, previously attended vector, and the two
//! branch hiddens), softmaxed into weights, then a convex combination of the
//! features. The coupling on both hiddens is deliberate: each branch sees the
//! other's state.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{NodeId, Tape, Tensor};
use crate::{Error, Result};

/// Gate block order within the stacked weight rows is fixed as
/// [input, forget, candidate, output]; checkpoints depend on it.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// (4*d_h) x d_in
    pub w_x: Tensor,
    /// (4*d_h) x d_h
    pub w_h: Tensor,
    /// 4*d_h
    pub b: Tensor,
}

impl LstmParams {
    pub fn init(d_in: usize, d_h: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = LstmParams {
            w_x: uniform_fan_in(4 * d_h, d_in, rng),
            w_h: uniform_fan_in(4 * d_h, d_h, rng),
            b: Tensor::zeros(&[4 * d_h]),
        };
        // Forget-gate bias +1 helps tiny-scale trainability.
        for j in d_h..2 * d_h {
            p.b.values_mut()[j] = 1.0;
        }
        p
    }

    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        LstmParams {
            w_x: Tensor::zeros(&[4 * d_h, d_in]),
            w_h: Tensor::zeros(&[4 * d_h, d_h]),
            b: Tensor::zeros(&[4 * d_h]),
        }
    }

    pub fn d_hidden(&self) -> usize {
        self.w_h.shape()[1]
    }

    pub fn d_input(&self) -> usize {
        self.w_x.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let d_h = self.d_hidden();
        if self.w_x.rows() % 4 != 0
            || self.w_x.rows() != 4 * d_h
            || self.w_h.rows() != 4 * d_h
            || self.b.len() != 4 * d_h
        {
            return Err(Error::Shape(format!(
                "inconsistent LSTM params: w_x {:?}, w_h {:?}, b {:?}",
                self.w_x.shape(),
                self.w_h.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(d_h: usize) -> Self {
        LstmState { h: Tensor::zeros(&[d_h]), c: Tensor::zeros(&[d_h]) }
    }
}

/// The five maps of one attention head. `w_score` is 1 x d_a; the rest map
/// a feature (d_f), the previously attended vector (d_f), and each branch
/// hidden (d_h) into the shared d_a space. No bias inside the tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_score: Tensor,
    pub w_feat: Tensor,
    pub w_prev: Tensor,
    pub w_hv: Tensor,
    pub w_hs: Tensor,
}

impl AttentionParams {
    pub fn init(d_a: usize, d_f: usize, d_h: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            w_score: uniform_fan_in(1, d_a, rng),
            w_feat: uniform_fan_in(d_a, d_f, rng),
            w_prev: uniform_fan_in(d_a, d_f, rng),
            w_hv: uniform_fan_in(d_a, d_h, rng),
            w_hs: uniform_fan_in(d_a, d_h, rng),
        }
    }

    pub fn zeros(d_a: usize, d_f: usize, d_h: usize) -> Self {
        AttentionParams {
            w_score: Tensor::zeros(&[1, d_a]),
            w_feat: Tensor::zeros(&[d_a, d_f]),
            w_prev: Tensor::zeros(&[d_a, d_f]),
            w_hv: Tensor::zeros(&[d_a, d_h]),
            w_hs: Tensor::zeros(&[d_a, d_h]),
        }
    }

    pub fn d_attn(&self) -> usize {
        self.w_feat.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d_a = self.d_attn();
        if self.w_score.shape() != [1, d_a]
            || self.w_prev.rows() != d_a
            || self.w_hv.rows() != d_a
            || self.w_hs.rows() != d_a
            || self.w_prev.cols() != self.w_feat.cols()
            || self.w_hv.cols() != self.w_hs.cols()
        {
            return Err(Error::Shape("attention maps do not share one d_a/d_f/d_h".into()));
        }
        Ok(())
    }
}

/// Uniform(-r, r) with r = 1/sqrt(fan_in).
pub fn uniform_fan_in(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let r = 1.0 / (cols as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.random_range(-r..r)).collect();
    Tensor::new(vec![rows, cols], values).expect("parameter dims are positive")
}

// ── Tape-level layers ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct LstmNodes {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct StateNodes {
    pub h: NodeId,
    pub c: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub w_score: NodeId,
    pub w_feat: NodeId,
    pub w_prev: NodeId,
    pub w_hv: NodeId,
    pub w_hs: NodeId,
}

pub fn bind_lstm(tape: &mut Tape, p: &LstmParams) -> Result<LstmNodes> {
    Ok(LstmNodes {
        w_x: tape.leaf(p.w_x.clone())?,
        w_h: tape.leaf(p.w_h.clone())?,
        b: tape.leaf(p.b.clone())?,
    })
}

pub fn bind_attention(tape: &mut Tape, p: &AttentionParams) -> Result<AttentionNodes> {
    Ok(AttentionNodes {
        w_score: tape.leaf(p.w_score.clone())?,
        w_feat: tape.leaf(p.w_feat.clone())?,
        w_prev: tape.leaf(p.w_prev.clone())?,
        w_hv: tape.leaf(p.w_hv.clone())?,
        w_hs: tape.leaf(p.w_hs.clone())?,
    })
}

/// One LSTM recurrence on the tape: i,f,o sigmoid gates, tanh candidate,
/// c' = f*c + i*g, h' = o*tanh(c').
pub fn lstm_step_on_tape(
    tape: &mut Tape,
    p: &LstmNodes,
    s: &StateNodes,
    x: NodeId,
) -> Result<StateNodes> {
    let d_h = tape.value(s.h).len();
    let wx = tape.matmul(p.w_x, x)?;
    let wh = tape.matmul(p.w_h, s.h)?;
    let pre = tape.add(wx, wh)?;
    let gates = tape.add(pre, p.b)?;
    let i_in = tape.slice(gates, 0, d_h)?;
    let f_in = tape.slice(gates, d_h, 2 * d_h)?;
    let g_in = tape.slice(gates, 2 * d_h, 3 * d_h)?;
    let o_in = tape.slice(gates, 3 * d_h, 4 * d_h)?;
    let i = tape.sigmoid(i_in)?;
    let f = tape.sigmoid(f_in)?;
    let g = tape.tanh(g_in)?;
    let o = tape.sigmoid(o_in)?;
    let fc = tape.mul(f, s.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok(StateNodes { h, c })
}

/// One logit per feature: w_score . tanh(W_feat f_k + W_prev prev + W_hv h_v + W_hs h_s).
pub fn attention_logits_on_tape(
    tape: &mut Tape,
    p: &AttentionNodes,
    feats: &[NodeId],
    prev_attended: NodeId,
    h_v: NodeId,
    h_s: NodeId,
) -> Result<NodeId> {
    if feats.is_empty() {
        return Err(Error::Shape("attention over zero features".into()));
    }
    let prev_term = tape.matmul(p.w_prev, prev_attended)?;
    let hv_term = tape.matmul(p.w_hv, h_v)?;
    let hs_term = tape.matmul(p.w_hs, h_s)?;
    let a = tape.add(prev_term, hv_term)?;
    let common = tape.add(a, hs_term)?;
    let mut logits = Vec::with_capacity(feats.len());
    for &f in feats {
        let feat_term = tape.matmul(p.w_feat, f)?;
        let pre = tape.add(feat_term, common)?;
        let act = tape.tanh(pre)?;
        logits.push(tape.matmul(p.w_score, act)?);
    }
    tape.concat(&logits)
}

/// Convex combination of the features under simplex weights.
pub fn attend_on_tape(tape: &mut Tape, weights: NodeId, feats: &[NodeId]) -> Result<NodeId> {
    if feats.len() != tape.value(weights).len() {
        return Err(Error::Shape(format!(
            "{} weights for {} features",
            tape.value(weights).len(),
            feats.len()
        )));
    }
    let mut acc: Option<NodeId> = None;
    for (k, &f) in feats.iter().enumerate() {
        let wk = tape.slice(weights, k, k + 1)?;
        let term = tape.mul(wk, f)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.unwrap())
}

// ── Concrete wrappers (throwaway tape, same code path) ──────────────

pub fn lstm_step(p: &LstmParams, s: &LstmState, x: &Tensor) -> Result<LstmState> {
    p.validate()?;
    if x.len() != p.d_input() {
        return Err(Error::Shape(format!(
            "lstm input length {} != d_in {}",
            x.len(),
            p.d_input()
        )));
    }
    let mut tape = Tape::new();
    let pn = bind_lstm(&mut tape, p)?;
    let sn = StateNodes { h: tape.leaf(s.h.clone())?, c: tape.leaf(s.c.clone())? };
    let xn = tape.leaf(x.clone())?;
    let out = lstm_step_on_tape(&mut tape, &pn, &sn, xn)?;
    Ok(LstmState { h: tape.value(out.h).clone(), c: tape.value(out.c).clone() })
}

pub fn attention_logits(
    p: &AttentionParams,
    feats: &[Tensor],
    prev_attended: &Tensor,
    h_v: &Tensor,
    h_s: &Tensor,
) -> Result<Tensor> {
    p.validate()?;
    let mut tape = Tape::new();
    let pn = bind_attention(&mut tape, p)?;
    let fns: Vec<NodeId> = feats.iter().map(|f| tape.leaf(f.clone())).collect::<Result<_>>()?;
    let prev = tape.leaf(prev_attended.clone())?;
    let hv = tape.leaf(h_v.clone())?;
    let hs = tape.leaf(h_s.clone())?;
    let out = attention_logits_on_tape(&mut tape, &pn, &fns, prev, hv, hs)?;
    Ok(tape.value(out).clone())
}

pub fn attention_weights(logits: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone())?;
    let w = tape.softmax(l)?;
    Ok(tape.value(w).clone())
}

pub fn attend(weights: &Tensor, feats: &[Tensor]) -> Result<Tensor> {
    let sum: f64 = weights.values().iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Numeric(format!("attend weights sum to {sum}, not 1")));
    }
    let mut tape = Tape::new();
    let w = tape.leaf(weights.clone())?;
    let fns: Vec<NodeId> = feats.iter().map(|f| tape.leaf(f.clone())).collect::<Result<_>>()?;
    let out = attend_on_tape(&mut tape, w, &fns)?;
    Ok(tape.value(out).clone())
}
