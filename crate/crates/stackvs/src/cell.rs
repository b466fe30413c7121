//! One stacked-decoder cell: two coupled attention LSTMs, the visual and
//! semantic attention heads, cross-modal projections into the language LSTM,
//! and the vocabulary projection.
//!
//! The cell consumes the previous stage's carry (language hidden, attended
//! visual vector, attended semantic embedding) and produces the next carry,
//! so stages chain through it. Softmax over the vocabulary logits is left to
//! the caller: sampling, beam search, and the cross-entropy loss all want
//! raw logits.

use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention_logits_on_tape, attend_on_tape, bind_attention, bind_lstm, lstm_step_on_tape,
    AttentionNodes, AttentionParams, LstmNodes, LstmParams, LstmState, StateNodes,
};
use crate::stack::StackConfig;
use crate::tensor::{NodeId, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderCellParams {
    /// Input [word embedding, previous-stage language hidden], size d_s + d_h.
    pub lstm_v: LstmParams,
    /// Same input construction as the visual branch.
    pub lstm_s: LstmParams,
    pub attn_v: AttentionParams,
    pub attn_s: AttentionParams,
    /// d_h x d_v projection of the attended visual vector, plus bias.
    pub fc_v_w: Tensor,
    pub fc_v_b: Tensor,
    /// d_h x d_e projection of the attended semantic embedding, plus bias.
    pub fc_s_w: Tensor,
    pub fc_s_b: Tensor,
    /// Input size d_h.
    pub lstm_l: LstmParams,
    /// d_p x d_h vocabulary projection; per stage, not shared.
    pub out_proj: Tensor,
}

impl DecoderCellParams {
    pub fn init(cfg: &StackConfig, rng: &mut ChaCha8Rng) -> Self {
        use crate::attention::uniform_fan_in;
        DecoderCellParams {
            lstm_v: LstmParams::init(cfg.d_s + cfg.d_h, cfg.d_h, rng),
            lstm_s: LstmParams::init(cfg.d_s + cfg.d_h, cfg.d_h, rng),
            attn_v: AttentionParams::init(cfg.d_a, cfg.d_v, cfg.d_h, rng),
            attn_s: AttentionParams::init(cfg.d_a, cfg.d_e, cfg.d_h, rng),
            fc_v_w: uniform_fan_in(cfg.d_h, cfg.d_v, rng),
            fc_v_b: Tensor::zeros(&[cfg.d_h]),
            fc_s_w: uniform_fan_in(cfg.d_h, cfg.d_e, rng),
            fc_s_b: Tensor::zeros(&[cfg.d_h]),
            lstm_l: LstmParams::init(cfg.d_h, cfg.d_h, rng),
            out_proj: uniform_fan_in(cfg.d_p, cfg.d_h, rng),
        }
    }

    pub fn zeros(cfg: &StackConfig) -> Self {
        DecoderCellParams {
            lstm_v: LstmParams::zeros(cfg.d_s + cfg.d_h, cfg.d_h),
            lstm_s: LstmParams::zeros(cfg.d_s + cfg.d_h, cfg.d_h),
            attn_v: AttentionParams::zeros(cfg.d_a, cfg.d_v, cfg.d_h),
            attn_s: AttentionParams::zeros(cfg.d_a, cfg.d_e, cfg.d_h),
            fc_v_w: Tensor::zeros(&[cfg.d_h, cfg.d_v]),
            fc_v_b: Tensor::zeros(&[cfg.d_h]),
            fc_s_w: Tensor::zeros(&[cfg.d_h, cfg.d_e]),
            fc_s_b: Tensor::zeros(&[cfg.d_h]),
            lstm_l: LstmParams::zeros(cfg.d_h, cfg.d_h),
            out_proj: Tensor::zeros(&[cfg.d_p, cfg.d_h]),
        }
    }

    /// Named views of every trainable tensor, in a fixed order.
    pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor)) {
        let entries: [(&str, &Tensor); 19] = [
            ("lstm_v.w_x", &self.lstm_v.w_x),
            ("lstm_v.w_h", &self.lstm_v.w_h),
            ("lstm_v.b", &self.lstm_v.b),
            ("lstm_s.w_x", &self.lstm_s.w_x),
            ("lstm_s.w_h", &self.lstm_s.w_h),
            ("lstm_s.b", &self.lstm_s.b),
            ("attn_v.w_score", &self.attn_v.w_score),
            ("attn_v.w_feat", &self.attn_v.w_feat),
            ("attn_v.w_prev", &self.attn_v.w_prev),
            ("attn_v.w_hv", &self.attn_v.w_hv),
            ("attn_v.w_hs", &self.attn_v.w_hs),
            ("attn_s.w_score", &self.attn_s.w_score),
            ("attn_s.w_feat", &self.attn_s.w_feat),
            ("attn_s.w_prev", &self.attn_s.w_prev),
            ("attn_s.w_hv", &self.attn_s.w_hv),
            ("attn_s.w_hs", &self.attn_s.w_hs),
            ("fc_v.w", &self.fc_v_w),
            ("fc_v.b", &self.fc_v_b),
            ("fc_s.w", &self.fc_s_w),
        ];
        for (name, t) in entries {
            f(format!("{prefix}{name}"), t);
        }
        f(format!("{prefix}fc_s.b"), &self.fc_s_b);
        f(format!("{prefix}lstm_l.w_x"), &self.lstm_l.w_x);
        f(format!("{prefix}lstm_l.w_h"), &self.lstm_l.w_h);
        f(format!("{prefix}lstm_l.b"), &self.lstm_l.b);
        f(format!("{prefix}out_proj"), &self.out_proj);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}lstm_v.w_x"), &mut self.lstm_v.w_x);
        f(format!("{prefix}lstm_v.w_h"), &mut self.lstm_v.w_h);
        f(format!("{prefix}lstm_v.b"), &mut self.lstm_v.b);
        f(format!("{prefix}lstm_s.w_x"), &mut self.lstm_s.w_x);
        f(format!("{prefix}lstm_s.w_h"), &mut self.lstm_s.w_h);
        f(format!("{prefix}lstm_s.b"), &mut self.lstm_s.b);
        f(format!("{prefix}attn_v.w_score"), &mut self.attn_v.w_score);
        f(format!("{prefix}attn_v.w_feat"), &mut self.attn_v.w_feat);
        f(format!("{prefix}attn_v.w_prev"), &mut self.attn_v.w_prev);
        f(format!("{prefix}attn_v.w_hv"), &mut self.attn_v.w_hv);
        f(format!("{prefix}attn_v.w_hs"), &mut self.attn_v.w_hs);
        f(format!("{prefix}attn_s.w_score"), &mut self.attn_s.w_score);
        f(format!("{prefix}attn_s.w_feat"), &mut self.attn_s.w_feat);
        f(format!("{prefix}attn_s.w_prev"), &mut self.attn_s.w_prev);
        f(format!("{prefix}attn_s.w_hv"), &mut self.attn_s.w_hv);
        f(format!("{prefix}attn_s.w_hs"), &mut self.attn_s.w_hs);
        f(format!("{prefix}fc_v.w"), &mut self.fc_v_w);
        f(format!("{prefix}fc_v.b"), &mut self.fc_v_b);
        f(format!("{prefix}fc_s.w"), &mut self.fc_s_w);
        f(format!("{prefix}fc_s.b"), &mut self.fc_s_b);
        f(format!("{prefix}lstm_l.w_x"), &mut self.lstm_l.w_x);
        f(format!("{prefix}lstm_l.w_h"), &mut self.lstm_l.w_h);
        f(format!("{prefix}lstm_l.b"), &mut self.lstm_l.b);
        f(format!("{prefix}out_proj"), &mut self.out_proj);
    }

    pub fn validate(&self, cfg: &StackConfig) -> Result<()> {
        self.lstm_v.validate()?;
        self.lstm_s.validate()?;
        self.attn_v.validate()?;
        self.attn_s.validate()?;
        self.lstm_l.validate()?;
        let ok = self.lstm_v.d_input() == cfg.d_s + cfg.d_h
            && self.lstm_v.d_hidden() == cfg.d_h
            && self.lstm_s.d_input() == cfg.d_s + cfg.d_h
            && self.lstm_l.d_input() == cfg.d_h
            && self.fc_v_w.shape() == [cfg.d_h, cfg.d_v]
            && self.fc_s_w.shape() == [cfg.d_h, cfg.d_e]
            && self.out_proj.shape() == [cfg.d_p, cfg.d_h];
        if !ok {
            return Err(Error::Shape("decoder cell params inconsistent with config".into()));
        }
        Ok(())
    }
}

/// The three LSTM states owned by one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderCellState {
    pub visual: LstmState,
    pub semantic: LstmState,
    pub language: LstmState,
}

/// All hidden and cell vectors start at zero.
pub fn init_cell_state(cfg: &StackConfig) -> DecoderCellState {
    DecoderCellState {
        visual: LstmState::zeros(cfg.d_h),
        semantic: LstmState::zeros(cfg.d_h),
        language: LstmState::zeros(cfg.d_h),
    }
}

/// Inter-stage message: the previous stage's language hidden and its two
/// attended vectors. The coarse stage at time t carries the final stage's
/// language hidden from t-1 with zero attended vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCarry {
    pub h_lang: Tensor,
    pub v_hat: Tensor,
    pub e_hat: Tensor,
}

impl StageCarry {
    pub fn coarse_init(h_lang: Tensor, cfg: &StackConfig) -> Self {
        StageCarry {
            h_lang,
            v_hat: Tensor::zeros(&[cfg.d_v]),
            e_hat: Tensor::zeros(&[cfg.d_e]),
        }
    }
}

// ── Tape-level cell ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CellNodes {
    pub lstm_v: LstmNodes,
    pub lstm_s: LstmNodes,
    pub attn_v: AttentionNodes,
    pub attn_s: AttentionNodes,
    pub fc_v_w: NodeId,
    pub fc_v_b: NodeId,
    pub fc_s_w: NodeId,
    pub fc_s_b: NodeId,
    pub lstm_l: LstmNodes,
    pub out_proj: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct CellStateNodes {
    pub visual: StateNodes,
    pub semantic: StateNodes,
    pub language: StateNodes,
}

#[derive(Debug, Clone, Copy)]
pub struct CarryNodes {
    pub h_lang: NodeId,
    pub v_hat: NodeId,
    pub e_hat: NodeId,
}

pub struct CellStepIds {
    pub state: CellStateNodes,
    pub logits: NodeId,
    pub alpha_v: NodeId,
    pub alpha_s: NodeId,
    pub carry: CarryNodes,
    /// FC projections of the attended vectors, kept for the contribution
    /// ratio in attention traces.
    pub fc_v_out: NodeId,
    pub fc_s_out: NodeId,
}

pub fn bind_cell(tape: &mut Tape, p: &DecoderCellParams) -> Result<CellNodes> {
    Ok(CellNodes {
        lstm_v: bind_lstm(tape, &p.lstm_v)?,
        lstm_s: bind_lstm(tape, &p.lstm_s)?,
        attn_v: bind_attention(tape, &p.attn_v)?,
        attn_s: bind_attention(tape, &p.attn_s)?,
        fc_v_w: tape.leaf(p.fc_v_w.clone())?,
        fc_v_b: tape.leaf(p.fc_v_b.clone())?,
        fc_s_w: tape.leaf(p.fc_s_w.clone())?,
        fc_s_b: tape.leaf(p.fc_s_b.clone())?,
        lstm_l: bind_lstm(tape, &p.lstm_l)?,
        out_proj: tape.leaf(p.out_proj.clone())?,
    })
}

pub fn bind_cell_state(tape: &mut Tape, s: &DecoderCellState) -> Result<CellStateNodes> {
    let mut bind = |st: &LstmState| -> Result<StateNodes> {
        Ok(StateNodes { h: tape.leaf(st.h.clone())?, c: tape.leaf(st.c.clone())? })
    };
    Ok(CellStateNodes {
        visual: bind(&s.visual)?,
        semantic: bind(&s.semantic)?,
        language: bind(&s.language)?,
    })
}

/// One decoder-cell step on the tape.
///
/// Both branch LSTMs read [word embedding, previous-stage language hidden];
/// each attention head's logits read both branch hiddens; the language LSTM
/// input is FC_V(v_hat) + FC_S(e_hat) + h_v + h_s.
pub fn cell_step_on_tape(
    tape: &mut Tape,
    p: &CellNodes,
    s: &CellStateNodes,
    word_emb: NodeId,
    v0: &[NodeId],
    e0: &[NodeId],
    carry: &CarryNodes,
) -> Result<CellStepIds> {
    let x = tape.concat(&[word_emb, carry.h_lang])?;
    let state_v = lstm_step_on_tape(tape, &p.lstm_v, &s.visual, x)?;
    let state_s = lstm_step_on_tape(tape, &p.lstm_s, &s.semantic, x)?;

    let logits_v =
        attention_logits_on_tape(tape, &p.attn_v, v0, carry.v_hat, state_v.h, state_s.h)?;
    let alpha_v = tape.softmax(logits_v)?;
    let v_hat = attend_on_tape(tape, alpha_v, v0)?;

    let logits_s =
        attention_logits_on_tape(tape, &p.attn_s, e0, carry.e_hat, state_v.h, state_s.h)?;
    let alpha_s = tape.softmax(logits_s)?;
    let e_hat = attend_on_tape(tape, alpha_s, e0)?;

    let fcv = tape.matmul(p.fc_v_w, v_hat)?;
    let fc_v_out = tape.add(fcv, p.fc_v_b)?;
    let fcs = tape.matmul(p.fc_s_w, e_hat)?;
    let fc_s_out = tape.add(fcs, p.fc_s_b)?;
    let a = tape.add(fc_v_out, fc_s_out)?;
    let b = tape.add(a, state_v.h)?;
    let x_l = tape.add(b, state_s.h)?;

    let state_l = lstm_step_on_tape(tape, &p.lstm_l, &s.language, x_l)?;
    let logits = tape.matmul(p.out_proj, state_l.h)?;

    Ok(CellStepIds {
        state: CellStateNodes { visual: state_v, semantic: state_s, language: state_l },
        logits,
        alpha_v,
        alpha_s,
        carry: CarryNodes { h_lang: state_l.h, v_hat, e_hat },
        fc_v_out,
        fc_s_out,
    })
}

/// Visual share of the language-LSTM input, as an L1-mass ratio of the two
/// projected attended vectors. Defined as 1/2 when both projections are zero.
pub fn contribution_ratio(fc_v_out: &Tensor, fc_s_out: &Tensor) -> f64 {
    let v = fc_v_out.l1_norm();
    let s = fc_s_out.l1_norm();
    if v + s == 0.0 {
        0.5
    } else {
        v / (v + s)
    }
}

/// Concrete single-step wrapper around the tape path.
#[allow(clippy::type_complexity)]
pub fn cell_step(
    p: &DecoderCellParams,
    s: &DecoderCellState,
    word_emb: &Tensor,
    v0: &[Tensor],
    e0: &[Tensor],
    carry_in: &StageCarry,
) -> Result<(DecoderCellState, Tensor, Tensor, Tensor, StageCarry)> {
    if !carry_in.v_hat.is_finite() || !carry_in.e_hat.is_finite() {
        return Err(Error::Numeric("non-finite carry into cell_step".into()));
    }
    let mut tape = Tape::new();
    let pn = bind_cell(&mut tape, p)?;
    let sn = bind_cell_state(&mut tape, s)?;
    let emb = tape.leaf(word_emb.clone())?;
    let v0n: Vec<NodeId> = v0.iter().map(|t| tape.leaf(t.clone())).collect::<Result<_>>()?;
    let e0n: Vec<NodeId> = e0.iter().map(|t| tape.leaf(t.clone())).collect::<Result<_>>()?;
    let carry = CarryNodes {
        h_lang: tape.leaf(carry_in.h_lang.clone())?,
        v_hat: tape.leaf(carry_in.v_hat.clone())?,
        e_hat: tape.leaf(carry_in.e_hat.clone())?,
    };
    let out = cell_step_on_tape(&mut tape, &pn, &sn, emb, &v0n, &e0n, &carry)?;
    let state = DecoderCellState {
        visual: LstmState {
            h: tape.value(out.state.visual.h).clone(),
            c: tape.value(out.state.visual.c).clone(),
        },
        semantic: LstmState {
            h: tape.value(out.state.semantic.h).clone(),
            c: tape.value(out.state.semantic.c).clone(),
        },
        language: LstmState {
            h: tape.value(out.state.language.h).clone(),
            c: tape.value(out.state.language.c).clone(),
        },
    };
    let carry_out = StageCarry {
        h_lang: tape.value(out.carry.h_lang).clone(),
        v_hat: tape.value(out.carry.v_hat).clone(),
        e_hat: tape.value(out.carry.e_hat).clone(),
    };
    Ok((
        state,
        tape.value(out.logits).clone(),
        tape.value(out.alpha_v).clone(),
        tape.value(out.alpha_s).clone(),
        carry_out,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::StackConfig;
    use crate::tensor::{grad_check, softmax_values};
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> StackConfig {
        StackConfig {
            n_stages: 2,
            d_v: 3,
            d_e: 2,
            d_h: 2,
            d_a: 2,
            d_s: 2,
            d_p: 4,
            n_v: 2,
            n_e: 2,
            t_max: 4,
        }
    }

    fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::vector((0..n).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    fn rand_inputs(cfg: &StackConfig, r: &mut ChaCha8Rng) -> (Tensor, Vec<Tensor>, Vec<Tensor>, StageCarry) {
        let emb = rand_vec(r, cfg.d_s);
        let v0: Vec<Tensor> = (0..cfg.n_v).map(|_| rand_vec(r, cfg.d_v)).collect();
        let e0: Vec<Tensor> = (0..cfg.n_e).map(|_| rand_vec(r, cfg.d_e)).collect();
        let carry = StageCarry {
            h_lang: rand_vec(r, cfg.d_h),
            v_hat: rand_vec(r, cfg.d_v),
            e_hat: rand_vec(r, cfg.d_e),
        };
        (emb, v0, e0, carry)
    }

    #[test]
    fn zero_params_give_uniform_distributions() {
        let cfg = tiny_cfg();
        let p = DecoderCellParams::zeros(&cfg);
        let s = init_cell_state(&cfg);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let (emb, v0, e0, carry) = rand_inputs(&cfg, &mut r);
        let (_, logits, alpha_v, alpha_s, _) = cell_step(&p, &s, &emb, &v0, &e0, &carry).unwrap();
        assert!(logits.values().iter().all(|&v| v == 0.0));
        let dist = softmax_values(logits.values());
        for v in dist {
            assert!((v - 1.0 / cfg.d_p as f64).abs() < 1e-15);
        }
        for v in alpha_v.values() {
            assert!((v - 1.0 / cfg.n_v as f64).abs() < 1e-15);
        }
        for v in alpha_s.values() {
            assert!((v - 1.0 / cfg.n_e as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn output_shape_contract() {
        let cfg = tiny_cfg();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let p = DecoderCellParams::init(&cfg, &mut r);
        let s = init_cell_state(&cfg);
        let (emb, v0, e0, carry) = rand_inputs(&cfg, &mut r);
        let (state, logits, alpha_v, alpha_s, carry_out) =
            cell_step(&p, &s, &emb, &v0, &e0, &carry).unwrap();
        assert_eq!(logits.shape(), &[cfg.d_p]);
        assert_eq!(alpha_v.shape(), &[cfg.n_v]);
        assert_eq!(alpha_s.shape(), &[cfg.n_e]);
        assert_eq!(carry_out.h_lang.shape(), &[cfg.d_h]);
        assert_eq!(carry_out.v_hat.shape(), &[cfg.d_v]);
        assert_eq!(carry_out.e_hat.shape(), &[cfg.d_e]);
        assert_eq!(state.language.h.shape(), &[cfg.d_h]);
        let sum_v: f64 = alpha_v.values().iter().sum();
        let sum_s: f64 = alpha_s.values().iter().sum();
        assert!((sum_v - 1.0).abs() <= 1e-12 && (sum_s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn init_cell_state_is_zero_and_idempotent() {
        let cfg = tiny_cfg();
        let a = init_cell_state(&cfg);
        let b = init_cell_state(&cfg);
        assert_eq!(a, b);
        assert!(a.visual.h.values().iter().all(|&v| v == 0.0));
        assert!(a.language.c.values().iter().all(|&v| v == 0.0));
        assert!(a.semantic.h.values().iter().all(|h| h.abs() < 1.0));
    }

    #[test]
    fn feature_permutation_permutes_alpha_and_preserves_outputs() {
        let cfg = tiny_cfg();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let p = DecoderCellParams::init(&cfg, &mut r);
        let s = init_cell_state(&cfg);
        let (emb, v0, e0, carry) = rand_inputs(&cfg, &mut r);
        let (_, logits, alpha_v, alpha_s, carry_out) =
            cell_step(&p, &s, &emb, &v0, &e0, &carry).unwrap();

        let v0_perm = vec![v0[1].clone(), v0[0].clone()];
        let (_, logits_p, alpha_v_p, _, carry_p) =
            cell_step(&p, &s, &emb, &v0_perm, &e0, &carry).unwrap();
        assert!((alpha_v_p.values()[0] - alpha_v.values()[1]).abs() < 1e-12);
        assert!((alpha_v_p.values()[1] - alpha_v.values()[0]).abs() < 1e-12);
        for (a, b) in logits_p.values().iter().zip(logits.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in carry_p.v_hat.values().iter().zip(carry_out.v_hat.values()) {
            assert!((a - b).abs() < 1e-12);
        }

        let e0_perm = vec![e0[1].clone(), e0[0].clone()];
        let (_, logits_e, _, alpha_s_p, _) =
            cell_step(&p, &s, &emb, &v0, &e0_perm, &carry).unwrap();
        assert!((alpha_s_p.values()[0] - alpha_s.values()[1]).abs() < 1e-12);
        for (a, b) in logits_e.values().iter().zip(logits.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_coupling_maps_decouple_branches() {
        let cfg = tiny_cfg();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut p = DecoderCellParams::init(&cfg, &mut r);
        p.attn_v.w_hs = Tensor::zeros(&[cfg.d_a, cfg.d_h]);
        p.attn_s.w_hv = Tensor::zeros(&[cfg.d_a, cfg.d_h]);
        let s = init_cell_state(&cfg);
        let (emb, v0, e0, carry) = rand_inputs(&cfg, &mut r);
        let e0_other: Vec<Tensor> = (0..cfg.n_e).map(|_| rand_vec(&mut r, cfg.d_e)).collect();
        let v0_other: Vec<Tensor> = (0..cfg.n_v).map(|_| rand_vec(&mut r, cfg.d_v)).collect();

        let (_, _, alpha_v_a, alpha_s_a, _) = cell_step(&p, &s, &emb, &v0, &e0, &carry).unwrap();
        let (_, _, alpha_v_b, _, _) = cell_step(&p, &s, &emb, &v0, &e0_other, &carry).unwrap();
        assert_eq!(alpha_v_a.values(), alpha_v_b.values());
        let (_, _, _, alpha_s_b, _) = cell_step(&p, &s, &emb, &v0_other, &e0, &carry).unwrap();
        assert_eq!(alpha_s_a.values(), alpha_s_b.values());
    }

    #[test]
    fn cell_step_rejects_dimension_mismatch() {
        let cfg = tiny_cfg();
        let p = DecoderCellParams::zeros(&cfg);
        let s = init_cell_state(&cfg);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let (_, v0, e0, carry) = rand_inputs(&cfg, &mut r);
        let bad_emb = Tensor::vector(vec![0.0; cfg.d_s + 1]);
        assert!(cell_step(&p, &s, &bad_emb, &v0, &e0, &carry).is_err());
    }

    #[test]
    fn cell_step_gradients_pass_grad_check_per_parameter_group() {
        let cfg = tiny_cfg();
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let p = DecoderCellParams::init(&cfg, &mut r);
        let s = init_cell_state(&cfg);
        let (emb, v0, e0, carry) = rand_inputs(&cfg, &mut r);

        let mut names = Vec::new();
        let mut point = Vec::new();
        p.for_each("", &mut |name, t| {
            names.push(name);
            point.push(t.clone());
        });
        let err = grad_check(
            |tape, ids| {
                // Bind straight onto the grad-check leaves, in for_each order.
                let pn = CellNodes {
                    lstm_v: LstmNodes { w_x: ids[0], w_h: ids[1], b: ids[2] },
                    lstm_s: LstmNodes { w_x: ids[3], w_h: ids[4], b: ids[5] },
                    attn_v: AttentionNodes {
                        w_score: ids[6], w_feat: ids[7], w_prev: ids[8], w_hv: ids[9], w_hs: ids[10],
                    },
                    attn_s: AttentionNodes {
                        w_score: ids[11], w_feat: ids[12], w_prev: ids[13], w_hv: ids[14], w_hs: ids[15],
                    },
                    fc_v_w: ids[16],
                    fc_v_b: ids[17],
                    fc_s_w: ids[18],
                    fc_s_b: ids[19],
                    lstm_l: LstmNodes { w_x: ids[20], w_h: ids[21], b: ids[22] },
                    out_proj: ids[23],
                };
                let sn = bind_cell_state(tape, &s)?;
                let embn = tape.leaf(emb.clone())?;
                let v0n: Vec<NodeId> =
                    v0.iter().map(|t| tape.leaf(t.clone())).collect::<Result<_>>()?;
                let e0n: Vec<NodeId> =
                    e0.iter().map(|t| tape.leaf(t.clone())).collect::<Result<_>>()?;
                let cn = CarryNodes {
                    h_lang: tape.leaf(carry.h_lang.clone())?,
                    v_hat: tape.leaf(carry.v_hat.clone())?,
                    e_hat: tape.leaf(carry.e_hat.clone())?,
                };
                let out = cell_step_on_tape(tape, &pn, &sn, embn, &v0n, &e0n, &cn)?;
                let dist = tape.softmax(out.logits)?;
                let nll = tape.nll_gather(dist, 1)?;
                let av = tape.sum(out.alpha_v)?;
                let scaled = tape.scalar_mul(av, 0.25)?;
                tape.add(nll, scaled)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "cell step grad error {err}");
    }
}
