//! Built-in verification suite: randomized gradient checks for every tape op
//! and the full decoder-cell step, plus the hand-computed metric oracles.
//!
//! The CLI runs this behind `selfcheck`; each check reports independently so
//! a regression names the exact op or oracle that broke.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionNodes, LstmNodes};
use crate::cell::{
    bind_cell_state, cell_step_on_tape, init_cell_state, CarryNodes, CellNodes, DecoderCellParams,
    StageCarry,
};
use crate::metrics::{bleu, build_idf, cider, rouge_l, ROUGE_BETA};
use crate::stack::StackConfig;
use crate::tensor::{grad_check, softmax_values, NodeId, Tape, Tensor};
use crate::Result;

/// Result of one named check; `error` is `None` on success.
#[derive(Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub error: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none()
    }
}

const TRIALS: usize = 20;
const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), values).expect("positive dims")
}

fn rand_positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(0.1..1.1)).collect();
    Tensor::new(shape.to_vec(), values).expect("positive dims")
}

/// Run `trial` [`TRIALS`] times and fail on the worst gradient error.
fn op_check(
    name: &str,
    seed: u64,
    mut trial: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..TRIALS {
        match trial(&mut rng) {
            Ok(err) => worst = worst.max(err),
            Err(e) => {
                return CheckOutcome {
                    name: name.into(),
                    error: Some(format!("trial {i} failed: {e}")),
                }
            }
        }
    }
    let error = (worst >= TOL)
        .then(|| format!("max relative gradient error {worst:.3e} exceeds {TOL:.0e}"));
    CheckOutcome { name: name.into(), error }
}

/// Reduce any op output to a scalar through a weight leaf included in the
/// checked point, so the loss depends on every output coordinate.
fn weighted_sum(tape: &mut Tape, out: NodeId, w: NodeId) -> Result<NodeId> {
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn op_gradient_checks(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();

    out.push(op_check("op-grad/matmul-mat", seed, |rng| {
        let (m, k, n) =
            (rng.random_range(1..4usize), rng.random_range(1..4usize), rng.random_range(1..4usize));
        let point =
            [rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n]), rand_tensor(rng, &[m, n])];
        grad_check(
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                weighted_sum(tape, y, ids[2])
            },
            &point,
            EPS,
        )
    }));

    out.push(op_check("op-grad/matmul-vec", seed + 1, |rng| {
        let (m, k) = (rng.random_range(1..5usize), rng.random_range(1..5usize));
        let point = [rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k]), rand_tensor(rng, &[m])];
        grad_check(
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                weighted_sum(tape, y, ids[2])
            },
            &point,
            EPS,
        )
    }));

    out.push(op_check("op-grad/add", seed + 2, |rng| {
        let n = rng.random_range(1..6usize);
        let point = [rand_tensor(rng, &[n]), rand_tensor(rng, &[n]), rand_tensor(rng, &[n])];
        grad_check(
            |tape, ids| {
                let y = tape.add(ids[0], ids[1])?;
                weighted_sum(tape, y, ids[2])
            },
            &point,
            EPS,
        )
    }));

    out.push(op_check("op-grad/mul", seed + 3, |rng| {
        let n = rng.random_range(1..6usize);
        let point = [rand_tensor(rng, &[n]), rand_tensor(rng, &[n]), rand_tensor(rng, &[n])];
        grad_check(
            |tape, ids| {
                let y = tape.mul(ids[0], ids[1])?;
                weighted_sum(tape, y, ids[2])
            },
            &point,
            EPS,
        )
    }));

    out.push(op_check("op-grad/mul-broadcast", seed + 4, |rng| {
        let n = rng.random_range(2..6usize);
        let point = [rand_tensor(rng, &[1]), rand_tensor(rng, &[n]), rand_tensor(rng, &[n])];
        grad_check(
            |tape, ids| {
                let y = tape.mul(ids[0], ids[1])?;
                weighted_sum(tape, y, ids[2])
            },
            &point,
            EPS,
        )
    }));

    out.push(op_check("op-grad/tanh", seed + 5, |rng| {
        let n = rng.random_range(1..6usize);
        let point = [rand_tensor(rng, &[n]), rand_tensor(rng, &[n])];
        grad_check(
            |tape, ids| {
                let y = tape.tanh(ids[0])?;
                weighted_sum(tape, y, ids[1])
            },
            &point,
            EPS,
        )
    }));

    out.push(op_check("op-grad/sigmoid", seed + 6, |rng| {
        let n = rng.random_range(1..6usize);
        let point = [rand_tensor(rng, &[n]), rand_tensor(rng, &[n])];
        grad_check(
            |tape, ids| {
                let y = tape.sigmoid(ids[0])?;
                weighted_sum(tape, y, ids[1])
            },
            &point,
            EPS,
        )
    }));

    out.push(op_check("op-grad/softmax", seed + 7, |rng| {
        let n = rng.random_range(2..6usize);
        let point = [rand_tensor(rng, &[n]), rand_tensor(rng, &[n])];
        grad_check(
            |tape, ids| {
                let y = tape.softmax(ids[0])?;
                weighted_sum(tape, y, ids[1])
            },
            &point,
            EPS,
        )
    }));

    out.push(op_check("op-grad/concat", seed + 8, |rng| {
        let (a, b) = (rng.random_range(1..4usize), rng.random_range(1..4usize));
        let point = [rand_tensor(rng, &[a]), rand_tensor(rng, &[b]), rand_tensor(rng, &[a + b])];
        grad_check(
            |tape, ids| {
                let y = tape.concat(&[ids[0], ids[1]])?;
                weighted_sum(tape, y, ids[2])
            },
            &point,
            EPS,
        )
    }));

    out.push(op_check("op-grad/row-select", seed + 9, |rng| {
        let (m, n) = (rng.random_range(2..5usize), rng.random_range(1..5usize));
        let row = rng.random_range(0..m);
        let point = [rand_tensor(rng, &[m, n]), rand_tensor(rng, &[n])];
        grad_check(
            move |tape, ids| {
                let y = tape.row_select(ids[0], row)?;
                weighted_sum(tape, y, ids[1])
            },
            &point,
            EPS,
        )
    }));

    out.push(op_check("op-grad/slice", seed + 10, |rng| {
        let n = rng.random_range(3..7usize);
        let lo = rng.random_range(0..n - 1);
        let hi = rng.random_range(lo + 1..=n);
        let point = [rand_tensor(rng, &[n]), rand_tensor(rng, &[hi - lo])];
        grad_check(
            move |tape, ids| {
                let y = tape.slice(ids[0], lo, hi)?;
                weighted_sum(tape, y, ids[1])
            },
            &point,
            EPS,
        )
    }));

    out.push(op_check("op-grad/scalar-mul", seed + 11, |rng| {
        let n = rng.random_range(1..6usize);
        let c = rng.random_range(-2.0..2.0);
        let point = [rand_tensor(rng, &[n]), rand_tensor(rng, &[n])];
        grad_check(
            move |tape, ids| {
                let y = tape.scalar_mul(ids[0], c)?;
                weighted_sum(tape, y, ids[1])
            },
            &point,
            EPS,
        )
    }));

    out.push(op_check("op-grad/sum", seed + 12, |rng| {
        let n = rng.random_range(1..6usize);
        let point = [rand_tensor(rng, &[n])];
        grad_check(|tape, ids| tape.sum(ids[0]), &point, EPS)
    }));

    out.push(op_check("op-grad/log", seed + 13, |rng| {
        let n = rng.random_range(1..6usize);
        let point = [rand_positive(rng, &[n]), rand_tensor(rng, &[n])];
        grad_check(
            |tape, ids| {
                let y = tape.log(ids[0])?;
                weighted_sum(tape, y, ids[1])
            },
            &point,
            EPS,
        )
    }));

    out.push(op_check("op-grad/nll-gather", seed + 14, |rng| {
        let n = rng.random_range(2..6usize);
        let target = rng.random_range(0..n);
        let point = [rand_positive(rng, &[n])];
        grad_check(move |tape, ids| tape.nll_gather(ids[0], target), &point, EPS)
    }));

    out
}

fn cell_step_gradient_check(seed: u64) -> CheckOutcome {
    let cfg = StackConfig {
        n_stages: 1,
        d_v: 3,
        d_e: 2,
        d_h: 2,
        d_a: 2,
        d_s: 2,
        d_p: 4,
        n_v: 2,
        n_e: 2,
        t_max: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = DecoderCellParams::init(&cfg, &mut rng);
    let s = init_cell_state(&cfg);
    let emb = rand_tensor(&mut rng, &[cfg.d_s]);
    let v0: Vec<Tensor> = (0..cfg.n_v).map(|_| rand_tensor(&mut rng, &[cfg.d_v])).collect();
    let e0: Vec<Tensor> = (0..cfg.n_e).map(|_| rand_tensor(&mut rng, &[cfg.d_e])).collect();
    let carry = StageCarry {
        h_lang: rand_tensor(&mut rng, &[cfg.d_h]),
        v_hat: rand_tensor(&mut rng, &[cfg.d_v]),
        e_hat: rand_tensor(&mut rng, &[cfg.d_e]),
    };

    let mut point = Vec::new();
    p.for_each("", &mut |_, t| point.push(t.clone()));
    let result = grad_check(
        |tape, ids| {
            let pn = CellNodes {
                lstm_v: LstmNodes { w_x: ids[0], w_h: ids[1], b: ids[2] },
                lstm_s: LstmNodes { w_x: ids[3], w_h: ids[4], b: ids[5] },
                attn_v: AttentionNodes {
                    w_score: ids[6],
                    w_feat: ids[7],
                    w_prev: ids[8],
                    w_hv: ids[9],
                    w_hs: ids[10],
                },
                attn_s: AttentionNodes {
                    w_score: ids[11],
                    w_feat: ids[12],
                    w_prev: ids[13],
                    w_hv: ids[14],
                    w_hs: ids[15],
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
            let v0n: Vec<NodeId> = v0.iter().map(|t| tape.leaf(t.clone())).collect::<Result<_>>()?;
            let e0n: Vec<NodeId> = e0.iter().map(|t| tape.leaf(t.clone())).collect::<Result<_>>()?;
            let cn = CarryNodes {
                h_lang: tape.leaf(carry.h_lang.clone())?,
                v_hat: tape.leaf(carry.v_hat.clone())?,
                e_hat: tape.leaf(carry.e_hat.clone())?,
            };
            let out = cell_step_on_tape(tape, &pn, &sn, embn, &v0n, &e0n, &cn)?;
            let dist = tape.softmax(out.logits)?;
            tape.nll_gather(dist, 1)
        },
        &point,
        EPS,
    );
    let error = match result {
        Ok(err) if err < TOL => None,
        Ok(err) => Some(format!("cell-step gradient error {err:.3e} exceeds {TOL:.0e}")),
        Err(e) => Some(format!("{e}")),
    };
    CheckOutcome { name: "cell-step-grad".into(), error }
}

fn fail_if(name: &str, condition: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name: name.into(), error: condition.then_some(detail) }
}

fn metric_oracles() -> Vec<CheckOutcome> {
    let toks = |s: &str| -> Vec<String> { s.split_whitespace().map(str::to_owned).collect() };
    let mut out = Vec::new();

    let b = bleu(
        &[toks("the the the the")],
        &[vec![toks("the cat is on the mat")]],
        4,
    );
    out.push(match b {
        Ok(scores) => {
            let want = 0.5 * (-0.5f64).exp();
            fail_if(
                "oracle/bleu-clip-bp",
                (scores[0] - want).abs() > 1e-9,
                format!("B-1 {} expected {want}", scores[0]),
            )
        }
        Err(e) => fail_if("oracle/bleu-clip-bp", true, e.to_string()),
    });

    let perfect = bleu(&[toks("a b c d e")], &[vec![toks("a b c d e")]], 4)
        .map(|s| s.iter().all(|x| (x - 1.0).abs() < 1e-12))
        .unwrap_or(false);
    out.push(fail_if("oracle/bleu-perfect", !perfect, "identical candidate not at 1.0".into()));

    let f = rouge_l(&toks("a b c d"), &[toks("a c b d")], ROUGE_BETA);
    out.push(match f {
        Ok(f) => fail_if(
            "oracle/rouge-lcs",
            (f - 0.75).abs() > 1e-9,
            format!("ROUGE-L {f} expected 0.75"),
        ),
        Err(e) => fail_if("oracle/rouge-lcs", true, e.to_string()),
    });

    // Single-image corpus: every idf is ln(1) = 0, so CIDEr is 0.
    let corpus = vec![vec![toks("a b c d")]];
    let degenerate = build_idf(&corpus)
        .and_then(|idf| cider(&[toks("a b c d")], &[corpus[0].clone()], &idf))
        .map(|(s, _)| s[0] == 0.0)
        .unwrap_or(false);
    out.push(fail_if("oracle/cider-degenerate-idf", !degenerate, "expected CIDEr 0".into()));

    // Disjoint two-image corpus: unique n-grams give a perfect self-match 10.
    let corpus = vec![vec![toks("p q r s t")], vec![toks("u v w x y")]];
    let ten = build_idf(&corpus)
        .and_then(|idf| cider(&[toks("p q r s t")], &[corpus[0].clone()], &idf))
        .map(|(s, _)| (s[0] - 10.0).abs() < 1e-9)
        .unwrap_or(false);
    out.push(fail_if("oracle/cider-identity", !ten, "expected CIDEr 10".into()));

    let idf_ok = build_idf(&vec![vec![toks("a b")], vec![toks("c d")]])
        .map(|idf| (idf.idf(&vec!["a".into()]) - 2f64.ln()).abs() < 1e-12)
        .unwrap_or(false);
    out.push(fail_if("oracle/idf-two-images", !idf_ok, "expected idf ln 2".into()));

    out
}

fn simplex_check(seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..200 {
        let n = rng.random_range(1..8usize);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        let p = softmax_values(&x);
        let sum: f64 = p.iter().sum();
        if p.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return CheckOutcome {
                name: "softmax-simplex".into(),
                error: Some(format!("softmax of {x:?} is not a simplex point (sum {sum})")),
            };
        }
    }
    CheckOutcome { name: "softmax-simplex".into(), error: None }
}

/// Demonstrates that the harness catches a wrong gradient: with
/// `corrupt` set, the analytic gradient of Σx²/2 is doubled before the
/// comparison and the check must fail.
fn corruption_hook(seed: u64, corrupt: bool) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[6]);
    let mut tape = Tape::new();
    let outcome = (|| -> Result<Option<String>> {
        let xid = tape.leaf(x.clone())?;
        let sq = tape.mul(xid, xid)?;
        let s = tape.sum(sq)?;
        let loss = tape.scalar_mul(s, 0.5)?;
        let table = tape.backward(loss)?;
        let scale = if corrupt { 2.0 } else { 1.0 };
        let analytic: Vec<f64> = table.get(xid).values().iter().map(|g| g * scale).collect();
        // Central differences of Σx²/2 are exactly x in this quadratic.
        let mut worst = 0.0f64;
        for (i, (&a, &numeric)) in analytic.iter().zip(x.values()).enumerate() {
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            if rel >= TOL {
                return Ok(Some(format!(
                    "gradient coordinate {i} off by relative {rel:.3} (corrupted op)"
                )));
            }
        }
        let _ = worst;
        Ok(None)
    })();
    match outcome {
        Ok(error) => CheckOutcome { name: "gradient-corruption-hook".into(), error },
        Err(e) => CheckOutcome { name: "gradient-corruption-hook".into(), error: Some(e.to_string()) },
    }
}

/// Run every check. `corrupt_grad` injects a deliberate gradient corruption
/// so callers can verify the suite actually fails.
pub fn run_all(seed: u64, corrupt_grad: bool) -> Vec<CheckOutcome> {
    let mut out = op_gradient_checks(seed);
    out.push(cell_step_gradient_check(seed + 100));
    out.push(simplex_check(seed + 200));
    out.extend(metric_oracles());
    out.push(corruption_hook(seed + 300, corrupt_grad));
    out
}
