//! Named gradient checks over tiny configurations of every differentiable
//! building block, compared against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AttentionConfig, Binm, SelfAttentionBlock};
use crate::bimamba::{BiMamba, BiMambaConfig};
use crate::codecs::{Psei, PseiConfig, Pssi, PssiConfig};
use crate::model::{asymmetric_loss, Dsm, Dsrpgo, ModalInputs, ModelConfig, ModelError};
use crate::nn::{grad_check_store, weighted_sum, Builder, Ctx, ParamStore};
use crate::ssm::SelectiveSsm;
use crate::tensor::{grad_check, GradCheckReport, Graph, Result, Tensor, TensorError, Var};

pub const SUITE_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl CheckRow {
    fn from_report(name: &str, r: &GradCheckReport) -> Self {
        Self {
            name: name.to_string(),
            checked: r.inputs.iter().map(|c| c.checked).sum(),
            max_rel_err: r.max_rel_err(),
            passed: r.passed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub tol: f64,
    pub rows: Vec<CheckRow>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("# tol\t{:e}\ncheck\tchecked\tmax_rel_err\tstatus\n", self.tol);
        for r in &self.rows {
            s += &format!(
                "{}\t{}\t{:.3e}\t{}\n",
                r.name,
                r.checked,
                r.max_rel_err,
                if r.passed { "pass" } else { "FAIL" }
            );
        }
        s
    }
}

type Check = fn(u64) -> Result<GradCheckReport>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), 0.5, 2.0, &mut rng(seed))
}

fn op(f: impl Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Result<GradCheckReport> {
    grad_check(f, inputs, STEP, SUITE_TOL)
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Invalid { op: "model", detail: other.to_string() },
    }
}

fn store_check(
    seed: u64,
    build: impl FnOnce(&mut Builder<'_>) -> Box<dyn Fn(&mut Ctx<'_>) -> Result<Var>>,
) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let f = build(&mut Builder::new(&mut store, &mut r));
    grad_check_store(&store, f, STEP, SUITE_TOL, 12)
}

fn input(b: &mut Builder<'_>, shape: &[usize], seed: u64) -> crate::nn::ParamId {
    b.store.add(format!("input{seed}"), randn(shape, seed))
}

/// Names of every check in the default suite, in run order.
pub fn check_names() -> Vec<&'static str> {
    suite().iter().map(|(n, _)| *n).collect()
}

fn suite() -> Vec<(&'static str, Check)> {
    vec![
        ("op.add_broadcast", |s| op(|g, x| g.add(x[0], x[1]), &[randn(&[2, 3], s), randn(&[3], s + 1)])),
        ("op.hadamard", |s| op(|g, x| g.hadamard(x[0], x[1]), &[randn(&[2, 3], s), randn(&[2, 1], s + 1)])),
        ("op.matmul", |s| op(|g, x| g.matmul(x[0], x[1]), &[randn(&[2, 3, 4], s), randn(&[4, 2], s + 1)])),
        ("op.exp_log", |s| {
            op(
                |g, x| {
                    let l = g.log(x[0])?;
                    g.exp(l)
                },
                &[positive(&[5], s)],
            )
        }),
        ("op.sigmoid_silu_softplus", |s| {
            op(
                |g, x| {
                    let a = g.sigmoid(x[0]);
                    let b = g.silu(a);
                    Ok(g.softplus(b))
                },
                &[randn(&[6], s)],
            )
        }),
        ("op.powf", |s| op(|g, x| g.powf(x[0], 1.7), &[positive(&[4], s)])),
        ("op.softmax", |s| op(|g, x| g.softmax(x[0], 1), &[randn(&[2, 4], s)])),
        ("op.layer_norm", |s| op(|g, x| g.layer_norm(x[0], 1, 1e-5), &[randn(&[3, 5], s)])),
        ("op.causal_conv1d", |s| {
            op(|g, x| g.causal_conv1d(x[0], x[1]), &[randn(&[2, 5, 3], s), randn(&[3, 2], s + 1)])
        }),
        ("op.shape_ops", |s| {
            op(
                |g, x| {
                    let c = g.concat(&[x[0], x[1]], 1)?;
                    let t = g.transpose(c, &[1, 0])?;
                    let r = g.reverse(t, 0)?;
                    let sl = g.slice(r, 0, 1, 4)?;
                    let re = g.reshape(sl, &[6])?;
                    let m = g.mean(c, 0)?;
                    let sm = g.sum(m, 0)?;
                    let sm = g.reshape(sm, &[1])?;
                    g.hadamard(re, sm)
                },
                &[randn(&[2, 2], s), randn(&[2, 3], s + 1)],
            )
        }),
        ("ssm.selective_scan", |s| {
            let a = Tensor::uniform(vec![2, 3], -1.5, -0.2, &mut rng(s + 2));
            op(
                |g, x| g.selective_scan(x[0], x[1], x[2], x[3], x[4], x[5]),
                &[
                    randn(&[1, 4, 2], s),
                    positive(&[1, 4, 2], s + 1),
                    a,
                    randn(&[1, 4, 3], s + 3),
                    randn(&[1, 4, 3], s + 4),
                    randn(&[2], s + 5),
                ],
            )
        }),
        ("ssm.selective_module", |s| {
            store_check(s, |b| {
                let m = SelectiveSsm::new(b, "ssm", 3, 2);
                let x = input(b, &[1, 4, 3], s);
                Box::new(move |cx| {
                    let xv = cx.param(x);
                    let y = m.forward(cx, xv)?;
                    weighted_sum(cx, y)
                })
            })
        }),
        ("bimamba", |s| {
            store_check(s, |b| {
                let m = BiMamba::new(b, "blk", BiMambaConfig { width: 4, inner: 6, state: 2, conv_width: 3 });
                let x = input(b, &[1, 4, 4], s);
                Box::new(move |cx| {
                    let xv = cx.param(x);
                    let y = m.forward(cx, xv)?;
                    weighted_sum(cx, y)
                })
            })
        }),
        ("attention.self_block", |s| {
            store_check(s, |b| {
                let m = SelfAttentionBlock::new(b, "blk", AttentionConfig::new(4, 2));
                let x = input(b, &[2, 3, 4], s);
                Box::new(move |cx| {
                    let xv = cx.param(x);
                    let y = m.forward(cx, xv)?;
                    weighted_sum(cx, y)
                })
            })
        }),
        ("attention.cross_binm", |s| {
            store_check(s, |b| {
                let m = Binm::new(b, "binm", AttentionConfig::new(4, 2), false);
                let x1 = input(b, &[2, 3, 4], s);
                let x2 = input(b, &[2, 2, 4], s + 1);
                Box::new(move |cx| {
                    let (a, c) = (cx.param(x1), cx.param(x2));
                    let (y1, y2) = m.forward(cx, a, c)?;
                    let (l1, l2) = (weighted_sum(cx, y1)?, weighted_sum(cx, y2)?);
                    cx.graph.add(l1, l2)
                })
            })
        }),
        ("codec.pssi", |s| {
            store_check(s, |b| {
                let cfg = PssiConfig { latent: 4, token_width: 2, state: 2, ..PssiConfig::new(vec![4, 3]) };
                let m = Pssi::new(b, cfg);
                let bin = |shape: [usize; 2], seed| {
                    Tensor::uniform(shape.to_vec(), 0.0, 1.0, &mut rng(seed)).map(|v| (v < 0.5) as u8 as f64)
                };
                let (x1, x2) = (bin([3, 4], s), bin([3, 3], s + 1));
                Box::new(move |cx| {
                    let a = cx.constant(x1.clone());
                    let c = cx.constant(x2.clone());
                    m.loss(cx, &[a, c])
                })
            })
        }),
        ("codec.psei", |s| {
            store_check(s, |b| {
                let cfg = PseiConfig { latent: 4, token_width: 2, heads: 1, blocks: 1, ..PseiConfig::new(5) };
                let m = Psei::new(b, cfg);
                let x = Tensor::uniform(vec![3, 5], 0.05, 0.95, &mut rng(s));
                Box::new(move |cx| {
                    let xv = cx.constant(x.clone());
                    m.loss(cx, xv)
                })
            })
        }),
        ("dsm.experts", |s| {
            store_check(s, |b| {
                let cfg = tiny_model_config();
                let m = Dsm::new(b, &cfg);
                let x = input(b, &[2, cfg.channels() * cfg.latent()], s);
                let t = cfg.resolved_threshold();
                Box::new(move |cx| {
                    let xv = cx.param(x);
                    let (y, _) = m.forward(cx, xv, t).map_err(model_err)?;
                    weighted_sum(cx, y)
                })
            })
        }),
        ("loss.asymmetric", |s| {
            store_check(s, |b| {
                let logits = input(b, &[3, 4], s);
                let labels = Tensor::uniform(vec![3, 4], 0.0, 1.0, &mut rng(s + 1)).map(|v| (v < 0.4) as u8 as f64);
                Box::new(move |cx| {
                    let z = cx.param(logits);
                    let p = cx.graph.sigmoid(z);
                    let y = cx.constant(labels.clone());
                    asymmetric_loss(cx, p, y, 1.0, 4.0).map_err(model_err)
                })
            })
        }),
        ("model.full", |s| {
            store_check(s, |b| {
                let mut cfg = tiny_model_config();
                cfg.threshold = Some(0.0);
                cfg.gamma_pos = 1.0;
                let m = Dsrpgo::new(b, cfg).expect("tiny config is valid");
                let mut r = rng(s + 1);
                let bin = |shape: [usize; 2], r: &mut ChaCha8Rng| {
                    Tensor::uniform(shape.to_vec(), 0.0, 1.0, r).map(|v| (v < 0.4) as u8 as f64)
                };
                let x = ModalInputs {
                    ppi: bin([2, 6], &mut r),
                    attributes: bin([2, 5], &mut r),
                    sequence: Tensor::uniform(vec![2, 8], 0.0, 1.0, &mut r),
                };
                let y = bin([2, 4], &mut r);
                Box::new(move |cx| Ok(m.loss(cx, &x, &y).map_err(model_err)?.0))
            })
        }),
    ]
}

fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(6, 5, 8, 4);
    cfg.pssi.latent = 8;
    cfg.pssi.token_width = 4;
    cfg.pssi.state = 2;
    cfg.psei.latent = 8;
    cfg.psei.token_width = 4;
    cfg.psei.blocks = 1;
    cfg.heads = 2;
    cfg.msl_blocks = 1;
    cfg.expert_hidden = 8;
    cfg.expert_width = 4;
    cfg.predictor_hidden = 8;
    cfg
}

/// A deliberately wrong derivative (`d sin = 1.5 cos`), used as a negative control.
pub const FAULT_CHECK: &str = "op.injected_fault";

fn faulty(s: u64) -> Result<GradCheckReport> {
    op(|g, x| Ok(g.map(x[0], f64::sin, |v| 1.5 * v.cos())), &[randn(&[4], s)])
}

/// Runs the suite, or only the checks named in `only`. With `inject_fault`
/// a check with a broken backward rule is appended.
pub fn run_suite(seed: u64, only: Option<&[String]>, inject_fault: bool) -> Result<SuiteReport> {
    let mut rows = Vec::new();
    for (name, check) in suite() {
        if only.is_some_and(|o| !o.iter().any(|n| n == name)) {
            continue;
        }
        rows.push(CheckRow::from_report(name, &check(seed)?));
    }
    if inject_fault {
        rows.push(CheckRow::from_report(FAULT_CHECK, &faulty(seed)?));
    }
    Ok(SuiteReport { tol: SUITE_TOL, rows })
}
