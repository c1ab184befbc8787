//! Finite-difference verification of layers, blocks and whole networks.
//!
//! Every check projects the output onto a fixed random tensor `R` and
//! differentiates `sum(y ⊙ R)`, so no gradient cancels out by symmetry
//! (a plain `sum` after softmax or batch norm would have zero gradient).

use crate::autograd::{GradCheckReport, GradChecker};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::BinaryOp;
use crate::layers::{BatchNorm2d, Conv2d, Dropout, SeparableConv2d};
use crate::model::{ModelSpec, Network, ResNetBlock, ResNetBlockSpec};
use crate::params::{Mode, ParamStore, Session};
use crate::rng::{Rng, StreamKind};
use crate::tensor::Tensor;

/// Fixed dropout stream so every evaluation sees the same mask.
const DROPOUT_SEED: u64 = 0x5eed;

/// `sum(y ⊙ weights)`.
pub fn project(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod))
}

/// Inputs followed by every learnable tensor of `store`, and an adapter that
/// runs a session-level `f` on a checker's tape with those leaves bound.
fn session_inputs<'a, F>(
    store: &'a ParamStore<f64>,
    mode: Mode,
    inputs: &[Tensor<f64>],
    f: F,
) -> (Vec<Tensor<f64>>, impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a)
where
    F: Fn(&mut Session<f64>, &[Var]) -> Result<Var> + 'a,
{
    let learnable = store.learnable_ids();
    let mut all: Vec<Tensor<f64>> = inputs.to_vec();
    all.extend(learnable.iter().map(|&id| store.get(id).clone()));
    let n_inputs = inputs.len();
    let run = move |tape: &mut Tape<f64>, vars: &[Var]| {
        let taken = std::mem::replace(tape, Tape::new());
        let mut s = Session::with_tape(store, mode, Rng::new(DROPOUT_SEED, 0), taken);
        for (&id, &v) in learnable.iter().zip(&vars[n_inputs..]) {
            s.bind(id, v);
        }
        let out = f(&mut s, &vars[..n_inputs]);
        *tape = s.into_tape();
        out
    };
    (all, run)
}

/// Check `f` with respect to `inputs` followed by every learnable tensor of
/// `store`, in store order.
pub fn check_session<F>(
    checker: &GradChecker,
    store: &ParamStore<f64>,
    mode: Mode,
    inputs: &[Tensor<f64>],
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<f64>, &[Var]) -> Result<Var>,
{
    let (all, run) = session_inputs(store, mode, inputs, f);
    checker.check(run, &all)
}

/// Like [`check_session`] but along `directions` random unit-variance
/// directions through the joint input and parameter space.
pub fn check_session_directions<F>(
    checker: &GradChecker,
    store: &ParamStore<f64>,
    mode: Mode,
    inputs: &[Tensor<f64>],
    f: F,
    directions: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<f64>, &[Var]) -> Result<Var>,
{
    let (all, run) = session_inputs(store, mode, inputs, f);
    let dirs: Vec<Vec<Tensor<f64>>> = (0..directions)
        .map(|_| all.iter().map(|x| Tensor::from_fn(x.shape(), |_| rng.normal())).collect())
        .collect();
    checker.check_directions(run, &all, &dirs)
}

/// Which part of the stack a suite exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Layers,
    Block,
    Model,
    All,
}

impl Scope {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "layers" => Some(Self::Layers),
            "block" => Some(Self::Block),
            "model" => Some(Self::Model),
            "all" => Some(Self::All),
            _ => None,
        }
    }
}

/// Worst relative error of one named check across its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub instances: usize,
    pub coordinates: usize,
    /// Coordinates or directions skipped at relu / max-pool kinks.
    pub skipped: usize,
}

impl CheckOutcome {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.coordinates > 0 && self.max_rel_error <= tolerance
    }
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

type Case = fn(&GradChecker, &mut Rng) -> Result<GradCheckReport>;

fn tape_case<F>(checker: &GradChecker, rng: &mut Rng, shapes: &[&[usize]], out: &[usize], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, rng)).collect();
    let r = random(out, rng);
    checker.check(
        |t, v| {
            let y = f(t, v)?;
            project(t, y, &r)
        },
        &inputs,
    )
}

fn binary_case(op: BinaryOp) -> impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {
    move |t, v| t.binary(op, v[0], v[1])
}

const LAYER_CASES: &[(&str, Case)] = &[
    ("add", |c, r| tape_case(c, r, &[&[2, 3, 4], &[3, 1]], &[2, 3, 4], binary_case(BinaryOp::Add))),
    ("sub", |c, r| tape_case(c, r, &[&[2, 3, 4], &[4]], &[2, 3, 4], binary_case(BinaryOp::Sub))),
    ("mul", |c, r| tape_case(c, r, &[&[2, 3, 4], &[3, 1]], &[2, 3, 4], binary_case(BinaryOp::Mul))),
    ("max", |c, r| tape_case(c, r, &[&[2, 3, 4], &[2, 3, 4]], &[2, 3, 4], binary_case(BinaryOp::Max))),
    ("matmul", |c, r| tape_case(c, r, &[&[3, 5], &[5, 4]], &[3, 4], |t, v| t.matmul(v[0], v[1]))),
    ("im2col", |c, r| tape_case(c, r, &[&[2, 2, 4, 4]], &[18, 32], |t, v| t.im2col(v[0], 3, 1, 1))),
    ("conv2d", |c, r| {
        tape_case(c, r, &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], &[2, 4, 5, 5], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        })
    }),
    ("conv2d_strided", |c, r| {
        tape_case(c, r, &[&[1, 2, 6, 6], &[3, 2, 3, 3]], &[1, 3, 2, 2], |t, v| t.conv2d(v[0], v[1], None, 2, 0))
    }),
    ("depthwise_conv2d", |c, r| {
        tape_case(c, r, &[&[2, 3, 5, 5], &[3, 1, 3, 3], &[3]], &[2, 3, 5, 5], |t, v| {
            t.depthwise_conv2d(v[0], v[1], v[2])
        })
    }),
    ("batch_norm", |c, r| {
        tape_case(c, r, &[&[2, 3, 3, 3], &[3], &[3]], &[2, 3, 3, 3], |t, v| {
            Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
        })
    }),
    ("batch_norm_infer", |c, r| {
        tape_case(c, r, &[&[2, 3, 3, 3], &[3], &[3]], &[2, 3, 3, 3], |t, v| {
            t.batch_norm_infer(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)
        })
    }),
    ("max_pool_2x2", |c, r| tape_case(c, r, &[&[2, 2, 4, 6]], &[2, 2, 2, 3], |t, v| t.max_pool_2x2(v[0]))),
    ("bilinear_upsample", |c, r| {
        tape_case(c, r, &[&[1, 2, 3, 4]], &[1, 2, 6, 8], |t, v| t.upsample_bilinear_2x(v[0]))
    }),
    ("pixel_shuffle", |c, r| tape_case(c, r, &[&[1, 8, 2, 3]], &[1, 2, 4, 6], |t, v| t.pixel_shuffle(v[0], 2))),
    ("dropout", |c, r| {
        tape_case(c, r, &[&[2, 3, 4]], &[2, 3, 4], |t, v| {
            t.dropout(v[0], 0.3, &mut Rng::new(DROPOUT_SEED, 0))
        })
    }),
    ("relu", |c, r| tape_case(c, r, &[&[3, 7]], &[3, 7], |t, v| Ok(t.relu(v[0])))),
    ("softmax_channels", |c, r| {
        tape_case(c, r, &[&[2, 3, 2, 2]], &[2, 3, 2, 2], |t, v| t.softmax_channels(v[0]))
    }),
    ("concat_channels", |c, r| {
        tape_case(c, r, &[&[2, 1, 2, 3], &[2, 3, 2, 3]], &[2, 4, 2, 3], |t, v| t.concat_channels(v))
    }),
    ("sum", |c, r| tape_case(c, r, &[&[2, 5]], &[], |t, v| Ok(t.sum(v[0])))),
    ("mean", |c, r| tape_case(c, r, &[&[2, 5]], &[], |t, v| Ok(t.mean(v[0])))),
    ("scale", |c, r| tape_case(c, r, &[&[2, 5]], &[2, 5], |t, v| Ok(t.scale(v[0], -1.7)))),
    ("reshape", |c, r| tape_case(c, r, &[&[2, 6]], &[3, 4], |t, v| t.reshape(v[0], &[3, 4]))),
    ("weighted_cross_entropy", |c, rng| {
        let logits = random(&[2, 3, 2, 2], rng);
        let labels = Tensor::from_fn(&[2, 2, 2], |_| rng.below(3) as u8);
        let weights = [0.5, 1.0, 2.5];
        c.check(
            |t, v| {
                let p = t.softmax_channels(v[0])?;
                t.weighted_cross_entropy(p, &labels, &weights)
            },
            &[logits],
        )
    }),
    ("layer.conv2d", |c, rng| {
        let mut store = ParamStore::new();
        let conv = Conv2d::same(&mut store, "conv", 2, 3, 3, rng);
        let x = random(&[2, 2, 4, 4], rng);
        let r = random(&[2, 3, 4, 4], rng);
        check_session(c, &store, Mode::Train, &[x], |s, v| {
            let y = conv.forward(s, v[0])?;
            project(&mut s.tape, y, &r)
        })
    }),
    ("layer.separable_conv2d", |c, rng| {
        let mut store = ParamStore::new();
        let conv = SeparableConv2d::new(&mut store, "sep", 3, 4, 3, rng);
        let x = random(&[2, 3, 4, 4], rng);
        let r = random(&[2, 4, 4, 4], rng);
        check_session(c, &store, Mode::Train, &[x], |s, v| {
            let y = conv.forward(s, v[0])?;
            project(&mut s.tape, y, &r)
        })
    }),
    ("layer.batch_norm", |c, rng| {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3);
        let x = random(&[2, 3, 3, 3], rng);
        let r = random(&[2, 3, 3, 3], rng);
        check_session(c, &store, Mode::Train, &[x], |s, v| {
            let y = bn.forward(s, v[0])?;
            project(&mut s.tape, y, &r)
        })
    }),
];

fn block_case(c: &GradChecker, rng: &mut Rng, cin: usize, cout: usize) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let spec = ResNetBlockSpec::new(cin, cout, 3, true);
    let block = ResNetBlock::new(&mut store, "block", spec, Dropout::new(0.05)?, rng);
    let x = random(&[1, cin, 8, 8], rng);
    let r = random(&[1, cout, 8, 8], rng);
    check_session(c, &store, Mode::Train, &[x], |s, v| {
        let y = block.forward(s, v[0])?;
        project(&mut s.tape, y, &r)
    })
}

const BLOCK_CASES: &[(&str, Case)] = &[
    ("block.projection", |c, r| block_case(c, r, 8, 16)),
    ("block.identity", |c, r| block_case(c, r, 8, 8)),
];

/// Random directions per whole-model instance.
const MODEL_DIRECTIONS: usize = 12;

fn model_case(c: &GradChecker, rng: &mut Rng) -> Result<GradCheckReport> {
    let mut spec = ModelSpec::proposed(4);
    spec.num_classes = 3;
    let net = Network::<f64>::build_with(&spec, rng)?;
    let x = random(&[2, 1, 32, 32], rng);
    let labels = Tensor::from_fn(&[2, 32, 32], |_| rng.below(3) as u8);
    let weights = [0.7, 1.1, 1.9];
    let f = |s: &mut Session<f64>, v: &[Var]| {
        let out = net.forward(s, v[0])?;
        s.tape.weighted_cross_entropy(out.probs, &labels, &weights)
    };
    check_session_directions(c, &net.params, Mode::Train, &[x], f, MODEL_DIRECTIONS, rng)
}

const MODEL_CASES: &[(&str, Case)] = &[("model.proposed", model_case)];

/// Names of the checks a scope runs, in order.
pub fn case_names(scope: Scope) -> Vec<&'static str> {
    cases(scope).iter().map(|(n, _)| *n).collect()
}

fn cases(scope: Scope) -> Vec<(&'static str, Case)> {
    let mut out = Vec::new();
    if matches!(scope, Scope::Layers | Scope::All) {
        out.extend_from_slice(LAYER_CASES);
    }
    if matches!(scope, Scope::Block | Scope::All) {
        out.extend_from_slice(BLOCK_CASES);
    }
    if matches!(scope, Scope::Model | Scope::All) {
        out.extend_from_slice(MODEL_CASES);
    }
    out
}

/// Run every check in `scope` on `instances` seeded random points.
/// Instance `i` of case `j` draws from `Test` substream `j * 1000 + i`.
pub fn run_suite(scope: Scope, checker: &GradChecker, seed: u64, instances: usize) -> Result<Vec<CheckOutcome>> {
    if instances == 0 {
        return Err(Error::InvalidArgument {
            op: "gradcheck",
            reason: "need at least one instance".into(),
        });
    }
    let mut results = Vec::new();
    for (j, (name, case)) in cases(scope).into_iter().enumerate() {
        let mut outcome = CheckOutcome {
            name: name.to_string(),
            max_rel_error: 0.0,
            instances,
            coordinates: 0,
            skipped: 0,
        };
        for i in 0..instances {
            let mut rng = Rng::substream(seed, StreamKind::Test, (j * 1000 + i) as u64);
            let report = case(checker, &mut rng)?;
            outcome.max_rel_error = outcome.max_rel_error.max(report.max_rel_error);
            outcome.coordinates += report.coordinates;
            outcome.skipped += report.skipped;
        }
        results.push(outcome);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::OpKind;

    #[test]
    fn every_tape_op_has_a_case() {
        let names = case_names(Scope::Layers);
        for kind in OpKind::ALL {
            if kind == OpKind::Leaf {
                continue;
            }
            assert!(names.contains(&kind.name()), "no check for {}", kind.name());
        }
    }

    #[test]
    fn layers_and_blocks_pass() {
        let results = run_suite(Scope::Layers, &GradChecker::default(), 11, 2).unwrap();
        let blocks = run_suite(Scope::Block, &GradChecker::default(), 11, 1).unwrap();
        for r in results.iter().chain(&blocks) {
            assert!(r.passed(1e-4), "{r:?}");
        }
    }

    #[test]
    fn whole_model_passes() {
        let results = run_suite(Scope::Model, &GradChecker::default(), 5, 1).unwrap();
        assert!(results[0].passed(1e-4), "{:?}", results[0]);
        assert!(results[0].skipped < results[0].coordinates);
    }

    #[test]
    fn corruption_is_caught() {
        let checker = GradChecker {
            corrupt: Some(OpKind::DepthwiseConv2d),
            ..GradChecker::default()
        };
        let results = run_suite(Scope::Layers, &checker, 3, 1).unwrap();
        let dw = results.iter().find(|r| r.name == "depthwise_conv2d").unwrap();
        assert!(dw.max_rel_error > 1e-2);
        let relu = results.iter().find(|r| r.name == "relu").unwrap();
        assert!(relu.max_rel_error <= 1e-4);
    }
}
