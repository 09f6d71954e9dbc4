//! Finite-difference verification of the autodiff backward passes.
//!
//! Each case builds a scalar loss from a small set of leaf tensors, computes
//! analytic gradients via the tape, then re-derives every partial derivative
//! with central differences `(f(x+h) - f(x-h)) / 2h` at `h = 1e-5`. The
//! numeric side never touches the backward code, so it stays an independent
//! oracle for it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for multi-op compositions, where forward rounding compounds.
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

/// Outcome of one gradient-check case.
#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct CaseSpec {
    name: &'static str,
    tol: f64,
    inputs: Vec<Tensor>,
    loss: LossFn,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

/// Appends `sum(out * r)` to the tape: a fixed random projection so the
/// upstream gradient reaching the op under test is non-uniform.
fn project(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.leaf(r.clone(), false);
    let prod = tape.mul(out, rv)?;
    Ok(tape.sum(prod))
}

fn check_case(spec: &CaseSpec) -> Result<GradCheckCase> {
    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = spec
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let loss = (spec.loss)(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&spec.inputs)
        .map(|(v, t)| {
            grads
                .take(*v)
                .unwrap_or_else(|| vec![0.0; t.shape().count()])
        })
        .collect();

    // Numeric gradients, re-running the whole forward per perturbation.
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = (spec.loss)(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut max_rel: f64 = 0.0;
    for (i, _) in spec.inputs.iter().enumerate() {
        let count = spec.inputs[i].shape().count();
        for e in 0..count {
            let mut plus = spec.inputs.to_vec();
            plus[i].data_mut()[e] += FD_STEP;
            let mut minus = spec.inputs.to_vec();
            minus[i].data_mut()[e] -= FD_STEP;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let a = analytic[i][e];
            let denom = a.abs().max(fd.abs()).max(1e-4);
            max_rel = max_rel.max((a - fd).abs() / denom);
        }
    }
    Ok(GradCheckCase {
        name: spec.name.to_string(),
        max_rel_err: max_rel,
        tolerance: spec.tol,
    })
}

fn case_specs(seed: u64) -> Vec<CaseSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs: Vec<CaseSpec> = Vec::new();

    // conv2d, stride 1 and stride 2.
    for (name, stride, side) in [("conv2d/stride1", 1usize, 5usize), ("conv2d/stride2", 2, 6)] {
        let x = uniform(&mut rng, Shape::new(2, 2, side, side), -1.0, 1.0);
        let w = uniform(&mut rng, Shape::new(3, 2, 3, 3), -0.5, 0.5);
        let oh = (side + 2 - 3) / stride + 1;
        let r = uniform(&mut rng, Shape::new(2, 3, oh, oh), -1.0, 1.0);
        specs.push(CaseSpec {
            name,
            tol: OP_TOLERANCE,
            inputs: vec![x, w],
            loss: Box::new(move |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], stride, 1)?;
                project(tape, y, &r)
            }),
        });
    }

    // depthwise_conv2d, stride 1 and stride 2.
    for (name, stride, side) in [
        ("depthwise_conv2d/stride1", 1usize, 5usize),
        ("depthwise_conv2d/stride2", 2, 6),
    ] {
        let x = uniform(&mut rng, Shape::new(2, 3, side, side), -1.0, 1.0);
        let w = uniform(&mut rng, Shape::new(3, 1, 3, 3), -0.5, 0.5);
        let oh = (side + 2 - 3) / stride + 1;
        let r = uniform(&mut rng, Shape::new(2, 3, oh, oh), -1.0, 1.0);
        specs.push(CaseSpec {
            name,
            tol: OP_TOLERANCE,
            inputs: vec![x, w],
            loss: Box::new(move |tape, vars| {
                let y = tape.depthwise_conv2d(vars[0], vars[1], stride, 1)?;
                project(tape, y, &r)
            }),
        });
    }

    // batch_norm in both modes.
    for (name, mode) in [("batch_norm/train", Mode::Train), ("batch_norm/eval", Mode::Eval)] {
        let x = uniform(&mut rng, Shape::new(3, 2, 3, 3), -2.0, 2.0);
        let gamma = uniform(&mut rng, Shape::new(1, 2, 1, 1), 0.5, 1.5);
        let beta = uniform(&mut rng, Shape::new(1, 2, 1, 1), -0.5, 0.5);
        let rm = uniform(&mut rng, Shape::new(1, 2, 1, 1), -0.3, 0.3);
        let rv = uniform(&mut rng, Shape::new(1, 2, 1, 1), 0.5, 1.5);
        let r = uniform(&mut rng, Shape::new(3, 2, 3, 3), -1.0, 1.0);
        specs.push(CaseSpec {
            name,
            tol: OP_TOLERANCE,
            inputs: vec![x, gamma, beta],
            loss: Box::new(move |tape, vars| {
                let (y, _) =
                    tape.batch_norm(vars[0], vars[1], vars[2], &rm, &rv, mode, 1e-3)?;
                project(tape, y, &r)
            }),
        });
    }

    // Pointwise activations.
    for name in ["swish", "sigmoid"] {
        let x = uniform(&mut rng, Shape::new(1, 2, 4, 4), -3.0, 3.0);
        let r = uniform(&mut rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
        specs.push(CaseSpec {
            name: if name == "swish" { "swish" } else { "sigmoid" },
            tol: OP_TOLERANCE,
            inputs: vec![x],
            loss: Box::new(move |tape, vars| {
                let y = if name == "swish" {
                    tape.swish(vars[0])
                } else {
                    tape.sigmoid(vars[0])
                };
                project(tape, y, &r)
            }),
        });
    }

    // squeeze_excitation over all five inputs.
    {
        let x = uniform(&mut rng, Shape::new(2, 4, 3, 3), -1.0, 1.0);
        let w1 = uniform(&mut rng, Shape::new(2, 4, 1, 1), -0.5, 0.5);
        let b1 = uniform(&mut rng, Shape::new(1, 2, 1, 1), -0.1, 0.1);
        let w2 = uniform(&mut rng, Shape::new(4, 2, 1, 1), -0.5, 0.5);
        let b2 = uniform(&mut rng, Shape::new(1, 4, 1, 1), -0.1, 0.1);
        let r = uniform(&mut rng, Shape::new(2, 4, 3, 3), -1.0, 1.0);
        specs.push(CaseSpec {
            name: "squeeze_excitation",
            tol: OP_TOLERANCE,
            inputs: vec![x, w1, b1, w2, b2],
            loss: Box::new(move |tape, vars| {
                let y =
                    tape.squeeze_excitation(vars[0], vars[1], vars[2], vars[3], vars[4])?;
                project(tape, y, &r)
            }),
        });
    }

    // drop_connect with a frozen mask stream: the loss closure reseeds the
    // rng every evaluation, so finite differences see a fixed mask.
    {
        let x = uniform(&mut rng, Shape::new(6, 2, 3, 3), -1.0, 1.0);
        let r = uniform(&mut rng, Shape::new(6, 2, 3, 3), -1.0, 1.0);
        specs.push(CaseSpec {
            name: "drop_connect",
            tol: OP_TOLERANCE,
            inputs: vec![x],
            loss: Box::new(move |tape, vars| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(1234);
                let y = tape.drop_connect(vars[0], 0.8, Mode::Train, &mut mask_rng)?;
                project(tape, y, &r)
            }),
        });
    }

    // global_avg_pool.
    {
        let x = uniform(&mut rng, Shape::new(2, 3, 4, 4), -1.0, 1.0);
        let r = uniform(&mut rng, Shape::new(2, 3, 1, 1), -1.0, 1.0);
        specs.push(CaseSpec {
            name: "global_avg_pool",
            tol: OP_TOLERANCE,
            inputs: vec![x],
            loss: Box::new(move |tape, vars| {
                let y = tape.global_avg_pool(vars[0]);
                project(tape, y, &r)
            }),
        });
    }

    // fully_connected.
    {
        let x = uniform(&mut rng, Shape::new(3, 4, 1, 1), -1.0, 1.0);
        let w = uniform(&mut rng, Shape::new(5, 4, 1, 1), -0.5, 0.5);
        let b = uniform(&mut rng, Shape::new(1, 5, 1, 1), -0.2, 0.2);
        let r = uniform(&mut rng, Shape::new(3, 5, 1, 1), -1.0, 1.0);
        specs.push(CaseSpec {
            name: "fully_connected",
            tol: OP_TOLERANCE,
            inputs: vec![x, w, b],
            loss: Box::new(move |tape, vars| {
                let y = tape.fully_connected(vars[0], vars[1], vars[2])?;
                project(tape, y, &r)
            }),
        });
    }

    // softmax_cross_entropy: already scalar, no projection.
    {
        let logits = uniform(&mut rng, Shape::new(4, 5, 1, 1), -2.0, 2.0);
        specs.push(CaseSpec {
            name: "softmax_cross_entropy",
            tol: OP_TOLERANCE,
            inputs: vec![logits],
            loss: Box::new(move |tape, vars| {
                tape.softmax_cross_entropy(vars[0], &[0, 2, 4, 1])
            }),
        });
    }

    // add / mul (both forms) / concat_channels / scale.
    {
        let a = uniform(&mut rng, Shape::new(2, 2, 3, 3), -1.0, 1.0);
        let b = uniform(&mut rng, Shape::new(2, 2, 3, 3), -1.0, 1.0);
        let r = uniform(&mut rng, Shape::new(2, 2, 3, 3), -1.0, 1.0);
        specs.push(CaseSpec {
            name: "add",
            tol: OP_TOLERANCE,
            inputs: vec![a, b],
            loss: Box::new(move |tape, vars| {
                let y = tape.add(vars[0], vars[1])?;
                project(tape, y, &r)
            }),
        });
    }
    {
        let a = uniform(&mut rng, Shape::new(2, 2, 3, 3), -1.0, 1.0);
        let b = uniform(&mut rng, Shape::new(2, 2, 3, 3), -1.0, 1.0);
        let r = uniform(&mut rng, Shape::new(2, 2, 3, 3), -1.0, 1.0);
        specs.push(CaseSpec {
            name: "mul/elementwise",
            tol: OP_TOLERANCE,
            inputs: vec![a, b],
            loss: Box::new(move |tape, vars| {
                let y = tape.mul(vars[0], vars[1])?;
                project(tape, y, &r)
            }),
        });
    }
    {
        let a = uniform(&mut rng, Shape::new(2, 3, 3, 3), -1.0, 1.0);
        let g = uniform(&mut rng, Shape::new(2, 3, 1, 1), -1.0, 1.0);
        let r = uniform(&mut rng, Shape::new(2, 3, 3, 3), -1.0, 1.0);
        specs.push(CaseSpec {
            name: "mul/broadcast",
            tol: OP_TOLERANCE,
            inputs: vec![a, g],
            loss: Box::new(move |tape, vars| {
                let y = tape.mul(vars[0], vars[1])?;
                project(tape, y, &r)
            }),
        });
    }
    {
        let a = uniform(&mut rng, Shape::new(2, 1, 3, 3), -1.0, 1.0);
        let b = uniform(&mut rng, Shape::new(2, 2, 3, 3), -1.0, 1.0);
        let c = uniform(&mut rng, Shape::new(2, 1, 3, 3), -1.0, 1.0);
        let r = uniform(&mut rng, Shape::new(2, 4, 3, 3), -1.0, 1.0);
        specs.push(CaseSpec {
            name: "concat_channels",
            tol: OP_TOLERANCE,
            inputs: vec![a, b, c],
            loss: Box::new(move |tape, vars| {
                let y = tape.concat_channels(vars)?;
                project(tape, y, &r)
            }),
        });
    }
    {
        let a = uniform(&mut rng, Shape::new(1, 2, 3, 3), -1.0, 1.0);
        let r = uniform(&mut rng, Shape::new(1, 2, 3, 3), -1.0, 1.0);
        specs.push(CaseSpec {
            name: "scale",
            tol: OP_TOLERANCE,
            inputs: vec![a],
            loss: Box::new(move |tape, vars| {
                let y = tape.scale(vars[0], -1.75);
                project(tape, y, &r)
            }),
        });
    }

    // Composite chain shaped like an MBConv tail: conv, bn, swish, SE,
    // depthwise, bn, residual add, pool, classifier, cross-entropy.
    {
        let x = uniform(&mut rng, Shape::new(2, 3, 6, 6), -1.0, 1.0);
        let w_in = uniform(&mut rng, Shape::new(4, 3, 1, 1), -0.5, 0.5);
        let gamma1 = uniform(&mut rng, Shape::new(1, 4, 1, 1), 0.8, 1.2);
        let beta1 = uniform(&mut rng, Shape::new(1, 4, 1, 1), -0.1, 0.1);
        let w1 = uniform(&mut rng, Shape::new(2, 4, 1, 1), -0.5, 0.5);
        let b1 = uniform(&mut rng, Shape::new(1, 2, 1, 1), -0.1, 0.1);
        let w2 = uniform(&mut rng, Shape::new(4, 2, 1, 1), -0.5, 0.5);
        let b2 = uniform(&mut rng, Shape::new(1, 4, 1, 1), -0.1, 0.1);
        let wd = uniform(&mut rng, Shape::new(4, 1, 3, 3), -0.4, 0.4);
        let gamma2 = uniform(&mut rng, Shape::new(1, 4, 1, 1), 0.8, 1.2);
        let beta2 = uniform(&mut rng, Shape::new(1, 4, 1, 1), -0.1, 0.1);
        let wf = uniform(&mut rng, Shape::new(3, 4, 1, 1), -0.5, 0.5);
        let bf = uniform(&mut rng, Shape::new(1, 3, 1, 1), -0.1, 0.1);
        let rm = Tensor::zeros(Shape::new(1, 4, 1, 1));
        let rv = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![1.0; 4]).unwrap();
        specs.push(CaseSpec {
            name: "composite/mbconv_tail",
            tol: COMPOSITE_TOLERANCE,
            inputs: vec![
                x, w_in, gamma1, beta1, w1, b1, w2, b2, wd, gamma2, beta2, wf, bf,
            ],
            loss: Box::new(move |tape, v| {
                let h = tape.conv2d(v[0], v[1], 1, 0)?;
                let (h, _) = tape.batch_norm(h, v[2], v[3], &rm, &rv, Mode::Train, 1e-3)?;
                let h = tape.swish(h);
                let skip = h;
                let h = tape.squeeze_excitation(h, v[4], v[5], v[6], v[7])?;
                let h = tape.depthwise_conv2d(h, v[8], 1, 1)?;
                let (h, _) = tape.batch_norm(h, v[9], v[10], &rm, &rv, Mode::Train, 1e-3)?;
                let h = tape.add(h, skip)?;
                let h = tape.global_avg_pool(h);
                let logits = tape.fully_connected(h, v[11], v[12])?;
                tape.softmax_cross_entropy(logits, &[0, 2])
            }),
        });
    }

    specs
}

/// Runs the full gradient-check suite. Every differentiable op is checked
/// against central differences; the composite case exercises a realistic
/// op chain end to end.
pub fn run_all(seed: u64) -> Result<Vec<GradCheckCase>> {
    case_specs(seed).iter().map(check_case).collect()
}
