//! Central-finite-difference checks for every differentiable tape op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttentionSpec, Float, Tape, Tensor, Var};

/// Builds `op(inputs)` on a tape and returns the output var.
pub type Build<T> = dyn Fn(&mut Tape<'_, T>, &[Var]) -> Var;

/// Step used for the central differences.
pub const STEP: f64 = 1e-3;
/// Random trials per op in [`run_suite`].
pub const TRIALS: usize = 20;
/// Pass threshold for 32-bit runs.
pub const TOLERANCE_F32: f64 = 1e-3;
/// Pass threshold for 64-bit runs.
pub const TOLERANCE_F64: f64 = 1e-5;

/// Tensor with entries uniform in `[-2, 2)`.
pub fn random_tensor<T: Float, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::lit(rng.gen_range(-2.0..2.0))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Worst error of the analytic gradient of `build` against central
/// differences. The scalar objective is `sum(w * out)` for a random `w`, and
/// numeric evaluations accumulate it in f64. Error per element is
/// `|a - n| / max(1, |a|, |n|)`.
pub fn gradcheck<T: Float, R: Rng + ?Sized>(inputs: &[Tensor<T>], build: &Build<T>, eps: f64, rng: &mut R) -> f64 {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).shape().to_vec()
    };
    let weights: Tensor<T> = random_tensor(rng, &out_shape);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let w = tape.constant(weights.clone());
    let weighted = tape.mul(out, w).expect("weights match output shape");
    let loss = tape.sum(weighted);
    tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| tape.grad(v)).collect();

    let objective = |perturbed: &[Tensor<T>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&o, &w)| o.to_f64().unwrap_or(f64::NAN) * w.to_f64().unwrap_or(f64::NAN))
            .sum()
    };

    let mut worst: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let x = input.data()[idx];
            plus[which].data_mut()[idx] = x + T::lit(eps);
            minus[which].data_mut()[idx] = x - T::lit(eps);
            // The representable step, not the nominal one.
            let h = plus[which].data()[idx].to_f64().unwrap_or(f64::NAN)
                - minus[which].data()[idx].to_f64().unwrap_or(f64::NAN);
            let numeric = (objective(&plus) - objective(&minus)) / h;
            let a = analytic[which].data()[idx].to_f64().unwrap_or(f64::NAN);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
    }
    worst
}

/// One op under test with the shapes of its random inputs.
pub struct Case<T: Float> {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Box<Build<T>>,
}

fn padded_spec() -> AttentionSpec {
    AttentionSpec {
        segments: vec![(0, 3), (3, 2)],
        heads: 2,
        key_mask: Some(vec![true, true, false, true, true]),
    }
}

/// One case per differentiable op, plus a composite.
pub fn cases<T: Float>() -> Vec<Case<T>> {
    vec![
        Case {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 2]],
            build: Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
        },
        Case {
            name: "add",
            shapes: vec![vec![2, 3], vec![2, 3]],
            build: Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        },
        Case {
            name: "mul",
            shapes: vec![vec![2, 3], vec![2, 3]],
            build: Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        },
        Case {
            name: "scale",
            shapes: vec![vec![3, 2]],
            build: Box::new(|t, v| t.scale(v[0], T::lit(-1.5))),
        },
        Case {
            name: "add_bias",
            shapes: vec![vec![3, 4], vec![4]],
            build: Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap()),
        },
        Case {
            name: "linear",
            shapes: vec![vec![3, 4], vec![4, 2], vec![2]],
            build: Box::new(|t, v| t.linear(v[0], v[1], v[2]).unwrap()),
        },
        Case {
            name: "layer_norm",
            shapes: vec![vec![3, 5], vec![5], vec![5]],
            build: Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], T::lit(1e-5)).unwrap()),
        },
        Case {
            name: "gelu",
            shapes: vec![vec![4, 3]],
            build: Box::new(|t, v| t.gelu(v[0])),
        },
        Case {
            name: "embedding",
            shapes: vec![vec![5, 3]],
            build: Box::new(|t, v| t.embedding(v[0], &[4, 0, 4, 2]).unwrap()),
        },
        Case {
            name: "select_rows",
            shapes: vec![vec![4, 3]],
            build: Box::new(|t, v| t.select_rows(v[0], &[3, 1, 3]).unwrap()),
        },
        Case {
            name: "dropout",
            shapes: vec![vec![4, 5]],
            // A fresh fixed-seed stream keeps the mask identical across evaluations.
            build: Box::new(|t, v| t.dropout(v[0], 0.3, &mut ChaCha8Rng::seed_from_u64(3))),
        },
        Case {
            name: "attention",
            shapes: vec![vec![5, 4], vec![5, 4], vec![5, 4]],
            build: Box::new(|t, v| t.attention(v[0], v[1], v[2], &padded_spec()).unwrap()),
        },
        Case {
            name: "attention_with_dropout",
            shapes: vec![vec![5, 4], vec![5, 4], vec![5, 4]],
            build: Box::new(|t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                t.attention_with_dropout(v[0], v[1], v[2], &padded_spec(), 0.3, &mut rng)
                    .unwrap()
            }),
        },
        Case {
            name: "cross_entropy",
            shapes: vec![vec![3, 4]],
            build: Box::new(|t, v| t.cross_entropy(v[0], &[1, 3, 0]).unwrap()),
        },
        Case {
            name: "sum",
            shapes: vec![vec![2, 3]],
            build: Box::new(|t, v| t.sum(v[0])),
        },
        Case {
            name: "mean",
            shapes: vec![vec![1], vec![1], vec![1]],
            build: Box::new(|t, v| t.mean(v).unwrap()),
        },
        Case {
            name: "composite sum(gelu(W·x))",
            shapes: vec![vec![4, 4], vec![4, 1]],
            build: Box::new(|t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                let g = t.gelu(y);
                t.sum(g)
            }),
        },
    ]
}

/// Worst error of one op over its random trials.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub trials: usize,
    pub worst: f64,
}

/// Runs every case over `trials` random input sets.
pub fn run_suite<T: Float>(trials: usize, seed: u64) -> Vec<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases::<T>()
        .into_iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            for _ in 0..trials {
                let inputs: Vec<Tensor<T>> = case.shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
                worst = worst.max(gradcheck(&inputs, case.build.as_ref(), STEP, &mut rng));
            }
            CaseResult {
                name: case.name,
                trials,
                worst,
            }
        })
        .collect()
}
