//! Central finite-difference checking of tape gradients.
//!
//! The function under test is reduced to a scalar by a fixed pseudo-random
//! projection `sum(out * r)`, so every output element contributes.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Finite-difference half step.
    pub step: f64,
    /// Lower bound on the magnitude used to turn absolute into relative error.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn projection(len: usize) -> Vec<f64> {
    (0..len as u64)
        .map(|i| {
            let h = (i.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5_4A32_D192_ED03;
            let h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
            ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

fn scalar_loss<F>(f: &F, inputs: &[Tensor<f64>], grad: bool) -> Result<(Tape<f64>, Var, Vec<Var>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if grad {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(Tensor::new(shape, projection(tape.value(out).numel()))?);
    let prod = tape.mul(out, r)?;
    let loss = tape.sum(prod);
    Ok((tape, loss, vars))
}

impl GradCheck {
    /// Compares analytic gradients of `f` with respect to every input against
    /// central differences.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let (tape, loss, vars) = scalar_loss(&f, inputs, true)?;
        let grads = tape.backward(loss)?;
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_input: 0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        };
        let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
            for i in 0..inputs[k].numel() {
                let base = inputs[k].data()[i];
                probe[k].data_mut()[i] = base + self.step;
                let plus = self.eval(&f, &probe)?;
                probe[k].data_mut()[i] = base - self.step;
                let minus = self.eval(&f, &probe)?;
                probe[k].data_mut()[i] = base;

                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                report.checked += 1;
                if rel > report.max_rel_error || report.checked == 1 {
                    report.max_rel_error = rel;
                    report.worst_input = k;
                    report.worst_index = i;
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
        Ok(report)
    }

    fn eval<F>(&self, f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let (tape, loss, _) = scalar_loss(f, inputs, false)?;
        Ok(tape.value(loss).data()[0])
    }
}

/// Result of checking one operation over many random shapes.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub worst: GradCheckReport,
}

type Builder = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

struct Case {
    op: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: Builder,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn cases_for(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let n = rng.random_range(1..3usize);
    let c = rng.random_range(1..4usize);
    let h = rng.random_range(2..6usize);
    let w = rng.random_range(2..6usize);
    let o = rng.random_range(1..4usize);
    let img = [n, c, h, w];
    let per_channel = [n, c];
    let d_in = rng.random_range(1..6usize);
    let d_out = rng.random_range(1..6usize);

    let mut v = Vec::new();
    let mut case = |op, inputs, build: Builder| v.push(Case { op, inputs, build });

    case(
        "conv2d",
        vec![
            uniform(rng, &img, -1.0, 1.0),
            uniform(rng, &[o, c, 3, 3], -1.0, 1.0),
            uniform(rng, &[o], -1.0, 1.0),
        ],
        |t, x| t.conv2d(x[0], x[1], x[2], 1, 1),
    );
    case(
        "conv2d_stride2",
        vec![
            uniform(rng, &img, -1.0, 1.0),
            uniform(rng, &[o, c, 3, 3], -1.0, 1.0),
            uniform(rng, &[o], -1.0, 1.0),
        ],
        |t, x| t.conv2d(x[0], x[1], x[2], 2, 1),
    );
    case(
        "conv2d_1x1",
        vec![
            uniform(rng, &img, -1.0, 1.0),
            uniform(rng, &[o, c, 1, 1], -1.0, 1.0),
            uniform(rng, &[o], -1.0, 1.0),
        ],
        |t, x| t.conv2d(x[0], x[1], x[2], 1, 0),
    );
    case("upsample2x", vec![uniform(rng, &img, -1.0, 1.0)], |t, x| {
        t.upsample2x(x[0])
    });
    case(
        "linear",
        vec![
            uniform(rng, &[n, d_in], -1.0, 1.0),
            uniform(rng, &[d_out, d_in], -1.0, 1.0),
            uniform(rng, &[d_out], -1.0, 1.0),
        ],
        |t, x| t.linear(x[0], x[1], x[2]),
    );
    case("channel_mean", vec![uniform(rng, &img, -1.0, 1.0)], |t, x| {
        t.channel_mean(x[0])
    });
    case("channel_std", vec![uniform(rng, &img, -1.0, 1.0)], |t, x| {
        t.channel_std(x[0])
    });
    case(
        "add_channel",
        vec![uniform(rng, &img, -1.0, 1.0), uniform(rng, &per_channel, -1.0, 1.0)],
        |t, x| t.add_channel(x[0], x[1]),
    );
    case(
        "sub_channel",
        vec![uniform(rng, &img, -1.0, 1.0), uniform(rng, &per_channel, -1.0, 1.0)],
        |t, x| t.sub_channel(x[0], x[1]),
    );
    case(
        "mul_channel",
        vec![uniform(rng, &img, -1.0, 1.0), uniform(rng, &per_channel, -1.0, 1.0)],
        |t, x| t.mul_channel(x[0], x[1]),
    );
    case(
        "div_channel",
        vec![uniform(rng, &img, -1.0, 1.0), uniform(rng, &per_channel, 0.5, 1.5)],
        |t, x| t.div_channel(x[0], x[1]),
    );
    case(
        "add",
        vec![uniform(rng, &img, -1.0, 1.0), uniform(rng, &img, -1.0, 1.0)],
        |t, x| t.add(x[0], x[1]),
    );
    case(
        "sub",
        vec![uniform(rng, &img, -1.0, 1.0), uniform(rng, &img, -1.0, 1.0)],
        |t, x| t.sub(x[0], x[1]),
    );
    case(
        "mul",
        vec![uniform(rng, &img, -1.0, 1.0), uniform(rng, &img, -1.0, 1.0)],
        |t, x| t.mul(x[0], x[1]),
    );
    case("scale", vec![uniform(rng, &img, -1.0, 1.0)], |t, x| {
        Ok(t.scale(x[0], -1.7))
    });
    case("add_scalar", vec![uniform(rng, &img, -1.0, 1.0)], |t, x| {
        Ok(t.add_scalar(x[0], 0.3))
    });
    case("leaky_relu", vec![uniform(rng, &img, -1.0, 1.0)], |t, x| {
        Ok(t.leaky_relu(x[0], 0.2))
    });
    case("sigmoid", vec![uniform(rng, &img, -3.0, 3.0)], |t, x| {
        Ok(t.sigmoid(x[0]))
    });
    case("abs", vec![uniform(rng, &img, -1.0, 1.0)], |t, x| Ok(t.abs(x[0])));
    case("square", vec![uniform(rng, &img, -1.0, 1.0)], |t, x| {
        Ok(t.square(x[0]))
    });
    case("sum", vec![uniform(rng, &img, -1.0, 1.0)], |t, x| Ok(t.sum(x[0])));
    case("mean", vec![uniform(rng, &img, -1.0, 1.0)], |t, x| Ok(t.mean(x[0])));
    case("pixel_norm", vec![uniform(rng, &img, 0.1, 1.0)], |t, x| {
        t.pixel_norm(x[0])
    });
    case("slice_channels", vec![uniform(rng, &[n, c + 1, h, w], -1.0, 1.0)], |t, x| {
        t.slice_channels(x[0], 1, 1)
    });
    case(
        "concat_channels",
        vec![uniform(rng, &img, -1.0, 1.0), uniform(rng, &[n, o, h, w], -1.0, 1.0)],
        |t, x| t.concat_channels(x[0], x[1]),
    );
    case("expand_planes", vec![uniform(rng, &per_channel, -1.0, 1.0)], |t, x| {
        t.expand_planes(x[0], 3, 2)
    });
    case("tile_rows", vec![uniform(rng, &[c], -1.0, 1.0)], |t, x| t.tile_rows(x[0], 3));
    case(
        "instance_norm",
        vec![uniform(rng, &img, -1.0, 1.0)],
        |t, x| {
            let mean = t.channel_mean(x[0])?;
            let std = t.channel_std(x[0])?;
            let centered = t.sub_channel(x[0], mean)?;
            let denom = t.add_scalar(std, 1e-5);
            t.div_channel(centered, denom)
        },
    );
    v
}

/// Gradient-checks every differentiable tape operation on `shapes` random
/// shape draws, reporting the worst case per operation.
pub fn op_suite(shapes: usize, seed: u64, check: &GradCheck) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results: Vec<OpCheck> = Vec::new();
    for _ in 0..shapes {
        for case in cases_for(&mut rng) {
            let report = check.run(&case.inputs, case.build)?;
            match results.iter_mut().find(|r| r.op == case.op) {
                Some(r) => {
                    r.cases += 1;
                    if report.max_rel_error > r.worst.max_rel_error {
                        r.worst = report;
                    }
                }
                None => results.push(OpCheck {
                    op: case.op,
                    cases: 1,
                    worst: report,
                }),
            }
        }
    }
    Ok(results)
}
