//! Central finite-difference checks of tape gradients, plus a catalogue of
//! every differentiable op on small random inputs.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::gaussian;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;

/// Denominator floor of the relative error, so entries whose true gradient is
/// zero are judged on absolute error instead of on rounding noise.
pub const REL_FLOOR: f64 = 1e-3;

pub type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)` over
/// every entry of every input. `build` must return a one-element node.
pub fn max_relative_error(inputs: &[Tensor], build: &Build) -> Result<f64> {
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for e in 0..inputs[k].len() {
            let x0 = inputs[k].data()[e];
            xs[k].data_mut()[e] = x0 + STEP;
            let up = eval(&xs)?;
            xs[k].data_mut()[e] = x0 - STEP;
            let down = eval(&xs)?;
            xs[k].data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if !err.is_finite() {
                return Err(Error::Numerical("non-finite gradient check".into()));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// `Σ w ⊙ out` with fixed random `w`, turning any output into a scalar whose
/// gradient exercises every output entry.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = gaussian(g.shape(out), 1.0, &mut rng);
    let wv = g.constant(w);
    let p = g.mul(out, wv)?;
    Ok(g.sum(p))
}

/// One differentiable op with an input generator.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub build: Box<Build>,
}

fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

fn case(
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

fn g(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    gaussian(shape, 1.0, rng)
}

/// Every differentiable op of the tape, each wrapped to a scalar output.
pub fn catalogue() -> Vec<OpCase> {
    vec![
        case(
            "matmul",
            |r| vec![g(&[4, 5], r), g(&[5, 3], r)],
            |gr, v| {
                let o = gr.matmul(v[0], v[1])?;
                project(gr, o, 1)
            },
        ),
        case(
            "add",
            |r| vec![g(&[3, 4], r), g(&[3, 4], r)],
            |gr, v| {
                let o = gr.add(v[0], v[1])?;
                project(gr, o, 2)
            },
        ),
        case(
            "sub",
            |r| vec![g(&[3, 4], r), g(&[3, 4], r)],
            |gr, v| {
                let o = gr.sub(v[0], v[1])?;
                project(gr, o, 3)
            },
        ),
        case(
            "mul",
            |r| vec![g(&[3, 4], r), g(&[3, 4], r)],
            |gr, v| {
                let o = gr.mul(v[0], v[1])?;
                project(gr, o, 4)
            },
        ),
        case(
            "scale",
            |r| vec![g(&[2, 5], r)],
            |gr, v| {
                let o = gr.scale(v[0], -1.7);
                project(gr, o, 5)
            },
        ),
        case(
            "add_row",
            |r| vec![g(&[4, 3], r), g(&[3], r)],
            |gr, v| {
                let o = gr.add_row(v[0], v[1])?;
                project(gr, o, 6)
            },
        ),
        case(
            "linear",
            |r| vec![g(&[3, 4], r), g(&[4, 2], r), g(&[2], r)],
            |gr, v| {
                let o = gr.linear(v[0], v[1], v[2])?;
                project(gr, o, 7)
            },
        ),
        case(
            "gelu",
            |r| vec![g(&[8], r)],
            |gr, v| {
                let o = gr.gelu(v[0]);
                project(gr, o, 8)
            },
        ),
        case(
            "relu",
            |r| vec![away_from_zero(&[8], r)],
            |gr, v| {
                let o = gr.relu(v[0]);
                project(gr, o, 9)
            },
        ),
        case(
            "sigmoid",
            |r| vec![g(&[2, 4], r)],
            |gr, v| {
                let o = gr.sigmoid(v[0]);
                project(gr, o, 10)
            },
        ),
        case(
            "layer_norm",
            |r| vec![g(&[3, 6], r)],
            |gr, v| {
                let o = gr.layer_norm(v[0], None, None)?;
                project(gr, o, 11)
            },
        ),
        case(
            "layer_norm_affine",
            |r| vec![g(&[3, 5], r), g(&[5], r), g(&[5], r)],
            |gr, v| {
                let o = gr.layer_norm(v[0], Some(v[1]), Some(v[2]))?;
                project(gr, o, 12)
            },
        ),
        case(
            "softmax_last",
            |r| vec![g(&[6], r)],
            |gr, v| {
                let o = gr.softmax(v[0], 0)?;
                project(gr, o, 13)
            },
        ),
        case(
            "softmax_axis0",
            |r| vec![g(&[3, 4], r)],
            |gr, v| {
                let o = gr.softmax(v[0], 0)?;
                project(gr, o, 14)
            },
        ),
        case(
            "softmax_middle",
            |r| vec![g(&[2, 3, 2], r)],
            |gr, v| {
                let o = gr.softmax(v[0], 1)?;
                project(gr, o, 15)
            },
        ),
        case(
            "mean_axis0",
            |r| vec![g(&[3, 4], r)],
            |gr, v| {
                let o = gr.mean(v[0], 0)?;
                project(gr, o, 16)
            },
        ),
        case(
            "mean_middle",
            |r| vec![g(&[2, 3, 4], r)],
            |gr, v| {
                let o = gr.mean(v[0], 1)?;
                project(gr, o, 17)
            },
        ),
        case(
            "sum",
            |r| vec![g(&[3, 3], r)],
            |gr, v| {
                let s = gr.sum(v[0]);
                let sq = gr.mul(s, s)?;
                Ok(sq)
            },
        ),
        case(
            "transpose",
            |r| vec![g(&[3, 5], r)],
            |gr, v| {
                let o = gr.transpose(v[0])?;
                project(gr, o, 19)
            },
        ),
        case(
            "reshape",
            |r| vec![g(&[2, 6], r)],
            |gr, v| {
                let o = gr.reshape(v[0], &[3, 4])?;
                project(gr, o, 20)
            },
        ),
        case(
            "concat_rows",
            |r| vec![g(&[2, 3], r), g(&[1, 3], r)],
            |gr, v| {
                let o = gr.concat(&[v[0], v[1]], 0)?;
                project(gr, o, 21)
            },
        ),
        case(
            "concat_cols",
            |r| vec![g(&[2, 3], r), g(&[2, 2], r)],
            |gr, v| {
                let o = gr.concat(&[v[0], v[1]], 1)?;
                project(gr, o, 22)
            },
        ),
        case(
            "slice",
            |r| vec![g(&[4, 5], r)],
            |gr, v| {
                let o = gr.slice(v[0], 1, 1, 3)?;
                project(gr, o, 23)
            },
        ),
        case(
            "gather_rows",
            |r| vec![g(&[4, 3], r)],
            |gr, v| {
                let o = gr.gather_rows(v[0], &[2, 0, 2, 3])?;
                project(gr, o, 24)
            },
        ),
        case(
            "cross_entropy",
            |r| vec![g(&[3, 5], r)],
            |gr, v| gr.cross_entropy(v[0], &[4, 0, 2]),
        ),
        case(
            "bce_with_logits",
            |r| vec![g(&[2, 3], r)],
            |gr, v| {
                let y = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0])?;
                gr.bce_with_logits(v[0], &y)
            },
        ),
        case(
            "frobenius_norm_sq",
            |r| vec![g(&[4, 4], r)],
            |gr, v| Ok(gr.frobenius_norm_sq(v[0])),
        ),
        case(
            "attention",
            |r| vec![g(&[2 * 3, 4], r), g(&[2 * 5, 4], r), g(&[2 * 5, 4], r)],
            |gr, v| {
                let o = gr.attention(v[0], v[1], v[2], 2, 2)?;
                project(gr, o, 28)
            },
        ),
    ]
}

/// Runs `case` on `seeds` random draws and returns the worst error.
pub fn check_case(case: &OpCase, seeds: core::ops::Range<u64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let inputs = (case.inputs)(&mut rng);
        worst = worst.max(max_relative_error(&inputs, case.build.as_ref())?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_matches() {
        let inputs = vec![Tensor::vector(vec![0.7, -1.3])];
        let err = max_relative_error(&inputs, &|g, v| {
            let sq = g.mul(v[0], v[0])?;
            let cube = g.mul(sq, v[0])?;
            Ok(g.sum(cube))
        })
        .unwrap();
        assert!(err <= 1e-7);
    }

    #[test]
    fn catalogue_names_are_unique() {
        let cat = catalogue();
        let mut names: Vec<_> = cat.iter().map(|c| c.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), cat.len());
    }
}
