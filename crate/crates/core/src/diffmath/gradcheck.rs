//! Central finite-difference gradient checking.
//!
//! The checker treats a tape program as a black-box scalar function of its
//! leaf inputs: it compares the analytic gradient from the reverse pass
//! against (f(x+h) - f(x-h)) / 2h for every input element. Relative error is
//! |analytic - fd| / max(|analytic|, |fd|, 1).

use super::{DiffError, DiffValue, Mat, Tape};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Default central-difference step for op-level checks.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Relative error between an analytic and a finite-difference derivative.
pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0)
}

/// Check the gradient of a scalar-valued tape program against central finite
/// differences. `build` is called with one `DiffValue` per input matrix and
/// must return the scalar objective. Returns the maximum relative error over
/// all input elements.
pub fn check_gradients<F>(build: F, inputs: &[Mat], step: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[DiffValue]) -> Result<DiffValue, DiffError>,
{
    let eval = |mats: &[Mat]| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let handles: Vec<DiffValue> = mats
            .iter()
            .map(|m| tape.constant(m.clone()))
            .collect::<Result<_, _>>()?;
        let obj = build(&mut tape, &handles)?;
        Ok(tape.value(obj).scalar_value())
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let handles: Vec<DiffValue> = inputs
        .iter()
        .map(|m| tape.param(m.clone()))
        .collect::<Result<_, _>>()?;
    let obj = build(&mut tape, &handles)?;
    if !obj.is_scalar() {
        return Err(DiffError::NonScalarObjective { rows: obj.rows(), cols: obj.cols() });
    }
    let grads = tape.grad_nodes(obj, &handles)?;
    let analytic: Vec<Mat> = handles
        .iter()
        .zip(&grads)
        .map(|(h, g)| match g {
            Some(v) => tape.value(*v).clone(),
            None => Mat::zeros(h.rows(), h.cols()),
        })
        .collect();

    let mut max_err: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].as_mut_slice()[k] += step;
            let mut minus = inputs.to_vec();
            minus[i].as_mut_slice()[k] -= step;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            max_err = max_err.max(relative_error(analytic[i].as_slice()[k], fd));
        }
    }
    Ok(max_err)
}

/// Result of checking one exported op.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Mat::from_vec(rows, cols, data)
}

fn random_counts(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Arc<Vec<usize>> {
    Arc::new((0..rows).map(|_| rng.random_range(1..=cols)).collect())
}

/// Randomized gradient check of every exported differentiable op. Each trial
/// draws fresh shapes and inputs; the objective is a weighted sum of the op
/// output so every output element contributes to the scalar.
pub fn run_op_suite(trials_per_op: usize, seed: u64) -> Result<Vec<OpCheck>, DiffError> {
    type BuildFn = Box<
        dyn Fn(&mut ChaCha8Rng) -> (Vec<Mat>, Box<dyn Fn(&mut Tape, &[DiffValue]) -> Result<DiffValue, DiffError>>),
    >;

    // Reduce an op output of any shape to a scalar via a fixed random probe.
    fn probed(
        rng: &mut ChaCha8Rng,
        rows: usize,
        cols: usize,
    ) -> impl Fn(&mut Tape, DiffValue) -> Result<DiffValue, DiffError> {
        let probe = random_mat(rng, rows, cols, -1.0, 1.0);
        move |tape: &mut Tape, v: DiffValue| {
            let w = tape.constant(probe.clone())?;
            tape.dot(v, w)
        }
    }

    let cases: Vec<(&'static str, BuildFn)> = vec![
        ("add", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, r, c);
            (
                vec![random_mat(rng, r, c, -2.0, 2.0), random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.add(xs[0], xs[1])?;
                    probe(t, v)
                }),
            )
        })),
        ("sub", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, r, c);
            (
                vec![random_mat(rng, r, c, -2.0, 2.0), random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.sub(xs[0], xs[1])?;
                    probe(t, v)
                }),
            )
        })),
        ("mul", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, r, c);
            (
                vec![random_mat(rng, r, c, -2.0, 2.0), random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.mul(xs[0], xs[1])?;
                    probe(t, v)
                }),
            )
        })),
        ("div", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, r, c);
            (
                vec![random_mat(rng, r, c, -2.0, 2.0), random_mat(rng, r, c, 0.5, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.div(xs[0], xs[1])?;
                    probe(t, v)
                }),
            )
        })),
        ("add_scalar", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, r, c);
            let k = rng.random_range(-2.0..2.0);
            (
                vec![random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.add_scalar(xs[0], k)?;
                    probe(t, v)
                }),
            )
        })),
        ("mul_scalar", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, r, c);
            let k = rng.random_range(-2.0..2.0);
            (
                vec![random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.mul_scalar(xs[0], k)?;
                    probe(t, v)
                }),
            )
        })),
        ("scale_by", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, r, c);
            (
                vec![random_mat(rng, r, c, -2.0, 2.0), random_mat(rng, 1, 1, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.scale_by(xs[0], xs[1])?;
                    probe(t, v)
                }),
            )
        })),
        ("broadcast_scalar", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, r, c);
            (
                vec![random_mat(rng, 1, 1, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.broadcast_scalar(xs[0], r, c)?;
                    probe(t, v)
                }),
            )
        })),
        ("neg", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, r, c);
            (
                vec![random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.neg(xs[0])?;
                    probe(t, v)
                }),
            )
        })),
        ("log", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, r, c);
            (
                vec![random_mat(rng, r, c, 0.2, 3.0)],
                Box::new(move |t, xs| {
                    let v = t.log(xs[0])?;
                    probe(t, v)
                }),
            )
        })),
        ("exp", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, r, c);
            (
                vec![random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.exp(xs[0])?;
                    probe(t, v)
                }),
            )
        })),
        ("sqrt", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, r, c);
            (
                vec![random_mat(rng, r, c, 0.2, 3.0)],
                Box::new(move |t, xs| {
                    let v = t.sqrt(xs[0])?;
                    probe(t, v)
                }),
            )
        })),
        ("square", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, r, c);
            (
                vec![random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.square(xs[0])?;
                    probe(t, v)
                }),
            )
        })),
        ("sigmoid", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, r, c);
            (
                vec![random_mat(rng, r, c, -3.0, 3.0)],
                Box::new(move |t, xs| {
                    let v = t.sigmoid(xs[0])?;
                    probe(t, v)
                }),
            )
        })),
        ("matmul", Box::new(|rng| {
            let (m, k, n) = (
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(1..4),
            );
            let probe = probed(rng, m, n);
            (
                vec![random_mat(rng, m, k, -2.0, 2.0), random_mat(rng, k, n, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.matmul(xs[0], xs[1])?;
                    probe(t, v)
                }),
            )
        })),
        ("transpose", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, c, r);
            (
                vec![random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.transpose(xs[0])?;
                    probe(t, v)
                }),
            )
        })),
        ("sum", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            (
                vec![random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| t.sum(xs[0])),
            )
        })),
        ("mean", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            (
                vec![random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| t.mean(xs[0])),
            )
        })),
        ("dot", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            (
                vec![random_mat(rng, r, c, -2.0, 2.0), random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| t.dot(xs[0], xs[1])),
            )
        })),
        ("softmax_rows", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(2..5));
            let probe = probed(rng, r, c);
            (
                vec![random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.softmax_rows(xs[0])?;
                    probe(t, v)
                }),
            )
        })),
        ("row_sums", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, r, 1);
            (
                vec![random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.row_sums(xs[0])?;
                    probe(t, v)
                }),
            )
        })),
        ("broadcast_col", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, r, c);
            (
                vec![random_mat(rng, r, 1, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.broadcast_col(xs[0], c)?;
                    probe(t, v)
                }),
            )
        })),
        ("mask_rows", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            let counts = random_counts(rng, r, c);
            let probe = probed(rng, r, c);
            (
                vec![random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.mask_rows(xs[0], &counts)?;
                    probe(t, v)
                }),
            )
        })),
        ("log_softmax_rows_masked", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(2..5));
            let counts = random_counts(rng, r, c);
            // Probe only valid entries; masked outputs are not differentiable
            // surface by contract.
            let counts_for_probe = Arc::clone(&counts);
            let probe_vals = random_mat(rng, r, c, -1.0, 1.0);
            (
                vec![random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.log_softmax_rows_masked(xs[0], &counts_for_probe)?;
                    let w = t.constant(probe_vals.clone())?;
                    let wm = t.mask_rows(w, &counts_for_probe)?;
                    t.dot(v, wm)
                }),
            )
        })),
        ("entropy_rows_masked", Box::new(|rng| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(2..5));
            let counts = random_counts(rng, r, c);
            let probe = probed(rng, r, 1);
            (
                vec![random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.entropy_rows_masked(xs[0], &counts)?;
                    probe(t, v)
                }),
            )
        })),
        ("gather", Box::new(|rng| {
            let (r, c) = (rng.random_range(2..5), rng.random_range(2..5));
            let n = rng.random_range(1..6);
            let pairs: Arc<Vec<(usize, usize)>> = Arc::new(
                (0..n)
                    .map(|_| (rng.random_range(0..r), rng.random_range(0..c)))
                    .collect(),
            );
            let probe = probed(rng, n, 1);
            (
                vec![random_mat(rng, r, c, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.gather(xs[0], &pairs)?;
                    probe(t, v)
                }),
            )
        })),
        ("scatter", Box::new(|rng| {
            let (r, c) = (rng.random_range(2..5), rng.random_range(2..5));
            let n = rng.random_range(1..6);
            let pairs: Arc<Vec<(usize, usize)>> = Arc::new(
                (0..n)
                    .map(|_| (rng.random_range(0..r), rng.random_range(0..c)))
                    .collect(),
            );
            let probe = probed(rng, r, c);
            (
                vec![random_mat(rng, n, 1, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.scatter(xs[0], &pairs, r, c)?;
                    probe(t, v)
                }),
            )
        })),
        ("segment_sum", Box::new(|rng| {
            let k = rng.random_range(1..4);
            let lengths: Arc<Vec<usize>> =
                Arc::new((0..k).map(|_| rng.random_range(0..4)).collect());
            let n: usize = lengths.iter().sum();
            let probe = probed(rng, k, 1);
            (
                vec![random_mat(rng, n.max(1), 1, -2.0, 2.0)],
                Box::new({
                    let lengths = Arc::clone(&lengths);
                    move |t, xs| {
                        let input = if n == 0 {
                            // Degenerate all-empty segments: use a 0-row slice.
                            t.slice_rows(xs[0], 0, 0)?
                        } else {
                            xs[0]
                        };
                        let v = t.segment_sum(input, &lengths)?;
                        probe(t, v)
                    }
                }),
            )
        })),
        ("expand_segments", Box::new(|rng| {
            let k = rng.random_range(1..4);
            let lengths: Arc<Vec<usize>> =
                Arc::new((0..k).map(|_| rng.random_range(1..4)).collect());
            let n: usize = lengths.iter().sum();
            let probe = probed(rng, n, 1);
            (
                vec![random_mat(rng, k, 1, -2.0, 2.0)],
                Box::new({
                    let lengths = Arc::clone(&lengths);
                    move |t, xs| {
                        let v = t.expand_segments(xs[0], &lengths)?;
                        probe(t, v)
                    }
                }),
            )
        })),
        ("concat_rows", Box::new(|rng| {
            let (n1, n2) = (rng.random_range(1..4), rng.random_range(1..4));
            let probe = probed(rng, n1 + n2, 1);
            (
                vec![random_mat(rng, n1, 1, -2.0, 2.0), random_mat(rng, n2, 1, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.concat_rows(&[xs[0], xs[1]])?;
                    probe(t, v)
                }),
            )
        })),
        ("slice_rows", Box::new(|rng| {
            let n = rng.random_range(2..6);
            let start = rng.random_range(0..n - 1);
            let len = rng.random_range(1..=n - start);
            let probe = probed(rng, len, 1);
            (
                vec![random_mat(rng, n, 1, -2.0, 2.0)],
                Box::new(move |t, xs| {
                    let v = t.slice_rows(xs[0], start, len)?;
                    probe(t, v)
                }),
            )
        })),
    ];

    let mut results = Vec::with_capacity(cases.len());
    for (name, make_case) in &cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let mut max_err: f64 = 0.0;
        for _ in 0..trials_per_op {
            let (inputs, build) = make_case(&mut rng);
            let err = check_gradients(|t, xs| build(t, xs), &inputs, DEFAULT_FD_STEP)?;
            max_err = max_err.max(err);
        }
        results.push(OpCheck { name, trials: trials_per_op, max_rel_err: max_err });
    }
    Ok(results)
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_gradients_on_simple_product() {
        let inputs = vec![Mat::scalar(1.3), Mat::scalar(-0.7)];
        let err = check_gradients(
            |t, xs| {
                let p = t.mul(xs[0], xs[1])?;
                let s = t.sigmoid(p)?;
                t.sum(s)
            },
            &inputs,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn op_suite_smoke() {
        for check in run_op_suite(3, 7).unwrap() {
            assert!(
                check.max_rel_err < 1e-6,
                "{}: max rel err {}",
                check.name,
                check.max_rel_err
            );
        }
    }
}
