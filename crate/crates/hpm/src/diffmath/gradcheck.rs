//! Central finite-difference checking of analytic gradients.
//!
//! The error metric is |analytic - numeric| / max(1, |numeric|), checked
//! against a tolerance of 1e-4 with step 1e-5 in double precision.

use crate::diffmath::tape::{Tape, Var};
use crate::diffmath::tensor::Tensor;
use crate::error::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Central difference gradient of a scalar function at x.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut pert = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = pert[i];
        pert[i] = orig + step;
        let hi = f(&pert);
        pert[i] = orig - step;
        let lo = f(&pert);
        pert[i] = orig;
        out[i] = (hi - lo) / (2.0 * step);
    }
    out
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Accumulates named check results; repeated names keep the worst error.
#[derive(Debug)]
pub struct GradCheck {
    tol: f64,
    entries: Vec<(String, f64)>,
}

impl GradCheck {
    pub fn new(tol: f64) -> Self {
        GradCheck { tol, entries: Vec::new() }
    }

    pub fn record(&mut self, name: &str, err: f64) {
        if let Some(e) = self.entries.iter_mut().find(|(n, _)| n == name) {
            e.1 = e.1.max(err);
        } else {
            self.entries.push((name.to_string(), err));
        }
    }

    /// Compare an analytic gradient against central differences of `f` at x.
    pub fn check(
        &mut self,
        name: &str,
        x: &[f64],
        analytic: &[f64],
        f: &mut dyn FnMut(&[f64]) -> f64,
    ) -> f64 {
        let numeric = central_diff(f, x, FD_STEP);
        let err = max_rel_err(analytic, &numeric);
        self.record(name, err);
        err
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|(_, e)| *e < self.tol)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| *e >= self.tol)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    /// One line per checked primitive: name, max rel err, verdict.
    pub fn report(&self) -> String {
        let mut out = String::new();
        for (name, err) in &self.entries {
            let verdict = if *err < self.tol { "pass" } else { "FAIL" };
            out.push_str(&format!("{name:<24} max_rel_err {err:.3e}  {verdict}\n"));
        }
        out
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

type BuildFn<'a> = &'a dyn Fn(&mut Tape, Var) -> Result<Var>;

/// Check one tape-built scalar function at `points` random inputs. The
/// builder sees the input as a 1 x len leaf and returns the scalar loss.
fn check_tape_fn(
    gc: &mut GradCheck,
    rng: &mut ChaCha8Rng,
    name: &str,
    input_len: usize,
    points: usize,
    build: BuildFn,
) {
    for _ in 0..points {
        let x0 = rand_vec(rng, input_len);
        let eval = |x: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let t = Tensor::new(vec![1, x.len()], x.to_vec()).unwrap().with_grad();
            let leaf = tape.leaf(&t);
            let loss = build(&mut tape, leaf).expect("gradcheck graph build failed");
            let v = tape.value(loss)[0];
            if want_grad {
                tape.backward(loss).expect("backward failed");
                (v, tape.grad(leaf))
            } else {
                (v, Vec::new())
            }
        };
        let (_, analytic) = eval(&x0, true);
        let mut f = |x: &[f64]| eval(x, false).0;
        gc.check(name, &x0, &analytic, &mut f);
    }
}

/// Split the flat 1 x len leaf into a matrix block.
fn take(tape: &mut Tape, leaf: Var, start: usize, r: usize, c: usize) -> Result<Var> {
    let s = tape.slice_cols(leaf, start, r * c)?;
    tape.reshape(s, vec![r, c])
}

/// Reduce a tensor to a scalar with fixed random weights so upstream
/// gradients are non-uniform.
fn weighted(tape: &mut Tape, v: Var, w: &[f64]) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let wv = tape.constant(shape, w[..n].to_vec());
    let prod = tape.mul(v, wv)?;
    Ok(tape.sum_all(prod))
}

/// FD coverage of every differentiable tape primitive at random points.
#[allow(clippy::type_complexity)]
pub fn standard_primitive_suite(seed: u64, points: usize) -> GradCheck {
    let mut gc = GradCheck::new(FD_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = rand_vec(&mut rng, 256);

    let (m, k, n) = (3, 4, 2);
    check_tape_fn(&mut gc, &mut rng, "matmul", m * k + k * n, points, &|tape, leaf| {
        let a = take(tape, leaf, 0, m, k)?;
        let b = take(tape, leaf, m * k, k, n)?;
        let out = tape.matmul(a, b)?;
        weighted(tape, out, &w)
    });

    check_tape_fn(&mut gc, &mut rng, "transpose", 12, points, &|tape, leaf| {
        let x = take(tape, leaf, 0, 3, 4)?;
        let t = tape.transpose(x)?;
        weighted(tape, t, &w)
    });

    let unaries: [(&str, fn(&mut Tape, Var) -> Var); 5] = [
        ("gelu", |t, v| t.gelu(v)),
        ("logistic", |t, v| t.logistic(v)),
        ("softplus", |t, v| t.softplus(v)),
        ("exp", |t, v| t.exp(v)),
        ("scale", |t, v| t.scale(v, -2.5)),
    ];
    for (name, op) in unaries {
        check_tape_fn(&mut gc, &mut rng, name, 8, points, &|tape, leaf| {
            let y = op(tape, leaf);
            weighted(tape, y, &w)
        });
    }

    let binaries: [(&str, fn(&mut Tape, Var, Var) -> Result<Var>); 3] =
        [("add", |t, a, b| t.add(a, b)), ("sub", |t, a, b| t.sub(a, b)), ("mul", |t, a, b| {
            t.mul(a, b)
        })];
    for (name, op) in binaries {
        check_tape_fn(&mut gc, &mut rng, name, 12, points, &|tape, leaf| {
            let a = take(tape, leaf, 0, 2, 3)?;
            let b = take(tape, leaf, 6, 2, 3)?;
            let y = op(tape, a, b)?;
            weighted(tape, y, &w)
        });
    }

    check_tape_fn(&mut gc, &mut rng, "add_row", 2 * 4 + 4, points, &|tape, leaf| {
        let x = take(tape, leaf, 0, 2, 4)?;
        let b = tape.slice_cols(leaf, 8, 4)?;
        let y = tape.add_row(x, b)?;
        weighted(tape, y, &w)
    });

    check_tape_fn(&mut gc, &mut rng, "layer_norm", 2 * 8 + 8 + 8, points, &|tape, leaf| {
        let x = take(tape, leaf, 0, 2, 8)?;
        let g = tape.slice_cols(leaf, 16, 8)?;
        let b = tape.slice_cols(leaf, 24, 8)?;
        let y = tape.layer_norm(x, g, b, 1e-6)?;
        weighted(tape, y, &w)
    });

    check_tape_fn(&mut gc, &mut rng, "softmax_rows", 5, points, &|tape, leaf| {
        let y = tape.softmax_rows(leaf)?;
        weighted(tape, y, &w)
    });

    // Gradient of ||normalize(x) - t||^2 for a fixed random target.
    let target = rand_vec(&mut rng, 6);
    check_tape_fn(&mut gc, &mut rng, "l2_normalize_rows", 6, points, &|tape, leaf| {
        let x = tape.reshape(leaf, vec![2, 3])?;
        let y = tape.l2_normalize_rows(x, 1e-6)?;
        let t = tape.constant(vec![2, 3], target.clone());
        let d = tape.sub(y, t)?;
        let sq = tape.mul(d, d)?;
        Ok(tape.sum_all(sq))
    });

    check_tape_fn(&mut gc, &mut rng, "gather_rows", 4 * 3, points, &|tape, leaf| {
        let x = take(tape, leaf, 0, 4, 3)?;
        let y = tape.gather_rows(x, &[2, 0, 2])?;
        weighted(tape, y, &w)
    });

    check_tape_fn(&mut gc, &mut rng, "assemble_rows", 2 * 3 + 3, points, &|tape, leaf| {
        let kept = take(tape, leaf, 0, 2, 3)?;
        let fill = tape.slice_cols(leaf, 6, 3)?;
        let y = tape.assemble_rows(kept, fill, &[3, 1], 5)?;
        weighted(tape, y, &w)
    });

    check_tape_fn(&mut gc, &mut rng, "slice_cols", 2 * 6, points, &|tape, leaf| {
        let x = take(tape, leaf, 0, 2, 6)?;
        let y = tape.slice_cols(x, 1, 3)?;
        weighted(tape, y, &w)
    });

    check_tape_fn(&mut gc, &mut rng, "concat_cols", 2 * 5, points, &|tape, leaf| {
        let a = take(tape, leaf, 0, 2, 2)?;
        let b = take(tape, leaf, 4, 2, 3)?;
        let y = tape.concat_cols(&[a, b])?;
        weighted(tape, y, &w)
    });

    check_tape_fn(&mut gc, &mut rng, "row_mean", 3 * 4, points, &|tape, leaf| {
        let x = take(tape, leaf, 0, 3, 4)?;
        let y = tape.row_mean(x)?;
        weighted(tape, y, &w)
    });

    check_tape_fn(&mut gc, &mut rng, "sum_all", 7, points, &|tape, leaf| {
        let sq = tape.mul(leaf, leaf)?;
        Ok(tape.sum_all(sq))
    });

    check_tape_fn(&mut gc, &mut rng, "reshape", 6, points, &|tape, leaf| {
        let x = tape.reshape(leaf, vec![3, 2])?;
        let y = tape.mul(x, x)?;
        weighted(tape, y, &w)
    });

    // ln probed through softplus(x) + 1 to keep the argument positive.
    check_tape_fn(&mut gc, &mut rng, "ln", 6, points, &|tape, leaf| {
        let sp = tape.softplus(leaf);
        let one = tape.constant(vec![1, 6], vec![1.0; 6]);
        let pos = tape.add(sp, one)?;
        let y = tape.ln(pos);
        weighted(tape, y, &w)
    });

    gc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_at_twenty_points() {
        let gc = standard_primitive_suite(ketos_seed(), 20);
        assert!(gc.passed(), "failures: {:?}\n{}", gc.failures(), gc.report());
    }

    fn ketos_seed() -> u64 {
        0x5eed
    }

    #[test]
    fn injected_sign_error_is_caught_and_named() {
        let mut gc = GradCheck::new(FD_TOL);
        let x = vec![0.7, -0.3];
        // Deliberately wrong analytic gradient (sign flipped).
        let analytic = vec![-2.0 * 0.7, 2.0 * 0.3];
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        gc.check("broken_square", &x, &analytic, &mut f);
        assert!(!gc.passed());
        assert_eq!(gc.failures(), vec!["broken_square"]);
        assert!(gc.report().contains("broken_square"));
        assert!(gc.report().contains("FAIL"));
    }

    #[test]
    fn central_diff_matches_simple_polynomial() {
        let mut f = |x: &[f64]| x[0] * x[0] * x[0];
        let g = central_diff(&mut f, &[2.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-6);
    }
}
