//! Central finite-difference checks for tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::{ParamSet, Tensor};

pub const STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-5)`; the floor keeps near-zero entries from
/// amplifying rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

pub fn random_params(spec: &[(&str, &[usize])], seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape) in spec {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        params.add(name, Tensor::new(shape.to_vec(), data).unwrap());
    }
    params
}

/// Largest relative error between tape gradients and central differences
/// over every parameter entry.
pub fn max_relative_error(params: &mut ParamSet, build: impl Fn(&mut Tape) -> Var) -> f64 {
    let grads = {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape);
        tape.backward(loss).expect("scalar loss")
    };
    let eval = |params: &ParamSet| {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape);
        tape.scalar(loss)
    };
    let mut worst = 0.0f64;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for i in 0..params.get(id).numel() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + STEP;
            let up = eval(params);
            params.get_mut(id).data_mut()[i] = orig - STEP;
            let down = eval(params);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    worst
}

/// Panics when [`max_relative_error`] reaches `tolerance`.
pub fn finite_difference_check(params: &mut ParamSet, build: impl Fn(&mut Tape) -> Var, tolerance: f64) {
    let err = max_relative_error(params, build);
    assert!(err < tolerance, "finite-difference relative error {err:e} >= {tolerance:e}");
}
