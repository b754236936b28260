//! Central finite-difference oracle for tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many coordinates of each input, chosen with `seed`.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    /// Test hook: perturbs the analytic gradient of the first checked
    /// coordinate so callers can confirm that failures are reported.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-6,
            max_coords_per_input: None,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a ReLU kink.
    pub skipped: usize,
    /// Coordinates a central difference cannot certify at this `eps`, `tol`
    /// and loss magnitude, where both gradients still agree to that floor.
    pub unresolved: usize,
    /// `(input name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Checks the tape gradient of `f` at `x`. Non-scalar outputs are reduced
/// with a fixed pseudo-random projection before differentiation.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        eps,
        tol,
        ..Default::default()
    };
    grad_check_with(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), &opts)
}

/// Multi-input form of [`grad_check`].
pub fn grad_check_with<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(&format!("input{i}"), t.clone(), ParamKind::Trainable))
        .collect::<Result<_>>()?;
    grad_check_params(
        &mut store,
        |s| s,
        |s, tape| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
            f(tape, &vars)
        },
        opts,
    )
}

fn projected_loss(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    if n == 1 {
        return Ok(y);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ n as u64);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::new(tape.shape(y), w)?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn evaluate<S, F>(state: &mut S, f: &mut F) -> Result<(Tape<f64>, Var)>
where
    F: FnMut(&mut S, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let y = f(state, &mut tape)?;
    let loss = projected_loss(&mut tape, y)?;
    if let Some((node, op)) = tape.first_non_finite() {
        return Err(Error::Numerical(format!(
            "non-finite value produced by {op} (node {node})"
        )));
    }
    Ok((tape, loss))
}

/// Checks gradients with respect to every trainable tensor of the store
/// reachable through `store_of`. `f` is re-run once per perturbation.
pub fn grad_check_params<S, G, F>(state: &mut S, store_of: G, mut f: F, opts: &GradCheckOptions) -> Result<GradReport>
where
    G: Fn(&mut S) -> &mut ParamStore<f64>,
    F: FnMut(&mut S, &mut Tape<f64>) -> Result<Var>,
{
    if opts.eps <= 0.0 {
        return Err(Error::Config(format!("eps must be positive, got {}", opts.eps)));
    }
    store_of(state).zero_grad();
    let (tape, loss) = evaluate(state, &mut f)?;
    tape.backward_into(loss, store_of(state))?;
    let base_sig = tape.relu_signature();
    drop(tape);

    let trainable: Vec<_> = {
        let s = store_of(state);
        s.ids().filter(|&id| s.kind(id) == ParamKind::Trainable).collect()
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        pass: true,
        checked: 0,
        skipped: 0,
        unresolved: 0,
        worst: None,
    };
    let mut corrupt = opts.corrupt;
    for (slot, id) in trainable.into_iter().enumerate() {
        let (len, name) = {
            let s = store_of(state);
            (s.tensor(id).numel(), s.name(id).to_string())
        };
        let analytic: Vec<f64> = store_of(state)
            .tensor(id)
            .grad()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; len]);
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < len => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (slot as u64).wrapping_mul(0x9e37_79b9));
                let mut c = sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        for i in coords {
            let orig = store_of(state).tensor(id).data()[i];
            store_of(state).tensor_mut(id).data_mut()[i] = orig + opts.eps;
            let (tp, lp) = evaluate(state, &mut f)?;
            store_of(state).tensor_mut(id).data_mut()[i] = orig - opts.eps;
            let (tm, lm) = evaluate(state, &mut f)?;
            store_of(state).tensor_mut(id).data_mut()[i] = orig;
            if tp.relu_signature() != base_sig || tm.relu_signature() != base_sig {
                report.skipped += 1;
                continue;
            }
            let (fp, fm) = (tp.value(lp)[0], tm.value(lm)[0]);
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let mut a = analytic[i];
            if corrupt {
                a += 1e-3 * (1.0 + a.abs());
                corrupt = false;
            }
            // A few ulps of the loss, seen through the difference quotient.
            let resolution = 32.0 * f64::EPSILON * fp.abs().max(fm.abs()) / (2.0 * opts.eps);
            let both_tiny = a.abs() <= resolution && numeric.abs() <= resolution;
            // Too small to certify at `tol`, but agreeing to the noise floor.
            let below_tol = (a.abs() + numeric.abs()) * opts.tol < resolution && (a - numeric).abs() <= resolution;
            if both_tiny || below_tol {
                report.unresolved += 1;
                continue;
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    report.pass = report.max_rel_err <= opts.tol;
    Ok(report)
}
