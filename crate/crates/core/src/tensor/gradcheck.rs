//! Central-finite-difference verification of reverse-mode gradients.

use super::{ParamStore, Result, Scalar, Tape, Tensor, Var};

/// Outcome of one gradient check: the worst relative error over every
/// coordinate of every checked input.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked_coords: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8)
}

/// Reduces a tensor to a scalar through a fixed random-weight dot product.
///
/// A plain sum makes a poor readout: gradients that are structurally zero
/// under summation (e.g. anything whose spatial mean cancels) vanish, and
/// misplaced gradient mass can cancel across elements. Weights drawn from
/// [0.5, 1.5] keep every chain alive and every true gradient away from the
/// relative-error floor.
pub fn weighted_readout<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    seed: u64,
) -> Result<Var> {
    let shape = tape.value(x).shape();
    let mut rng = super::SeededRng::new(seed ^ 0x5eed_0u64);
    let w = Tensor::from_fn(shape, |_, _, _, _| S::from_f64(rng.uniform_in(0.5, 1.5)));
    let wv = tape.leaf(w);
    let prod = tape.mul(x, wv)?;
    tape.sum_all(prod)
}

/// Checks reverse-mode gradients of a scalar-valued tape program against
/// central finite differences, for every coordinate of every input.
///
/// `build` receives leaves for `points` in order and must return the scalar
/// output variable.
pub fn grad_check_multi<S, F>(build: F, points: &[Tensor<S>], step: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let eval = |points: &[Tensor<S>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0].to_f64())
    };

    // Analytic gradients in one forward+backward pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked_coords: 0,
    };
    let mut work: Vec<Tensor<S>> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        let analytic = grads.of(vars[pi]);
        for coord in 0..point.numel() {
            let orig = point.data()[coord];
            work[pi].data_mut()[coord] = orig + S::from_f64(step);
            let f_plus = eval(&work)?;
            work[pi].data_mut()[coord] = orig - S::from_f64(step);
            let f_minus = eval(&work)?;
            work[pi].data_mut()[coord] = orig;
            let fd = (f_plus - f_minus) / (2.0 * step);
            let ad = analytic.map_or(0.0, |g| g.data()[coord].to_f64());
            let e = rel_err(ad, fd);
            report.checked_coords += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((pi, coord));
            }
        }
    }
    Ok(report)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<S, F>(build: F, point: &Tensor<S>, step: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    grad_check_multi(
        |tape, vars| build(tape, vars[0]),
        std::slice::from_ref(point),
        step,
    )
}

/// Checks gradients of a parameterized scalar program — the kind the blocks
/// and the model use — w.r.t. both its tensor inputs and every trainable
/// parameter in the store, by perturbing the store itself. This exercises
/// the production forward path unchanged.
pub fn grad_check_params<S, F>(
    store: &ParamStore<S>,
    inputs: &[Tensor<S>],
    step: f64,
    build: F,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&ParamStore<S>, &mut Tape<S>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<S>, inputs: &[Tensor<S>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = build(store, &mut tape, &vars)?;
        Ok(tape.value(out).data()[0].to_f64())
    };

    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = build(store, &mut tape, &vars)?;
    let grads = tape.backward(out)?;
    tape.accumulate_param_grads(&grads, &mut analytic_store);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked_coords: 0,
    };
    let mut note = |report: &mut GradCheckReport, slot: usize, coord: usize, ad: f64, fd: f64| {
        let e = rel_err(ad, fd);
        report.checked_coords += 1;
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some((slot, coord));
        }
    };

    let mut work_inputs: Vec<Tensor<S>> = inputs.to_vec();
    for (pi, point) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[pi]);
        for coord in 0..point.numel() {
            let orig = point.data()[coord];
            work_inputs[pi].data_mut()[coord] = orig + S::from_f64(step);
            let f_plus = eval(store, &work_inputs)?;
            work_inputs[pi].data_mut()[coord] = orig - S::from_f64(step);
            let f_minus = eval(store, &work_inputs)?;
            work_inputs[pi].data_mut()[coord] = orig;
            let fd = (f_plus - f_minus) / (2.0 * step);
            let ad = analytic.map_or(0.0, |g| g.data()[coord].to_f64());
            note(&mut report, pi, coord, ad, fd);
        }
    }

    let mut work_store = store.clone();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (si, &id) in ids.iter().enumerate() {
        if !store.get(id).trainable {
            continue;
        }
        for coord in 0..store.get(id).value.numel() {
            let orig = store.get(id).value.data()[coord];
            work_store.get_mut(id).value.data_mut()[coord] = orig + S::from_f64(step);
            let f_plus = eval(&work_store, inputs)?;
            work_store.get_mut(id).value.data_mut()[coord] = orig - S::from_f64(step);
            let f_minus = eval(&work_store, inputs)?;
            work_store.get_mut(id).value.data_mut()[coord] = orig;
            let fd = (f_plus - f_minus) / (2.0 * step);
            let ad = analytic_store.get(id).grad.data()[coord].to_f64();
            note(&mut report, inputs.len() + si, coord, ad, fd);
        }
    }
    Ok(report)
}
