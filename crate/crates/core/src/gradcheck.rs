//! Central finite-difference checking of tape gradients.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Bound, ParameterStore};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so entries where both
    /// gradients vanish do not divide by zero.
    pub floor: f64,
    /// Check at most this many coordinates per input (chosen at random);
    /// `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Fourth-order central stencil instead of the two-point one. Lets a
    /// larger `step` be used on smooth functions, which cuts roundoff.
    pub fourth_order: bool,
    /// Skip coordinates whose stencil crosses a ReLU kink (detected through
    /// [`Tape::branch_signature`]); they are counted in `coords_skipped`.
    pub skip_kinks: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
            fourth_order: false,
            skip_kinks: true,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords_checked: usize,
    pub coords_skipped: usize,
    /// Input (or parameter) holding the worst relative error.
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, what: &str, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || self.worst.is_empty() {
            self.worst = what.to_string();
        }
        self.max_rel_err = self.max_rel_err.max(rel);
        self.coords_checked += 1;
    }
}

impl GradCheck {
    /// Compares the tape gradient of `f(inputs)` (a scalar) against central
    /// differences for every input.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let eval = |xs: &[Tensor]| -> Result<(f64, u64)> {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let y = f(&tape, &vars)?.value().item();
            Ok((y, tape.branch_signature()))
        };
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let base = tape.branch_signature();
        let grads = tape.backward(out)?;
        let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

        let mut rng = stream(self.seed, Purpose::Data);
        let mut report = GradCheckReport::default();
        let mut probe = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            for c in self.coords(&mut rng, input.len()) {
                let orig = input.data()[c];
                let numeric = self.difference(base, |dx| {
                    probe[i].data_mut()[c] = orig + dx;
                    eval(&probe)
                })?;
                probe[i].data_mut()[c] = orig;
                match numeric {
                    Some(n) => report.record(&format!("input{i}"), analytic[i].data()[c], n, self.floor),
                    None => report.coords_skipped += 1,
                }
            }
        }
        Ok(report)
    }

    /// Central difference, or `None` when a stencil point lands on a
    /// different linear piece than the base point.
    fn difference(&self, base: u64, mut eval: impl FnMut(f64) -> Result<(f64, u64)>) -> Result<Option<f64>> {
        let h = self.step;
        let offsets: &[f64] = if self.fourth_order { &[2.0, 1.0, -1.0, -2.0] } else { &[1.0, -1.0] };
        let mut ys = Vec::with_capacity(offsets.len());
        for &o in offsets {
            let (y, sig) = eval(o * h)?;
            if self.skip_kinks && sig != base {
                return Ok(None);
            }
            ys.push(y);
        }
        Ok(Some(if self.fourth_order {
            (-ys[0] + 8.0 * ys[1] - 8.0 * ys[2] + ys[3]) / (12.0 * h)
        } else {
            (ys[0] - ys[1]) / (2.0 * h)
        }))
    }

    fn coords(&self, rng: &mut impl Rng, len: usize) -> Vec<usize> {
        match self.max_coords {
            Some(k) if k < len => (0..k).map(|_| rng.random_range(0..len)).collect(),
            _ => (0..len).collect(),
        }
    }

    /// Same comparison for every parameter of `store` that `f` touches.
    pub fn run_params<F>(&self, store: &ParameterStore, f: F) -> Result<GradCheckReport>
    where
        F: for<'s, 't> Fn(&Bound<'s, 't>) -> Result<Var<'t>>,
    {
        let tape = Tape::new();
        let bound = Bound::new(store, &tape);
        let out = f(&bound)?;
        let base = tape.branch_signature();
        let analytic = bound.collect(tape.backward(out)?);

        let eval = |s: &ParameterStore| -> Result<(f64, u64)> {
            let tape = Tape::new();
            let b = Bound::frozen(s, &tape);
            let y = f(&b)?.value().item();
            Ok((y, tape.branch_signature()))
        };
        let mut rng = stream(self.seed, Purpose::Data);
        let mut report = GradCheckReport::default();
        let mut probe = store.clone();
        for (name, grad) in &analytic {
            for c in self.coords(&mut rng, grad.len()) {
                let orig = store.get(name).expect("bound parameter exists").data()[c];
                let slot = |p: &mut ParameterStore, v: f64| p.get_mut(name).expect("exists").data_mut()[c] = v;
                let numeric = self.difference(base, |dx| {
                    slot(&mut probe, orig + dx);
                    eval(&probe)
                })?;
                slot(&mut probe, orig);
                match numeric {
                    Some(n) => report.record(name, grad.data()[c], n, self.floor),
                    None => report.coords_skipped += 1,
                }
            }
        }
        Ok(report)
    }
}

/// Random tensor with entries uniform in `[-1, 1)`.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("positive extents")
}

/// Reduces an arbitrary-shaped output to a scalar by a fixed random
/// projection, so every output coordinate influences the checked scalar.
pub fn project<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = stream(seed, Purpose::Data);
    let w = random_tensor(&mut rng, &y.shape());
    Ok(y.mul(tape.constant(w))?.sum_all())
}
