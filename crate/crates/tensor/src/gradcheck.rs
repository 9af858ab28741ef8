use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences with step `eps`, returning the worst relative error over all
/// input coordinates.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    assert!(eps > 0.0, "grad_check eps must be positive");
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.var(x)).collect();
        let out = f(&mut tape, &vars);
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);

    let mut worst: f64 = 0.0;
    let mut xs: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + eps;
            let fp = eval(&xs);
            xs[k].data_mut()[i] = orig - eps;
            let fm = eval(&xs);
            xs[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    worst
}
