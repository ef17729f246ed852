//! Central finite-difference checks against the tape gradients.

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub input: usize,
    /// `|g_a - g_n| / max(|g_a|, |g_n|)` over the checked coordinates.
    pub rel_error: f64,
    pub max_abs_analytic: f64,
    pub checked: usize,
    /// Probes dropped because `x ± step` crossed a `relu`/`abs` kink.
    pub skipped: usize,
}

/// Compares tape gradients of the scalar `f(inputs)` with central differences.
///
/// At most `max_coords` coordinates per input are probed (evenly strided),
/// so large tensors stay cheap. Inside each stride block the coordinate with
/// the largest analytic gradient is probed first, keeping the comparison
/// above the `eps * |f| / step` roundoff floor of the difference quotient.
/// A probe whose perturbed evaluations take a different branch at any `relu`
/// or `abs` than the unperturbed one is not differentiable at that scale; it
/// moves to the next candidate of its stride block, or is counted in
/// `skipped` when the block runs out.
pub fn check<F>(inputs: &[Tensor], step: f64, max_coords: usize, f: F) -> Vec<GradCheck>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let graph = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let loss = f(&graph, &vars);
    let base_pattern = graph.activation_pattern();
    let grads = graph.backward(loss);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> (f64, u64) {
        let g = Graph::inference();
        let vs: Vec<Var<'_>> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let v = f(&g, &vs).item();
        (v, g.activation_pattern())
    };

    let mut report = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let n = inputs[i].len();
        let stride = (n / max_coords.max(1)).max(1);
        let mut diff2 = 0.0;
        let mut ana2 = 0.0;
        let mut num2 = 0.0;
        let mut checked = 0;
        let mut skipped = 0;
        for start in (0..n).step_by(stride) {
            let mut probe = None;
            let mut order: Vec<usize> = (start..(start + stride).min(n)).collect();
            order.sort_by(|&x, &y| a.data()[y].abs().total_cmp(&a.data()[x].abs()));
            for j in order {
                let orig = work[i].data()[j];
                work[i].data_mut()[j] = orig + step;
                let (up, p_up) = eval(&work);
                work[i].data_mut()[j] = orig - step;
                let (down, p_down) = eval(&work);
                work[i].data_mut()[j] = orig;
                if p_up == base_pattern && p_down == base_pattern {
                    probe = Some((j, (up - down) / (2.0 * step)));
                    break;
                }
            }
            let Some((j, numeric)) = probe else {
                skipped += 1;
                continue;
            };
            let analytic = a.data()[j];
            diff2 += (analytic - numeric).powi(2);
            ana2 += analytic * analytic;
            num2 += numeric * numeric;
            checked += 1;
        }
        let denom = ana2.sqrt().max(num2.sqrt());
        let rel_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
        report.push(GradCheck { input: i, rel_error, max_abs_analytic: a.max_abs(), checked, skipped });
    }
    report
}
