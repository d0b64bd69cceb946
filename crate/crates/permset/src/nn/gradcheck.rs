use super::layers::Network;
use super::tensor::Tensor;
use super::NnError;

const FD_STEP: f64 = 1e-5;

/// Compares analytic parameter gradients against central finite differences
/// of `loss` and returns the maximum relative error
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)` over all
/// parameters. A network without parameters checks vacuously (returns 0).
///
/// `loss` maps the network output to a scalar and the gradient of that
/// scalar with respect to the output.
pub fn gradient_check(
    net: &mut Network,
    input: &Tensor,
    loss: &dyn Fn(&Tensor) -> (f64, Tensor),
) -> Result<f64, NnError> {
    let out = net.forward(input)?;
    let (_, dloss) = loss(&out);
    net.zero_grads();
    net.backward(&dloss)?;
    let analytic: Vec<Vec<f64>> = net
        .param_grad_pairs()
        .iter()
        .map(|(_, g)| g.data().to_vec())
        .collect();

    let mut max_rel = 0.0f64;
    let n_params = analytic.len();
    for t in 0..n_params {
        for i in 0..analytic[t].len() {
            let orig = net.param_grad_pairs()[t].0.data()[i];

            net.param_grad_pairs()[t].0.data_mut()[i] = orig + FD_STEP;
            let out_plus = net.forward(input)?;
            let (l_plus, _) = loss(&out_plus);

            net.param_grad_pairs()[t].0.data_mut()[i] = orig - FD_STEP;
            let out_minus = net.forward(input)?;
            let (l_minus, _) = loss(&out_minus);

            net.param_grad_pairs()[t].0.data_mut()[i] = orig;

            let numeric = (l_plus - l_minus) / (2.0 * FD_STEP);
            let a = analytic[t][i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    // leave caches consistent with the unperturbed parameters
    net.forward(input)?;
    Ok(max_rel)
}
