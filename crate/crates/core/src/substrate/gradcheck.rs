use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::{SubstrateError, Tensor};

/// One probed coordinate: (param index, element index, analytic, numeric).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbedGradient {
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl ProbedGradient {
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / (self.analytic.abs() + self.numeric.abs() + 1e-8)
    }
}

/// Compares reverse-mode gradients against central differences.
///
/// `loss_fn` receives a fresh graph and one gradient-tracking leaf per entry of
/// `params`, and must return a one-element node. At most `max_coords`
/// coordinates (chosen with `seed`) are probed. The returned figure is the
/// largest `|analytic - numeric| / (|analytic| + |numeric| + 1e-8)`.
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &[Tensor],
    epsilon: f32,
    max_coords: usize,
    seed: u64,
) -> Result<f64, SubstrateError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, SubstrateError>,
{
    let probes = finite_diff_probe(loss_fn, params, epsilon, max_coords, seed)?;
    Ok(probes.iter().map(ProbedGradient::relative_error).fold(0.0, f64::max))
}

/// Per-coordinate form of [`finite_diff_check`].
pub fn finite_diff_probe<F>(
    loss_fn: F,
    params: &[Tensor],
    epsilon: f32,
    max_coords: usize,
    seed: u64,
) -> Result<Vec<ProbedGradient>, SubstrateError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, SubstrateError>,
{
    if !(epsilon > 0.0) {
        return Err(SubstrateError::InvalidArgument("epsilon must be positive"));
    }
    let evaluate = |values: &[Tensor]| -> Result<(Graph, Vec<Var>, Var), SubstrateError> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = loss_fn(&mut g, &leaves)?;
        if !g.scalar(loss).is_finite() {
            return Err(SubstrateError::NonFinite("loss"));
        }
        Ok((g, leaves, loss))
    };

    let (mut g, leaves, loss) = evaluate(params)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |j| (pi, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<(usize, usize)> = if coords.len() <= max_coords {
        coords
    } else {
        sample(&mut rng, coords.len(), max_coords)
            .into_iter()
            .map(|i| coords[i])
            .collect()
    };

    let mut probes = Vec::with_capacity(chosen.len());
    let mut values = params.to_vec();
    for (pi, j) in chosen {
        let orig = values[pi].data()[j];
        let up = orig + epsilon;
        let down = orig - epsilon;
        values[pi].data_mut()[j] = up;
        let (gu, _, lu) = evaluate(&values)?;
        values[pi].data_mut()[j] = down;
        let (gd, _, ld) = evaluate(&values)?;
        values[pi].data_mut()[j] = orig;
        let numeric = (gu.scalar(lu) - gd.scalar(ld)) / (up as f64 - down as f64);
        probes.push(ProbedGradient {
            param: pi,
            element: j,
            analytic: analytic[pi].data()[j] as f64,
            numeric,
        });
    }
    Ok(probes)
}
