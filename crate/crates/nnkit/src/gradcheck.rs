use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Fraction of coordinates per parameter to probe (at least one each).
    pub fraction: f64,
    pub seed: u64,
    /// Denominator floor for the relative error. Central differences of an
    /// O(1) loss carry ~1e-12 of rounding noise, so exactly-zero gradients
    /// need a floor well above that.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-4,
            fraction: 0.05,
            seed: 0,
            floor: 1e-6,
        }
    }
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(NnError::Contract(format!(
            "grad_check needs a scalar output, got shape {:?}",
            g.shape(out)
        )));
    }
    if g.has_unseeded_dropout() {
        return Err(NnError::Contract(
            "grad_check with active dropout requires seed-frozen masks".into(),
        ));
    }
    Ok((g, vars, out))
}

fn central_difference<F>(f: &F, work: &mut [Tensor<f64>], pi: usize, idx: usize, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let orig = work[pi].data()[idx];
    work[pi].data_mut()[idx] = orig + eps;
    let (gp, _, op) = evaluate(f, work)?;
    let fp = gp.item(op);
    work[pi].data_mut()[idx] = orig - eps;
    let (gm, _, om) = evaluate(f, work)?;
    let fm = gm.item(om);
    work[pi].data_mut()[idx] = orig;
    Ok((fp - fm) / (2.0 * eps))
}

/// Compares reverse-mode gradients of the scalar `f(params)` against central
/// finite differences on a random coordinate sample. Returns the max of
/// `|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)`.
///
/// Each coordinate is probed at `epsilon` and at `epsilon / 100`, keeping the
/// smaller error: a ReLU kink inside the wider step corrupts only that
/// difference, while a wrong backward pass disagrees with both.
pub fn grad_check<F>(params: &[Tensor<f64>], f: F, opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(&f, params)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        if n == 0 {
            continue;
        }
        let k = ((n as f64 * opts.fraction).ceil() as usize).clamp(1, n);
        for idx in sample(&mut rng, n, k).iter() {
            let ad = analytic[pi][idx];
            let mut rel = f64::INFINITY;
            for eps in [opts.epsilon, opts.epsilon * 1e-2] {
                let fd = central_difference(&f, &mut work, pi, idx, eps)?;
                rel = rel.min((ad - fd).abs() / ad.abs().max(fd.abs()).max(opts.floor));
            }
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
