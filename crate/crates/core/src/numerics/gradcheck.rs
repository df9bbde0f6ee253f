//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    /// Check at most this many coordinates per tensor (sampled with `seed`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            abs_floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

fn eval_loss<T: Scalar, F, E>(f: &F, params: &[Tensor<T>]) -> Result<f64, E>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let v = g.value(loss).item().as_f64();
    if !v.is_finite() {
        return Err(NumericsError::NonFinite("loss").into());
    }
    Ok(v)
}

/// Maximum elementwise relative error between reverse-mode gradients and
/// central differences, over all (or a sample of) coordinates of `params`.
pub fn finite_diff_check_many<T: Scalar, F, E>(
    f: F,
    params: &[Tensor<T>],
    opts: &GradCheckOptions,
) -> Result<f64, E>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, E>,
    E: From<NumericsError>,
{
    if !(opts.eps > 1e-6 && opts.eps < 1e-2) {
        return Err(NumericsError::BadStep(opts.eps).into());
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).item().is_finite() {
        return Err(NumericsError::NonFinite("loss").into());
    }
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < p.len() => {
                let mut c = sample(&mut rng, p.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..p.len()).collect(),
        };
        for idx in coords {
            let orig = p.data()[idx];
            work[pi].data_mut()[idx] = orig + T::from_f64_lossy(opts.eps);
            let plus = eval_loss(&f, &work)?;
            work[pi].data_mut()[idx] = orig - T::from_f64_lossy(opts.eps);
            let minus = eval_loss(&f, &work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[idx].as_f64();
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Single-tensor convenience wrapper around [`finite_diff_check_many`].
pub fn finite_diff_check<T: Scalar, F>(
    f: F,
    params: &Tensor<T>,
    eps: f64,
) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var, NumericsError>,
{
    let opts = GradCheckOptions {
        eps,
        ..GradCheckOptions::default()
    };
    finite_diff_check_many(|g, v| f(g, v[0]), std::slice::from_ref(params), &opts)
}
