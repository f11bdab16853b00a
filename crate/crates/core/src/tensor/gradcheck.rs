use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParameterSet, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step, must lie in `[1e-7, 1e-3]`.
    pub eps: f64,
    pub tol: f64,
    pub coords_per_array: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            coords_per_array: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub arrays: Vec<ArrayCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Compares reverse-mode gradients against central differences on a seeded
/// subset of coordinates of every parameter array.
///
/// `build` must construct a fresh graph from `params` and return the scalar loss.
pub fn finite_diff_check<F, E>(mut build: F, params: &ParameterSet, cfg: &GradCheckConfig) -> Result<GradCheckReport, E>
where
    F: FnMut(&ParameterSet) -> Result<(Graph, Var), E>,
    E: From<TensorError>,
{
    if !(1e-7..=1e-3).contains(&cfg.eps) {
        return Err(TensorError::Precondition(format!("gradcheck eps {} outside [1e-7, 1e-3]", cfg.eps)).into());
    }
    let base = eval(&mut build, params)?;
    let again = eval(&mut build, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::Precondition(format!("objective is not deterministic: {base} vs {again}")).into());
    }

    let (mut graph, loss) = build(params)?;
    let grads = graph.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut arrays = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let n = tensor.len();
        let coords: Vec<usize> = if n <= cfg.coords_per_array {
            (0..n).collect()
        } else {
            let mut v = index::sample(&mut rng, n, cfg.coords_per_array).into_vec();
            v.sort_unstable();
            v
        };
        let analytic = grads
            .param(name)
            .ok_or_else(|| TensorError::Precondition(format!("no gradient recorded for {name}")))?;
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &i in &coords {
            let orig = tensor.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + cfg.eps;
            let plus = eval(&mut build, &work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - cfg.eps;
            let minus = eval(&mut build, &work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * cfg.eps);
            let ad = analytic.data()[i];
            let rel = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(ad.abs());
        }
        arrays.push(ArrayCheck {
            name: name.clone(),
            checked: coords.len(),
            max_rel_error: max_rel,
            max_abs_grad: max_abs,
        });
    }
    let max_rel_error = arrays.iter().map(|a| a.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        arrays,
        max_rel_error,
        tol: cfg.tol,
    })
}

fn eval<F, E>(build: &mut F, params: &ParameterSet) -> Result<f64, E>
where
    F: FnMut(&ParameterSet) -> Result<(Graph, Var), E>,
{
    let (g, loss) = build(params)?;
    Ok(g.value(loss).data()[0])
}
