//! Central-difference gradient checking for graph-built scalar functions.

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Mat, ParameterTree};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Arrays larger than this are checked on a seeded sample of this many coordinates.
    pub max_coords: usize,
    pub seed: u64,
    /// Lower bound on the norm used as the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 48,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)` over the checked coordinates.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub coords: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub arrays: Vec<ArrayCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.arrays.iter().map(|a| a.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ArrayCheck> {
        self.arrays
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn coords(len: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    if len <= opts.max_coords {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut picked = index::sample(&mut rng, len, opts.max_coords).into_vec();
    picked.sort_unstable();
    picked
}

fn compare(name: String, analytic: &Mat, numeric: &[(usize, f64)], floor: f64) -> ArrayCheck {
    let flat: Vec<f64> = analytic.iter().copied().collect();
    let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
    for &(i, n) in numeric {
        diff += (flat[i] - n).powi(2);
        an += flat[i].powi(2);
        nn += n * n;
    }
    ArrayCheck {
        name,
        rel_error: diff.sqrt() / an.sqrt().max(nn.sqrt()).max(floor),
        analytic_norm: an.sqrt(),
        coords: numeric.len(),
    }
}

/// Checks the gradient of `f` with respect to every input and every parameter of `tree`.
///
/// `f` receives the inputs as graph leaves and must return a scalar.
pub fn check_gradients<F>(
    tree: &ParameterTree,
    inputs: &[Mat],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tree: &ParameterTree, inputs: &[Mat]| -> Result<f64> {
        let mut g = Graph::with_params(tree);
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let (input_grads, param_grads) = {
        let mut g = Graph::with_params(tree);
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let grads = g.backward(out);
        let ig: Vec<Mat> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, x)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(x.raw_dim()))
            })
            .collect();
        let mut pg: Vec<Mat> = tree
            .iter()
            .map(|(_, p)| Array2::zeros(p.raw_dim()))
            .collect();
        for (i, grad) in g.param_grads(&grads) {
            pg[i] = grad;
        }
        (ig, pg)
    };

    let h = opts.step;
    let mut report = GradCheckReport::default();
    for (k, x) in inputs.iter().enumerate() {
        let mut numeric = Vec::new();
        for i in coords(x.len(), opts, k as u64) {
            let mut probe = inputs.to_vec();
            let cell = probe[k].as_slice_mut().expect("standard layout");
            let orig = cell[i];
            cell[i] = orig + h;
            let up = eval(tree, &probe)?;
            probe[k].as_slice_mut().unwrap()[i] = orig - h;
            let down = eval(tree, &probe)?;
            numeric.push((i, (up - down) / (2.0 * h)));
        }
        report.arrays.push(compare(
            format!("input{k}"),
            &input_grads[k],
            &numeric,
            opts.floor,
        ));
    }
    let mut probe = tree.clone();
    for p in 0..tree.len() {
        let mut numeric = Vec::new();
        for i in coords(tree.by_index(p).len(), opts, 1000 + p as u64) {
            let orig = tree.by_index(p).as_slice().expect("standard layout")[i];
            probe.by_index_mut(p).as_slice_mut().unwrap()[i] = orig + h;
            let up = eval(&probe, inputs)?;
            probe.by_index_mut(p).as_slice_mut().unwrap()[i] = orig - h;
            let down = eval(&probe, inputs)?;
            probe.by_index_mut(p).as_slice_mut().unwrap()[i] = orig;
            numeric.push((i, (up - down) / (2.0 * h)));
        }
        report.arrays.push(compare(
            tree.name(p).to_string(),
            &param_grads[p],
            &numeric,
            opts.floor,
        ));
    }
    Ok(report)
}
