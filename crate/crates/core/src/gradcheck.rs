//! Finite-difference verification of autodiff gradients.
//!
//! Always runs in double precision. The error for one entry is
//! `|analytic - numeric| / max(|analytic|, |numeric|, abs_floor)`; the floor
//! keeps entries whose true gradient is zero from dividing by roundoff.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tol: f64,
    pub abs_floor: f64,
    /// Check at most this many randomly chosen entries per input.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tol: 1e-4, abs_floor: 1e-6, max_entries: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub input: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the entry with the largest error.
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamReport> {
        self.params.iter().filter(move |p| p.max_rel_error > self.tol)
    }
}

/// Numeric estimate at one flat entry of one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumericEntry {
    pub entry: usize,
    pub value: f64,
}

pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(abs_floor);
    (analytic - numeric).abs() / scale
}

fn evaluate<F>(f: &F, inputs: &[Tensor], requires_grad: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_precision(Precision::Double);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect();
    let out = f(&mut g, &vars)?;
    Ok((g, vars, out))
}

/// Loss value and autodiff gradient of every input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(f, inputs, true)?;
    g.backward(out)?;
    let loss = g.value(out).data()[0];
    Ok((loss, vars.iter().map(|&v| g.grad(v)).collect()))
}

/// Central differences at the selected entries of every input.
pub fn numeric_gradients<F>(f: &F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<Vec<Vec<NumericEntry>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for p in 0..inputs.len() {
        let n = inputs[p].numel();
        let mut entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        entries.sort_unstable();
        let mut est = Vec::with_capacity(entries.len());
        for &i in &entries {
            let orig = inputs[p].data()[i];
            work[p].data_mut()[i] = orig + opts.step;
            let plus = scalar_loss(f, &work)?;
            work[p].data_mut()[i] = orig - opts.step;
            let minus = scalar_loss(f, &work)?;
            work[p].data_mut()[i] = orig;
            est.push(NumericEntry { entry: i, value: (plus - minus) / (2.0 * opts.step) });
        }
        out.push(est);
    }
    Ok(out)
}

fn scalar_loss<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, _, out) = evaluate(f, inputs, false)?;
    Ok(g.value(out).data()[0])
}

/// Compares analytic gradients against numeric estimates.
pub fn compare(analytic: &[Tensor], numeric: &[Vec<NumericEntry>], opts: &GradCheckOptions) -> GradCheckReport {
    let params = analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(input, (a, est))| {
            let mut rep = ParamReport {
                input,
                checked: est.len(),
                max_rel_error: 0.0,
                worst_entry: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for e in est {
                let av = a.data()[e.entry];
                let err = relative_error(av, e.value, opts.abs_floor);
                if err > rep.max_rel_error || (rep.max_rel_error == 0.0 && e.entry == est[0].entry) {
                    rep.max_rel_error = err;
                    rep.worst_entry = e.entry;
                    rep.analytic = av;
                    rep.numeric = e.value;
                }
            }
            rep
        })
        .collect();
    GradCheckReport { tol: opts.tol, params }
}

/// Checks the gradient of the scalar `f(inputs)` with respect to every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(&f, inputs)?;
    let numeric = numeric_gradients(&f, inputs, opts)?;
    Ok(compare(&analytic, &numeric, opts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_zero_error() {
        let x = Tensor::new([3], alloc::vec![0.5, -1.0, 2.0]).unwrap();
        let rep = grad_check(|g, v| g.sum(v[0]), &[x], &GradCheckOptions::default()).unwrap();
        assert!(rep.passed());
        assert!(rep.max_rel_error() < 1e-9);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let f = |g: &mut Graph, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        };
        let x = [Tensor::new([2], alloc::vec![1.0, -3.0]).unwrap()];
        let opts = GradCheckOptions::default();
        let (_, mut analytic) = analytic_gradients(&f, &x).unwrap();
        analytic[0].data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let numeric = numeric_gradients(&f, &x, &opts).unwrap();
        let rep = compare(&analytic, &numeric, &opts);
        assert!(!rep.passed());
        assert!((rep.max_rel_error() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn sampled_entries_are_bounded() {
        let x = Tensor::zeros([50]);
        let opts = GradCheckOptions { max_entries: Some(7), ..Default::default() };
        let est = numeric_gradients(&|g: &mut Graph, v: &[Var]| g.sum(v[0]), &[x], &opts).unwrap();
        assert_eq!(est[0].len(), 7);
    }
}
