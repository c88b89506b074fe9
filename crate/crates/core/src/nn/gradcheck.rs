use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::math;
use crate::nn::params::ParamSet;
use crate::rng::Rng;

/// Per-parameter result of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(move |e| e.max_rel_err >= self.tol)
    }
}

/// Compares the analytic gradients already accumulated in `params` against
/// central finite differences of `loss`.
///
/// The caller runs its forward+backward once to populate the gradient
/// buffers, then hands over a *pure* loss closure (any internal randomness
/// must be pinned). Up to `samples_per_param` coordinates are probed per
/// parameter with `h = 1e-4 * (1 + |theta|)`; the relative error denominator
/// is floored so that near-zero gradient pairs cannot produce spurious
/// failures at the 1e-4 tolerance.
pub fn grad_check<F>(
    params: &mut ParamSet,
    mut loss: F,
    samples_per_param: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let names: Vec<String> = params.entries().map(|p| p.name.clone()).collect();
    let analytic: Vec<Vec<f64>> = params.entries().map(|p| p.grad.clone()).collect();

    let mut entries = Vec::with_capacity(names.len());
    for (pi, name) in names.iter().enumerate() {
        let id = params.id(name).expect("name from iteration");
        let len = params.value(id).len();
        let count = samples_per_param.min(len);
        // sample distinct coordinates
        let mut picked: Vec<usize> = Vec::with_capacity(count);
        if count == len {
            picked.extend(0..len);
        } else {
            while picked.len() < count {
                let i = rng.next_below(len as u64) as usize;
                if !picked.contains(&i) {
                    picked.push(i);
                }
            }
        }
        let mut max_rel = 0.0f64;
        for &i in &picked {
            let theta = params.value(id)[i];
            let h = 1e-4 * (1.0 + math::abs(theta));
            let up = theta + h;
            let down = theta - h;
            params.value_mut(id)[i] = up;
            let l_plus = loss(params)?;
            params.value_mut(id)[i] = down;
            let l_minus = loss(params)?;
            params.value_mut(id)[i] = theta;
            let numeric = (l_plus - l_minus) / (up - down);
            let a = analytic[pi][i];
            let denom = math::abs(a).max(math::abs(numeric)).max(1e-3);
            let rel = math::abs(a - numeric) / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_err: max_rel,
            checked: count,
        });
    }
    Ok(GradCheckReport { entries, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;

    #[test]
    fn linear_map_is_exact() {
        // loss = sum(w * x) for fixed x; gradient = x
        let mut rng = Rng::new(8);
        let mut ps = ParamSet::new();
        let id = ps.register("w", &[8], Init::Normal { std: 1.0 }, &mut rng).unwrap();
        let x: Vec<f64> = (0..8).map(|i| 0.25 * i as f64 - 1.0).collect();
        let xs = x.clone();
        ps.grad_mut(id).copy_from_slice(&x);
        let report = grad_check(
            &mut ps,
            move |p: &ParamSet| {
                let id = p.id("w").unwrap();
                Ok(math::dot(p.value(id), &xs))
            },
            8,
            1e-9,
            &mut rng,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut rng = Rng::new(9);
        let mut ps = ParamSet::new();
        let id = ps.register("w", &[4], Init::Normal { std: 1.0 }, &mut rng).unwrap();
        // claim zero gradient for loss = sum(w^2) at nonzero w
        ps.grad_mut(id).fill(0.0);
        let report = grad_check(
            &mut ps,
            |p: &ParamSet| {
                let id = p.id("w").unwrap();
                Ok(p.value(id).iter().map(|&v| v * v).sum())
            },
            4,
            1e-4,
            &mut rng,
        )
        .unwrap();
        assert!(!report.passed());
    }
}
