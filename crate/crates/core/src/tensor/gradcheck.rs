//! Central finite-difference oracle for analytic gradients.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Fault, Tape, Tensor, Var};
use crate::error::{BstError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FdSettings {
    /// Perturbation size, within [1e-7, 1e-4].
    pub eps: f64,
    /// Total coordinates sampled, handed out round-robin across parameter
    /// groups so every group gets at least one when the budget allows.
    pub coords: usize,
    pub seed: u64,
    /// Denominator floor for the relative error
    /// `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Corrupts the analytic pass, for checking that the checker fails.
    pub fault: Option<Fault>,
}

impl Default for FdSettings {
    fn default() -> Self {
        Self { eps: 1e-5, coords: 64, seed: 0, floor: 1e-6, fault: None }
    }
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub worst_group: String,
}

impl FdReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol && self.max_rel_err.is_finite()
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences `(f(p+ε) − f(p−ε)) / 2ε` at sampled coordinates.
///
/// `f` receives a fresh tape and the parameter handles registered on it.
pub fn finite_diff_check<F>(f: F, params: &BTreeMap<String, Tensor<f64>>, settings: &FdSettings) -> Result<FdReport>
where
    F: Fn(&Tape<f64>, &BTreeMap<String, Var>) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&settings.eps) {
        return Err(BstError::Config(format!("finite-difference eps {} outside [1e-7, 1e-4]", settings.eps)));
    }
    let eval = |p: &BTreeMap<String, Tensor<f64>>| -> Result<f64> {
        let tape = Tape::inference();
        let vars = p.iter().map(|(k, t)| (k.clone(), tape.param(k, t))).collect();
        let loss = f(&tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let base = eval(params)?;
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(BstError::OracleInvalid(format!(
            "function is not deterministic: {base:e} then {again:e}"
        )));
    }

    let tape = settings.fault.map_or_else(Tape::new, Tape::with_fault);
    let vars = params.iter().map(|(k, t)| (k.clone(), tape.param(k, t))).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut pools: Vec<(String, Vec<usize>)> = params
        .iter()
        .map(|(k, t)| {
            let mut idx: Vec<usize> = (0..t.numel()).collect();
            idx.shuffle(&mut rng);
            (k.clone(), idx)
        })
        .collect();
    let mut picks: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut budget = settings.coords;
    while budget > 0 && pools.iter().any(|(_, p)| !p.is_empty()) {
        for (name, pool) in pools.iter_mut() {
            if budget == 0 {
                break;
            }
            if let Some(i) = pool.pop() {
                picks.entry(name.clone()).or_default().push(i);
                budget -= 1;
            }
        }
    }

    let mut work = params.clone();
    let mut groups = Vec::new();
    for (name, coords) in &picks {
        let analytic = grads.get(name).expect("gradient for registered parameter");
        let mut g = GroupReport {
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for &i in coords {
            let orig = params[name].data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + settings.eps;
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - settings.eps;
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * settings.eps);
            let a = analytic.data()[i];
            let e = rel_err(a, numeric, settings.floor);
            if e > g.max_rel_err || e.is_nan() {
                g.max_rel_err = e;
                g.worst_index = i;
                g.worst_analytic = a;
                g.worst_numeric = numeric;
            }
        }
        groups.push(g);
    }
    let worst = groups
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .map(|g| (g.max_rel_err, g.name.clone()))
        .unwrap_or((0.0, String::new()));
    Ok(FdReport { groups, max_rel_err: worst.0, worst_group: worst.1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([(name.to_string(), Tensor::new(vec![1], vec![v]).unwrap())])
    }

    #[test]
    fn square_at_two() {
        let p = one("x", 2.0);
        let r = finite_diff_check(
            |t, v| {
                let sq = t.mul(v["x"], v["x"])?;
                Ok(t.sum_all(sq))
            },
            &p,
            &FdSettings::default(),
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-9, "{r:?}");
        assert!((r.groups[0].worst_numeric - 4.0).abs() < 1e-9 || r.max_rel_err == 0.0);
    }

    #[test]
    fn linear_function_is_exact_for_any_eps() {
        let p = one("x", 0.3);
        for eps in [1e-7, 1e-6, 1e-5, 1e-4] {
            let r = finite_diff_check(
                |t, v| Ok(t.sum_all(t.scale(v["x"], 2.0))),
                &p,
                &FdSettings { eps, ..FdSettings::default() },
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-8, "eps {eps}: {r:?}");
        }
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let p = one("x", 1.0);
        let r = finite_diff_check(|t, v| Ok(t.sum_all(v["x"])), &p, &FdSettings { eps: 1e-2, ..Default::default() });
        assert!(matches!(r, Err(BstError::Config(_))));
    }

    #[test]
    fn nondeterministic_function_rejected() {
        use std::cell::Cell;
        let p = one("x", 1.0);
        let calls = Cell::new(0.0);
        let r = finite_diff_check(
            |t, v| {
                calls.set(calls.get() + 1.0);
                Ok(t.sum_all(t.add_scalar(v["x"], calls.get())))
            },
            &p,
            &FdSettings::default(),
        );
        assert!(matches!(r, Err(BstError::OracleInvalid(_))));
    }
}
