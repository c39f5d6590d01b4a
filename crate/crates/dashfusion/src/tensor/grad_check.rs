//! Finite-difference gradient checker.
//!
//! Compares reverse-mode gradients against central differences
//! `(f(x+h) - f(x-h)) / 2h`, reporting the max relative error
//! `|g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12)` over the checked coordinates.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate (flat index, or index into the coords list) of the max.
    pub worst: usize,
    pub checked: usize,
    pub step: f64,
}

const REL_EPS: f64 = 1e-12;

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs() + REL_EPS)
}

/// Check d(loss)/dx for a scalar-valued tape program over input `x`.
/// Every coordinate of `x` is checked.
pub fn grad_check<F>(f: &F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Numeric("grad_check: loss must be scalar".into()));
    }
    let grads = tape.backward(loss)?;
    let g_ad = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone());
        let loss = f(&mut tape, v)?;
        Ok(tape.value(loss).item())
    };

    let fd: Vec<Result<f64>> = par::map_indexed(x.numel(), |i| {
        let fp = eval(&x.perturbed(i, h))?;
        let fm = eval(&x.perturbed(i, -h))?;
        Ok((fp - fm) / (2.0 * h))
    });

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: 0,
        checked: x.numel(),
        step: h,
    };
    for (i, fd_i) in fd.into_iter().enumerate() {
        let e = rel_err(g_ad.data()[i], fd_i?);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = i;
        }
    }
    Ok(report)
}

/// Check d(loss)/dtheta for selected `(parameter name, flat index)`
/// coordinates of a parameterized loss.
pub fn grad_check_params<F>(
    f: &F,
    params: &ParamSet,
    coords: &[(String, usize)],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var> + Sync,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Numeric("grad_check: loss must be scalar".into()));
    }
    let grads = tape.backward_params(loss)?;

    let eval = |set: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, set)?;
        Ok(tape.value(loss).item())
    };

    let fd: Vec<Result<f64>> = par::map_indexed(coords.len(), |c| {
        let (name, idx) = &coords[c];
        let fp = eval(&params.perturbed(name, *idx, h)?)?;
        let fm = eval(&params.perturbed(name, *idx, -h)?)?;
        Ok((fp - fm) / (2.0 * h))
    });

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: 0,
        checked: coords.len(),
        step: h,
    };
    for (c, fd_c) in fd.into_iter().enumerate() {
        let (name, idx) = &coords[c];
        let ad = grads
            .get(name)
            .ok_or_else(|| Error::KeyMismatch(format!("no gradient for {name}")))?
            .data()[*idx];
        let e = rel_err(ad, fd_c?);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = c;
        }
    }
    Ok(report)
}

/// Draw `n` random `(parameter, flat index)` coordinates, weighted by
/// parameter size, over the trainable entries.
pub fn random_coords(
    params: &ParamSet,
    n: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<(String, usize)> {
    use rand::Rng;
    let sizes: Vec<(String, usize)> = params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), p.value.numel()))
        .collect();
    let total: usize = sizes.iter().map(|(_, s)| s).sum();
    (0..n)
        .map(|_| {
            let mut flat = rng.random_range(0..total);
            for (name, size) in &sizes {
                if flat < *size {
                    return (name.clone(), flat);
                }
                flat -= size;
            }
            unreachable!("flat index within total")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    // f = 0.5 * ||x||^2 has gradient exactly x.
    #[test]
    fn half_square_norm() {
        let x = Tensor::from_vec(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let report = grad_check(
            &|tape: &mut Tape, v: Var| {
                let sq = tape.mul(v, v)?;
                let s = tape.sum(sq)?;
                tape.scale(s, 0.5)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-8,
            "max_rel_err = {}",
            report.max_rel_err
        );
    }

    #[test]
    fn softmax_logsumexp_chain() {
        let x = Tensor::from_vec(vec![5], vec![0.1, 0.5, -0.4, 1.3, -2.0]).unwrap();
        let report = grad_check(
            &|tape: &mut Tape, v: Var| {
                let scaled = tape.scale(v, 1.7)?;
                tape.logsumexp(scaled)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "err {}", report.max_rel_err);
    }

    #[test]
    fn param_coordinates() {
        let mut params = ParamSet::new();
        params
            .insert(
                "w",
                Tensor::from_vec(vec![2, 2], vec![0.4, -0.2, 0.9, 0.1]).unwrap(),
                true,
            )
            .unwrap();
        let coords: Vec<(String, usize)> = (0..4).map(|i| ("w".to_string(), i)).collect();
        let report = grad_check_params(
            &|tape: &mut Tape, set: &ParamSet| {
                let w = tape.param(set.get("w")?);
                let x = tape.leaf(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
                let y = tape.matmul(x, w)?;
                let sm = tape.softmax_rows(y)?;
                let h = tape.mul(sm, sm)?;
                tape.sum(h)
            },
            &params,
            &coords,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "err {}", report.max_rel_err);
    }
}
