//! Finite-difference gradient checking.
//!
//! Central differences per sampled coordinate against the tape gradient.
//! Runs at whatever precision `S` is; the tight tolerances assume the caller
//! re-instantiates the function in f64.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords: usize,
    /// (leaf name, flat index, analytic, finite-difference) of the worst coordinate.
    pub worst: (String, usize, f64, f64),
}

/// Check the tape gradient of a scalar function against central finite
/// differences.
///
/// `f` must build the loss from the given leaf vars deterministically; the
/// same inputs are evaluated several times and must agree bit-exactly.
/// Returns the max over sampled coordinates of
/// |g_fd - g_ad| / max(|g_fd|, |g_ad|, 1e-8).
pub fn grad_check<S, F>(
    mut f: F,
    leaves: &[(String, Tensor<S>)],
    eps: f64,
    coords_per_leaf: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::Config(format!(
            "grad_check eps must lie in [1e-5, 1e-2], got {eps}"
        )));
    }
    if leaves.is_empty() {
        return Err(Error::Config("grad_check needs at least one leaf".into()));
    }

    let eval = |f: &mut F, tensors: &[Tensor<S>]| -> Result<(Tape<S>, Vec<Var>, S)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss);
        if v.len() != 1 {
            return Err(Error::Contract(format!(
                "grad_check function must return a scalar, got shape {:?}",
                v.shape()
            )));
        }
        let lv = v.data()[0];
        if !lv.is_finite() {
            return Err(Error::Contract("grad_check loss is not finite".into()));
        }
        let mut t2 = tape;
        t2.backward(loss)?;
        Ok((t2, vars, lv))
    };

    let base: Vec<Tensor<S>> = leaves.iter().map(|(_, t)| t.clone()).collect();

    // Determinism gate: two forward passes must agree bit-exactly.
    let (_, _, l1) = eval(&mut f, &base)?;
    let (tape, vars, l2) = eval(&mut f, &base)?;
    if l1.to_f64().to_bits() != l2.to_f64().to_bits() {
        return Err(Error::Determinism(format!(
            "two forward passes differ: {l1} vs {l2}"
        )));
    }

    let analytic: Vec<Vec<S>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf grad populated").to_vec())
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heps = S::from_f64(eps);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords: 0,
        worst: (String::new(), 0, 0.0, 0.0),
    };

    for (li, (name, tensor)) in leaves.iter().enumerate() {
        let n = tensor.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(coords_per_leaf.min(n));
        for &i in &idx {
            let mut plus = base.to_vec();
            plus[li].data_mut()[i] += heps;
            let mut minus = base.to_vec();
            minus[li].data_mut()[i] -= heps;

            let fp = forward_only(&mut f, &plus)?;
            let fm = forward_only(&mut f, &minus)?;
            let fd = (fp.to_f64() - fm.to_f64()) / (2.0 * eps);
            let ad = analytic[li][i].to_f64();
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
            report.coords += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (name.clone(), i, ad, fd);
            }
        }
    }
    Ok(report)
}

fn forward_only<S, F>(f: &mut F, tensors: &[Tensor<S>]) -> Result<S>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}
