use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Which coordinates of each point a gradient check probes.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// At most this many evenly strided coordinates per tensor.
    Strided(usize),
}

/// Central-difference check of a scalar function of one tensor.
///
/// Returns `max |g_ad - g_fd| / max(1, |g_fd|)` over all coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        eps,
        Coords::All,
    )
}

/// Central-difference check of a scalar function of several tensors.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64, coords: Coords) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::contract(format!("grad_check step {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |pts: &[Tensor]| -> Result<(f64, Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::contract("grad_check function must return a scalar"));
        }
        Ok((v.item(), tape, vars, out))
    };

    let (_, tape, vars, out) = eval(points)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.wrt(v).cloned().expect("params always get gradients"))
        .collect();

    let mut worst = 0.0f64;
    let mut work = points.to_vec();
    for (t, point) in points.iter().enumerate() {
        let n = point.len();
        let stride = match coords {
            Coords::All => 1,
            Coords::Strided(k) => n.div_ceil(k.max(1)).max(1),
        };
        for i in (0..n).step_by(stride) {
            let x0 = point.data()[i];
            work[t].data_mut()[i] = x0 + eps;
            let (fp, ..) = eval(&work)?;
            work[t].data_mut()[i] = x0 - eps;
            let (fm, ..) = eval(&work)?;
            work[t].data_mut()[i] = x0;
            let fd = (fp - fm) / (2.0 * eps);
            let ad = analytic[t].data()[i];
            worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}
