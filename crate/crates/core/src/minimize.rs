//! Golden-section minimization of a convex function over a constraint interval.

use crate::error::{Error, Result};
use crate::market::ConstraintSet;
use crate::scalar::{lit, Scalar};

/// Minimizes a convex `objective` over `set`.
///
/// The bracket shrinks until its width drops below `tol`; the returned point is
/// the best of the final midpoint, the endpoints, the projected `seed` and zero.
pub fn minimize_over_c<T, F>(mut objective: F, set: &ConstraintSet<T>, tol: T, seed: Option<T>) -> Result<(T, T)>
where
    T: Scalar,
    F: FnMut(T) -> T,
{
    if !(tol > T::zero()) {
        return Err(Error::param("minimization tolerance must be positive"));
    }
    let (lo, hi) = (set.lo(), set.hi());
    if lo == hi {
        return Ok((lo, objective(lo)));
    }
    let inv_phi: T = lit(0.618_033_988_749_894_9);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = objective(c);
    let mut fd = objective(d);
    let floor = T::epsilon() * lit(4.0) * (T::one() + lo.abs().max(hi.abs()));
    while b - a > tol && b - a > floor {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
        }
    }
    let mid = (a + b) / lit(2.0);
    let mut best = (mid, objective(mid));
    let mut consider = |p: T, best: &mut (T, T)| {
        let v = objective(p);
        if v < best.1 {
            *best = (p, v);
        }
    };
    consider(lo, &mut best);
    consider(hi, &mut best);
    if let Some(s) = seed {
        consider(set.project(s), &mut best);
    }
    if set.contains(T::zero()) {
        consider(T::zero(), &mut best);
    }
    Ok(best)
}
