//! Finite atomic Lévy measures, their truncations and the exponential jump
//! functional `|u|_α = Σ_j w_j g_α(u_j)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::scalar::{lit, Scalar};

/// One atom of a jump measure: jump size `x` carrying intensity `w` per unit time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom<T> {
    pub x: T,
    pub w: T,
}

/// Finite atomic approximation of a Lévy measure.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpGrid<T> {
    atoms: Vec<Atom<T>>,
}

#[derive(Serialize, Deserialize)]
struct AtomRecord {
    x: f64,
    w: f64,
}

impl<T: Scalar> JumpGrid<T> {
    /// Builds a grid, rejecting atoms at the origin, negative or non-finite weights.
    pub fn new(atoms: Vec<Atom<T>>) -> Result<Self> {
        for (j, a) in atoms.iter().enumerate() {
            if a.x == T::zero() || !a.x.is_finite() {
                return Err(Error::param(format!("atom {j}: jump size must be finite and nonzero")));
            }
            if !(a.w >= T::zero()) || !a.w.is_finite() {
                return Err(Error::param(format!("atom {j}: weight must be finite and nonnegative")));
            }
        }
        Ok(Self { atoms })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|&(x, w)| Atom { x: lit(x), w: lit(w) }).collect())
    }

    pub fn empty() -> Self {
        Self { atoms: Vec::new() }
    }

    pub fn atoms(&self) -> &[Atom<T>] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn weights(&self) -> impl Iterator<Item = T> + '_ {
        self.atoms.iter().map(|a| a.w)
    }

    pub fn total_mass(&self) -> T {
        self.weights().sum()
    }

    /// `Σ w_j (1 ∧ |x_j|)²`, finite for every grid.
    pub fn small_jump_moment(&self) -> T {
        self.atoms
            .iter()
            .map(|a| {
                let s = a.x.abs().min(T::one());
                a.w * s * s
            })
            .sum()
    }

    /// Smallest `m` for which truncation at level `m` keeps every atom.
    pub fn exhausting_level(&self) -> u32 {
        self.atoms
            .iter()
            .map(|a| (T::one() / a.x.abs()).ceil().to_u32().unwrap_or(u32::MAX).max(1))
            .max()
            .unwrap_or(1)
    }

    /// Whether atom `j` survives the truncation `1_{|x| ≥ 1/m}`.
    pub fn kept_at(&self, j: usize, m: u32) -> bool {
        self.atoms[j].x.abs() * lit::<T>(m as f64) >= T::one()
    }

    /// Parses a JSON array of `{"x": .., "w": ..}` records.
    pub fn from_json(text: &str) -> Result<Self> {
        let records: Vec<AtomRecord> =
            serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        Self::from_pairs(&records.iter().map(|r| (r.x, r.w)).collect::<Vec<_>>())
    }

    pub fn to_json(&self) -> String {
        let records: Vec<AtomRecord> = self
            .atoms
            .iter()
            .map(|a| AtomRecord { x: a.x.to_f64().unwrap_or(f64::NAN), w: a.w.to_f64().unwrap_or(f64::NAN) })
            .collect();
        serde_json::to_string(&records).expect("atom records serialize")
    }
}

/// Function on the atoms of a [`JumpGrid`], stored index-for-index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UFunction<T>(pub Vec<T>);

impl<T: Scalar> UFunction<T> {
    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    /// Plain maximum of `|u_j|` over all stored values.
    pub fn sup_abs(&self) -> T {
        self.0.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn add(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| *a + *b).collect())
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| *a - *b).collect())
    }

    pub fn scale(&self, k: T) -> Self {
        Self(self.0.iter().map(|a| *a * k).collect())
    }
}

impl<T> From<Vec<T>> for UFunction<T> {
    fn from(v: Vec<T>) -> Self {
        Self(v)
    }
}

fn check_alpha<T: Scalar>(alpha: T) -> Result<()> {
    if alpha > T::zero() && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::param("risk aversion alpha must be positive"))
    }
}

pub(crate) fn check_exponent<T: Scalar>(arg: T) -> Result<()> {
    if arg > T::exp_guard() || arg.is_nan() {
        Err(Error::param(format!("exponent {arg} exceeds the overflow guard")))
    } else {
        Ok(())
    }
}

/// `(e^x − 1 − x) / x²`, continuous at zero.
pub(crate) fn quad_rel<T: Scalar>(x: T) -> T {
    if x.abs() < lit(1e-3) {
        lit::<T>(0.5) + x / lit(6.0) + x * x / lit(24.0) + x * x * x / lit(120.0)
    } else {
        (x.exp_m1() - x) / (x * x)
    }
}

/// Unchecked `g_α(y)`; callers guarantee `α > 0` and `αy` below the guard.
#[inline]
pub(crate) fn g_raw<T: Scalar>(alpha: T, y: T) -> T {
    let x = alpha * y;
    x * x * quad_rel(x) / alpha
}

/// `g_α(y) = (e^{αy} − αy − 1)/α`.
pub fn g_alpha<T: Scalar>(alpha: T, y: T) -> Result<T> {
    check_alpha(alpha)?;
    check_exponent(alpha * y)?;
    Ok(g_raw(alpha, y))
}

/// `g_α'(y) = e^{αy} − 1`.
pub fn g_alpha_prime<T: Scalar>(alpha: T, y: T) -> Result<T> {
    check_alpha(alpha)?;
    check_exponent(alpha * y)?;
    Ok((alpha * y).exp_m1())
}

/// `|u|_α = Σ_j w_j g_α(u_j)`.
pub fn u_alpha_norm<T: Scalar>(alpha: T, u: &UFunction<T>, grid: &JumpGrid<T>) -> Result<T> {
    check_alpha(alpha)?;
    check_len(grid.len(), u.len())?;
    let mut acc = T::zero();
    for (a, &v) in grid.atoms().iter().zip(u.values()) {
        check_exponent(alpha * v)?;
        acc = acc + a.w * g_raw(alpha, v);
    }
    Ok(acc)
}

/// Keeps the atoms with `|x| ≥ 1/m`.
pub fn truncate<T: Scalar>(grid: &JumpGrid<T>, m: u32) -> Result<JumpGrid<T>> {
    if m == 0 {
        return Err(Error::param("truncation level must be at least 1"));
    }
    let atoms = (0..grid.len()).filter(|&j| grid.kept_at(j, m)).map(|j| grid.atoms()[j]).collect();
    Ok(JumpGrid { atoms })
}

/// `Σ_j w_j u_j²`.
pub fn l2_norm_sq<T: Scalar>(u: &UFunction<T>, grid: &JumpGrid<T>) -> Result<T> {
    check_len(grid.len(), u.len())?;
    Ok(grid.atoms().iter().zip(u.values()).map(|(a, &v)| a.w * v * v).sum())
}

/// `max |u_j|` over charged atoms (`w_j > 0`).
pub fn linf_norm<T: Scalar>(u: &UFunction<T>, grid: &JumpGrid<T>) -> Result<T> {
    check_len(grid.len(), u.len())?;
    Ok(grid
        .atoms()
        .iter()
        .zip(u.values())
        .filter(|(a, _)| a.w > T::zero())
        .fold(T::zero(), |m, (_, &v)| m.max(v.abs())))
}

/// Constant `C(α, K)` with `C⁻¹‖u‖²_{L²(n)} ≤ |u|_α ≤ C‖u‖²_{L²(n)}` whenever `|u| ≤ K`.
///
/// Both ratios `g_α(y)/y²` are monotone in `y`, so the extremes sit at `y = ±K`.
pub fn equivalence_constant<T: Scalar>(alpha: T, k: T) -> Result<T> {
    check_alpha(alpha)?;
    if !(k >= T::zero()) {
        return Err(Error::param("equivalence bound K must be nonnegative"));
    }
    let x = alpha * k;
    check_exponent(x)?;
    let upper = alpha * quad_rel(x);
    let lower = alpha * quad_rel(-x);
    Ok(upper.max(T::one() / lower))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const E: f64 = std::f64::consts::E;

    fn grid3() -> JumpGrid<f64> {
        JumpGrid::from_pairs(&[(0.05, 1.0), (0.5, 2.0), (2.0, 0.5)]).unwrap()
    }

    #[test]
    fn g_alpha_values() {
        assert_eq!(g_alpha(1.0, 0.0).unwrap(), 0.0);
        assert!((g_alpha(1.0, 1.0).unwrap() - (E - 2.0)).abs() < 1e-15);
        assert!((g_alpha(2.0, -1.0).unwrap() - ((-2.0f64).exp() + 1.0) / 2.0).abs() < 1e-15);
        assert!(g_alpha(0.0, 1.0).is_err());
        assert!(g_alpha(-1.0, 1.0).is_err());
        assert!(g_alpha(1.0, 701.0).is_err());
    }

    #[test]
    fn g_alpha_small_argument_matches_series() {
        for &y in &[1e-9f64, -3e-7, 2e-4, -9e-4] {
            let series = y * y / 2.0 + y.powi(3) / 6.0 + y.powi(4) / 24.0 + y.powi(5) / 120.0;
            assert!((g_alpha(1.0, y).unwrap() - series).abs() <= 1e-12 * series.abs());
        }
    }

    #[test]
    fn g_alpha_prime_values_and_finite_differences() {
        assert_eq!(g_alpha_prime(1.0, 0.0).unwrap(), 0.0);
        assert!((g_alpha_prime(1.0, 1.0).unwrap() - (E - 1.0)).abs() < 1e-15);
        let h = 1e-5;
        let mut y: f64 = -3.0;
        while y <= 3.0 {
            let fd = (g_alpha(1.0, y + h).unwrap() - g_alpha(1.0, y - h).unwrap()) / (2.0 * h);
            assert!((g_alpha_prime(1.0, y).unwrap() - fd).abs() <= 1e-6, "y = {y}");
            y += 0.125;
        }
    }

    #[test]
    fn u_alpha_norm_values() {
        let g = grid3();
        assert_eq!(u_alpha_norm(1.0, &UFunction::zeros(3), &g).unwrap(), 0.0);
        let single = JumpGrid::from_pairs(&[(1.0, 0.5)]).unwrap();
        let v: f64 = u_alpha_norm(1.0, &UFunction(vec![1.0]), &single).unwrap();
        // Atomic quadrature of ∫ g_1(u) n(dx): 0.5 · (e − 2).
        assert!((v - 0.3591409142295226).abs() < 1e-15);
        assert!(matches!(
            u_alpha_norm(1.0, &UFunction(vec![1.0, 2.0]), &g),
            Err(Error::Shape { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn truncation_thresholds() {
        let g = grid3();
        let xs = |m| truncate(&g, m).unwrap().atoms().iter().map(|a| a.x).collect::<Vec<_>>();
        assert_eq!(xs(1), vec![2.0]);
        assert_eq!(xs(10), vec![0.5, 2.0]);
        assert_eq!(xs(20), vec![0.05, 0.5, 2.0]);
        assert_eq!(g.exhausting_level(), 20);
        assert_eq!(truncate(&g, 20).unwrap(), g);
        assert!(truncate(&g, 0).is_err());
        assert!(truncate(&JumpGrid::<f64>::empty(), 3).unwrap().is_empty());
    }

    #[test]
    fn weighted_norms() {
        let g = grid3();
        let z = UFunction::zeros(3);
        assert_eq!((l2_norm_sq(&z, &g).unwrap(), linf_norm(&z, &g).unwrap()), (0.0, 0.0));
        let one = JumpGrid::from_pairs(&[(1.0, 2.0)]).unwrap();
        let u = UFunction(vec![3.0]);
        assert_eq!((l2_norm_sq(&u, &one).unwrap(), linf_norm(&u, &one).unwrap()), (18.0, 3.0));
        let two = JumpGrid::from_pairs(&[(1.0, 1.0), (-1.0, 1.0)]).unwrap();
        let u = UFunction(vec![1.0, -2.0]);
        assert_eq!((l2_norm_sq(&u, &two).unwrap(), linf_norm(&u, &two).unwrap()), (5.0, 2.0));
        // Uncharged atoms do not count towards the sup norm.
        let ghost = JumpGrid::from_pairs(&[(1.0, 0.0), (2.0, 1.0)]).unwrap();
        assert_eq!(linf_norm(&UFunction(vec![9.0, 1.0]), &ghost).unwrap(), 1.0);
    }

    #[test]
    fn grid_validation_and_json() {
        assert!(JumpGrid::<f64>::from_pairs(&[(0.0, 1.0)]).is_err());
        assert!(JumpGrid::<f64>::from_pairs(&[(1.0, -1.0)]).is_err());
        assert!(JumpGrid::<f64>::from_json(r#"[{"x": 0, "w": 1}]"#).is_err());
        assert!(JumpGrid::<f64>::from_json(r#"[{"x": 1, "w": -0.5}]"#).is_err());
        let g = JumpGrid::<f64>::from_json(r#"[{"x": -0.3, "w": 1.5}, {"x": 1, "w": 0.25}]"#).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(JumpGrid::<f64>::from_json(&g.to_json()).unwrap(), g);
        assert!((g.total_mass() - 1.75).abs() < 1e-15);
        assert!((g.small_jump_moment() - (1.5 * 0.09 + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn equivalence_constant_small_k_limit() {
        let c: f64 = equivalence_constant(1.0, 0.0).unwrap();
        assert!((c - 2.0).abs() < 1e-12);
        let c: f64 = equivalence_constant(4.0, 0.0).unwrap();
        assert!((c - 2.0).abs() < 1e-12);
    }

    #[test]
    fn generic_over_f32() {
        let v: f32 = g_alpha(1.0f32, 1.0).unwrap();
        assert!((v - (std::f32::consts::E - 2.0)).abs() < 1e-6);
        assert!(g_alpha(1.0f32, 90.0).is_err());
    }

    fn arb_u(n: usize, k: f64) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-k..=k, n)
    }

    proptest! {
        #[test]
        fn g_alpha_convex(y1 in -4.0..4.0f64, y2 in -4.0..4.0f64, l in 0.0..=1.0f64, alpha in 0.1..3.0f64) {
            let mid = g_alpha(alpha, l * y1 + (1.0 - l) * y2).unwrap();
            let chord = l * g_alpha(alpha, y1).unwrap() + (1.0 - l) * g_alpha(alpha, y2).unwrap();
            prop_assert!(mid <= chord + 1e-12);
        }

        #[test]
        fn scaling_law(u in arb_u(3, 1.5), alpha in 0.1..2.0f64) {
            let g = grid3();
            let u = UFunction(u);
            let lhs = u_alpha_norm(3.0 * alpha, &u, &g).unwrap();
            let rhs = u_alpha_norm(alpha, &u.scale(3.0), &g).unwrap() / 3.0;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn equivalence_sandwich(u in arb_u(3, 1.0), kidx in 0usize..3, alpha in 0.2..3.0f64) {
            let k = [0.5, 1.0, 2.0][kidx];
            let g = grid3();
            let u = UFunction(u).scale(k);
            let c = equivalence_constant(alpha, k).unwrap();
            let l2 = l2_norm_sq(&u, &g).unwrap();
            let ua = u_alpha_norm(alpha, &u, &g).unwrap();
            prop_assert!(l2 / c <= ua * (1.0 + 1e-12) + 1e-300);
            prop_assert!(ua <= c * l2 * (1.0 + 1e-12) + 1e-300);
        }

        #[test]
        fn truncation_idempotent_monotone_additive(m in 1u32..30, u in arb_u(3, 2.0)) {
            let g = grid3();
            let t = truncate(&g, m).unwrap();
            prop_assert_eq!(truncate(&t, m).unwrap(), t.clone());
            let next = truncate(&g, m + 1).unwrap();
            prop_assert!(t.atoms().iter().all(|a| next.atoms().contains(a)));
            let kept: Vec<f64> = (0..3).filter(|&j| g.kept_at(j, m)).map(|j| u[j]).collect();
            let dropped_atoms: Vec<Atom<f64>> = (0..3).filter(|&j| !g.kept_at(j, m)).map(|j| g.atoms()[j]).collect();
            let dropped: Vec<f64> = (0..3).filter(|&j| !g.kept_at(j, m)).map(|j| u[j]).collect();
            let full = u_alpha_norm(1.0, &UFunction(u.clone()), &g).unwrap();
            let part = u_alpha_norm(1.0, &UFunction(kept), &t).unwrap()
                + u_alpha_norm(1.0, &UFunction(dropped), &JumpGrid::new(dropped_atoms).unwrap()).unwrap();
            prop_assert!((full - part).abs() <= 1e-12 * (1.0 + full));
        }
    }
}
