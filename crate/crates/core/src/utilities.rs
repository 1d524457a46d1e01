//! Concave utility families, action boxes, and the aggregate (utility − tax) payoff.
//!
//! A utility is always evaluated on a vector aligned with the owner's `R_i`
//! (ascending user id). All built-in families are sums of one-dimensional
//! terms, one per member of `R_i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{lit, ExtReal, Scalar};

/// Slack on box membership, absorbs rounding from proposal averaging.
pub const BOX_TOLERANCE: f64 = 1e-12;

/// Slack on the concavity midpoint inequality.
pub const CONCAVITY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UtilityError {
    #[error("expected {expected} entries, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("owner {owner} is not a member of its own support")]
    OwnerNotInSupport { owner: usize },
    #[error("invalid {param} for user {owner} at slot {slot}: {value}")]
    InvalidParameter { owner: usize, param: &'static str, slot: usize, value: f64 },
    #[error("invalid action box [{lo}, {hi}]: need lo <= 0 <= hi and lo < hi")]
    InvalidBox { lo: f64, hi: f64 },
    #[error("utility not differentiable at slot {slot} (value {value})")]
    NotDifferentiableAt { slot: usize, value: f64 },
}

/// Feasible interval `[lo, hi]` for a user's own action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionBox<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> ActionBox<T> {
    pub fn new(lo: T, hi: T) -> Result<Self, UtilityError> {
        let ok = lo <= T::zero() && T::zero() <= hi && lo < hi && lo.is_finite() && hi.is_finite();
        if !ok {
            return Err(UtilityError::InvalidBox {
                lo: lo.to_f64().unwrap_or(f64::NAN),
                hi: hi.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, x: T) -> bool {
        let tol = lit::<T>(BOX_TOLERANCE);
        x >= self.lo - tol && x <= self.hi + tol
    }

    pub fn clamp(&self, x: T) -> T {
        x.max(self.lo).min(self.hi)
    }

    pub fn cast<U: Scalar>(&self) -> ActionBox<U> {
        ActionBox { lo: U::from(self.lo).unwrap(), hi: U::from(self.hi).unwrap() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    #[default]
    Power,
    Linear,
    Quadratic,
}

/// Per-slot parameters, aligned with the owner's `R_i`.
#[derive(Debug, Clone, PartialEq)]
pub enum UtilityFamily<T> {
    /// `a_i^α − Σ_{j≠i} a_j^{β_j}` on the nonnegative orthant. The owner's
    /// slot holds α ∈ (0,1); other slots hold β_j > 1.
    Power { exponents: Vec<T> },
    /// `Σ_j c_ij a_j − b_i a_i`.
    Linear { coefficients: Vec<T>, bid: T },
    /// `Σ_j (p_ij a_j − q_ij a_j²)`.
    Quadratic { linear: Vec<T>, curvature: Vec<T> },
}

impl<T> UtilityFamily<T> {
    pub fn kind(&self) -> FamilyKind {
        match self {
            UtilityFamily::Power { .. } => FamilyKind::Power,
            UtilityFamily::Linear { .. } => FamilyKind::Linear,
            UtilityFamily::Quadratic { .. } => FamilyKind::Quadratic,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilitySpec<T> {
    owner: usize,
    support: Vec<usize>,
    own_slot: usize,
    family: UtilityFamily<T>,
}

impl<T: Scalar> UtilitySpec<T> {
    /// Validated constructor. `support` must be the owner's `R_i`, ascending.
    pub fn new(owner: usize, support: Vec<usize>, family: UtilityFamily<T>) -> Result<Self, UtilityError> {
        let spec = Self::new_unchecked(owner, support, family)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Skips parameter-domain checks; dimensions are still enforced.
    pub fn new_unchecked(owner: usize, support: Vec<usize>, family: UtilityFamily<T>) -> Result<Self, UtilityError> {
        let own_slot = support.iter().position(|&k| k == owner).ok_or(UtilityError::OwnerNotInSupport { owner })?;
        let m = support.len();
        let lens: &[usize] = &match &family {
            UtilityFamily::Power { exponents } => vec![exponents.len()],
            UtilityFamily::Linear { coefficients, .. } => vec![coefficients.len()],
            UtilityFamily::Quadratic { linear, curvature } => vec![linear.len(), curvature.len()],
        };
        if let Some(&got) = lens.iter().find(|&&l| l != m) {
            return Err(UtilityError::DimensionMismatch { expected: m, got });
        }
        Ok(Self { owner, support, own_slot, family })
    }

    pub fn power(owner: usize, support: Vec<usize>, exponents: Vec<T>) -> Result<Self, UtilityError> {
        Self::new(owner, support, UtilityFamily::Power { exponents })
    }

    pub fn linear(owner: usize, support: Vec<usize>, coefficients: Vec<T>, bid: T) -> Result<Self, UtilityError> {
        Self::new(owner, support, UtilityFamily::Linear { coefficients, bid })
    }

    pub fn quadratic(
        owner: usize,
        support: Vec<usize>,
        linear: Vec<T>,
        curvature: Vec<T>,
    ) -> Result<Self, UtilityError> {
        Self::new(owner, support, UtilityFamily::Quadratic { linear, curvature })
    }

    fn validate(&self) -> Result<(), UtilityError> {
        let bad = |param: &'static str, slot: usize, value: T| UtilityError::InvalidParameter {
            owner: self.owner,
            param,
            slot,
            value: value.to_f64().unwrap_or(f64::NAN),
        };
        match &self.family {
            UtilityFamily::Power { exponents } => {
                for (slot, &e) in exponents.iter().enumerate() {
                    if slot == self.own_slot {
                        if !(e > T::zero() && e < T::one()) {
                            return Err(bad("own exponent", slot, e));
                        }
                    } else if !(e > T::one() && e.is_finite()) {
                        return Err(bad("neighbor exponent", slot, e));
                    }
                }
            }
            UtilityFamily::Linear { coefficients, bid } => {
                if let Some((slot, &c)) =
                    coefficients.iter().enumerate().find(|(_, c)| !(**c >= T::zero() && c.is_finite()))
                {
                    return Err(bad("coefficient", slot, c));
                }
                if !(*bid >= T::zero() && bid.is_finite()) {
                    return Err(bad("bid", self.own_slot, *bid));
                }
            }
            UtilityFamily::Quadratic { linear, curvature } => {
                if let Some((slot, &p)) = linear.iter().enumerate().find(|(_, p)| !p.is_finite()) {
                    return Err(bad("linear coefficient", slot, p));
                }
                if let Some((slot, &q)) =
                    curvature.iter().enumerate().find(|(_, q)| !(**q >= T::zero() && q.is_finite()))
                {
                    return Err(bad("curvature", slot, q));
                }
            }
        }
        Ok(())
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn own_slot(&self) -> usize {
        self.own_slot
    }

    pub fn family(&self) -> &UtilityFamily<T> {
        &self.family
    }

    pub fn kind(&self) -> FamilyKind {
        self.family.kind()
    }

    /// True when the family is only defined for nonnegative arguments.
    pub fn nonnegative_domain(&self) -> bool {
        matches!(self.family, UtilityFamily::Power { .. })
    }

    fn check_len(&self, a: &[T]) -> Result<(), UtilityError> {
        if a.len() != self.support.len() {
            return Err(UtilityError::DimensionMismatch { expected: self.support.len(), got: a.len() });
        }
        Ok(())
    }

    /// One-dimensional term for slot `s`; `None` outside the family domain.
    fn term(&self, s: usize, x: T) -> Option<T> {
        match &self.family {
            UtilityFamily::Power { exponents } => {
                let x = power_arg(x)?;
                let v = x.powf(exponents[s]);
                Some(if s == self.own_slot { v } else { -v })
            }
            UtilityFamily::Linear { coefficients, bid } => {
                let c = if s == self.own_slot { coefficients[s] - *bid } else { coefficients[s] };
                Some(c * x)
            }
            UtilityFamily::Quadratic { linear, curvature } => Some(linear[s] * x - curvature[s] * x * x),
        }
    }

    /// Derivative of the slot-`s` term.
    pub fn partial(&self, s: usize, x: T) -> Result<T, UtilityError> {
        let nd = || UtilityError::NotDifferentiableAt { slot: s, value: x.to_f64().unwrap_or(f64::NAN) };
        match &self.family {
            UtilityFamily::Power { exponents } => {
                let x = power_arg(x).ok_or_else(nd)?;
                let e = exponents[s];
                if s == self.own_slot {
                    if x <= T::zero() {
                        return Err(nd());
                    }
                    Ok(e * x.powf(e - T::one()))
                } else {
                    Ok(-e * x.powf(e - T::one()))
                }
            }
            UtilityFamily::Linear { coefficients, bid } => {
                Ok(if s == self.own_slot { coefficients[s] - *bid } else { coefficients[s] })
            }
            UtilityFamily::Quadratic { linear, curvature } => Ok(linear[s] - lit::<T>(2.0) * curvature[s] * x),
        }
    }

    /// Utility with no box check; `None` outside the family's domain.
    pub fn raw_value(&self, a: &[T]) -> Result<Option<T>, UtilityError> {
        self.check_len(a)?;
        let mut total = T::zero();
        for (s, &x) in a.iter().enumerate() {
            match self.term(s, x) {
                Some(v) => total = total + v,
                None => return Ok(None),
            }
        }
        Ok(Some(total))
    }

    /// `u_i(a)`, or the sentinel when the own action leaves the box.
    pub fn evaluate(&self, action_box: &ActionBox<T>, a: &[T]) -> Result<ExtReal<T>, UtilityError> {
        self.check_len(a)?;
        if !action_box.contains(a[self.own_slot]) {
            return Ok(ExtReal::NegInfinity);
        }
        Ok(match self.raw_value(a)? {
            Some(v) => ExtReal::Finite(v),
            None => ExtReal::NegInfinity,
        })
    }

    /// `u_i^A(a, t) = u_i(a) − t`, sentinel outside the box.
    pub fn aggregate(&self, action_box: &ActionBox<T>, a: &[T], tax: T) -> Result<ExtReal<T>, UtilityError> {
        Ok(self.evaluate(action_box, a)?.map(|u| u - tax))
    }

    /// Analytic gradient over `R_i`.
    pub fn gradient(&self, a: &[T]) -> Result<Vec<T>, UtilityError> {
        self.check_len(a)?;
        a.iter().enumerate().map(|(s, &x)| self.partial(s, x)).collect()
    }

    /// Sampled midpoint concavity test over the box (and family domain).
    pub fn check_concavity(&self, action_box: &ActionBox<T>, sample_count: usize, seed: u64) -> ConcavityCheck<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = if self.nonnegative_domain() { action_box.lo.max(T::zero()) } else { action_box.lo };
        let (lo, hi) = (lo.to_f64().unwrap(), action_box.hi.to_f64().unwrap());
        let m = self.support.len();
        let half = lit::<T>(0.5);
        let slack = lit::<T>(CONCAVITY_SLACK);
        let mut worst = T::zero();
        let sample = |rng: &mut ChaCha8Rng| -> Vec<T> { (0..m).map(|_| lit(rng.random_range(lo..=hi))).collect() };
        for _ in 0..sample_count {
            let x = sample(&mut rng);
            let y = sample(&mut rng);
            let mid: Vec<T> = x.iter().zip(&y).map(|(&p, &q)| (p + q) * half).collect();
            let (Ok(Some(ux)), Ok(Some(uy)), Ok(Some(um))) =
                (self.raw_value(&x), self.raw_value(&y), self.raw_value(&mid))
            else {
                continue;
            };
            let violation = (ux + uy) * half - um;
            if violation > worst {
                worst = violation;
            }
        }
        ConcavityCheck { concave: worst <= slack, worst_violation: worst }
    }

    pub fn cast<U: Scalar>(&self) -> UtilitySpec<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::from(x).unwrap()).collect::<Vec<U>>();
        let family = match &self.family {
            UtilityFamily::Power { exponents } => UtilityFamily::Power { exponents: conv(exponents) },
            UtilityFamily::Linear { coefficients, bid } => {
                UtilityFamily::Linear { coefficients: conv(coefficients), bid: U::from(*bid).unwrap() }
            }
            UtilityFamily::Quadratic { linear, curvature } => {
                UtilityFamily::Quadratic { linear: conv(linear), curvature: conv(curvature) }
            }
        };
        UtilitySpec { owner: self.owner, support: self.support.clone(), own_slot: self.own_slot, family }
    }
}

fn power_arg<T: Scalar>(x: T) -> Option<T> {
    if x >= T::zero() {
        Some(x)
    } else if x >= -lit::<T>(BOX_TOLERANCE) {
        Some(T::zero())
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcavityCheck<T> {
    pub concave: bool,
    /// Largest `(u(x)+u(y))/2 − u((x+y)/2)` seen, floored at zero.
    pub worst_violation: T,
}
