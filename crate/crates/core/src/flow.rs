//! Closed-form flow-matching algebra.
//!
//! All chunk operations act elementwise on the flattened frames; the time `t`
//! is shared by the whole chunk.
//!
//! The clean path is `X_t = (1-t) X_0 + t X_1` with constant velocity
//! `U = X_1 - X_0`. A perturbed endpoint `X̃_1` induces the drifted path
//! `X̃_t = (1-t) X_0 + t X̃_1`. The constant velocity that carries `X̃_t` back to
//! `X_1` over `[t, 1]` is `(X_1 - X̃_t) / (1-t) = U + (X_t - X̃_t) / (1-t)`;
//! the training target replaces the singular `1/(1-t)` with the bounded
//! Gaussian weight `λ(t; β)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Chunk;

pub const DEFAULT_BETA: f64 = 16.0;

/// Distance from `t = 1` below which the exact velocity is refused.
pub const SINGULARITY_EPS: f64 = 1e-3;

fn check_unit_interval<T: Scalar>(t: T) -> Result<()> {
    if t >= T::zero() && t <= T::one() {
        Ok(())
    } else {
        Err(Error::Domain(format!("time {t} outside [0, 1]")))
    }
}

fn check_guarded<T: Scalar>(t: T, eps: T) -> Result<()> {
    if !(t >= T::zero()) {
        return Err(Error::Domain(format!("time {t} below 0")));
    }
    if t > T::one() - eps {
        return Err(Error::Singularity {
            t: t.as_f64(),
            eps: eps.as_f64(),
        });
    }
    Ok(())
}

/// `(1-t) x0 + t x1`.
pub fn interpolate<T: Scalar>(x0: &Chunk<T>, x1: &Chunk<T>, t: T) -> Result<Chunk<T>> {
    check_unit_interval(t)?;
    x0.check_shape(x1, "interpolate")?;
    let s = T::one() - t;
    // Endpoint branches keep interpolate(.., 0) == x0 and interpolate(.., 1) == x1 bit-exactly.
    if t.is_zero() {
        return Ok(x0.clone());
    }
    if t == T::one() {
        return Ok(x1.clone());
    }
    x0.zip_map(x1, |a, b| s * a + t * b)
}

/// `x1 - x0`.
pub fn fm_velocity<T: Scalar>(x0: &Chunk<T>, x1: &Chunk<T>) -> Result<Chunk<T>> {
    x1.sub(x0)
}

/// `(x1 - x̃_t) / (1 - t)`, refused within `eps` of `t = 1`.
pub fn exact_restorative_velocity<T: Scalar>(
    x1: &Chunk<T>,
    xt_tilde: &Chunk<T>,
    t: T,
    eps: T,
) -> Result<Chunk<T>> {
    check_guarded(t, eps)?;
    let inv = T::one() / (T::one() - t);
    x1.zip_map(xt_tilde, |a, b| (a - b) * inv)
}

/// Gaussian restoration weight, normalized to vanish at both ends and peak at ½.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestorationSchedule<T> {
    beta: T,
}

impl<T: Scalar> RestorationSchedule<T> {
    pub fn new(beta: T) -> Result<Self> {
        if beta > T::zero() && beta.is_finite() {
            Ok(Self { beta })
        } else {
            Err(Error::Domain(format!("schedule sharpness beta = {beta} must be > 0")))
        }
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    /// `λ(t)`. Evaluated as `expm1(β t(1-t)) / expm1(β/4)`, which is the
    /// defining ratio multiplied through by `exp(β/4)`; the endpoint zeros and the
    /// unit peak come out exact.
    pub fn weight(&self, t: T) -> Result<T> {
        check_unit_interval(t)?;
        let quarter = T::of(0.25);
        Ok((self.beta * t * (T::one() - t)).exp_m1() / (self.beta * quarter).exp_m1())
    }
}

impl<T: Scalar> Default for RestorationSchedule<T> {
    fn default() -> Self {
        Self {
            beta: T::of(DEFAULT_BETA),
        }
    }
}

pub fn lambda_weight<T: Scalar>(t: T, beta: T) -> Result<T> {
    RestorationSchedule::new(beta)?.weight(t)
}

/// Coefficient multiplying `X_t - X̃_t` in the restorative target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RestorationCoefficient<T> {
    /// Bounded Gaussian reschedule.
    Rescheduled(RestorationSchedule<T>),
    /// The singular `1/(1-t)`, guarded by `eps`.
    Exact { eps: T },
}

impl<T: Scalar> RestorationCoefficient<T> {
    pub fn at(&self, t: T) -> Result<T> {
        match self {
            Self::Rescheduled(s) => s.weight(t),
            Self::Exact { eps } => {
                check_guarded(t, *eps)?;
                Ok(T::one() / (T::one() - t))
            }
        }
    }
}

/// `U + c(t) (X_t - X̃_t)` for an arbitrary coefficient rule.
pub fn restorative_target<T: Scalar>(
    x0: &Chunk<T>,
    x1: &Chunk<T>,
    x1_tilde: &Chunk<T>,
    t: T,
    coefficient: &RestorationCoefficient<T>,
) -> Result<Chunk<T>> {
    let c = coefficient.at(t)?;
    let u = fm_velocity(x0, x1)?;
    let xt = interpolate(x0, x1, t)?;
    let xt_tilde = interpolate(x0, x1_tilde, t)?;
    let mut out = u;
    out.axpy(c, &xt.sub(&xt_tilde)?)?;
    Ok(out)
}

/// Rescheduled restorative velocity `U + λ(t; β) (X_t - X̃_t)`.
pub fn restorative_velocity<T: Scalar>(
    x0: &Chunk<T>,
    x1: &Chunk<T>,
    x1_tilde: &Chunk<T>,
    t: T,
    beta: T,
) -> Result<Chunk<T>> {
    let schedule = RestorationSchedule::new(beta)?;
    restorative_target(x0, x1, x1_tilde, t, &RestorationCoefficient::Rescheduled(schedule))
}

/// Max-norm gap between the exact restorative velocity and its
/// "FM velocity plus correction" form. Zero up to rounding for all inputs.
pub fn decomposition_residual<T: Scalar>(
    x0: &Chunk<T>,
    x1: &Chunk<T>,
    x1_tilde: &Chunk<T>,
    t: T,
    eps: T,
) -> Result<T> {
    check_guarded(t, eps)?;
    let xt = interpolate(x0, x1, t)?;
    let xt_tilde = interpolate(x0, x1_tilde, t)?;
    let exact = exact_restorative_velocity(x1, &xt_tilde, t, eps)?;
    let mut split = fm_velocity(x0, x1)?;
    split.axpy(T::one() / (T::one() - t), &xt.sub(&xt_tilde)?)?;
    Ok(exact.sub(&split)?.max_abs())
}

/// Clean flow-matching sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample<T> {
    pub x0: Chunk<T>,
    pub x1: Chunk<T>,
    pub t: T,
    pub xt: Chunk<T>,
    pub u: Chunk<T>,
}

impl<T: Scalar> FlowSample<T> {
    pub fn new(x0: Chunk<T>, x1: Chunk<T>, t: T) -> Result<Self> {
        let xt = interpolate(&x0, &x1, t)?;
        let u = fm_velocity(&x0, &x1)?;
        Ok(Self { x0, x1, t, xt, u })
    }
}

/// Flow sample whose in-chunk state follows a perturbed endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedFlowSample<T> {
    pub base: FlowSample<T>,
    pub x1_tilde: Chunk<T>,
    pub xt_tilde: Chunk<T>,
    pub u_tilde: Chunk<T>,
    pub beta: T,
}

impl<T: Scalar> PerturbedFlowSample<T> {
    pub fn new(base: FlowSample<T>, x1_tilde: Chunk<T>, schedule: RestorationSchedule<T>) -> Result<Self> {
        let xt_tilde = interpolate(&base.x0, &x1_tilde, base.t)?;
        let lambda = schedule.weight(base.t)?;
        let mut u_tilde = base.u.clone();
        u_tilde.axpy(lambda, &base.xt.sub(&xt_tilde)?)?;
        Ok(Self {
            base,
            x1_tilde,
            xt_tilde,
            u_tilde,
            beta: schedule.beta(),
        })
    }
}
