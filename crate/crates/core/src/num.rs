//! Scalar abstractions shared by the scoring and selection code.
//!
//! [`Scalar`] is enough for count-based probabilities and products, so it is
//! implemented by floats and by exact rationals alike. [`Real`] adds the
//! transcendental operations needed for log-probabilities.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

pub trait Scalar: Num + Clone + PartialOrd + FromPrimitive + Debug + Send + Sync + 'static {
    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count representable in scalar type")
    }

    /// Converts a configuration constant. Panics on values the type cannot hold.
    fn from_config(value: f64) -> Self {
        Self::from_f64(value).expect("config constant representable in scalar type")
    }
}

impl<T> Scalar for T where T: Num + Clone + PartialOrd + FromPrimitive + Debug + Send + Sync + 'static {}

pub trait Real: Scalar + Float + ToPrimitive {
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Real for T where T: Scalar + Float + ToPrimitive {}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean<S: Scalar>(values: &[S]) -> Option<S> {
    if values.is_empty() {
        return None;
    }
    let sum = values.iter().cloned().fold(S::zero(), |acc, v| acc + v);
    Some(sum / S::from_count(values.len() as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::BigRational;

    #[test]
    fn mean_exact_in_rationals() {
        let vals: Vec<BigRational> = [1u64, 2, 4].iter().map(|&v| BigRational::from_count(v)).collect();
        let m = mean(&vals).unwrap();
        assert_eq!(m, BigRational::new(7.into(), 3.into()));
        assert!(mean::<f64>(&[]).is_none());
    }
}
