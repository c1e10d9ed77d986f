//! Four-parameter logistic curve shared by biomarker and dysfunction trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{DktError, Result};

/// Largest magnitude passed to `exp`; keeps evaluation finite during line searches.
const EXP_CLAMP: f64 = 700.0;

/// `a / (1 + exp(-b (s - c))) + d` with `a > 0` and `b > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidParams {
    pub amplitude: f64,
    pub slope: f64,
    pub center: f64,
    pub offset: f64,
}

impl SigmoidParams {
    pub fn new(amplitude: f64, slope: f64, center: f64, offset: f64) -> Result<Self> {
        let p = SigmoidParams {
            amplitude,
            slope,
            center,
            offset,
        };
        p.validate()?;
        Ok(p)
    }

    /// Unit-amplitude, zero-offset curve; the fixed shape used for dysfunction trajectories.
    pub fn unit(slope: f64, center: f64) -> Self {
        SigmoidParams {
            amplitude: 1.0,
            slope,
            center,
            offset: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.amplitude, self.slope, self.center, self.offset]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(DktError::Precondition(format!(
                "sigmoid parameters must be finite: {self:?}"
            )));
        }
        if self.amplitude <= 0.0 || self.slope <= 0.0 {
            return Err(DktError::Precondition(format!(
                "sigmoid amplitude and slope must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.amplitude, self.slope, self.center, self.offset]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        SigmoidParams {
            amplitude: v[0],
            slope: v[1],
            center: v[2],
            offset: v[3],
        }
    }

    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        sigmoid_eval(s, self)
    }

    pub fn lower_asymptote(&self) -> f64 {
        self.offset
    }

    pub fn upper_asymptote(&self) -> f64 {
        self.offset + self.amplitude
    }
}

#[inline]
pub fn sigmoid_eval(s: f64, p: &SigmoidParams) -> f64 {
    let z = (-p.slope * (s - p.center)).clamp(-EXP_CLAMP, EXP_CLAMP);
    p.amplitude / (1.0 + z.exp()) + p.offset
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn value_at_center_is_midpoint() {
        let p = SigmoidParams::new(1.0, 5.0, 0.2, 0.0).unwrap();
        assert_eq!(sigmoid_eval(0.2, &p), 0.5);
    }

    #[test]
    fn saturates_to_upper_asymptote() {
        let p = SigmoidParams::new(1.0, 5.0, 0.2, 0.0).unwrap();
        assert_eq!(sigmoid_eval(1e6, &p), 1.0);
        assert_eq!(sigmoid_eval(f64::MAX, &p), 1.0);
        let low = sigmoid_eval(-1e6, &p);
        assert!(low.is_finite() && low >= 0.0);
    }

    #[test]
    fn value_at_zero() {
        let p = SigmoidParams::new(1.0, 5.0, 0.2, 0.0).unwrap();
        assert!((sigmoid_eval(0.0, &p) - 0.2689414213699951).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_increasing() {
        assert!(SigmoidParams::new(1.0, 0.0, 0.0, 0.0).is_err());
        assert!(SigmoidParams::new(1.0, -1.0, 0.0, 0.0).is_err());
        assert!(SigmoidParams::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(SigmoidParams::new(1.0, 1.0, f64::NAN, 0.0).is_err());
    }

    fn params() -> impl Strategy<Value = SigmoidParams> {
        (0.01f64..5.0, 0.01f64..20.0, -10.0f64..10.0, -2.0f64..2.0)
            .prop_map(|(a, b, c, d)| SigmoidParams::new(a, b, c, d).unwrap())
    }

    proptest! {
        #[test]
        fn monotone(p in params(), s1 in -20.0f64..20.0, gap in 1e-3f64..5.0) {
            let s2 = s1 + gap;
            let (v1, v2) = (p.eval(s1), p.eval(s2));
            // strict unless both sides already rounded onto an asymptote
            prop_assert!(v1 <= v2);
            if v1 > p.offset + 1e-9 * p.amplitude && v2 < p.upper_asymptote() - 1e-9 * p.amplitude {
                prop_assert!(v1 < v2);
            }
        }

        #[test]
        fn bounded_and_finite(p in params(), s in -1e6f64..1e6) {
            let v = p.eval(s);
            prop_assert!(v.is_finite());
            prop_assert!(v >= p.lower_asymptote() && v <= p.upper_asymptote());
        }
    }
}
