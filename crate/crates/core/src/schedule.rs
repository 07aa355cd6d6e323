use crate::error::{Error, Result};

/// Polynomial learning-rate decay: `base_lr * (1 - iter/max_iter)^power`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolySchedule {
    pub base_lr: f64,
    pub max_iter: usize,
    pub power: f64,
}

impl PolySchedule {
    pub fn new(base_lr: f64, max_iter: usize) -> Result<Self> {
        let s = PolySchedule {
            base_lr,
            max_iter,
            power: 0.9,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("poly schedule: base_lr must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("poly schedule: max_iter must be positive".into()));
        }
        if !self.power.is_finite() {
            return Err(Error::Config("poly schedule: power must be finite".into()));
        }
        Ok(())
    }
}

pub fn poly_lr(iter: usize, schedule: &PolySchedule) -> Result<f64> {
    if iter > schedule.max_iter {
        return Err(Error::InvalidArgument(format!(
            "poly_lr: iter {} exceeds max_iter {}",
            iter, schedule.max_iter
        )));
    }
    let frac = 1.0 - iter as f64 / schedule.max_iter as f64;
    Ok(schedule.base_lr * frac.powf(schedule.power))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        let s = PolySchedule::new(0.01, 1000).unwrap();
        assert_eq!(poly_lr(0, &s).unwrap(), 0.01);
        assert_eq!(poly_lr(1000, &s).unwrap(), 0.0);
    }

    #[test]
    fn midpoint_follows_the_power_law() {
        let s = PolySchedule::new(0.01, 1000).unwrap();
        let want = 0.01 * 0.5f64.powf(0.9);
        assert!((poly_lr(500, &s).unwrap() - want).abs() <= 1e-12);
    }

    #[test]
    fn strictly_decreasing_for_positive_power() {
        let s = PolySchedule::new(0.25, 777).unwrap();
        let mut prev = f64::INFINITY;
        for it in 0..=777 {
            let lr = poly_lr(it, &s).unwrap();
            assert!(lr < prev, "not decreasing at {it}");
            prev = lr;
        }
    }

    #[test]
    fn iter_past_the_end_is_an_error() {
        let s = PolySchedule::new(0.01, 10).unwrap();
        assert!(poly_lr(11, &s).is_err());
    }
}
