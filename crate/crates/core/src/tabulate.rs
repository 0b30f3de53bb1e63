//! Uniform-grid cubic Hermite tables for smooth scalar functions whose
//! direct evaluation involves quadrature (mollified drift, mollified noise
//! shape). Used on the hot path of the regularised integrator.

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct HermiteTable {
    lo: f64,
    step: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl HermiteTable {
    /// Tabulate `f` with derivative `df` on `[lo, hi]` using at least
    /// `intervals` equal sub-intervals.
    pub fn build<F, D>(lo: f64, hi: f64, intervals: usize, f: F, df: D) -> Result<Self>
    where
        F: Fn(f64) -> Result<f64>,
        D: Fn(f64) -> Result<f64>,
    {
        if !(hi > lo) || intervals == 0 {
            return Err(Error::Argument(format!(
                "table range [{lo}, {hi}] with {intervals} intervals"
            )));
        }
        let step = (hi - lo) / intervals as f64;
        let mut values = Vec::with_capacity(intervals + 1);
        let mut slopes = Vec::with_capacity(intervals + 1);
        for i in 0..=intervals {
            let x = lo + step * i as f64;
            values.push(f(x)?);
            slopes.push(df(x)?);
        }
        Ok(Self {
            lo,
            step,
            values,
            slopes,
        })
    }

    pub fn intervals(&self) -> usize {
        self.values.len() - 1
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.step * (self.values.len() - 1) as f64
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi()
    }

    /// Interpolated value, or `None` outside the tabulated range.
    #[inline]
    pub fn get(&self, x: f64) -> Option<f64> {
        let pos = (x - self.lo) / self.step;
        if !(pos >= 0.0) {
            return None;
        }
        let last = self.values.len() - 1;
        let mut i = pos as usize;
        if i >= last {
            if pos > last as f64 {
                return None;
            }
            i = last - 1;
        }
        let t = pos - i as f64;
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.slopes[i] * self.step, self.slopes[i + 1] * self.step);
        let t2 = t * t;
        let t3 = t2 * t;
        Some(
            (2.0 * t3 - 3.0 * t2 + 1.0) * y0
                + (t3 - 2.0 * t2 + t) * m0
                + (-2.0 * t3 + 3.0 * t2) * y1
                + (t3 - t2) * m1,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_cubics_exactly() {
        let t = HermiteTable::build(
            -1.0,
            2.0,
            7,
            |x| Ok(x * x * x - x),
            |x| Ok(3.0 * x * x - 1.0),
        )
        .unwrap();
        for &x in &[-1.0, -0.37, 0.0, 0.5, 1.99, 2.0] {
            let v = t.get(x).unwrap();
            assert!((v - (x * x * x - x)).abs() < 1e-12, "{x}: {v}");
        }
        assert!(t.get(2.0001).is_none());
        assert!(t.get(-1.5).is_none());
        assert!(t.get(f64::NAN).is_none());
    }

    #[test]
    fn fourth_order_accuracy_on_sine() {
        let err = |n: usize| {
            let t = HermiteTable::build(0.0, 3.0, n, |x| Ok(x.sin()), |x| Ok(x.cos())).unwrap();
            (0..1000)
                .map(|i| {
                    let x = 3.0 * i as f64 / 999.0;
                    (t.get(x).unwrap() - x.sin()).abs()
                })
                .fold(0.0, f64::max)
        };
        let ratio = err(20) / err(40);
        assert!(ratio > 12.0, "ratio {ratio}");
    }
}
