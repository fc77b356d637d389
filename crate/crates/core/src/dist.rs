//! Reference distributions used for tests and intervals.

use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor, Normal, StudentsT};

/// Reference distribution of a Wald-type statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reference {
    /// Standard normal.
    Z,
    /// Student t with the given (possibly fractional) degrees of freedom.
    T(f64),
}

impl Reference {
    pub fn df(&self) -> Option<f64> {
        match self {
            Reference::Z => None,
            Reference::T(df) => Some(*df),
        }
    }

    /// Two-sided p-value for an observed statistic.
    pub fn two_sided_p(&self, stat: f64) -> f64 {
        if stat.is_nan() {
            return f64::NAN;
        }
        let p = match self {
            Reference::Z => 2.0 * norm_sf(stat.abs()),
            Reference::T(df) => 2.0 * t_sf(stat.abs(), *df),
        };
        p.min(1.0)
    }

    /// Critical value `q` with P(|X| <= q) = level.
    pub fn critical(&self, level: f64) -> f64 {
        let p = 1.0 - (1.0 - level) / 2.0;
        match self {
            Reference::Z => norm_quantile(p),
            Reference::T(df) => t_quantile(p, *df),
        }
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid normal")
}

pub fn norm_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub fn norm_sf(x: f64) -> f64 {
    std_normal().sf(x)
}

pub fn norm_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

pub fn t_sf(x: f64, df: f64) -> f64 {
    if !df.is_finite() {
        return norm_sf(x);
    }
    StudentsT::new(0.0, 1.0, df).expect("df > 0").sf(x)
}

pub fn t_quantile(p: f64, df: f64) -> f64 {
    if !df.is_finite() {
        return norm_quantile(p);
    }
    StudentsT::new(0.0, 1.0, df).expect("df > 0").inverse_cdf(p)
}

pub fn chisq_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(df).expect("df > 0").sf(x)
}

pub fn chisq_quantile(p: f64, df: f64) -> f64 {
    ChiSquared::new(df).expect("df > 0").inverse_cdf(p)
}

pub fn f_sf(x: f64, df1: f64, df2: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    FisherSnedecor::new(df1, df2).expect("df > 0").sf(x)
}
