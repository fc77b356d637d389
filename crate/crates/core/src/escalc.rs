//! Effect sizes and sampling variances from 2×2 tables, two-group summaries
//! and correlations.

use serde::{Deserialize, Serialize};

use crate::error::{MetaError, Result};
use crate::ingest::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoByTwo {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl TwoByTwo {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        TwoByTwo { a, b, c, d }
    }

    pub fn n1(&self) -> f64 {
        self.a + self.b
    }

    pub fn n2(&self) -> f64 {
        self.c + self.d
    }

    pub fn n(&self) -> f64 {
        self.n1() + self.n2()
    }

    pub fn swapped(&self) -> Self {
        TwoByTwo {
            a: self.c,
            b: self.d,
            c: self.a,
            d: self.b,
        }
    }

    pub fn has_zero(&self) -> bool {
        [self.a, self.b, self.c, self.d].contains(&0.0)
    }

    /// No events in either group, or only events.
    pub fn is_double_zero(&self) -> bool {
        (self.a == 0.0 && self.c == 0.0) || (self.b == 0.0 && self.d == 0.0)
    }

    fn validate(&self) -> Result<()> {
        let cells = [self.a, self.b, self.c, self.d];
        if cells.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(MetaError::Domain(
                "2x2 cell counts must be finite and nonnegative".into(),
            ));
        }
        if self.n1() < 1.0 || self.n2() < 1.0 {
            return Err(MetaError::Domain(
                "each group needs at least one participant".into(),
            ));
        }
        Ok(())
    }

    fn corrected(&self) -> (TwoByTwo, bool) {
        if self.has_zero() {
            (
                TwoByTwo::new(self.a + 0.5, self.b + 0.5, self.c + 0.5, self.d + 0.5),
                true,
            )
        } else {
            (*self, false)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Measure2x2 {
    #[serde(rename = "logRR", alias = "RR")]
    LogRR,
    #[serde(rename = "logOR", alias = "OR")]
    LogOR,
    #[serde(rename = "RD")]
    RD,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousGroups {
    pub m1: f64,
    pub m2: f64,
    pub sd1: f64,
    pub sd2: f64,
    pub n1: f64,
    pub n2: f64,
}

impl ContinuousGroups {
    pub fn swapped(&self) -> Self {
        ContinuousGroups {
            m1: self.m2,
            m2: self.m1,
            sd1: self.sd2,
            sd2: self.sd1,
            n1: self.n2,
            n2: self.n1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectSizeRecord {
    pub yi: f64,
    pub vi: f64,
    pub sei: f64,
    /// True when 0.5 was added to the cells of a 2×2 table.
    pub corrected: bool,
}

impl EffectSizeRecord {
    fn new(yi: f64, vi: f64, corrected: bool) -> Result<Self> {
        if !yi.is_finite() || !(vi > 0.0) || !vi.is_finite() {
            return Err(MetaError::NotEstimable(format!(
                "effect size {yi} with variance {vi}"
            )));
        }
        Ok(EffectSizeRecord {
            yi,
            vi,
            sei: vi.sqrt(),
            corrected,
        })
    }
}

/// Log risk ratio, log odds ratio or risk difference. Tables with a zero cell
/// get 0.5 added to every cell; double-zero tables are not estimable on the
/// ratio scales.
pub fn compute_2x2(t: &TwoByTwo, measure: Measure2x2) -> Result<EffectSizeRecord> {
    t.validate()?;
    if measure != Measure2x2::RD && t.is_double_zero() {
        return Err(MetaError::NotEstimable("double-zero table".into()));
    }
    let (u, corrected) = t.corrected();
    let (n1, n2) = (u.n1(), u.n2());
    let (yi, vi) = match measure {
        Measure2x2::LogRR => (
            (u.a / n1).ln() - (u.c / n2).ln(),
            (1.0 / u.a - 1.0 / n1) + (1.0 / u.c - 1.0 / n2),
        ),
        Measure2x2::LogOR => (
            (u.a.ln() + u.d.ln()) - (u.b.ln() + u.c.ln()),
            (1.0 / u.a + 1.0 / u.b) + (1.0 / u.c + 1.0 / u.d),
        ),
        Measure2x2::RD => (
            u.a / n1 - u.c / n2,
            u.a * u.b / n1.powi(3) + u.c * u.d / n2.powi(3),
        ),
    };
    EffectSizeRecord::new(yi, vi, corrected)
}

/// Small-sample correction 1 − 3/(4m − 1) with m = n1 + n2 − 2.
pub fn smd_correction(n1: f64, n2: f64) -> f64 {
    1.0 - 3.0 / (4.0 * (n1 + n2 - 2.0) - 1.0)
}

/// Bias-corrected standardized mean difference (Hedges' g).
pub fn compute_smd(g: &ContinuousGroups) -> Result<EffectSizeRecord> {
    smd_with_correction(g, smd_correction(g.n1, g.n2))
}

/// SMD with an explicit multiplicative correction factor `j`.
pub fn smd_with_correction(g: &ContinuousGroups, j: f64) -> Result<EffectSizeRecord> {
    if g.n1 < 2.0 || g.n2 < 2.0 {
        return Err(MetaError::Domain("each group needs n >= 2".into()));
    }
    if g.sd1 < 0.0 || g.sd2 < 0.0 || !g.sd1.is_finite() || !g.sd2.is_finite() {
        return Err(MetaError::Domain(
            "standard deviations must be nonnegative".into(),
        ));
    }
    let sp = (((g.n1 - 1.0) * g.sd1 * g.sd1 + (g.n2 - 1.0) * g.sd2 * g.sd2) / (g.n1 + g.n2 - 2.0))
        .sqrt();
    if sp == 0.0 {
        return Err(MetaError::NotEstimable(
            "pooled standard deviation is zero".into(),
        ));
    }
    let yi = j * ((g.m1 - g.m2) / sp);
    let vi = (1.0 / g.n1 + 1.0 / g.n2) + yi * yi / (2.0 * (g.n1 + g.n2));
    EffectSizeRecord::new(yi, vi, false)
}

/// Fisher's r-to-z transform.
pub fn compute_fisher_z(r: f64, n: f64) -> Result<EffectSizeRecord> {
    if !(r.abs() < 1.0) {
        return Err(MetaError::Domain(format!(
            "correlation {r} outside (-1, 1)"
        )));
    }
    if n < 4.0 {
        return Err(MetaError::Domain("Fisher z needs n >= 4".into()));
    }
    let yi = r.signum() * r.abs().atanh();
    EffectSizeRecord::new(if r == 0.0 { 0.0 } else { yi }, 1.0 / (n - 3.0), false)
}

/// Which raw columns feed an effect-size computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EsInput {
    TwoByTwo {
        measure: Measure2x2,
        a: String,
        b: String,
        c: String,
        d: String,
    },
    Smd {
        m1: String,
        m2: String,
        sd1: String,
        sd2: String,
        n1: String,
        n2: String,
    },
    FisherZ {
        r: String,
        n: String,
    },
}

/// Per-step bookkeeping for a batch computation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EsReport {
    pub attempted: usize,
    pub computed: usize,
    /// Row id and reason for each row that produced no effect size.
    pub failed: Vec<(usize, String)>,
    pub corrected: Vec<usize>,
}

/// Compute effect sizes for the rows at `positions` (all rows when `None`) and
/// write them into `yi`/`vi`/`sei`. Values already present outside the
/// processed rows are kept, which is how several computations are chained.
pub fn compute_dataset(
    d: &Dataset,
    input: &EsInput,
    positions: Option<&[usize]>,
) -> Result<(Dataset, EsReport)> {
    let k = d.nrows();
    let all: Vec<usize> = (0..k).collect();
    let positions = positions.unwrap_or(&all);
    let cols: Vec<&str> = match input {
        EsInput::TwoByTwo { a, b, c, d, .. } => vec![a, b, c, d],
        EsInput::Smd {
            m1,
            m2,
            sd1,
            sd2,
            n1,
            n2,
        } => vec![m1, m2, sd1, sd2, n1, n2],
        EsInput::FisherZ { r, n } => vec![r, n],
    }
    .into_iter()
    .map(String::as_str)
    .collect();
    let data: Vec<&[Option<f64>]> = cols.iter().map(|c| d.real(c)).collect::<Result<_>>()?;
    let existing = |name: &str| -> Vec<Option<f64>> {
        d.real(name)
            .map(|v| v.to_vec())
            .unwrap_or_else(|_| vec![None; k])
    };
    let (mut yi, mut vi) = (existing("yi"), existing("vi"));
    let mut report = EsReport {
        attempted: positions.len(),
        computed: 0,
        failed: Vec::new(),
        corrected: Vec::new(),
    };
    for &i in positions {
        let vals: Option<Vec<f64>> = data.iter().map(|c| c[i]).collect();
        let rec = match vals {
            None => Err(MetaError::NotEstimable("missing input".into())),
            Some(v) => match input {
                EsInput::TwoByTwo { measure, .. } => {
                    compute_2x2(&TwoByTwo::new(v[0], v[1], v[2], v[3]), *measure)
                }
                EsInput::Smd { .. } => compute_smd(&ContinuousGroups {
                    m1: v[0],
                    m2: v[1],
                    sd1: v[2],
                    sd2: v[3],
                    n1: v[4],
                    n2: v[5],
                }),
                EsInput::FisherZ { .. } => compute_fisher_z(v[0], v[1]),
            },
        };
        match rec {
            Ok(r) => {
                yi[i] = Some(r.yi);
                vi[i] = Some(r.vi);
                report.computed += 1;
                if r.corrected {
                    report.corrected.push(d.row_ids()[i]);
                }
            }
            Err(e) => {
                yi[i] = None;
                vi[i] = None;
                report.failed.push((d.row_ids()[i], e.to_string()));
            }
        }
    }
    let sei = vi.iter().map(|v| v.map(f64::sqrt)).collect();
    let out = d
        .set_real_column("yi", yi)?
        .set_real_column("vi", vi)?
        .set_real_column("sei", sei)?;
    Ok((out, report))
}
