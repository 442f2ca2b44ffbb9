//! Gittins indices for Bernoulli arms with Beta posterior counts.
//!
//! The index of an arm with `s` successes and `f` failures (prior included)
//! is the retirement reward `λ` at which an agent is indifferent between
//! retiring for `λ` per step forever and continuing to pull the arm. For each
//! state the continuation value is computed by backward induction over the
//! posterior-count lattice truncated `horizon` pulls below the state. At the
//! truncation boundary the agent either retires or keeps pulling at the
//! posterior mean with no further learning.
//!
//! The root in `λ` is found by Newton steps from below inside the bisection
//! bracket `[s/(s+f), 1]`. The continuation value is convex and piecewise
//! linear in `λ`, so Newton iterates started at the posterior mean increase
//! monotonically towards the index and terminate finitely.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Indices closer than this are treated as equal.
pub const TIE_EPSILON: f64 = 1e-9;

/// Root-finding tolerance on the retirement reward.
pub const INDEX_TOLERANCE: f64 = 1e-6;

pub const DEFAULT_DISCOUNT: f64 = 0.99;
pub const DEFAULT_HORIZON: u32 = 300;

/// Discount factor and truncation depth used to build a [`GittinsTable`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GittinsConfig {
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default = "default_horizon")]
    pub horizon: u32,
}

fn default_discount() -> f64 {
    DEFAULT_DISCOUNT
}

fn default_horizon() -> u32 {
    DEFAULT_HORIZON
}

impl Default for GittinsConfig {
    fn default() -> Self {
        Self {
            discount: DEFAULT_DISCOUNT,
            horizon: DEFAULT_HORIZON,
        }
    }
}

/// Outcome of comparing two arms by Gittins index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GiOrder {
    AWins,
    BWins,
    Tie,
}

/// Immutable table of Gittins indices `GI(s, f)` for `s, f >= 1`,
/// `s + f <= max_count`.
#[derive(Debug, Clone)]
pub struct GittinsTable {
    discount: f64,
    horizon: u32,
    max_count: u32,
    stride: usize,
    values: Vec<f64>,
}

impl GittinsTable {
    pub fn build(discount: f64, horizon: u32, max_count: u32) -> Result<Self> {
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::Config(format!(
                "discount must lie in [0, 1), got {discount}"
            )));
        }
        if horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if max_count < 2 {
            return Err(Error::Config(format!(
                "max_count must be at least 2, got {max_count}"
            )));
        }
        let stride = max_count as usize + 1;
        let mut values = vec![f64::NAN; stride * stride];
        let mut solver = IndexSolver::new(discount, horizon);
        for total in 2..=max_count {
            for s in 1..total {
                let f = total - s;
                values[s as usize * stride + f as usize] = solver.index(s, f);
            }
        }
        Ok(Self {
            discount,
            horizon,
            max_count,
            stride,
            values,
        })
    }

    pub fn from_config(config: &GittinsConfig, max_count: u32) -> Result<Self> {
        Self::build(config.discount, config.horizon, max_count)
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn max_count(&self) -> u32 {
        self.max_count
    }

    pub fn covers(&self, s: u32, f: u32) -> bool {
        s >= 1 && f >= 1 && s + f <= self.max_count
    }

    /// Looks up `GI(s, f)`.
    pub fn index(&self, s: u32, f: u32) -> Result<f64> {
        if !self.covers(s, f) {
            return Err(Error::Lookup {
                s,
                f,
                max_count: self.max_count,
            });
        }
        Ok(self.values[s as usize * self.stride + f as usize])
    }

    /// Unchecked lookup for hot loops whose callers have verified coverage.
    #[inline]
    pub(crate) fn value(&self, s: u32, f: u32) -> f64 {
        debug_assert!(self.covers(s, f), "GI({s},{f}) not tabulated");
        self.values[s as usize * self.stride + f as usize]
    }

    pub fn compare(&self, arm_a: (u32, u32), arm_b: (u32, u32)) -> Result<GiOrder> {
        let a = self.index(arm_a.0, arm_a.1)?;
        let b = self.index(arm_b.0, arm_b.1)?;
        Ok(order_indices(a, b))
    }

    /// Iterates over `(s, f, index)` in increasing `s + f`, then `s`.
    pub fn entries(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        (2..=self.max_count).flat_map(move |total| {
            (1..total).map(move |s| (s, total - s, self.value(s, total - s)))
        })
    }

    /// Writes the table as CSV with header `s,f,index`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s", "f", "index"])?;
        for (s, f, gi) in self.entries() {
            w.write_record(&[s.to_string(), f.to_string(), format!("{gi:.12}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Orders two index values with [`TIE_EPSILON`] tolerance.
#[inline]
pub fn order_indices(a: f64, b: f64) -> GiOrder {
    if (a - b).abs() <= TIE_EPSILON {
        GiOrder::Tie
    } else if a > b {
        GiOrder::AWins
    } else {
        GiOrder::BWins
    }
}

/// Convenience wrapper mirroring [`GittinsTable::compare`].
pub fn gi_compare(table: &GittinsTable, arm_a: (u32, u32), arm_b: (u32, u32)) -> Result<GiOrder> {
    table.compare(arm_a, arm_b)
}

impl From<GiOrder> for Ordering {
    fn from(o: GiOrder) -> Self {
        match o {
            GiOrder::AWins => Ordering::Greater,
            GiOrder::BWins => Ordering::Less,
            GiOrder::Tie => Ordering::Equal,
        }
    }
}

/// Reusable scratch space for the calibration problem of a single state.
struct IndexSolver {
    discount: f64,
    horizon: u32,
    value: Vec<f64>,
    slope: Vec<f64>,
}

impl IndexSolver {
    fn new(discount: f64, horizon: u32) -> Self {
        let n = horizon as usize + 2;
        Self {
            discount,
            horizon,
            value: vec![0.0; n],
            slope: vec![0.0; n],
        }
    }

    fn index(&mut self, s: u32, f: u32) -> f64 {
        let mean = s as f64 / (s + f) as f64;
        if self.discount == 0.0 {
            return mean;
        }
        let mut lambda = mean;
        for _ in 0..200 {
            let (gap, dgap) = self.advantage(s, f, lambda);
            if gap <= 0.0 || dgap >= 0.0 {
                break;
            }
            let step = -gap / dgap;
            let next = (lambda + step).min(1.0);
            if next - lambda < INDEX_TOLERANCE * 1e-4 {
                lambda = next;
                break;
            }
            lambda = next;
        }
        lambda
    }

    /// Returns `C(λ) - λ/(1-d)` and its derivative in `λ`, where `C` is the
    /// value of pulling once from `(s, f)` and then acting optimally.
    fn advantage(&mut self, s: u32, f: u32, lambda: f64) -> (f64, f64) {
        let d = self.discount;
        let h = self.horizon as usize;
        let retire = lambda / (1.0 - d);
        let retire_slope = 1.0 / (1.0 - d);
        let s0 = s as f64;
        let n0 = (s + f) as f64;

        // Boundary: no further learning.
        let inv = 1.0 / (n0 + h as f64);
        for i in 0..=h {
            let p = (s0 + i as f64) * inv;
            if lambda >= p {
                self.value[i] = retire;
                self.slope[i] = retire_slope;
            } else {
                self.value[i] = p / (1.0 - d);
                self.slope[i] = 0.0;
            }
        }

        let mut cont = 0.0;
        let mut cont_slope = 0.0;
        for depth in (0..h).rev() {
            let inv = 1.0 / (n0 + depth as f64);
            let (value, slope) = (&mut self.value[..depth + 2], &mut self.slope[..depth + 2]);
            let mut p = s0 * inv;
            for i in 0..=depth {
                // successes move to i + 1, failures stay at i
                let c = d * (p * (value[i + 1] - value[i]) + value[i]) + p;
                let cs = d * (p * (slope[i + 1] - slope[i]) + slope[i]);
                let keep = c >= retire;
                value[i] = if keep { c } else { retire };
                slope[i] = if keep { cs } else { retire_slope };
                if depth == 0 {
                    cont = c;
                    cont_slope = cs;
                }
                p += inv;
            }
        }
        (cont - retire, cont_slope - retire_slope)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_discount_is_posterior_mean() {
        let t = GittinsTable::build(0.0, 10, 4).unwrap();
        assert_eq!(t.index(1, 1).unwrap(), 0.5);
        assert!((t.index(2, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_discount() {
        assert!(matches!(
            GittinsTable::build(1.0, 10, 4),
            Err(Error::Config(_))
        ));
        assert!(GittinsTable::build(-0.1, 10, 4).is_err());
    }

    #[test]
    fn lookup_outside_table_names_the_state() {
        let t = GittinsTable::build(0.9, 20, 5).unwrap();
        match t.index(4, 2) {
            Err(Error::Lookup { s: 4, f: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(t.index(0, 2).is_err());
    }

    #[test]
    fn compare_examples() {
        let t = GittinsTable::build(0.99, 100, 8).unwrap();
        assert_eq!(t.compare((1, 1), (1, 1)).unwrap(), GiOrder::Tie);
        assert_eq!(t.compare((2, 1), (1, 2)).unwrap(), GiOrder::AWins);
        assert_eq!(t.compare((1, 2), (2, 1)).unwrap(), GiOrder::BWins);
    }

    #[test]
    fn index_exceeds_mean_with_positive_discount() {
        let t = GittinsTable::build(0.9, 60, 12).unwrap();
        for (s, f, gi) in t.entries() {
            let mean = s as f64 / (s + f) as f64;
            assert!(gi > mean, "GI({s},{f})={gi} <= {mean}");
            assert!(gi < 1.0);
        }
    }

    #[test]
    fn csv_has_header() {
        let t = GittinsTable::build(0.5, 10, 3).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("s,f,index\n1,1,"));
        assert_eq!(text.lines().count(), 1 + 1 + 2);
    }
}
