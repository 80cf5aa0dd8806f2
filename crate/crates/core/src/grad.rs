//! Gradient accumulators keyed by context.
//!
//! A [`GradVector`] mirrors the layout of a parameter table: one row of
//! partial derivatives per context. Accumulation happens single-writer per
//! batch item; batch items are then folded in a fixed order, so totals are
//! reproducible bit for bit.

use crate::policy::{fmt_row_line, parse_row_line, ContextKey, PolicyError};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq)]
pub struct GradVector {
    width: usize,
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl GradVector {
    pub fn new(width: usize) -> Self {
        GradVector {
            width,
            rows: BTreeMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, ctx: &ContextKey) -> Option<&[f64]> {
        self.rows.get(ctx).map(Vec::as_slice)
    }

    pub fn row_mut(&mut self, ctx: ContextKey) -> &mut [f64] {
        self.rows.entry(ctx).or_insert_with(|| vec![0.0; self.width])
    }

    /// Entry value; absent entries are zero.
    pub fn get(&self, ctx: &ContextKey, token: usize) -> f64 {
        self.rows.get(ctx).map_or(0.0, |row| row[token])
    }

    pub fn add(&mut self, ctx: ContextKey, token: usize, value: f64) {
        self.row_mut(ctx)[token] += value;
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradVector, scale: f64) {
        assert_eq!(self.width, other.width, "accumulator widths must match");
        for (ctx, row) in &other.rows {
            let dst = self.row_mut(ctx.clone());
            for (d, s) in dst.iter_mut().zip(row.iter()) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.rows.values_mut() {
            for v in row.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Euclidean norm over all entries, summed in key order.
    pub fn l2_norm(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|row| row.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute entry difference over the union of contexts.
    pub fn max_abs_diff(&self, other: &GradVector) -> f64 {
        let mut worst: f64 = 0.0;
        for (ctx, row) in &self.rows {
            for (t, v) in row.iter().enumerate() {
                worst = worst.max((v - other.get(ctx, t)).abs());
            }
        }
        for (ctx, row) in &other.rows {
            for (t, v) in row.iter().enumerate() {
                worst = worst.max((v - self.get(ctx, t)).abs());
            }
        }
        worst
    }

    /// Largest absolute row sum. Score-function gradients are zero-sum per
    /// context, so this measures violation of that invariant.
    pub fn max_row_sum_abs(&self) -> f64 {
        self.rows
            .values()
            .map(|row| row.iter().sum::<f64>().abs())
            .fold(0.0, f64::max)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Same line format as parameter tables, sorted by context.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (ctx, row) in &self.rows {
            out.push_str(&fmt_row_line(ctx, row));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, width: usize) -> Result<Self, PolicyError> {
        let mut g = GradVector::new(width);
        for (lno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (ctx, row) = parse_row_line(line, width, lno + 1)?;
            g.rows.insert(ctx, row);
        }
        Ok(g)
    }
}
