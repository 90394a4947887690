use std::collections::BTreeMap;

use super::BiEncoderParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Mention,
    Entity,
}

/// Sparse gradient over the two embedding tables. Only rows touched by a batch
/// are present. Rows are kept in bucket order so every reduction over them is
/// deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    dim: usize,
    mention: BTreeMap<u32, Vec<f64>>,
    entity: BTreeMap<u32, Vec<f64>>,
}

impl Gradient {
    pub fn zeros(dim: usize) -> Self {
        Gradient {
            dim,
            mention: BTreeMap::new(),
            entity: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn table(&self, side: Side) -> &BTreeMap<u32, Vec<f64>> {
        match side {
            Side::Mention => &self.mention,
            Side::Entity => &self.entity,
        }
    }

    fn table_mut(&mut self, side: Side) -> &mut BTreeMap<u32, Vec<f64>> {
        match side {
            Side::Mention => &mut self.mention,
            Side::Entity => &mut self.entity,
        }
    }

    pub fn row(&self, side: Side, bucket: u32) -> Option<&[f64]> {
        self.table(side).get(&bucket).map(Vec::as_slice)
    }

    pub fn rows(&self, side: Side) -> impl Iterator<Item = (u32, &[f64])> {
        self.table(side).iter().map(|(&b, r)| (b, r.as_slice()))
    }

    pub fn num_rows(&self) -> usize {
        self.mention.len() + self.entity.len()
    }

    /// `row[bucket] += coef * v`
    pub fn add_row(&mut self, side: Side, bucket: u32, coef: f64, v: &[f64]) {
        debug_assert_eq!(v.len(), self.dim);
        let dim = self.dim;
        let row = self
            .table_mut(side)
            .entry(bucket)
            .or_insert_with(|| vec![0.0; dim]);
        for (r, x) in row.iter_mut().zip(v) {
            *r += coef * x;
        }
    }

    pub fn add_scaled(&mut self, other: &Gradient, coef: f64) {
        for side in [Side::Mention, Side::Entity] {
            for (b, v) in other.rows(side) {
                self.add_row(side, b, coef, v);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for row in self.mention.values_mut().chain(self.entity.values_mut()) {
            row.iter_mut().for_each(|x| *x *= c);
        }
    }

    /// Inner product over all coordinates of both tables.
    pub fn dot(&self, other: &Gradient) -> f64 {
        let mut sum = 0.0;
        for side in [Side::Mention, Side::Entity] {
            let (small, large) = if self.table(side).len() <= other.table(side).len() {
                (self.table(side), other.table(side))
            } else {
                (other.table(side), self.table(side))
            };
            for (b, r) in small {
                if let Some(s) = large.get(b) {
                    sum += r.iter().zip(s).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        sum
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn is_zero(&self) -> bool {
        self.mention
            .values()
            .chain(self.entity.values())
            .all(|r| r.iter().all(|&x| x == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.mention
            .values()
            .chain(self.entity.values())
            .all(|r| r.iter().all(|x| x.is_finite()))
    }

    /// `params += coef * self`
    pub fn apply(&self, params: &mut BiEncoderParams, coef: f64) {
        for (b, r) in &self.mention {
            for (p, g) in params.mention_row_mut(*b).iter_mut().zip(r) {
                *p += coef * g;
            }
        }
        for (b, r) in &self.entity {
            for (p, g) in params.entity_row_mut(*b).iter_mut().zip(r) {
                *p += coef * g;
            }
        }
    }
}
