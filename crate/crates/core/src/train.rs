//! Shared training utilities: minibatch sampling and loss logs.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Epoch-wise shuffled minibatches (the final partial batch wraps into the
/// next epoch's permutation).
#[derive(Clone, Debug)]
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Batcher {
    pub fn new(len: usize, batch: usize) -> Self {
        Self { order: (0..len).collect(), pos: len, batch: batch.max(1) }
    }

    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Per-step scalar training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossLog {
    pub columns: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl LossLog {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, step: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((step, values.to_vec()));
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows.iter().map(|(_, v)| v[i]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("step,{}\n", self.columns.join(","));
        for (step, values) in &self.rows {
            let _ = write!(s, "{step}");
            for v in values {
                let _ = write!(s, ",{v:.6e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Trailing moving average; entry `i` averages `values[i+1-window..=i]`.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batcher_covers_each_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Batcher::new(10, 5);
        let mut seen: Vec<usize> = b.next(&mut rng);
        seen.extend(b.next(&mut rng));
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(Batcher::new(3, 7).next(&mut rng).len(), 7);
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        let mut log = LossLog::new(&["a"]);
        log.push(0, &[0.5]);
        assert_eq!(log.to_csv(), "step,a\n0,5.000000e-1\n");
    }
}
