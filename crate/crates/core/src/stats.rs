//! Small descriptive-statistics helpers shared by the diagnostics modules.

use serde::{Deserialize, Serialize};

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample variance with the n-1 divisor. A single value has variance 0.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return if n == 1 { 0.0 } else { f64::NAN };
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
}

pub fn sample_sd(values: &[f64]) -> f64 {
    sample_variance(values).sqrt()
}

/// Standardized mean difference `(m_t - m_c) / sqrt((s_t^2 + s_c^2) / 2)`.
///
/// When both arms have zero spread the difference is either exactly zero or
/// infinitely large; the latter is returned as a signed infinity.
pub fn standardized_difference(treated: &[f64], control: &[f64]) -> f64 {
    let diff = mean(treated) - mean(control);
    let pooled = ((sample_variance(treated) + sample_variance(control)) / 2.0).sqrt();
    if pooled > 0.0 {
        diff / pooled
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        i = j;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean(a);
    let mb = mean(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return f64::NAN;
    }
    sab / (saa * sbb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Counts over a fixed grid of bin edges. Bins are half-open `[lo, hi)`
/// except the last, which also includes its upper edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width grid over `[lo, hi]`. A degenerate range collapses to one
    /// bin regardless of `bins`.
    pub fn grid(lo: f64, hi: f64, bins: usize) -> Histogram {
        let bins = bins.max(1);
        if !(hi > lo) {
            return Histogram { edges: vec![lo, hi], counts: vec![0] };
        }
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|b| lo + width * b as f64).collect();
        edges.push(hi);
        Histogram { edges, counts: vec![0; bins] }
    }

    pub fn over(values: &[f64], bins: usize) -> Histogram {
        let (lo, hi) = min_max(values).unwrap_or((0.0, 0.0));
        let mut h = Histogram::grid(lo, hi, bins);
        h.add_all(values);
        h
    }

    pub fn bin_of(&self, value: f64) -> Option<usize> {
        let last = self.counts.len() - 1;
        let lo = self.edges[0];
        let hi = self.edges[last + 1];
        if value < lo || value > hi || value.is_nan() {
            return None;
        }
        // first edge strictly greater than value, minus one
        let idx = self.edges[1..=last].partition_point(|&e| e <= value);
        Some(idx.min(last))
    }

    pub fn add(&mut self, value: f64) {
        if let Some(b) = self.bin_of(value) {
            self.counts[b] += 1;
        }
    }

    pub fn add_all(&mut self, values: &[f64]) {
        for &v in values {
            self.add(v);
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn min_max(values: &[f64]) -> Option<(f64, f64)> {
    let mut it = values.iter().copied();
    let first = it.next()?;
    Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
}

/// Serde adapter writing non-finite floats as strings so JSON stays valid.
pub(crate) mod lossless_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float {other:?}"))),
            },
        }
    }
}
