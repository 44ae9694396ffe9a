//! Exact floating-point accumulation and small descriptive statistics.
//!
//! [`ExactSum`] keeps a list of non-overlapping partial sums (Shewchuk's
//! expansion arithmetic, the same scheme behind Python's `math.fsum`). The
//! represented value is the exact real sum of every input; [`ExactSum::value`]
//! rounds it once, to nearest-even. Because the result is the correctly
//! rounded exact sum, it does not depend on the order of the inputs, and an
//! `add(x)` followed by `sub(x)` returns to the previous value exactly.

/// Order-independent, correctly rounded running sum of finite `f64`s.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        debug_assert!(value.is_finite(), "ExactSum only accepts finite inputs");
        let mut x = value;
        let mut kept = 0;
        for idx in 0..self.partials.len() {
            let mut y = self.partials[idx];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        self.partials.truncate(kept);
        self.partials.push(x);
    }

    pub fn sub(&mut self, value: f64) {
        self.add(-value);
    }

    /// The exact sum rounded to the nearest `f64` (ties to even).
    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // Half-way case: the remaining partials push the rounding direction.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }
}

impl Extend<f64> for ExactSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for v in iter {
            self.add(v);
        }
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = ExactSum::new();
        acc.extend(iter);
        acc
    }
}

/// Correctly rounded sum of a slice.
pub fn exact_sum(values: &[f64]) -> f64 {
    values.iter().copied().collect::<ExactSum>().value()
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(exact_sum(values) / values.len() as f64)
    }
}

/// Sample standard deviation (n - 1 denominator). `None` below two values.
pub fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    let ss: ExactSum = values.iter().map(|v| (v - m) * (v - m)).collect();
    Some((ss.value() / (values.len() - 1) as f64).sqrt())
}

/// Linear-interpolation quantile of already sorted data (the "type 7" rule).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lower = pos.floor() as usize;
    let upper = pos.ceil() as usize;
    let frac = pos - lower as f64;
    Some(sorted[lower] + (sorted[upper] - sorted[lower]) * frac)
}

/// Pearson correlation; `None` when either side has zero variance or fewer
/// than two points.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len(), "pearson: length mismatch");
    if xs.len() < 2 {
        return None;
    }
    let mx = mean(xs)?;
    let my = mean(ys)?;
    let mut sxy = ExactSum::new();
    let mut sxx = ExactSum::new();
    let mut syy = ExactSum::new();
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy.add(dx * dy);
        sxx.add(dx * dx);
        syy.add(dy * dy);
    }
    let (sxx, syy) = (sxx.value(), syy.value());
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy.value() / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
