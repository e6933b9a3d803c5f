//! Streaming log-sum-exp with compensated summation.

/// Accumulates `ln Σ exp(x_i)` without overflow.
///
/// The running sum is kept relative to the largest term seen so far and
/// summed with Neumaier compensation, so the result does not depend on the
/// magnitude spread of the inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogSum {
    max: f64,
    sum: f64,
    comp: f64,
}

impl Default for LogSum {
    fn default() -> Self {
        Self::new()
    }
}

impl LogSum {
    pub const fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
            comp: 0.0,
        }
    }

    pub fn from_log(x: f64) -> Self {
        let mut acc = Self::new();
        acc.add_log(x);
        acc
    }

    pub fn is_empty(&self) -> bool {
        self.max == f64::NEG_INFINITY
    }

    fn add_scaled(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn rescale(&mut self, new_max: f64) {
        if self.is_empty() {
            self.max = new_max;
            return;
        }
        let f = (self.max - new_max).exp();
        self.sum *= f;
        self.comp *= f;
        self.max = new_max;
    }

    /// Adds `exp(x)`.
    pub fn add_log(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            self.rescale(x);
        }
        self.add_scaled((x - self.max).exp());
    }

    /// Adds `w · exp(x)` for a nonnegative weight `w`.
    pub fn add_weighted(&mut self, x: f64, w: f64) {
        if w > 0.0 {
            self.add_log(x + w.ln());
        }
    }

    pub fn merge(&mut self, other: &LogSum) {
        if other.is_empty() {
            return;
        }
        if other.max > self.max {
            self.rescale(other.max);
        }
        let f = (other.max - self.max).exp();
        self.add_scaled(other.sum * f);
        self.add_scaled(other.comp * f);
    }

    /// `ln` of the accumulated sum; `-inf` when nothing was added.
    pub fn value(&self) -> f64 {
        if self.is_empty() {
            return f64::NEG_INFINITY;
        }
        self.max + (self.sum + self.comp).ln()
    }
}

impl FromIterator<f64> for LogSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Self::new();
        for x in iter {
            acc.add_log(x);
        }
        acc
    }
}

/// `ln Σ exp(x_i)` over a slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    xs.iter().copied().collect::<LogSum>().value()
}

/// Merges per-chunk accumulators pairwise in index order.
pub fn merge_pairwise(mut parts: Vec<LogSum>) -> LogSum {
    if parts.is_empty() {
        return LogSum::new();
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.chunks(2);
        for pair in &mut it {
            let mut a = pair[0];
            if let Some(b) = pair.get(1) {
                a.merge(b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts[0]
}
