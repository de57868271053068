//! Closed-form event statistics of the generator.
//!
//! A beneficiary with `k` of the risky slots present has hazard
//! `h = sigmoid(logit(base) + signal·k)`. Its inpatient stays form a chain:
//! each stay before the cap is followed by a readmission with probability
//! `h`; otherwise the chain continues with a late admission with probability
//! `c` or stops. The stay at the cap ends the chain. With `q = h + (1-h)c`
//! the expected number of stays is `sum_{j<cap} q^j` and the expected number
//! of positive stays is `h · sum_{j<cap-1} q^j`.

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn binomial(n: usize, k: usize, p: f64) -> f64 {
    let mut coef = 1.0;
    for i in 0..k {
        coef *= (n - i) as f64 / (i + 1) as f64;
    }
    coef * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainModel {
    pub base_rate: f64,
    pub signal: f64,
    pub slot_probability: f64,
    pub slots: usize,
    pub continue_probability: f64,
    pub cap: usize,
}

impl ChainModel {
    pub fn hazard(&self, k: usize) -> f64 {
        sigmoid(logit(self.base_rate) + self.signal * k as f64)
    }

    /// Expected (positive, negative) stays of one beneficiary with `k` risky slots.
    pub fn expected_events(&self, k: usize) -> (f64, f64) {
        let h = self.hazard(k);
        let q = h + (1.0 - h) * self.continue_probability;
        let geometric = |n: usize| (0..n).map(|j| q.powi(j as i32)).sum::<f64>();
        let total = geometric(self.cap);
        let positive = h * geometric(self.cap.saturating_sub(1));
        (positive, total - positive)
    }

    /// Population (positive, negative) event weights per observed risky count,
    /// when each present slot is independently hidden with probability `shift`.
    pub fn weights_by_observed(&self, shift: f64) -> Vec<(f64, f64)> {
        let mut w = vec![(0.0, 0.0); self.slots + 1];
        for k in 0..=self.slots {
            let pk = binomial(self.slots, k, self.slot_probability);
            let (pos, neg) = self.expected_events(k);
            for hidden in 0..=k {
                let ph = binomial(k, hidden, shift);
                w[k - hidden].0 += pk * ph * pos;
                w[k - hidden].1 += pk * ph * neg;
            }
        }
        w
    }

    pub fn positive_rate(&self) -> f64 {
        let w = self.weights_by_observed(0.0);
        let pos: f64 = w.iter().map(|x| x.0).sum();
        let neg: f64 = w.iter().map(|x| x.1).sum();
        pos / (pos + neg)
    }

    /// AUC of ranking stays by their observed risky count. With `shift = 0`
    /// this is the Bayes-optimal AUC, since the hazard is monotone in `k`.
    pub fn auc(&self, shift: f64) -> f64 {
        let w = self.weights_by_observed(shift);
        let pos: f64 = w.iter().map(|x| x.0).sum();
        let neg: f64 = w.iter().map(|x| x.1).sum();
        let mut acc = 0.0;
        for (i, wi) in w.iter().enumerate() {
            for (j, wj) in w.iter().enumerate() {
                if j > i {
                    acc += wi.1 * wj.0;
                } else if j == i {
                    acc += 0.5 * wi.1 * wj.0;
                }
            }
        }
        acc / (pos * neg)
    }

    pub fn bayes_auc(&self) -> f64 {
        self.auc(0.0)
    }

    /// Slot probability that makes the event positive rate equal `target`,
    /// or `None` when no probability in [0, 1] reaches it.
    pub fn calibrate(&self, target: f64) -> Option<f64> {
        let rate = |p: f64| ChainModel { slot_probability: p, ..*self }.positive_rate();
        let (lo_rate, hi_rate) = (rate(0.0), rate(1.0));
        if !(lo_rate..=hi_rate).contains(&target) {
            return None;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if rate(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }
}
