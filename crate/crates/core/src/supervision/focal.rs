//! Per-class sigmoid focal loss on a single logit.

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Focal {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for Focal {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

impl Focal {
    /// Loss and its derivative with respect to the logit for a binary target.
    pub fn loss_and_grad(&self, logit: f64, positive: bool) -> (f64, f64) {
        let p = crate::model::sigmoid(logit);
        let g = self.gamma;
        if positive {
            // -a (1-p)^g log p
            let log_p = -softplus(-logit);
            let q = 1.0 - p;
            let qg = q.powf(g);
            let loss = -self.alpha * qg * log_p;
            let grad = self.alpha * qg * (g * p * log_p - q);
            (loss, grad)
        } else {
            // -(1-a) p^g log(1-p)
            let log_q = -softplus(logit);
            let pg = p.powf(g);
            let loss = -(1.0 - self.alpha) * pg * log_q;
            let grad = (1.0 - self.alpha) * pg * (p - g * (1.0 - p) * log_q);
            (loss, grad)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_finite_differences() {
        let f = Focal::default();
        for &x in &[-6.0, -2.5, -0.3, 0.0, 0.4, 1.7, 5.0] {
            for &pos in &[true, false] {
                let h = 1e-6;
                let fd = (f.loss_and_grad(x + h, pos).0 - f.loss_and_grad(x - h, pos).0) / (2.0 * h);
                let (_, g) = f.loss_and_grad(x, pos);
                assert!((g - fd).abs() <= 1e-6 * fd.abs().max(1e-3), "x={x} pos={pos} g={g} fd={fd}");
            }
        }
    }

    #[test]
    fn reference_values() {
        let f = Focal::default();
        // p = 0.5: 0.25 * 0.25 * ln 2 and 0.75 * 0.25 * ln 2
        let ln2 = std::f64::consts::LN_2;
        assert!((f.loss_and_grad(0.0, true).0 - 0.0625 * ln2).abs() < 1e-15);
        assert!((f.loss_and_grad(0.0, false).0 - 0.1875 * ln2).abs() < 1e-15);
        let (far, _) = f.loss_and_grad(-800.0, false);
        assert_eq!(far, 0.0);
        assert!(f.loss_and_grad(-800.0, true).0.is_finite());
    }
}
