//! Logarithmic market scoring rule for a single binary security.
//!
//! The textbook formulas are in probability units; every currency value
//! here is multiplied by `scale`, the payoff of the YES outcome (100 on a
//! 0–100 market).

use serde::{Deserialize, Serialize};

use crate::Side;

pub const DEFAULT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmsrState {
    /// Net shares sold by the market maker.
    pub q: f64,
    /// Liquidity parameter.
    pub b: f64,
    pub scale: f64,
}

/// Logistic function, stable for large |x|.
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^(x+d)) − ln(1 + e^x)` without cancellation, including for tiny `d`.
fn softplus_increment(x: f64, d: f64) -> f64 {
    let y = x + d;
    if x >= 0.0 && y >= 0.0 {
        d + (logistic(-x) * (-d).exp_m1()).ln_1p()
    } else if x <= 0.0 && y <= 0.0 {
        (logistic(x) * d.exp_m1()).ln_1p()
    } else {
        // crosses zero: split the path there
        softplus_increment(x, -x) + softplus_increment(0.0, y)
    }
}

/// `ln cosh x`
fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// `ln sinh x` for `x > 0`
fn ln_sinh(x: f64) -> f64 {
    x + (-(-2.0 * x).exp_m1()).ln() - std::f64::consts::LN_2
}

impl LmsrState {
    /// Fresh market maker with zero inventory.
    pub fn new(b: f64, scale: f64) -> Self {
        assert!(b > 0.0, "LMSR liquidity parameter must be positive, got {b}");
        assert!(scale > 0.0, "payoff scale must be positive, got {scale}");
        Self { q: 0.0, b, scale }
    }

    pub fn spot_price(&self) -> f64 {
        self.scale * logistic(self.q / self.b)
    }

    /// Cash paid by the trader to move inventory by `dq` (negative for sells).
    pub fn trade_cost(&self, dq: f64) -> f64 {
        self.scale * self.b * softplus_increment(self.q / self.b, dq / self.b)
    }

    /// Volume-weighted average price for `qty > 0` shares.
    pub fn quote_vwap(&self, side: Side, qty: f64) -> f64 {
        assert!(qty > 0.0, "quote quantity must be positive, got {qty}");
        match side {
            Side::Buy => self.trade_cost(qty) / qty,
            // cost of moving back up from q - qty to q
            Side::Sell => {
                self.scale * self.b * softplus_increment((self.q - qty) / self.b, qty / self.b) / qty
            }
        }
    }

    /// Buy-VWAP minus sell-VWAP for `qty` shares, in closed form.
    pub fn spread(&self, qty: f64) -> f64 {
        assert!(qty > 0.0, "spread probe quantity must be positive, got {qty}");
        // (cosh a + cosh c)/(2cosh²(a/2)) = 1 + (sinh(c/2)/cosh(a/2))²
        let ln_t = ln_sinh(0.5 * qty / self.b) - ln_cosh(0.5 * self.q / self.b);
        let log_ratio = if ln_t > 20.0 {
            2.0 * ln_t + (-2.0 * ln_t).exp().ln_1p()
        } else {
            let t = ln_t.exp();
            (t * t).ln_1p()
        };
        self.scale * (self.b / qty) * log_ratio
    }

    pub fn apply_trade(&self, dq: f64) -> Self {
        Self {
            q: self.q + dq,
            ..*self
        }
    }

    /// Equilibrium fluctuation magnitude for this state's liquidity.
    pub fn equilibrium_fluctuation(&self, q_eq: f64, qty: f64) -> f64 {
        equilibrium_fluctuation(q_eq, qty, self.b)
    }
}

/// Worst-case market maker loss starting from zero inventory.
pub fn loss_bound(b: f64, scale: f64) -> f64 {
    scale * b * std::f64::consts::LN_2
}

/// Size of spot-price swings (probability units) around an equilibrium
/// inventory `q_eq` when typical trades have size `qty`.
pub fn equilibrium_fluctuation(q_eq: f64, qty: f64, b: f64) -> f64 {
    assert!(qty > 0.0);
    let x = q_eq / b;
    let c = qty / b;
    // sinh(c)/(cosh(x)+cosh(c)), divided through by e^max(|x|,c)
    let m = x.abs().max(c);
    let num = 0.5 * ((c - m).exp() - (-c - m).exp());
    let den = 0.5 * ((x.abs() - m).exp() + (-x.abs() - m).exp() + (c - m).exp() + (-c - m).exp());
    num / den
}
