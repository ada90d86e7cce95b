//! Enforcer formulas against a separately written straight-line version.

// the oracle spells the clamp out
#![allow(clippy::manual_clamp)]

use budgetcomm::enforcer::{
    comm_max_penalty, hard_penalty, soft_d_term, soft_i_term, soft_p_term, soft_penalty, BudgetConfig, EpochCommStats,
    ProportionalSign,
};
use rand::{Rng, SeedableRng};

fn oracle_p(b: f64, c: f64, symmetric: bool) -> f64 {
    let below = c <= b;
    let num = if below || !symmetric { b - c } else { c - b };
    let den = if below { b } else { 1.0 - b };
    num / den
}

#[test]
fn formulas_match_oracle_on_random_pairs() {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let cfg = BudgetConfig::default();
    let mut stats = EpochCommStats::default();
    let mut sum = 0.0f64;
    let mut prev = 0.0f64;
    for _ in 0..10_000 {
        let b: f64 = r.gen_range(0.001..0.999);
        let c: f64 = r.gen();
        let lo: f64 = r.gen::<f64>() * c;

        assert!((comm_max_penalty(c).unwrap() - (1.0 - c)).abs() <= 1e-12);
        assert!((hard_penalty(c, lo).unwrap() - (c - lo)).abs() <= 1e-12);

        let sym = soft_p_term(b, c, ProportionalSign::Symmetric).unwrap();
        let verb = soft_p_term(b, c, ProportionalSign::Verbatim).unwrap();
        assert!((sym - oracle_p(b, c, true)).abs() <= 1e-12);
        assert!((verb - oracle_p(b, c, false)).abs() <= 1e-12);

        let d = soft_d_term(sym, prev);
        assert!((d - (sym - prev)).abs() <= 1e-12);
        prev = sym;

        sum += sym;
        if sum > 0.1 {
            sum = 0.1;
        }
        if sum < -0.1 {
            sum = -0.1;
        }
        let i = soft_i_term(&mut stats, sym, 0.1);
        assert!((i - sum).abs() <= 1e-12);

        let total = soft_penalty(sym, d, i, &cfg);
        assert!((total - (sym + 1.6 * d + 0.026 * i)).abs() <= 1e-12);
    }
}
