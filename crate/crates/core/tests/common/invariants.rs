//! Attack invariants checked exhaustively over a model and a point set.

use bm_core::attack::{deepfool_batch, fgsm_batch, pgd_batch, predict_flat, AttackConfig, DeepfoolNorm, Outcome};
use bm_core::data::LabeledSet;
use bm_core::model::Model;
use bm_core::rng::RngStream;

pub const BUDGET_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, Default)]
pub struct InvariantTally {
    pub budget_checks: usize,
    pub equivalence_checks: usize,
    pub deepfool_checks: usize,
    pub violations: Vec<String>,
}

impl InvariantTally {
    pub fn merge(&mut self, other: InvariantTally) {
        self.budget_checks += other.budget_checks;
        self.equivalence_checks += other.equivalence_checks;
        self.deepfool_checks += other.deepfool_checks;
        self.violations.extend(other.violations);
    }
}

/// FGSM and PGD ∞-budgets, PGD(1 step, no start, α = ε) against FGSM bitwise,
/// and DeepFool success against an actual label change.
pub fn check(model: &Model, set: &LabeledSet, epsilons: &[f64], seed: u64) -> InvariantTally {
    let mut t = InvariantTally::default();
    let x = set.points();
    let y = set.labels();
    for &eps in epsilons {
        let fg = fgsm_batch(model, x, y, eps).unwrap();
        let mut rng = RngStream::new(seed, "invariants", eps.to_bits());
        let pg = pgd_batch(model, x, y, &AttackConfig::pgd(eps), &mut rng).unwrap();
        for (name, rs) in [("fgsm", &fg), ("pgd", &pg)] {
            for (i, r) in rs.iter().enumerate() {
                t.budget_checks += 1;
                if r.linf() > eps + BUDGET_SLACK {
                    t.violations.push(format!("{name} ε={eps} point {i}: ‖δ‖∞ = {}", r.linf()));
                }
            }
        }
        let one = AttackConfig {
            pgd_steps: 1,
            random_start: false,
            pgd_alpha: Some(eps),
            ..AttackConfig::pgd(eps)
        };
        let mut rng = RngStream::new(seed, "invariants-one", 0);
        let p1 = pgd_batch(model, x, y, &one, &mut rng).unwrap();
        for (i, (a, b)) in p1.iter().zip(&fg).enumerate() {
            t.equivalence_checks += 1;
            let same = a.x_adv.iter().zip(&b.x_adv).all(|(u, v)| u.to_bits() == v.to_bits());
            if !same {
                t.violations.push(format!("pgd(1) ≠ fgsm at ε={eps} point {i}"));
            }
        }
    }
    let df = deepfool_batch(model, x, None, &AttackConfig::deepfool(DeepfoolNorm::L2)).unwrap();
    let clean = predict_flat(model, x).unwrap();
    let adv: Vec<f64> = df.iter().flat_map(|r| r.x_adv.iter().copied()).collect();
    let after = predict_flat(model, &adv).unwrap();
    for (i, r) in df.iter().enumerate() {
        t.deepfool_checks += 1;
        if r.success && after[i] == clean[i] {
            t.violations.push(format!("deepfool point {i} reports success without a flip"));
        }
        let explained = match r.outcome {
            Outcome::Exhausted => true,
            Outcome::ZeroGradient => r.delta.iter().all(|&v| v == 0.0),
            _ => false,
        };
        if !r.success && !explained {
            t.violations.push(format!("deepfool point {i} failed with {:?}", r.outcome));
        }
    }
    t
}
