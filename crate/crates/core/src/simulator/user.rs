//! Synthetic users and their feedback model.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::types::{feedback_level, ActionEntry, Attribute, Feedback, UserId, FEEDBACK_LEVELS};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUser {
    pub id: UserId,
    pub group: String,
    /// Long-term preference `p*_0`.
    pub p0: Vec<f64>,
    /// Current preference `p*_t`.
    pub p: Vec<f64>,
    pub rho: f64,
    pub drift_noise: f64,
    pub affinities: BTreeMap<Attribute, f64>,
    pub noise: f64,
}

impl SyntheticUser {
    pub fn new(
        id: UserId,
        group: impl Into<String>,
        p0: Vec<f64>,
        rho: f64,
        drift_noise: f64,
        noise: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::config("rho", format!("{rho} outside [0, 1)")));
        }
        Ok(Self {
            id,
            group: group.into(),
            p: p0.clone(),
            p0,
            rho,
            drift_noise,
            affinities: BTreeMap::new(),
            noise,
        })
    }

    /// Sum of the user's affinities for the action's attributes.
    pub fn affinity(&self, action: &ActionEntry) -> f64 {
        action
            .attributes
            .iter()
            .filter_map(|a| self.affinities.get(a))
            .sum()
    }

    /// Noise-free feedback before quantization, clamped to [0, 1].
    pub fn expected_feedback(&self, action: &ActionEntry, q_true: &[f64]) -> f64 {
        (affine_feedback(&self.p, q_true) + self.affinity(action)).clamp(0.0, 1.0)
    }

    /// `p ← ρ p + (1 − ρ) p0 + N(0, drift_noise)`
    pub fn drift<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let normal = (self.drift_noise > 0.0)
            .then(|| Normal::new(0.0, self.drift_noise).expect("finite scale"));
        for (p, &p0) in self.p.iter_mut().zip(&self.p0) {
            let eps = normal.as_ref().map_or(0.0, |n| n.sample(rng));
            *p = self.rho * *p + (1.0 - self.rho) * p0 + eps;
        }
    }
}

/// `0.5 + 0.5 cos(p, q)`; a zero vector counts as orthogonal.
pub fn affine_feedback(p: &[f64], q: &[f64]) -> f64 {
    0.5 + 0.5 * cosine(p, q)
}

/// Nearest level of the five-point grid.
pub fn quantize(v: f64) -> f64 {
    FEEDBACK_LEVELS[feedback_level(v)]
}

/// Draws the user's feedback on `action` and then advances the drift process
/// by one tick.
pub fn gen_feedback<R: Rng + ?Sized>(
    user: &mut SyntheticUser,
    action: &ActionEntry,
    q_true: &[f64],
    rng: &mut R,
) -> Feedback {
    let mut raw = affine_feedback(&user.p, q_true) + user.affinity(action);
    if user.noise > 0.0 {
        raw += Normal::new(0.0, user.noise)
            .expect("finite scale")
            .sample(rng);
    }
    let f = quantize(raw.clamp(0.0, 1.0));
    user.drift(rng);
    Feedback::explicit(f).expect("grid level lies in [0, 1]")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ActionId, AttributeKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn user(p: Vec<f64>, noise: f64) -> SyntheticUser {
        SyntheticUser::new(UserId(0), "g", p, 0.0, 0.0, noise).unwrap()
    }

    #[test]
    fn affine_map_endpoints() {
        let a = ActionEntry::new(ActionId(1), "a", 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            gen_feedback(&mut user(vec![1.0, 0.0], 0.0), &a, &[0.0, 2.0], &mut rng).value(),
            0.5
        );
        assert_eq!(
            gen_feedback(&mut user(vec![0.6, 0.8], 0.0), &a, &[0.6, 0.8], &mut rng).value(),
            1.0
        );
        assert_eq!(
            gen_feedback(&mut user(vec![1.0, 0.0], 0.0), &a, &[-1.0, 0.0], &mut rng).value(),
            0.0
        );
    }

    #[test]
    fn affinity_shifts_feedback() {
        let mut a = ActionEntry::new(ActionId(1), "a", 2);
        let attr = Attribute::new(AttributeKind::Modality, "speech");
        a.attributes.insert(attr.clone());
        let mut u = user(vec![1.0, 0.0], 0.0);
        u.affinities.insert(attr, 0.25);
        assert_eq!(u.expected_feedback(&a, &[0.0, 1.0]), 0.75);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            gen_feedback(&mut u, &a, &[0.0, 1.0], &mut rng).value(),
            0.75
        );
    }

    #[test]
    fn same_seed_same_stream() {
        let a = ActionEntry::new(ActionId(1), "a", 2);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut u = SyntheticUser::new(UserId(0), "g", vec![0.3, 0.4], 0.7, 0.1, 0.2).unwrap();
            (0..50)
                .map(|_| gen_feedback(&mut u, &a, &[0.5, -0.1], &mut rng).value())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn drift_reverts_to_long_term() {
        let mut u = SyntheticUser::new(UserId(0), "g", vec![1.0, 0.0], 0.5, 0.0, 0.0).unwrap();
        u.p = vec![0.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        u.drift(&mut rng);
        assert_eq!(u.p, vec![0.5, 0.5]);
        assert!(SyntheticUser::new(UserId(0), "g", vec![1.0], 1.0, 0.0, 0.0).is_err());
    }
}
