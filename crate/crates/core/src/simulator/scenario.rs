//! Scenario presets and their key=value files.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvDoc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Preset {
    HeterogeneousPreferences,
    ContextualActions,
    RoutineProactive,
    Disambiguation,
    MnarExposure,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::HeterogeneousPreferences,
        Preset::ContextualActions,
        Preset::RoutineProactive,
        Preset::Disambiguation,
        Preset::MnarExposure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::HeterogeneousPreferences => "heterogeneous-preferences",
            Preset::ContextualActions => "contextual-actions",
            Preset::RoutineProactive => "routine-proactive",
            Preset::Disambiguation => "disambiguation",
            Preset::MnarExposure => "mnar-exposure",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub preset: Preset,
    pub users: usize,
    pub actions: usize,
    /// Episode length in ticks; every user gets one observation per tick.
    pub ticks: usize,
    /// Uniformly exposed interactions per user before the episode.
    pub warmup: usize,
    /// Dimension of the catalog's knowledge vectors (the models' d).
    pub dim: usize,
    /// Dimension of the hidden true preference space.
    pub latent_dim: usize,
    pub personas: usize,
    /// Number of action groups (fairness labels).
    pub groups: usize,
    pub feedback_noise: f64,
    pub rho: f64,
    pub drift_noise: f64,
    pub affinity_scale: f64,
    pub routine_length: usize,
    pub goals: usize,
    pub locations: usize,
    pub calibration_per_user: usize,
    /// `P(shown | feedback level)` of the biased logging policy.
    pub exposure: [f64; 5],
    pub knowledge_seed: u64,
}

impl ScenarioConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            preset,
            users: 20,
            actions: 50,
            ticks: 500,
            warmup: 10,
            dim: 8,
            latent_dim: 8,
            personas: 4,
            groups: 2,
            feedback_noise: 0.05,
            rho: 0.5,
            drift_noise: 0.02,
            affinity_scale: 0.05,
            routine_length: 4,
            goals: 4,
            locations: 4,
            calibration_per_user: 10,
            exposure: [0.05, 0.08, 0.15, 0.3, 0.6],
            knowledge_seed: 0,
        };
        match preset {
            Preset::HeterogeneousPreferences => base,
            Preset::ContextualActions => Self { ticks: 300, ..base },
            Preset::RoutineProactive => Self {
                users: 5,
                actions: 12,
                ticks: 400,
                warmup: 20,
                feedback_noise: 0.0,
                drift_noise: 0.0,
                affinity_scale: 0.0,
                ..base
            },
            Preset::Disambiguation => Self {
                users: 10,
                actions: 16,
                ticks: 200,
                warmup: 8,
                ..base
            },
            Preset::MnarExposure => Self {
                users: 50,
                actions: 40,
                ticks: 0,
                warmup: 0,
                feedback_noise: 0.1,
                ..base
            },
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        Ok(Self::preset(name.parse()?))
    }

    /// Reads a scenario file. `scenario.preset` picks the defaults, the
    /// remaining keys override them.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let preset: Preset = doc
            .get("scenario.preset")
            .ok_or_else(|| Error::config("scenario.preset", "missing"))?
            .parse()?;
        let d = Self::preset(preset);
        let exposure = match doc.get_list("mnar.exposure")? {
            None => d.exposure,
            Some(v) => v
                .try_into()
                .map_err(|_| Error::config("mnar.exposure", "expected five probabilities"))?,
        };
        let cfg = Self {
            preset,
            users: doc.get_or("scenario.users", d.users)?,
            actions: doc.get_or("scenario.actions", d.actions)?,
            ticks: doc.get_or("scenario.ticks", d.ticks)?,
            warmup: doc.get_or("scenario.warmup", d.warmup)?,
            dim: doc.get_or("scenario.dim", d.dim)?,
            latent_dim: doc.get_or("scenario.latent_dim", d.latent_dim)?,
            personas: doc.get_or("scenario.personas", d.personas)?,
            groups: doc.get_or("scenario.groups", d.groups)?,
            feedback_noise: doc.get_or("users.feedback_noise", d.feedback_noise)?,
            rho: doc.get_or("users.rho", d.rho)?,
            drift_noise: doc.get_or("users.drift_noise", d.drift_noise)?,
            affinity_scale: doc.get_or("users.affinity_scale", d.affinity_scale)?,
            routine_length: doc.get_or("routine.length", d.routine_length)?,
            goals: doc.get_or("disambiguation.goals", d.goals)?,
            locations: doc.get_or("disambiguation.locations", d.locations)?,
            calibration_per_user: doc
                .get_or("mnar.calibration_per_user", d.calibration_per_user)?,
            exposure,
            knowledge_seed: doc.get_or("scenario.knowledge_seed", d.knowledge_seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("scenario.preset", self.preset);
        doc.set("scenario.users", self.users);
        doc.set("scenario.actions", self.actions);
        doc.set("scenario.ticks", self.ticks);
        doc.set("scenario.warmup", self.warmup);
        doc.set("scenario.dim", self.dim);
        doc.set("scenario.latent_dim", self.latent_dim);
        doc.set("scenario.personas", self.personas);
        doc.set("scenario.groups", self.groups);
        doc.set("scenario.knowledge_seed", self.knowledge_seed);
        doc.set("users.feedback_noise", self.feedback_noise);
        doc.set("users.rho", self.rho);
        doc.set("users.drift_noise", self.drift_noise);
        doc.set("users.affinity_scale", self.affinity_scale);
        doc.set("routine.length", self.routine_length);
        doc.set("disambiguation.goals", self.goals);
        doc.set("disambiguation.locations", self.locations);
        doc.set("mnar.calibration_per_user", self.calibration_per_user);
        doc.set(
            "mnar.exposure",
            self.exposure
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        doc
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::config("users.rho", "must lie in [0, 1)"));
        }
        for (key, v) in [
            ("users.feedback_noise", self.feedback_noise),
            ("users.drift_noise", self.drift_noise),
            ("users.affinity_scale", self.affinity_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, "must be a non-negative number"));
            }
        }
        if self.exposure.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config(
                "mnar.exposure",
                "probabilities must lie in [0, 1]",
            ));
        }
        for (key, v) in [
            ("scenario.dim", self.dim),
            ("scenario.latent_dim", self.latent_dim),
            ("scenario.personas", self.personas),
            ("scenario.groups", self.groups),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        match self.preset {
            Preset::Disambiguation if self.goals == 0 || self.locations == 0 => Err(Error::config(
                "disambiguation.goals",
                "goals and locations must be positive",
            )),
            Preset::RoutineProactive
                if self.routine_length == 0 || self.actions < self.routine_length =>
            {
                Err(Error::config(
                    "routine.length",
                    "must be positive and no larger than the catalog",
                ))
            }
            Preset::Disambiguation => Ok(()),
            _ if self.actions == 0 => Err(Error::config("scenario.actions", "must be positive")),
            _ => Ok(()),
        }
    }

    /// Number of actions in the generated catalog, excluding the no-op.
    pub fn catalog_size(&self) -> usize {
        match self.preset {
            Preset::Disambiguation => self.goals * self.locations,
            _ => self.actions,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.as_str().parse::<Preset>().unwrap(), p);
        }
        assert!(matches!(
            "nope".parse::<Preset>(),
            Err(Error::UnknownPreset(_))
        ));
    }

    #[test]
    fn kv_round_trip() {
        for p in Preset::ALL {
            let c = ScenarioConfig::preset(p);
            let doc = KvDoc::parse(&c.to_kv().render()).unwrap();
            assert_eq!(ScenarioConfig::from_kv(&doc).unwrap(), c);
        }
    }

    #[test]
    fn overrides_and_validation() {
        let doc =
            KvDoc::parse("[scenario]\npreset = routine-proactive\nticks = 7\n[users]\nrho = 0.9\n")
                .unwrap();
        let c = ScenarioConfig::from_kv(&doc).unwrap();
        assert_eq!(c.ticks, 7);
        assert_eq!(c.rho, 0.9);
        let bad =
            KvDoc::parse("[scenario]\npreset = routine-proactive\n[users]\nrho = 1\n").unwrap();
        assert!(ScenarioConfig::from_kv(&bad).is_err());
        assert!(ScenarioConfig::from_kv(&KvDoc::new()).is_err());
    }
}
