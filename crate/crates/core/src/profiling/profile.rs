use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::axpy;
use crate::profiling::cf::CfModel;
use crate::profiling::recurrent::{advance_flags, RecurrentModel};
use crate::types::{InteractionRecord, UserId, UserProfile};

/// Metadata key naming a user's persona group.
pub const PERSONA_KEY: &str = "persona";

/// Trained models a profile is advanced with. Any of them may be absent.
#[derive(Debug, Clone, Copy)]
pub struct ProfileModels<'a> {
    pub cf: Option<&'a CfModel>,
    pub seq: Option<&'a RecurrentModel>,
    pub ke: Option<&'a RecurrentModel>,
    /// SGD steps per new record when refreshing `p_cf` (Q frozen).
    pub local_steps: usize,
    pub local_step_size: f64,
}

impl<'a> ProfileModels<'a> {
    pub fn new(
        cf: Option<&'a CfModel>,
        seq: Option<&'a RecurrentModel>,
        ke: Option<&'a RecurrentModel>,
    ) -> Self {
        Self {
            cf,
            seq,
            ke,
            local_steps: 1,
            local_step_size: 0.05,
        }
    }

    pub fn none() -> Self {
        Self::new(None, None, None)
    }
}

/// Per-group and global centroids of long-term user embeddings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupStats {
    pub global: Vec<f64>,
    pub groups: BTreeMap<String, Vec<f64>>,
    pub counts: BTreeMap<String, usize>,
}

impl GroupStats {
    /// Arithmetic means of member vectors per group and overall.
    pub fn from_members<'a, I>(members: I, dim: usize) -> Self
    where
        I: IntoIterator<Item = (Option<&'a str>, &'a [f64])>,
    {
        let mut global = vec![0.0; dim];
        let mut n = 0usize;
        let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
        for (group, p) in members {
            axpy(1.0, p, &mut global);
            n += 1;
            if let Some(g) = group {
                let e = sums
                    .entry(g.to_string())
                    .or_insert_with(|| (vec![0.0; dim], 0));
                axpy(1.0, p, &mut e.0);
                e.1 += 1;
            }
        }
        if n > 0 {
            global.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut groups = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for (g, (mut s, c)) in sums {
            s.iter_mut().for_each(|v| *v /= c as f64);
            groups.insert(g.clone(), s);
            counts.insert(g, c);
        }
        Self {
            global,
            groups,
            counts,
        }
    }

    pub fn from_profiles<'a>(
        profiles: impl IntoIterator<Item = &'a UserProfile>,
        dim: usize,
    ) -> Self {
        Self::from_members(
            profiles
                .into_iter()
                .map(|p| (p.group.as_deref(), p.p_cf.as_slice())),
            dim,
        )
    }

    pub fn dim(&self) -> usize {
        self.global.len()
    }
}

/// Profile of a user the models have never seen: the persona centroid when the
/// metadata names a known group, otherwise the global centroid.
pub fn cold_start_profile(
    user: UserId,
    metadata: &BTreeMap<String, String>,
    stats: &GroupStats,
    models: &ProfileModels<'_>,
) -> UserProfile {
    let d = stats.dim();
    let group = metadata.get(PERSONA_KEY).cloned();
    let p_cf = group
        .as_ref()
        .and_then(|g| stats.groups.get(g))
        .unwrap_or(&stats.global)
        .clone();
    let mut profile = UserProfile::zeros(user, d);
    profile.seq_init = models
        .seq
        .map_or_else(|| vec![0.0; d], |m| m.initial_state(user, &p_cf));
    profile.ke_init = models
        .ke
        .map_or_else(|| vec![0.0; d], |m| m.initial_state(user, &p_cf));
    profile.p_seq = profile.seq_init.clone();
    profile.p_ke = profile.ke_init.clone();
    profile.p_cf = p_cf;
    profile.group = group;
    profile.metadata = metadata.clone();
    profile
}

/// Profile of a user known to the trained models, before any sequence replay.
pub fn profile_from_models(
    user: UserId,
    metadata: &BTreeMap<String, String>,
    stats: &GroupStats,
    models: &ProfileModels<'_>,
) -> UserProfile {
    let mut profile = cold_start_profile(user, metadata, stats, models);
    if let Some(p) = models.cf.and_then(|m| m.user_vector(user)) {
        profile.p_cf = p.to_vec();
        let d = profile.dim();
        profile.seq_init = models
            .seq
            .map_or_else(|| vec![0.0; d], |m| m.initial_state(user, p));
        profile.ke_init = models
            .ke
            .map_or_else(|| vec![0.0; d], |m| m.initial_state(user, p));
        profile.p_seq = profile.seq_init.clone();
        profile.p_ke = profile.ke_init.clone();
    }
    profile
}

fn check_owner(profile: &UserProfile, records: &[InteractionRecord]) -> Result<()> {
    match records.iter().find(|r| r.user != profile.id) {
        Some(r) => Err(Error::ForeignRecord {
            expected: profile.id,
            got: r.user,
        }),
        None => Ok(()),
    }
}

/// Advances only the recurrent states over `records`, skipping rejected
/// proposals (see [`advance_flags`]). Actions unknown to a
/// model leave that model's state untouched.
pub fn replay_sequences(
    profile: &UserProfile,
    records: &[InteractionRecord],
    models: &ProfileModels<'_>,
) -> Result<UserProfile> {
    check_owner(profile, records)?;
    let mut next = profile.clone();
    for (r, advance) in records.iter().zip(advance_flags(records)) {
        if !advance {
            continue;
        }
        if let Some(m) = models.seq {
            if m.action_row(r.action).is_some() {
                next.p_seq = m.advance(&next.p_seq, r.action, r.value())?;
            }
        }
        if let Some(m) = models.ke {
            if m.action_row(r.action).is_some() {
                next.p_ke = m.advance(&next.p_ke, r.action, r.value())?;
            }
        }
    }
    next.steps += records.len();
    Ok(next)
}

/// Folds new observations into a profile: recurrent states advance one step
/// per record, and `p_cf` takes `local_steps` SGD steps per record against the
/// frozen action factors. The input profile is left untouched.
pub fn update_profile(
    profile: &UserProfile,
    records: &[InteractionRecord],
    models: &ProfileModels<'_>,
) -> Result<UserProfile> {
    let mut next = replay_sequences(profile, records, models)?;
    if let Some(cf) = models.cf {
        for r in records {
            if cf.action_row(r.action).is_some() {
                cf.refine_user_vector(
                    &mut next.p_cf,
                    r.action,
                    r.value(),
                    models.local_steps,
                    models.local_step_size,
                )?;
            }
        }
    }
    Ok(next)
}
