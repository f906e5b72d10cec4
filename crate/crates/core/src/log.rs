//! The append-only interaction log and its line-delimited file format.
//!
//! ```text
//! prefcore-log/1
//! digest <hex>
//! <t>\t<user>\t<action>\t<feedback>\t<channel>\t<tag;tag;...>
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::types::{ActionId, ContextTags, Feedback, InteractionRecord, UserId};

pub const LOG_FORMAT: &str = "prefcore-log/1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InteractionLog {
    records: Vec<InteractionRecord>,
    last_t: BTreeMap<UserId, u64>,
}

impl InteractionLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = InteractionRecord>) -> Result<Self> {
        let mut log = Self::new();
        for r in records {
            log.append(r)?;
        }
        Ok(log)
    }

    /// Appends `rec`; its timestamp must exceed the user's previous one.
    pub fn append(&mut self, rec: InteractionRecord) -> Result<()> {
        if let Some(&last) = self.last_t.get(&rec.user) {
            if rec.t <= last {
                return Err(Error::NonMonotoneTimestamp {
                    user: rec.user,
                    last,
                    got: rec.t,
                });
            }
        }
        self.last_t.insert(rec.user, rec.t);
        self.records.push(rec);
        Ok(())
    }

    /// Functional form of [`append`](Self::append).
    pub fn with_record(&self, rec: InteractionRecord) -> Result<Self> {
        let mut next = self.clone();
        next.append(rec)?;
        Ok(next)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[InteractionRecord] {
        &self.records
    }

    pub fn last_timestamp(&self, user: UserId) -> Option<u64> {
        self.last_t.get(&user).copied()
    }

    pub fn users(&self) -> Vec<UserId> {
        self.last_t.keys().copied().collect()
    }

    pub fn actions(&self) -> Vec<ActionId> {
        let mut a: Vec<_> = self.records.iter().map(|r| r.action).collect();
        a.sort_unstable();
        a.dedup();
        a
    }

    /// The user's records in timestamp order.
    pub fn user_records(&self, user: UserId) -> Vec<&InteractionRecord> {
        let mut recs: Vec<_> = self.records.iter().filter(|r| r.user == user).collect();
        recs.sort_by_key(|r| r.t);
        recs
    }

    /// `S_u`: the user's (action, feedback) sequence in time order.
    pub fn user_sequence(&self, user: UserId) -> Vec<(ActionId, Feedback)> {
        self.user_records(user)
            .into_iter()
            .map(|r| (r.action, r.feedback))
            .collect()
    }

    /// Every user's time-ordered records, keyed by user.
    pub fn sequences(&self) -> BTreeMap<UserId, Vec<&InteractionRecord>> {
        let mut by_user: BTreeMap<UserId, Vec<&InteractionRecord>> = BTreeMap::new();
        for r in &self.records {
            by_user.entry(r.user).or_default().push(r);
        }
        for v in by_user.values_mut() {
            v.sort_by_key(|r| r.t);
        }
        by_user
    }

    pub fn filter(&self, mut keep: impl FnMut(&InteractionRecord) -> bool) -> Self {
        let mut out = Self::new();
        for r in self.records.iter().filter(|r| keep(r)) {
            out.last_t
                .entry(r.user)
                .and_modify(|t| *t = (*t).max(r.t))
                .or_insert(r.t);
            out.records.push(r.clone());
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W, digest: Option<&str>) -> Result<()> {
        writeln!(w, "{LOG_FORMAT}")?;
        writeln!(w, "digest {}", digest.unwrap_or("-"))?;
        for r in &self.records {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.t,
                r.user,
                r.action,
                r.feedback.value(),
                r.feedback.channel.as_str(),
                r.context.joined()
            )?;
        }
        Ok(())
    }

    pub fn to_text(&self, digest: Option<&str>) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf, digest)
            .expect("writing to Vec cannot fail");
        String::from_utf8(buf).expect("log text is UTF-8")
    }

    /// Parses a log file; returns the log and the digest recorded in its header.
    pub fn read_from<R: BufRead>(r: R) -> Result<(Self, Option<String>)> {
        let mut lines = r.lines().enumerate();
        match lines.next() {
            Some((_, Ok(l))) if l.trim_end() == LOG_FORMAT => {}
            Some((_, Ok(l))) => {
                return Err(Error::parse(
                    1,
                    format!("expected `{LOG_FORMAT}`, found `{l}`"),
                ))
            }
            Some((_, Err(e))) => return Err(e.into()),
            None => return Err(Error::parse(1, "empty file")),
        }
        let mut digest = None;
        let mut log = Self::new();
        for (i, line) in lines {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(d) = line.strip_prefix("digest ") {
                if lineno == 2 {
                    digest = (d.trim() != "-").then(|| d.trim().to_string());
                    continue;
                }
            }
            let rec = parse_record(&line).map_err(|e| Error::parse(lineno, e))?;
            log.append(rec)
                .map_err(|e| Error::parse(lineno, e.to_string()))?;
        }
        Ok((log, digest))
    }

    pub fn from_text(s: &str) -> Result<(Self, Option<String>)> {
        Self::read_from(s.as_bytes())
    }
}

fn parse_record(line: &str) -> std::result::Result<InteractionRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(format!(
            "expected 6 tab-separated fields, found {}",
            fields.len()
        ));
    }
    let num = |s: &str, what: &str| -> std::result::Result<u64, String> {
        s.parse().map_err(|_| format!("bad {what} `{s}`"))
    };
    let t = num(fields[0], "timestamp")?;
    let user = UserId(num(fields[1], "user")? as u32);
    let action = ActionId(num(fields[2], "action")? as u32);
    let value: f64 = fields[3]
        .parse()
        .map_err(|_| format!("bad feedback `{}`", fields[3]))?;
    let channel = fields[4].parse()?;
    let feedback = Feedback::new(value, channel).map_err(|e| e.to_string())?;
    Ok(InteractionRecord {
        t,
        user,
        action,
        feedback,
        context: ContextTags::parse_joined(fields[5]),
    })
}

/// Temporal leave-last-k split: each user's last `floor(n · fraction)` records
/// go to test, always keeping at least one record in train.
///
/// The split is fully determined by timestamps; `seed` is accepted so every
/// splitter shares one signature, and does not change the result.
pub fn split_log(
    log: &InteractionLog,
    holdout_fraction: f64,
    _seed: u64,
) -> Result<(InteractionLog, InteractionLog)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::FractionOutOfRange(holdout_fraction));
    }
    let mut cutoff: BTreeMap<UserId, u64> = BTreeMap::new();
    for (user, recs) in log.sequences() {
        let n = recs.len();
        let k = ((n as f64 * holdout_fraction).floor() as usize).min(n.saturating_sub(1));
        if k > 0 {
            cutoff.insert(user, recs[n - k].t);
        }
    }
    let in_test = |r: &InteractionRecord| cutoff.get(&r.user).is_some_and(|&c| r.t >= c);
    Ok((log.filter(|r| !in_test(r)), log.filter(in_test)))
}
