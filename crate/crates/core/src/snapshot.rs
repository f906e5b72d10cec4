//! Trained-model files: a version line, a digest line, then key=value sections.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::linalg::Matrix;
use crate::profiling::{
    BindMode, CfConfig, CfModel, InitialState, Optimizer, RecurrentConfig, RecurrentModel,
};
use crate::types::{ActionId, UserId};

pub const MODEL_FORMAT: &str = "prefcore-model/1";

/// Any subset of the three preference models.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelSnapshot {
    pub cf: Option<CfModel>,
    pub seq: Option<RecurrentModel>,
    pub ke: Option<RecurrentModel>,
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn ids<T: FromStr>(doc: &KvDoc, key: &str) -> Result<Vec<T>> {
    let v = doc.get(key).ok_or_else(|| Error::config(key, "missing"))?;
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::config(key, format!("bad id `{x}`")))
        })
        .collect()
}

fn required<T: FromStr>(doc: &KvDoc, key: &str) -> Result<T> {
    let v = doc.get(key).ok_or_else(|| Error::config(key, "missing"))?;
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn list(doc: &KvDoc, key: &str, len: usize) -> Result<Vec<f64>> {
    let v = if len == 0 {
        Vec::new()
    } else {
        doc.get_list(key)?
            .ok_or_else(|| Error::config(key, "missing"))?
    };
    if v.len() != len {
        return Err(Error::config(
            key,
            format!("expected {len} values, found {}", v.len()),
        ));
    }
    Ok(v)
}

fn matrix(doc: &KvDoc, key: &str, rows: usize, cols: usize) -> Result<Matrix> {
    Matrix::from_vec(rows, cols, list(doc, key, rows * cols)?)
}

pub(crate) fn optimizer_name(o: Optimizer) -> &'static str {
    match o {
        Optimizer::Sgd => "sgd",
        Optimizer::FullBatch => "full-batch",
    }
}

pub(crate) fn parse_optimizer(key: &str, s: &str) -> Result<Optimizer> {
    match s {
        "sgd" => Ok(Optimizer::Sgd),
        "full-batch" => Ok(Optimizer::FullBatch),
        other => Err(Error::config(key, format!("unknown optimizer `{other}`"))),
    }
}

pub(crate) fn bind_name(b: BindMode) -> &'static str {
    match b {
        BindMode::Hadamard => "hadamard",
        BindMode::ConcatProject => "concat",
    }
}

pub(crate) fn parse_bind(key: &str, s: &str) -> Result<BindMode> {
    match s {
        "hadamard" => Ok(BindMode::Hadamard),
        "concat" => Ok(BindMode::ConcatProject),
        other => Err(Error::config(key, format!("unknown binding `{other}`"))),
    }
}

pub(crate) fn init_name(i: InitialState) -> &'static str {
    match i {
        InitialState::Shared => "shared",
        InitialState::FromCf => "from-cf",
    }
}

pub(crate) fn parse_init(key: &str, s: &str) -> Result<InitialState> {
    match s {
        "shared" => Ok(InitialState::Shared),
        "from-cf" => Ok(InitialState::FromCf),
        other => Err(Error::config(
            key,
            format!("unknown initial state `{other}`"),
        )),
    }
}

fn put_cf(doc: &mut KvDoc, m: &CfModel) {
    let c = &m.config;
    doc.set("cf.dim", c.dim);
    doc.set("cf.epochs", c.epochs);
    doc.set("cf.step", c.step);
    doc.set("cf.decay", c.decay);
    doc.set("cf.l2", c.l2);
    doc.set("cf.seed", c.seed);
    doc.set("cf.init_scale", c.init_scale);
    doc.set("cf.optimizer", optimizer_name(c.optimizer));
    doc.set("cf.users", join(m.users()));
    doc.set("cf.actions", join(m.actions()));
    doc.set("cf.p", join(m.p.as_slice()));
    doc.set("cf.q", join(m.q.as_slice()));
}

fn get_cf(doc: &KvDoc) -> Result<CfModel> {
    let dim: usize = required(doc, "cf.dim")?;
    let config = CfConfig {
        dim,
        epochs: required(doc, "cf.epochs")?,
        step: required(doc, "cf.step")?,
        decay: required(doc, "cf.decay")?,
        l2: required(doc, "cf.l2")?,
        seed: required(doc, "cf.seed")?,
        init_scale: required(doc, "cf.init_scale")?,
        optimizer: parse_optimizer("cf.optimizer", &required::<String>(doc, "cf.optimizer")?)?,
    };
    let users: Vec<UserId> = ids::<u32>(doc, "cf.users")?
        .into_iter()
        .map(UserId)
        .collect();
    let actions: Vec<ActionId> = ids::<u32>(doc, "cf.actions")?
        .into_iter()
        .map(ActionId)
        .collect();
    let p = matrix(doc, "cf.p", users.len(), dim)?;
    let q = matrix(doc, "cf.q", actions.len(), dim)?;
    Ok(CfModel::from_parts(users, actions, p, q, config))
}

fn put_recurrent(doc: &mut KvDoc, s: &str, m: &RecurrentModel) {
    let c = &m.config;
    doc.set(format!("{s}.dim"), c.dim);
    doc.set(format!("{s}.epochs"), c.epochs);
    doc.set(format!("{s}.step"), c.step);
    doc.set(format!("{s}.decay"), c.decay);
    doc.set(format!("{s}.l2"), c.l2);
    doc.set(format!("{s}.seed"), c.seed);
    doc.set(format!("{s}.init_scale"), c.init_scale);
    doc.set(format!("{s}.truncation"), c.truncation);
    doc.set(format!("{s}.clip"), c.clip);
    doc.set(format!("{s}.bind"), bind_name(c.bind));
    doc.set(format!("{s}.init"), init_name(m.init));
    doc.set(format!("{s}.actions"), join(m.actions()));
    doc.set(format!("{s}.params"), join(m.params.flatten()));
    if let Some(b) = &m.binding {
        doc.set(format!("{s}.knowledge_bind"), bind_name(b.mode));
        doc.set(format!("{s}.knowledge"), join(b.vectors.as_slice()));
    }
    doc.set(format!("{s}.init_users"), join(m.user_init.keys()));
    for (u, v) in &m.user_init {
        doc.set(format!("{s}.init_user.{u}"), join(v));
    }
}

fn get_recurrent(doc: &KvDoc, s: &str) -> Result<RecurrentModel> {
    let key = |k: &str| format!("{s}.{k}");
    let dim: usize = required(doc, &key("dim"))?;
    let config = RecurrentConfig {
        dim,
        epochs: required(doc, &key("epochs"))?,
        step: required(doc, &key("step"))?,
        decay: required(doc, &key("decay"))?,
        l2: required(doc, &key("l2"))?,
        seed: required(doc, &key("seed"))?,
        init_scale: required(doc, &key("init_scale"))?,
        truncation: required(doc, &key("truncation"))?,
        clip: required(doc, &key("clip"))?,
        bind: parse_bind(&key("bind"), &required::<String>(doc, &key("bind"))?)?,
    };
    let actions: Vec<ActionId> = ids::<u32>(doc, &key("actions"))?
        .into_iter()
        .map(ActionId)
        .collect();
    let knowledge = match doc.get(&key("knowledge_bind")) {
        Some(mode) => Some((
            parse_bind(&key("knowledge_bind"), mode)?,
            matrix(doc, &key("knowledge"), actions.len(), dim)?,
        )),
        None => None,
    };
    let mut model = RecurrentModel::init(&actions, knowledge, &config);
    let n = model.params.flatten().len();
    model.params.unflatten(&list(doc, &key("params"), n)?);
    model.init = parse_init(&key("init"), &required::<String>(doc, &key("init"))?)?;
    let mut user_init = BTreeMap::new();
    for u in ids::<u32>(doc, &key("init_users"))? {
        user_init.insert(UserId(u), list(doc, &key(&format!("init_user.{u}")), dim)?);
    }
    model.user_init = user_init;
    Ok(model)
}

impl ModelSnapshot {
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        if let Some(m) = &self.cf {
            put_cf(&mut doc, m);
        }
        if let Some(m) = &self.seq {
            put_recurrent(&mut doc, "seq", m);
        }
        if let Some(m) = &self.ke {
            put_recurrent(&mut doc, "ke", m);
        }
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let has = |s: &str| doc.get(&format!("{s}.dim")).is_some();
        Ok(Self {
            cf: has("cf").then(|| get_cf(doc)).transpose()?,
            seq: has("seq").then(|| get_recurrent(doc, "seq")).transpose()?,
            ke: has("ke").then(|| get_recurrent(doc, "ke")).transpose()?,
        })
    }

    /// File text; `digest` names the config that produced the models.
    pub fn to_text(&self, digest: Option<&str>) -> String {
        format!(
            "{MODEL_FORMAT}\ndigest {}\n{}",
            digest.unwrap_or("-"),
            self.to_kv().render()
        )
    }

    /// Parses a model file; returns the models and the recorded digest.
    pub fn from_text(text: &str) -> Result<(Self, Option<String>)> {
        let mut lines = text.splitn(3, '\n');
        match lines.next().map(str::trim_end) {
            Some(MODEL_FORMAT) => {}
            Some(other) => {
                return Err(Error::parse(
                    1,
                    format!("expected `{MODEL_FORMAT}`, found `{other}`"),
                ))
            }
            None => return Err(Error::parse(1, "empty file")),
        }
        let digest = match lines
            .next()
            .and_then(|l| l.trim_end().strip_prefix("digest "))
        {
            Some("-") => None,
            Some(d) => Some(d.trim().to_string()),
            None => return Err(Error::parse(2, "expected `digest <hex>`")),
        };
        let body = KvDoc::parse(lines.next().unwrap_or("")).map_err(|e| match e {
            Error::Parse { line, reason } => Error::parse(line + 2, reason),
            e => e,
        })?;
        Ok((Self::from_kv(&body)?, digest))
    }

    pub fn is_empty(&self) -> bool {
        self.cf.is_none() && self.seq.is_none() && self.ke.is_none()
    }
}
