//! Subcommand implementations.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use prefcore::engine::{Engine, EngineConfig, TrainedModels};
use prefcore::evaluation::{
    evaluate_agent, evaluate_pointwise, evaluate_ranking, run_seed, MetricReport,
};
use prefcore::kv::KvDoc;
use prefcore::log::InteractionLog;
use prefcore::profiling::{
    cf_train, ke_train_with, seq_train_with, CfModel, InitialState, RecurrentModel,
};
use prefcore::ranking::{
    ideal_lists_from_log, pairs_from_log, pairwise_accuracy, train_listwise, train_pairwise,
    RankedList,
};
use prefcore::responsible::{
    cf_train_ips, estimate_propensities, federated_round, unlearn, unlearn_seq, FederatedConfig,
    ForgetRequest, LocalClient,
};
use prefcore::simulator::{
    run_scenario, Agent, ObservationEvent, PopularityPolicy, RandomPolicy, World,
};
use prefcore::snapshot::ModelSnapshot;
use prefcore::types::{ActionCatalog, ActionEntry, ActionId, ContextTags, UserId};

use crate::config::{report_text, RunConfig};
use crate::failure::{emit, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Policy {
    Engine,
    Popularity,
    Random,
}

impl Policy {
    fn name(self) -> &'static str {
        match self {
            Policy::Engine => "engine",
            Policy::Popularity => "popularity",
            Policy::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Objective {
    Pointwise,
    Pairwise,
    Listwise,
    Ips,
}

impl Objective {
    fn name(self) -> &'static str {
        match self {
            Objective::Pointwise => "pointwise",
            Objective::Pairwise => "pairwise",
            Objective::Listwise => "listwise",
            Objective::Ips => "ips",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PropensityChoice {
    NaiveBayes,
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn read_log(path: &Path) -> Result<InteractionLog, Failure> {
    let (log, _) = InteractionLog::from_text(&read_text(path)?)?;
    Ok(log)
}

fn read_snapshot(path: &Path) -> Result<ModelSnapshot, Failure> {
    let (snap, _) = ModelSnapshot::from_text(&read_text(path)?)?;
    Ok(snap)
}

fn with_run_seed(config: &EngineConfig, seed: u64) -> EngineConfig {
    let mut c = config.clone();
    c.seed = seed;
    c.cf.seed = seed;
    c.seq.seed = seed;
    c
}

fn make_agent(
    policy: Policy,
    config: &EngineConfig,
    world: &World,
    seed: u64,
) -> prefcore::Result<Box<dyn Agent>> {
    Ok(match policy {
        Policy::Engine => Box::new(Engine::new(
            with_run_seed(config, seed),
            world.catalog.clone(),
        )?),
        Policy::Popularity => Box::new(PopularityPolicy::new(world.catalog.clone())),
        Policy::Random => Box::new(RandomPolicy::new(world.catalog.clone(), seed)),
    })
}

pub struct SimulateArgs {
    pub preset: Option<String>,
    pub episodes: usize,
    pub policy: Policy,
    pub out: PathBuf,
}

/// Runs episodes and writes one log per episode plus a report.
pub fn simulate(run: &RunConfig, args: &SimulateArgs) -> Result<(), Failure> {
    let scenario = run.scenario(args.preset.as_deref())?;
    let mut cmd = KvDoc::new();
    cmd.set("run.command", "simulate");
    cmd.set("run.episodes", args.episodes);
    cmd.set("run.policy", args.policy.name());
    let digest = run.digest(&cmd, &[&scenario.to_kv()]);
    fs::create_dir_all(&args.out).map_err(|e| Failure::io(&args.out, e))?;

    let mut report = cmd.clone();
    report.set("run.seed", run.seed);
    if args.episodes == 0 {
        warn!("--episodes 0: writing an empty log");
        write_text(
            &args.out.join("log.txt"),
            &InteractionLog::new().to_text(Some(&digest)),
        )?;
    }
    for e in 0..args.episodes {
        let seed = run_seed(run.seed, e);
        let world = World::new(&scenario, seed)?;
        let mut agent = make_agent(args.policy, &run.engine, &world, seed)?;
        let episode = run_scenario(&scenario, &mut agent, seed)?;
        let name = if args.episodes == 1 {
            "log.txt".to_string()
        } else {
            format!("log-{e}.txt")
        };
        write_text(&args.out.join(&name), &episode.log.to_text(Some(&digest)))?;
        info!(
            "episode {e}: {} records, cumulative feedback {:.3}",
            episode.log.len(),
            episode.report.cumulative_feedback
        );
        let kv = episode.report.to_kv();
        if args.episodes == 1 {
            report.merge(&kv);
        } else {
            for (k, v) in kv.iter() {
                report.set(format!("run{e}.{k}"), v);
            }
        }
    }
    let text = report_text(&digest, &report);
    write_text(&args.out.join("report.txt"), &text)?;
    emit(&report.render())?;
    Ok(())
}

pub struct TrainArgs {
    pub log: PathBuf,
    pub objective: Objective,
    pub propensity: Option<PropensityChoice>,
    pub out: PathBuf,
}

fn log_catalog(log: &InteractionLog, dim: usize) -> ActionCatalog {
    ActionCatalog::new(
        log.actions()
            .into_iter()
            .map(|a| ActionEntry::new(a, format!("action-{a}"), dim)),
    )
}

fn skip_empty(r: prefcore::Result<RecurrentModel>) -> prefcore::Result<Option<RecurrentModel>> {
    match r {
        Ok(m) => Ok(Some(m)),
        Err(prefcore::Error::Empty(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Trains the factorization model with `objective` and the enabled recurrent
/// models, then writes a snapshot.
pub fn train(run: &RunConfig, args: &TrainArgs) -> Result<String, Failure> {
    let cfg = &run.engine;
    let propensity = args.propensity.is_some() || cfg.propensity;
    if args.objective == Objective::Ips && !propensity {
        return Err(Failure::Usage(
            "objective `ips` needs a propensity source: pass --propensity naive-bayes \
             (estimate_propensities) or set propensity.enabled = true"
                .into(),
        ));
    }
    let log = read_log(&args.log)?;
    let mut cmd = KvDoc::new();
    cmd.set("run.command", "train");
    cmd.set("run.objective", args.objective.name());
    let digest = run.digest(&cmd, &[]);

    let cf = match args.objective {
        Objective::Pointwise => cf_train(&log, &cfg.cf, None)?,
        Objective::Ips => {
            let table = estimate_propensities(&log)?;
            if let Some(w) = &table.warning {
                warn!("{w}");
            }
            cf_train_ips(&log, &table, &cfg.cf)?
        }
        Objective::Pairwise => train_pairwise(
            CfModel::init(&log.users(), &log.actions(), &cfg.cf),
            &pairs_from_log(&log),
            &run.rank_train()?,
        )?,
        Objective::Listwise => train_listwise(
            CfModel::init(&log.users(), &log.actions(), &cfg.cf),
            &ideal_lists_from_log(&log),
            &run.rank_train()?,
        )?,
    };
    info!("factorization: {} objective", args.objective.name());
    let init_cf = (cfg.seq_init == InitialState::FromCf).then_some(&cf);
    let seq = if cfg.profilers.seq {
        skip_empty(seq_train_with(&log, &[], &cfg.seq, init_cf))?
    } else {
        None
    };
    let ke = if cfg.profilers.ke {
        skip_empty(ke_train_with(
            &log,
            &log_catalog(&log, cfg.dim),
            &cfg.seq,
            init_cf,
        ))?
    } else {
        None
    };
    let snap = ModelSnapshot {
        cf: Some(cf),
        seq,
        ke,
    };
    write_text(&args.out, &snap.to_text(Some(&digest)))?;
    emit(&format!("digest {digest}\n"))?;
    Ok(digest)
}

pub struct EvaluateArgs {
    pub model: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub k: usize,
    pub threshold: f64,
    pub preset: Option<String>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub policy: Policy,
    pub out: Option<PathBuf>,
}

/// Offline metrics for a snapshot on a test log, or policy metrics over
/// simulated episodes when a preset is given.
pub fn evaluate(run: &RunConfig, args: &EvaluateArgs) -> Result<(), Failure> {
    let mut cmd = KvDoc::new();
    cmd.set("run.command", "evaluate");
    let (metrics, digest) = if args.preset.is_some() {
        let scenario = run.scenario(args.preset.as_deref())?;
        let seeds = if args.seeds.is_empty() {
            vec![run.seed]
        } else {
            args.seeds.clone()
        };
        cmd.set("run.episodes", args.episodes);
        cmd.set("run.policy", args.policy.name());
        cmd.set(
            "run.seeds",
            seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        let digest = run.digest(&cmd, &[&scenario.to_kv()]);
        let policy = args.policy;
        let engine = &run.engine;
        let report = evaluate_agent(
            |world: &World, seed| make_agent(policy, engine, world, seed),
            &scenario,
            args.episodes,
            &seeds,
        )?;
        (report.to_metrics()?, digest)
    } else {
        let (Some(model), Some(test)) = (&args.model, &args.test) else {
            return Err(Failure::Usage(
                "evaluate needs --model and --test, or --preset".into(),
            ));
        };
        cmd.set("run.k", args.k);
        cmd.set("run.threshold", args.threshold);
        let digest = run.digest(&cmd, &[]);
        let snap = read_snapshot(model)?;
        let cf = snap
            .cf
            .ok_or(prefcore::Error::Empty("factorization model"))?;
        let test = read_log(test)?;
        let mut m = MetricReport::new();
        m.insert("rmse", evaluate_pointwise(&cf, &test)?)?;
        evaluate_ranking(&cf, &test, args.k, args.threshold)?.add_to(&mut m)?;
        let pairs = pairs_from_log(&test);
        if !pairs.is_empty() {
            m.insert("pairwise-accuracy", pairwise_accuracy(&cf, &pairs)?)?;
        }
        m.meta("test-records", test.len());
        (m, digest)
    };
    let body = metrics.to_kv();
    if let Some(out) = &args.out {
        write_text(out, &report_text(&digest, &body))?;
    }
    emit(&metrics.render_columns())?;
    Ok(())
}

pub struct RankArgs {
    pub model: PathBuf,
    pub user: u32,
    pub log: Option<PathBuf>,
    pub context: Option<String>,
    pub k: Option<usize>,
    pub out: Option<PathBuf>,
}

fn snapshot_catalog(snap: &ModelSnapshot, dim: usize) -> ActionCatalog {
    let mut ids: BTreeSet<ActionId> = BTreeSet::new();
    if let Some(m) = &snap.cf {
        ids.extend(m.actions());
    }
    for m in [&snap.seq, &snap.ke].into_iter().flatten() {
        ids.extend(m.actions());
    }
    ids.remove(&ActionId::NO_OP);
    ActionCatalog::new(
        ids.into_iter()
            .map(|a| ActionEntry::new(a, format!("action-{a}"), dim)),
    )
}

/// Ranked candidates for one user, as tab-separated rows.
pub fn rank(run: &RunConfig, args: &RankArgs) -> Result<(), Failure> {
    let snap = read_snapshot(&args.model)?;
    let mut cfg = run.engine.clone();
    if let Some(k) = args.k {
        cfg.retrieve_k = k;
    }
    cfg.validate()?;
    let catalog = snapshot_catalog(&snap, cfg.dim);
    let log = match &args.log {
        Some(p) => read_log(p)?,
        None => InteractionLog::new(),
    };
    let mut cmd = KvDoc::new();
    cmd.set("run.command", "rank");
    cmd.set("run.user", args.user);
    cmd.set("run.k", cfg.retrieve_k);
    let digest = run.digest(&cmd, &[]);
    let mut engine = Engine::new(cfg, catalog)?;
    engine.restore(
        &log,
        TrainedModels {
            cf: snap.cf,
            seq: snap.seq,
            ke: snap.ke,
            ..TrainedModels::default()
        },
    )?;
    let obs = ObservationEvent {
        user: UserId(args.user),
        tick: 0,
        context: args
            .context
            .as_deref()
            .map(|c| ContextTags::parse_separated(c, ','))
            .unwrap_or_default(),
    };
    let decision = engine.propose(&obs)?;
    for line in &decision.provenance {
        debug!("{line}");
    }
    let list = RankedList {
        user: obs.user,
        entries: decision.candidates,
        ideal: None,
    };
    let tsv = list.to_tsv();
    if let Some(out) = &args.out {
        write_text(out, &format!("prefcore-rank/1\ndigest {digest}\n{tsv}"))?;
    }
    emit(&tsv)?;
    Ok(())
}

pub struct UnlearnArgs {
    pub model: PathBuf,
    pub log: PathBuf,
    pub user: u32,
    pub actions: Vec<u32>,
    pub from: Option<u64>,
    pub to: Option<u64>,
    pub beta: f64,
    pub out: PathBuf,
}

/// Removes a user's selected records from every model in the snapshot and
/// prints one audit block per model.
pub fn unlearn_cmd(run: &RunConfig, args: &UnlearnArgs) -> Result<(), Failure> {
    let mut snap = read_snapshot(&args.model)?;
    let log = read_log(&args.log)?;
    let config = run.unlearn()?;
    let mut request = ForgetRequest::new(UserId(args.user)).with_beta(args.beta);
    if !args.actions.is_empty() {
        request = request.with_actions(args.actions.iter().map(|&a| ActionId(a)));
    }
    if args.from.is_some() || args.to.is_some() {
        request = request.with_time_range(args.from.unwrap_or(0)..=args.to.unwrap_or(u64::MAX));
    }
    let mut cmd = KvDoc::new();
    cmd.set("run.command", "unlearn");
    cmd.set("run.user", args.user);
    cmd.set("run.beta", args.beta);
    let digest = run.digest(&cmd, &[]);
    let mut audits = Vec::new();
    if let Some(cf) = &snap.cf {
        let (m, audit) = unlearn(cf, &log, &request, &config)?;
        snap.cf = Some(m);
        audits.push(audit);
    }
    for slot in [&mut snap.seq, &mut snap.ke] {
        if let Some(model) = slot.as_ref() {
            let (m, audit) = unlearn_seq(model, &log, &request, &config)?;
            *slot = Some(m);
            audits.push(audit);
        }
    }
    if audits.is_empty() {
        return Err(prefcore::Error::Empty("snapshot models").into());
    }
    write_text(&args.out, &snap.to_text(Some(&digest)))?;
    for a in audits {
        emit(&a.render())?;
    }
    Ok(())
}

pub struct FederateArgs {
    pub shards: Vec<PathBuf>,
    pub rounds: usize,
    pub local_steps: usize,
    pub out: PathBuf,
}

/// Federated averaging of the factorization model, one client per shard.
pub fn federate(run: &RunConfig, args: &FederateArgs) -> Result<(), Failure> {
    if args.shards.is_empty() {
        return Err(Failure::Usage("federate needs at least one --shard".into()));
    }
    let logs = args
        .shards
        .iter()
        .map(|p| read_log(p))
        .collect::<Result<Vec<_>, _>>()?;
    let users: Vec<UserId> = logs.iter().flat_map(InteractionLog::users).collect();
    let actions: Vec<ActionId> = logs.iter().flat_map(InteractionLog::actions).collect();
    let mut cmd = KvDoc::new();
    cmd.set("run.command", "federate");
    cmd.set("run.clients", logs.len());
    cmd.set("run.rounds", args.rounds);
    cmd.set("run.local_steps", args.local_steps);
    let digest = run.digest(&cmd, &[]);
    let fed = FederatedConfig {
        local_steps: args.local_steps,
        step: run.engine.cf.step,
        parallel: true,
    };
    let clients: Vec<LocalClient> = logs.into_iter().map(LocalClient::new).collect();
    let mut global = CfModel::init(&users, &actions, &run.engine.cf);
    for r in 0..args.rounds {
        global = federated_round(&global, &clients, &fed)?;
        info!("round {r} done");
    }
    let snap = ModelSnapshot {
        cf: Some(global),
        ..ModelSnapshot::default()
    };
    write_text(&args.out, &snap.to_text(Some(&digest)))?;
    emit(&format!("digest {digest}\n"))?;
    Ok(())
}
