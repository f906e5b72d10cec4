//! Short-term and knowledge-enhanced preferences: a gated recurrent cell that
//! folds each (action, feedback) step into the user state, trained with
//! truncated backpropagation through time on next-step squared error.
//!
//! Cell, with input `x = [q_a ; f]`:
//!
//! ```text
//! z  = σ(Wz x + Uz h + bz)
//! r  = σ(Wr x + Ur h + br)
//! c  = tanh(Wc x + Uc (r ∘ h) + bc)
//! h' = (1 − z) ∘ h + z ∘ c
//! ```
//!
//! The state that scores step `t` is built from steps `1..t-1` only; step 1 is
//! scored with the initial state.

use std::borrow::Borrow;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, hadamard, Matrix};
use crate::log::InteractionLog;
use crate::profiling::cf::CfModel;
use crate::types::{ActionCatalog, ActionId, FeedbackChannel, InteractionRecord, UserId};

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub wz: Matrix,
    pub uz: Matrix,
    pub bz: Vec<f64>,
    pub wr: Matrix,
    pub ur: Matrix,
    pub br: Vec<f64>,
    pub wc: Matrix,
    pub uc: Matrix,
    pub bc: Vec<f64>,
}

/// Intermediate values of one forward step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
    g: Vec<f64>,
}

impl GruCell {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        let w = || Matrix::zeros(hidden, input);
        let u = || Matrix::zeros(hidden, hidden);
        Self {
            wz: w(),
            uz: u(),
            bz: vec![0.0; hidden],
            wr: w(),
            ur: u(),
            br: vec![0.0; hidden],
            wc: w(),
            uc: u(),
            bc: vec![0.0; hidden],
        }
    }

    /// Weights uniform(−s, s), biases zero.
    fn random(hidden: usize, input: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut cell = Self::zeros(hidden, input);
        cell.wz = Matrix::uniform(hidden, input, scale, rng);
        cell.uz = Matrix::uniform(hidden, hidden, scale, rng);
        cell.wr = Matrix::uniform(hidden, input, scale, rng);
        cell.ur = Matrix::uniform(hidden, hidden, scale, rng);
        cell.wc = Matrix::uniform(hidden, input, scale, rng);
        cell.uc = Matrix::uniform(hidden, hidden, scale, rng);
        cell
    }

    pub fn hidden(&self) -> usize {
        self.bz.len()
    }

    pub fn input(&self) -> usize {
        self.wz.cols()
    }

    fn slices(&self) -> [&[f64]; 9] {
        [
            self.wz.as_slice(),
            self.uz.as_slice(),
            &self.bz,
            self.wr.as_slice(),
            self.ur.as_slice(),
            &self.br,
            self.wc.as_slice(),
            self.uc.as_slice(),
            &self.bc,
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.wz.as_mut_slice(),
            self.uz.as_mut_slice(),
            &mut self.bz,
            self.wr.as_mut_slice(),
            self.ur.as_mut_slice(),
            &mut self.br,
            self.wc.as_mut_slice(),
            self.uc.as_mut_slice(),
            &mut self.bc,
        ]
    }

    pub fn forward(&self, h: &[f64], x: &[f64]) -> (Vec<f64>, StepCache) {
        let d = self.hidden();
        let mut az = self.bz.clone();
        let mut ar = self.br.clone();
        let mut ac = self.bc.clone();
        let mut tmp = vec![0.0; d];
        self.wz.matvec(x, &mut tmp);
        axpy(1.0, &tmp, &mut az);
        self.uz.matvec(h, &mut tmp);
        axpy(1.0, &tmp, &mut az);
        self.wr.matvec(x, &mut tmp);
        axpy(1.0, &tmp, &mut ar);
        self.ur.matvec(h, &mut tmp);
        axpy(1.0, &tmp, &mut ar);
        let z: Vec<f64> = az.iter().map(|&v| sigmoid(v)).collect();
        let r: Vec<f64> = ar.iter().map(|&v| sigmoid(v)).collect();
        let g = hadamard(&r, h);
        self.wc.matvec(x, &mut tmp);
        axpy(1.0, &tmp, &mut ac);
        self.uc.matvec(&g, &mut tmp);
        axpy(1.0, &tmp, &mut ac);
        let c: Vec<f64> = ac.iter().map(|v| v.tanh()).collect();
        let next = (0..d).map(|i| (1.0 - z[i]) * h[i] + z[i] * c[i]).collect();
        (
            next,
            StepCache {
                x: x.to_vec(),
                h: h.to_vec(),
                z,
                r,
                c,
                g,
            },
        )
    }

    pub fn step(&self, h: &[f64], x: &[f64]) -> Vec<f64> {
        self.forward(h, x).0
    }

    /// Backpropagates `dh_next`; accumulates parameter gradients into `grad`
    /// and returns `(dh, dx)`.
    pub fn backward(
        &self,
        cache: &StepCache,
        dh_next: &[f64],
        grad: &mut GruCell,
    ) -> (Vec<f64>, Vec<f64>) {
        let d = self.hidden();
        let StepCache { x, h, z, r, c, g } = cache;
        let mut da_z = vec![0.0; d];
        let mut da_c = vec![0.0; d];
        let mut dh: Vec<f64> = (0..d).map(|i| dh_next[i] * (1.0 - z[i])).collect();
        for i in 0..d {
            da_z[i] = dh_next[i] * (c[i] - h[i]) * z[i] * (1.0 - z[i]);
            da_c[i] = dh_next[i] * z[i] * (1.0 - c[i] * c[i]);
        }
        grad.wc.rank1_acc(1.0, &da_c, x);
        grad.uc.rank1_acc(1.0, &da_c, g);
        axpy(1.0, &da_c, &mut grad.bc);
        let mut dg = vec![0.0; d];
        self.uc.matvec_t_acc(&da_c, &mut dg);
        let da_r: Vec<f64> = (0..d).map(|i| dg[i] * h[i] * r[i] * (1.0 - r[i])).collect();
        for i in 0..d {
            dh[i] += dg[i] * r[i];
        }
        self.uz.matvec_t_acc(&da_z, &mut dh);
        self.ur.matvec_t_acc(&da_r, &mut dh);
        grad.wz.rank1_acc(1.0, &da_z, x);
        grad.uz.rank1_acc(1.0, &da_z, h);
        axpy(1.0, &da_z, &mut grad.bz);
        grad.wr.rank1_acc(1.0, &da_r, x);
        grad.ur.rank1_acc(1.0, &da_r, h);
        axpy(1.0, &da_r, &mut grad.br);
        let mut dx = vec![0.0; x.len()];
        self.wz.matvec_t_acc(&da_z, &mut dx);
        self.wr.matvec_t_acc(&da_r, &mut dx);
        self.wc.matvec_t_acc(&da_c, &mut dx);
        (dh, dx)
    }
}

/// How the user state sequence is seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialState {
    /// One trainable vector shared by all users.
    Shared,
    /// Each user's long-term embedding, frozen.
    FromCf,
}

/// How knowledge vectors combine with action embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// `q ∘ k`
    Hadamard,
    /// `M [q ; k]` with a trainable `d × 2d` projection.
    ConcatProject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentConfig {
    pub dim: usize,
    pub epochs: usize,
    pub step: f64,
    pub decay: f64,
    pub l2: f64,
    pub seed: u64,
    pub init_scale: f64,
    /// Steps per truncated-BPTT chunk.
    pub truncation: usize,
    /// Chunk gradients with a larger L2 norm are rescaled to this norm; 0 disables.
    pub clip: f64,
    pub bind: BindMode,
}

impl Default for RecurrentConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            epochs: 30,
            step: 0.05,
            decay: 0.99,
            l2: 1e-4,
            seed: 0,
            init_scale: 0.1,
            truncation: 32,
            clip: 5.0,
            bind: BindMode::Hadamard,
        }
    }
}

/// All trainable tensors; gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentParams {
    pub embed: Matrix,
    pub cell: GruCell,
    pub h0: Vec<f64>,
    pub proj: Option<Matrix>,
}

impl RecurrentParams {
    pub fn zeros_like(other: &Self) -> Self {
        Self {
            embed: Matrix::zeros(other.embed.rows(), other.embed.cols()),
            cell: GruCell::zeros(other.cell.hidden(), other.cell.input()),
            h0: vec![0.0; other.h0.len()],
            proj: other
                .proj
                .as_ref()
                .map(|m| Matrix::zeros(m.rows(), m.cols())),
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![self.embed.as_slice()];
        v.extend(self.cell.slices());
        v.push(&self.h0);
        if let Some(p) = &self.proj {
            v.push(p.as_slice());
        }
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![self.embed.as_mut_slice()];
        v.extend(self.cell.slices_mut());
        v.push(&mut self.h0);
        if let Some(p) = &mut self.proj {
            v.push(p.as_mut_slice());
        }
        v
    }

    /// Every parameter, flattened in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        self.slices().into_iter().flatten().copied().collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.slices().into_iter().map(|s| dot(s, s)).sum()
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            axpy(alpha, b, a);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().into_iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBinding {
    pub mode: BindMode,
    /// Row per model action, dimension d.
    pub vectors: Matrix,
}

/// Recurrent preference model. Without a knowledge binding it is the
/// short-term (sequential) model; with one it is the knowledge-enhanced model.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentModel {
    actions: Vec<ActionId>,
    action_index: BTreeMap<ActionId, usize>,
    pub params: RecurrentParams,
    pub init: InitialState,
    /// Frozen per-user initial states when `init == FromCf`.
    pub user_init: BTreeMap<UserId, Vec<f64>>,
    pub binding: Option<KnowledgeBinding>,
    pub config: RecurrentConfig,
    pub loss_history: Vec<f64>,
}

pub type SeqModel = RecurrentModel;
pub type KeModel = RecurrentModel;

/// One user's resolved sequence: (action row, feedback) in time order.
#[derive(Debug, Clone)]
pub struct TrainSequence {
    pub user: UserId,
    pub steps: Vec<(usize, f64)>,
    /// Per-step weight on the squared error; 1 for ordinary training.
    pub weights: Vec<f64>,
    /// Whether each step feeds the recurrent state; see [`advance_flags`].
    pub advance: Vec<bool>,
}

impl RecurrentModel {
    /// Fresh model. Draw order: embeddings, cell, shared initial state,
    /// projection (only for concatenation binding).
    pub fn init(
        actions: &[ActionId],
        knowledge: Option<(BindMode, Matrix)>,
        config: &RecurrentConfig,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::init_with_rng(actions, knowledge, config, &mut rng)
    }

    fn init_with_rng(
        actions: &[ActionId],
        knowledge: Option<(BindMode, Matrix)>,
        config: &RecurrentConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = config.dim;
        let s = config.init_scale;
        let embed = Matrix::uniform(actions.len(), d, s, rng);
        let cell = GruCell::random(d, d + 1, s, rng);
        let h0 = Matrix::uniform(1, d, s, rng).as_slice().to_vec();
        let proj = match &knowledge {
            Some((BindMode::ConcatProject, _)) => Some(Matrix::uniform(d, 2 * d, s, rng)),
            _ => None,
        };
        Self {
            actions: actions.to_vec(),
            action_index: actions.iter().enumerate().map(|(i, &a)| (a, i)).collect(),
            params: RecurrentParams {
                embed,
                cell,
                h0,
                proj,
            },
            init: InitialState::Shared,
            user_init: BTreeMap::new(),
            binding: knowledge.map(|(mode, vectors)| KnowledgeBinding { mode, vectors }),
            config: config.clone(),
            loss_history: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.params.h0.len()
    }

    pub fn actions(&self) -> &[ActionId] {
        &self.actions
    }

    pub fn action_row(&self, a: ActionId) -> Option<usize> {
        self.action_index.get(&a).copied()
    }

    pub fn is_knowledge_enhanced(&self) -> bool {
        self.binding.is_some()
    }

    /// Effective action embedding: `q`, `q ∘ k`, or `M [q ; k]`.
    pub fn action_embedding_row(&self, j: usize) -> Vec<f64> {
        let q = self.params.embed.row(j);
        match &self.binding {
            None => q.to_vec(),
            Some(b) => match b.mode {
                BindMode::Hadamard => hadamard(q, b.vectors.row(j)),
                BindMode::ConcatProject => {
                    let m = self.params.proj.as_ref().expect("projection present");
                    let mut qk = q.to_vec();
                    qk.extend_from_slice(b.vectors.row(j));
                    let mut out = vec![0.0; self.dim()];
                    m.matvec(&qk, &mut out);
                    out
                }
            },
        }
    }

    pub fn action_embedding(&self, a: ActionId) -> Result<Vec<f64>> {
        let j = self.action_row(a).ok_or(Error::UnknownAction(a))?;
        Ok(self.action_embedding_row(j))
    }

    fn embedding_backward(&self, j: usize, d_eff: &[f64], grad: &mut RecurrentParams) {
        match &self.binding {
            None => axpy(1.0, d_eff, grad.embed.row_mut(j)),
            Some(b) => match b.mode {
                BindMode::Hadamard => {
                    axpy(
                        1.0,
                        &hadamard(d_eff, b.vectors.row(j)),
                        grad.embed.row_mut(j),
                    );
                }
                BindMode::ConcatProject => {
                    let m = self.params.proj.as_ref().expect("projection present");
                    let mut qk = self.params.embed.row(j).to_vec();
                    qk.extend_from_slice(b.vectors.row(j));
                    grad.proj
                        .as_mut()
                        .expect("projection gradient present")
                        .rank1_acc(1.0, d_eff, &qk);
                    let mut dqk = vec![0.0; qk.len()];
                    m.matvec_t_acc(d_eff, &mut dqk);
                    let d = self.dim();
                    axpy(1.0, &dqk[..d], grad.embed.row_mut(j));
                }
            },
        }
    }

    fn input(q_eff: &[f64], f: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(q_eff.len() + 1);
        x.extend_from_slice(q_eff);
        x.push(f);
        x
    }

    /// Initial state for a user: the shared vector, or the user's long-term
    /// embedding when the model was trained with `FromCf`.
    pub fn initial_state(&self, user: UserId, p_cf: &[f64]) -> Vec<f64> {
        match self.init {
            InitialState::Shared => self.params.h0.clone(),
            InitialState::FromCf => self
                .user_init
                .get(&user)
                .cloned()
                .unwrap_or_else(|| p_cf.to_vec()),
        }
    }

    /// Folds one observed (action, feedback) step into `state`.
    pub fn advance(&self, state: &[f64], action: ActionId, feedback: f64) -> Result<Vec<f64>> {
        let q = self.action_embedding(action)?;
        seq_step(self, state, &q, feedback)
    }

    /// Predicted feedback of `action` from `state`.
    pub fn score(&self, state: &[f64], action: ActionId) -> Result<f64> {
        let q = self.action_embedding(action)?;
        crate::linalg::checked_dot(state, &q)
    }

    /// Replays a whole (action, feedback) sequence from `init`.
    pub fn replay(&self, init: &[f64], seq: &[(ActionId, f64)]) -> Result<Vec<f64>> {
        let mut h = init.to_vec();
        for &(a, f) in seq {
            h = self.advance(&h, a, f)?;
        }
        Ok(h)
    }

    /// Resolves a log into per-user training sequences (length ≥ 2 only).
    pub fn sequences(&self, log: &InteractionLog) -> Result<Vec<TrainSequence>> {
        let mut out = Vec::new();
        for (user, recs) in log.sequences() {
            if recs.len() < 2 {
                continue;
            }
            out.push(self.resolve(user, &recs)?);
        }
        Ok(out)
    }

    /// One user's records (already in time order) as a unit-weight sequence.
    pub fn resolve(&self, user: UserId, records: &[&InteractionRecord]) -> Result<TrainSequence> {
        let steps = records
            .iter()
            .map(|r| {
                self.action_row(r.action)
                    .map(|j| (j, r.value()))
                    .ok_or(Error::UnknownAction(r.action))
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = vec![1.0; steps.len()];
        let advance = advance_flags(records);
        Ok(TrainSequence {
            user,
            steps,
            weights,
            advance,
        })
    }

    fn start_state(&self, user: UserId) -> (Vec<f64>, bool) {
        match self.init {
            InitialState::Shared => (self.params.h0.clone(), true),
            InitialState::FromCf => (
                self.user_init
                    .get(&user)
                    .cloned()
                    .unwrap_or_else(|| vec![0.0; self.dim()]),
                false,
            ),
        }
    }

    /// Loss of one chunk starting from `h_start`, the state after the chunk,
    /// and (optionally) gradients with backpropagation confined to the chunk.
    fn chunk(
        &self,
        steps: &[(usize, f64)],
        weights: &[f64],
        advance: &[bool],
        h_start: Vec<f64>,
        grad: Option<(&mut RecurrentParams, bool)>,
    ) -> (f64, Vec<f64>) {
        let n = steps.len();
        let q: Vec<Vec<f64>> = steps
            .iter()
            .map(|&(j, _)| self.action_embedding_row(j))
            .collect();
        let mut states = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n.saturating_sub(1));
        states.push(h_start);
        for i in 0..n - 1 {
            if advance[i] {
                let (next, cache) = self
                    .params
                    .cell
                    .forward(&states[i], &Self::input(&q[i], steps[i].1));
                states.push(next);
                caches.push(Some(cache));
            } else {
                states.push(states[i].clone());
                caches.push(None);
            }
        }
        let next_state = if advance[n - 1] {
            self.params
                .cell
                .step(&states[n - 1], &Self::input(&q[n - 1], steps[n - 1].1))
        } else {
            states[n - 1].clone()
        };
        let errs: Vec<f64> = (0..n)
            .map(|i| dot(&states[i], &q[i]) - steps[i].1)
            .collect();
        let loss = errs.iter().zip(weights).map(|(e, w)| w * e * e).sum();

        if let Some((grad, h0_trainable)) = grad {
            let d = self.dim();
            let mut dq: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
            let mut carry = vec![0.0; d];
            for i in (0..n).rev() {
                let mut dh = std::mem::take(&mut carry);
                if dh.is_empty() {
                    dh = vec![0.0; d];
                }
                let c = 2.0 * weights[i] * errs[i];
                axpy(c, &q[i], &mut dh);
                axpy(c, &states[i], &mut dq[i]);
                if i > 0 {
                    match &caches[i - 1] {
                        Some(cache) => {
                            let (dh_prev, dx) =
                                self.params.cell.backward(cache, &dh, &mut grad.cell);
                            axpy(1.0, &dx[..d], &mut dq[i - 1]);
                            carry = dh_prev;
                        }
                        None => carry = dh,
                    }
                } else if h0_trainable {
                    axpy(1.0, &dh, &mut grad.h0);
                }
            }
            for (i, &(j, _)) in steps.iter().enumerate() {
                self.embedding_backward(j, &dq[i], grad);
            }
        }
        (loss, next_state)
    }

    /// `Σ_u Σ_t (f_t − h_t·q_t)² + l2 ‖θ‖²` with full backpropagation.
    pub fn objective_and_gradient(&self, seqs: &[TrainSequence]) -> (f64, RecurrentParams) {
        let (mut loss, mut grad) = self.data_objective_and_gradient(seqs);
        loss += self.config.l2 * self.params.sq_norm();
        grad.add_scaled(2.0 * self.config.l2, &self.params);
        (loss, grad)
    }

    /// Weighted squared-error term alone, no regularizer.
    pub fn data_objective_and_gradient(&self, seqs: &[TrainSequence]) -> (f64, RecurrentParams) {
        let mut grad = RecurrentParams::zeros_like(&self.params);
        let mut loss = 0.0;
        for s in seqs {
            let (h, trainable) = self.start_state(s.user);
            loss += self
                .chunk(
                    &s.steps,
                    &s.weights,
                    &s.advance,
                    h,
                    Some((&mut grad, trainable)),
                )
                .0;
        }
        (loss, grad)
    }

    pub fn data_objective(&self, seqs: &[TrainSequence]) -> f64 {
        seqs.iter()
            .map(|s| {
                self.chunk(
                    &s.steps,
                    &s.weights,
                    &s.advance,
                    self.start_state(s.user).0,
                    None,
                )
                .0
            })
            .sum()
    }

    pub fn objective(&self, seqs: &[TrainSequence]) -> f64 {
        self.data_objective(seqs) + self.config.l2 * self.params.sq_norm()
    }

    /// Continues training from the current parameters for `config.epochs`
    /// more epochs on `log`, whose actions must all be known. With `cf`, the
    /// frozen initial states are refreshed from its user embeddings.
    pub fn refit(&self, log: &InteractionLog, cf: Option<&CfModel>) -> Result<Self> {
        let mut model = self.clone();
        if let (InitialState::FromCf, Some(cf)) = (model.init, cf) {
            model.user_init = cf
                .users()
                .iter()
                .filter_map(|&u| cf.user_vector(u).map(|p| (u, p.to_vec())))
                .collect();
        }
        let seqs = model.sequences(log)?;
        if seqs.is_empty() {
            return Err(Error::Empty("user sequences of length >= 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ self.loss_history.len() as u64);
        model.fit(&seqs, &mut rng)?;
        Ok(model)
    }

    fn fit(&mut self, seqs: &[TrainSequence], rng: &mut ChaCha8Rng) -> Result<()> {
        let trunc = self.config.truncation.max(1);
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        let mut step = self.config.step;
        let l2 = self.config.l2;
        for epoch in 0..self.config.epochs {
            order.shuffle(rng);
            for &si in &order {
                let s = &seqs[si];
                let (mut h, trainable) = self.start_state(s.user);
                let chunks = s
                    .steps
                    .chunks(trunc)
                    .zip(s.weights.chunks(trunc))
                    .zip(s.advance.chunks(trunc));
                for (ci, ((chunk, w), adv)) in chunks.enumerate() {
                    let mut grad = RecurrentParams::zeros_like(&self.params);
                    let (_, next) =
                        self.chunk(chunk, w, adv, h, Some((&mut grad, trainable && ci == 0)));
                    grad.add_scaled(2.0 * l2, &self.params);
                    let n = grad.sq_norm().sqrt();
                    let scale = if self.config.clip > 0.0 && n > self.config.clip {
                        self.config.clip / n
                    } else {
                        1.0
                    };
                    self.params.add_scaled(-step * scale, &grad);
                    h = next;
                }
            }
            let loss = self.objective(seqs);
            if !loss.is_finite() || !self.params.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            self.loss_history.push(loss);
            step *= self.config.decay;
        }
        Ok(())
    }
}

/// A record immediately followed by a follow-up request was rejected in favor
/// of the requested action: it is scored at the current state but does not
/// advance it, so the requested action is scored at that same state.
pub fn advance_flags<R: Borrow<InteractionRecord>>(records: &[R]) -> Vec<bool> {
    (0..records.len())
        .map(|i| {
            records
                .get(i + 1)
                .is_none_or(|n| n.borrow().feedback.channel != FeedbackChannel::FollowUpReorder)
        })
        .collect()
}

/// One recurrent update: next state from the previous state, the previous
/// action's embedding and its feedback.
pub fn seq_step(
    model: &RecurrentModel,
    state: &[f64],
    prev_action_embedding: &[f64],
    prev_feedback: f64,
) -> Result<Vec<f64>> {
    let d = model.params.cell.hidden();
    for len in [state.len(), prev_action_embedding.len()] {
        if len != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: len,
            });
        }
    }
    Ok(model.params.cell.step(
        state,
        &RecurrentModel::input(prev_action_embedding, prev_feedback),
    ))
}

/// Elementwise binding of an action embedding with its knowledge vector.
pub fn knowledge_bind(q_seq: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    if q_seq.len() != k.len() {
        return Err(Error::DimensionMismatch {
            expected: q_seq.len(),
            got: k.len(),
        });
    }
    Ok(hadamard(q_seq, k))
}

fn train_recurrent(
    log: &InteractionLog,
    actions: Vec<ActionId>,
    knowledge: Option<(BindMode, Matrix)>,
    config: &RecurrentConfig,
    cf: Option<&CfModel>,
) -> Result<RecurrentModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = RecurrentModel::init_with_rng(&actions, knowledge, config, &mut rng);
    if let Some(cf) = cf {
        if cf.dim() != config.dim {
            return Err(Error::DimensionMismatch {
                expected: config.dim,
                got: cf.dim(),
            });
        }
        model.init = InitialState::FromCf;
        model.user_init = cf
            .users()
            .iter()
            .filter_map(|&u| cf.user_vector(u).map(|p| (u, p.to_vec())))
            .collect();
    }
    let seqs = model.sequences(log)?;
    if seqs.is_empty() {
        return Err(Error::Empty("user sequences of length >= 2"));
    }
    model.fit(&seqs, &mut rng)?;
    Ok(model)
}

fn merged_actions(
    log: &InteractionLog,
    extra: impl IntoIterator<Item = ActionId>,
) -> Vec<ActionId> {
    let mut a = log.actions();
    a.extend(extra);
    a.sort_unstable();
    a.dedup();
    a
}

/// Sequential model with a shared trainable initial state.
pub fn seq_train(log: &InteractionLog, config: &RecurrentConfig) -> Result<SeqModel> {
    train_recurrent(log, merged_actions(log, []), None, config, None)
}

/// Sequential model over the log's actions plus `extra_actions`; when `cf` is
/// given, each user's sequence starts from their long-term embedding.
pub fn seq_train_with(
    log: &InteractionLog,
    extra_actions: &[ActionId],
    config: &RecurrentConfig,
    cf: Option<&CfModel>,
) -> Result<SeqModel> {
    train_recurrent(
        log,
        merged_actions(log, extra_actions.iter().copied()),
        None,
        config,
        cf,
    )
}

/// Knowledge-enhanced model over catalog actions (plus any extra log actions,
/// which get all-ones knowledge).
pub fn ke_train(
    log: &InteractionLog,
    catalog: &ActionCatalog,
    config: &RecurrentConfig,
) -> Result<KeModel> {
    ke_train_with(log, catalog, config, None)
}

pub fn ke_train_with(
    log: &InteractionLog,
    catalog: &ActionCatalog,
    config: &RecurrentConfig,
    cf: Option<&CfModel>,
) -> Result<KeModel> {
    let actions = merged_actions(log, catalog.ids());
    let d = config.dim;
    let mut k = Matrix::zeros(actions.len(), d);
    for (j, a) in actions.iter().enumerate() {
        let row = match catalog.get(*a) {
            Some(e) if e.knowledge.dim() == d => e.knowledge.as_slice().to_vec(),
            Some(e) => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: e.knowledge.dim(),
                })
            }
            None => vec![1.0; d],
        };
        k.row_mut(j).copy_from_slice(&row);
    }
    train_recurrent(log, actions, Some((config.bind, k)), config, cf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Feedback, InteractionRecord};

    fn tiny(d: usize) -> RecurrentModel {
        RecurrentModel::init(
            &[ActionId(1), ActionId(2)],
            None,
            &RecurrentConfig {
                dim: d,
                ..Default::default()
            },
        )
    }

    #[test]
    fn zero_parameters_halve_the_state() {
        let mut m = tiny(3);
        m.params.cell = GruCell::zeros(3, 4);
        let h = [0.4, -2.0, 1.0];
        let next = seq_step(&m, &h, &[0.3, 0.1, -0.7], 0.75).unwrap();
        for (a, b) in next.iter().zip(h) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_cell_matches_hand_computation() {
        let mut m = tiny(1);
        let c = &mut m.params.cell;
        // x = [q, f]
        c.wz = Matrix::from_vec(1, 2, vec![0.5, -1.0]).unwrap();
        c.uz = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        c.bz = vec![0.1];
        c.wr = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        c.ur = Matrix::from_vec(1, 1, vec![-0.5]).unwrap();
        c.br = vec![0.0];
        c.wc = Matrix::from_vec(1, 2, vec![0.3, 0.7]).unwrap();
        c.uc = Matrix::from_vec(1, 1, vec![1.5]).unwrap();
        c.bc = vec![-0.2];
        let (h, q, f): (f64, f64, f64) = (0.6, 0.8, 1.0);
        let z = 1.0 / (1.0 + (-(0.5 * q - f + 2.0 * h + 0.1)).exp());
        let r = 1.0 / (1.0 + (-(q + f - 0.5 * h)).exp());
        let cand = (0.3 * q + 0.7 * f + 1.5 * r * h - 0.2).tanh();
        let expected = (1.0 - z) * h + z * cand;
        let got = seq_step(&m, &[h], &[q], f).unwrap();
        assert!(
            (got[0] - expected).abs() < 1e-14,
            "{} vs {expected}",
            got[0]
        );
    }

    #[test]
    fn seq_step_is_pure_and_checks_shapes() {
        let m = tiny(4);
        let a = seq_step(&m, &[0.1; 4], &[0.2; 4], 0.5).unwrap();
        let b = seq_step(&m, &[0.1; 4], &[0.2; 4], 0.5).unwrap();
        assert_eq!(a, b);
        assert!(seq_step(&m, &[0.1; 3], &[0.2; 4], 0.5).is_err());
        assert!(seq_step(&m, &[0.1; 4], &[0.2; 5], 0.5).is_err());
    }

    #[test]
    fn knowledge_bind_cases() {
        assert_eq!(
            knowledge_bind(&[2.0, 3.0], &[1.0, 1.0]).unwrap(),
            vec![2.0, 3.0]
        );
        assert_eq!(
            knowledge_bind(&[2.0, 3.0], &[0.0, 0.0]).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            knowledge_bind(&[2.0, 3.0], &[0.5, 1.0]).unwrap(),
            vec![1.0, 3.0]
        );
        assert!(knowledge_bind(&[2.0], &[0.5, 1.0]).is_err());
    }

    fn log_of(seq: &[(u32, u32, f64)]) -> InteractionLog {
        let mut log = InteractionLog::new();
        let mut t: BTreeMap<u32, u64> = BTreeMap::new();
        for &(u, a, f) in seq {
            let tick = t.entry(u).or_insert(0);
            *tick += 1;
            log.append(InteractionRecord::new(
                *tick,
                UserId(u),
                ActionId(a),
                Feedback::explicit(f).unwrap(),
            ))
            .unwrap();
        }
        log
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let log = log_of(&[(0, 1, 1.0), (0, 2, 0.0), (0, 1, 1.0)]);
        let cfg = RecurrentConfig {
            epochs: 0,
            dim: 3,
            ..Default::default()
        };
        let m = seq_train(&log, &cfg).unwrap();
        let fresh = RecurrentModel::init(&[ActionId(1), ActionId(2)], None, &cfg);
        assert_eq!(m.params, fresh.params);
    }

    #[test]
    fn too_short_sequences_are_rejected() {
        let log = log_of(&[(0, 1, 1.0), (1, 2, 0.0)]);
        assert!(matches!(
            seq_train(&log, &RecurrentConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn replay_equals_stepwise_advance() {
        let m = tiny(3);
        let seq = [(ActionId(1), 1.0), (ActionId(2), 0.25), (ActionId(1), 0.5)];
        let mut h = m.params.h0.clone();
        for &(a, f) in &seq {
            h = m.advance(&h, a, f).unwrap();
        }
        assert_eq!(m.replay(&m.params.h0, &seq).unwrap(), h);
    }
}
