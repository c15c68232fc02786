//! Losses, dense rewards, learned baselines, the location penalty, and the
//! optimizer loop.
//!
//! The state system minimizes glimpse and reference prediction errors; the
//! action system minimizes a REINFORCE term (location heads) plus the dense
//! per-step task loss (everything else on the action side); the baseline
//! heads regress realized returns from detached inputs. Because every
//! state/action crossing is detached inside the episode, the three losses
//! can be summed and differentiated in one backward pass without gradients
//! leaking across systems.

use crate::autodiff::{GradStore, ParamStore, System, Tape, Tensor, Var};
use crate::config::ApcnConfig;
use crate::error::{Error, Result};
use crate::model::{EpisodeModel, EpisodeTrace, Mode};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub fn standard_normal(rng: &mut (impl RngCore + ?Sized)) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}

// ---- rewards ----

/// Per-step rewards, suffix-sum returns, and baseline values for one episode.
///
/// Micro returns only accumulate within their own macro-step: actions taken
/// inside different reference frames do not share reward.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardLedger {
    /// `R_{t,τ}`, indexed `[t][τ]`.
    pub micro_rewards: Vec<Vec<f64>>,
    /// `R_t`, one per macro-step.
    pub macro_rewards: Vec<f64>,
    /// `Φ_{t,τ} = Σ_{j≥τ} R_{t,j}`.
    pub micro_returns: Vec<Vec<f64>>,
    /// `Φ_t = Σ_{i≥t} R_i`.
    pub macro_returns: Vec<f64>,
    pub micro_baselines: Vec<Vec<f64>>,
    pub macro_baselines: Vec<f64>,
}

impl RewardLedger {
    pub fn mean_micro_reward(&self) -> f64 {
        let n: usize = self.micro_rewards.iter().map(Vec::len).sum();
        if n == 0 {
            return 0.0;
        }
        self.micro_rewards.iter().flatten().sum::<f64>() / n as f64
    }

    /// Advantages `(Φ_t − b_t, Φ_{t,τ} − b_{t,τ})`, treated as constants by
    /// the REINFORCE loss.
    pub fn advantages(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let macro_adv = self
            .macro_returns
            .iter()
            .zip(&self.macro_baselines)
            .map(|(r, b)| r - b)
            .collect();
        let micro_adv = self
            .micro_returns
            .iter()
            .zip(&self.micro_baselines)
            .map(|(rs, bs)| rs.iter().zip(bs).map(|(r, b)| r - b).collect())
            .collect();
        (macro_adv, micro_adv)
    }

    /// Returns with no baseline subtracted.
    pub fn raw_returns(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        (self.macro_returns.clone(), self.micro_returns.clone())
    }
}

/// Build rewards from task-loss sequences alone.
///
/// `entry[t]` is the task loss at macro-step `t`'s entry (bottom action
/// zeroed, and for `t = 0` also the pre-episode boundary); `micro[t][τ]` is
/// the task loss after micro-action `τ+1`. Rewards are marginal decreases:
/// a micro reward is the loss drop caused by one fixation, a macro reward
/// the drop across a whole macro-step.
pub fn rewards_from_losses(entry: &[f64], micro: &[Vec<f64>]) -> RewardLedger {
    assert_eq!(entry.len(), micro.len());
    let t2 = entry.len();
    let mut micro_rewards = Vec::with_capacity(t2);
    let mut macro_rewards = Vec::with_capacity(t2);
    for t in 0..t2 {
        let mut prev = entry[t];
        let rewards: Vec<f64> = micro[t]
            .iter()
            .map(|&l| {
                let r = prev - l;
                prev = l;
                r
            })
            .collect();
        micro_rewards.push(rewards);
        let boundary = if t == 0 {
            entry[0]
        } else {
            *micro[t - 1].last().expect("non-empty micro losses")
        };
        macro_rewards.push(boundary - *micro[t].last().expect("non-empty micro losses"));
    }
    let micro_returns = micro_rewards.iter().map(|rs| suffix_sums(rs)).collect();
    let macro_returns = suffix_sums(&macro_rewards);
    RewardLedger {
        micro_baselines: micro_rewards.iter().map(|r| vec![0.0; r.len()]).collect(),
        macro_baselines: vec![0.0; macro_rewards.len()],
        micro_rewards,
        macro_rewards,
        micro_returns,
        macro_returns,
    }
}

fn suffix_sums(xs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    let mut acc = 0.0;
    for i in (0..xs.len()).rev() {
        acc += xs[i];
        out[i] = acc;
    }
    out
}

/// Rewards and baseline values for a completed episode.
pub fn dense_rewards(tape: &Tape, trace: &EpisodeTrace) -> RewardLedger {
    let entry: Vec<f64> = trace
        .macros
        .iter()
        .map(|m| tape.vals(m.task_entry)[0])
        .collect();
    let micro: Vec<Vec<f64>> = trace
        .macros
        .iter()
        .map(|m| m.micros.iter().map(|u| tape.vals(u.task_loss)[0]).collect())
        .collect();
    let mut ledger = rewards_from_losses(&entry, &micro);
    for (t, m) in trace.macros.iter().enumerate() {
        if let Some(b) = m.baseline {
            ledger.macro_baselines[t] = tape.vals(b)[0];
        }
        for (j, u) in m.micros.iter().enumerate() {
            ledger.micro_baselines[t][j] = tape.vals(u.baseline)[0];
        }
    }
    ledger
}

// ---- losses ----

/// Prediction-error loss plus reference-reconstruction loss.
pub fn state_loss(tape: &mut Tape, trace: &EpisodeTrace) -> Result<Var> {
    let mut total = tape.scalar(0.0);
    for m in &trace.macros {
        for u in &m.micros {
            let e = tape.sum_squares(u.err);
            total = tape.add(total, e)?;
        }
        if let (Some(pred), Some(target)) = (m.ref_pred, m.ref_target) {
            let d = tape.sub(target, pred)?;
            let e = tape.sum_squares(d);
            total = tape.add(total, e)?;
        }
    }
    Ok(total)
}

/// REINFORCE surrogate: `−Σ log P(sampled | mean) · advantage` with the
/// Gaussian log-probabilities reduced to squared distances between sampled
/// and mean locations. Advantages are plain numbers, never differentiated.
pub fn reinforce_loss(
    tape: &mut Tape,
    trace: &EpisodeTrace,
    macro_adv: &[f64],
    micro_adv: &[Vec<f64>],
    sigma: f64,
) -> Result<Var> {
    if !trace.noisy {
        return Err(Error::invalid(
            "reinforce_loss",
            "requires a train-mode trace with recorded exploration noise",
        ));
    }
    let mut total = tape.scalar(0.0);
    if sigma <= 0.0 {
        return Ok(total);
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (t, m) in trace.macros.iter().enumerate() {
        if let (Some(mean), Some(loc)) = (m.loc_mean, m.loc) {
            let sampled = tape.constant(Tensor::vector(loc.to_vec()));
            let d = tape.sub(mean, sampled)?;
            let sq = tape.sum_squares(d);
            let term = tape.scale(sq, macro_adv[t] * inv);
            total = tape.add(total, term)?;
        }
        for (j, u) in m.micros.iter().enumerate() {
            let sampled = tape.constant(Tensor::vector(u.loc.to_vec()));
            let d = tape.sub(u.loc_mean, sampled)?;
            let sq = tape.sum_squares(d);
            let term = tape.scale(sq, micro_adv[t][j] * inv);
            total = tape.add(total, term)?;
        }
    }
    Ok(total)
}

/// Thresholded soft penalty keeping locations inside the frame:
/// `Σ_i leaky(l_i − c)² + leaky(−l_i − c)² − 2(αc)²` per coordinate, which is
/// zero at the center, a small quadratic leak on the plateau `|l| ≤ c`, and
/// full quadratic growth outside.
pub fn location_penalty(tape: &mut Tape, loc: Var, c: f64, alpha: f64) -> Result<Var> {
    let n = tape.numel(loc);
    let shift = tape.constant(Tensor::new(vec![n], vec![c; n]));
    let a = tape.sub(loc, shift)?;
    let ra = tape.leaky_relu(a, alpha);
    let s1 = tape.sum_squares(ra);
    let neg = tape.scale(loc, -1.0);
    let b = tape.sub(neg, shift)?;
    let rb = tape.leaky_relu(b, alpha);
    let s2 = tape.sum_squares(rb);
    let sum = tape.add(s1, s2)?;
    let offset = tape.scalar(-2.0 * (alpha * c) * (alpha * c) * n as f64);
    tape.add(sum, offset)
}

/// REINFORCE + dense task loss + location penalties.
pub fn action_loss(
    tape: &mut Tape,
    trace: &EpisodeTrace,
    ledger: &RewardLedger,
    model: &dyn EpisodeModel,
    sigma: f64,
    penalty_slope: f64,
    penalty_weight: f64,
) -> Result<Var> {
    let (macro_adv, micro_adv) = ledger.advantages();
    let mut total = reinforce_loss(tape, trace, &macro_adv, &micro_adv, sigma)?;
    for m in &trace.macros {
        for u in &m.micros {
            total = tape.add(total, u.task_loss)?;
        }
    }
    let (top_c, bottom_c) = model.penalty_thresholds();
    let mut penalty = tape.scalar(0.0);
    for m in &trace.macros {
        if let (Some(mean), Some(c)) = (m.loc_mean, top_c) {
            let p = location_penalty(tape, mean, c, penalty_slope)?;
            penalty = tape.add(penalty, p)?;
        }
        for u in &m.micros {
            let p = location_penalty(tape, u.loc_mean, bottom_c, penalty_slope)?;
            penalty = tape.add(penalty, p)?;
        }
    }
    let weighted = tape.scale(penalty, penalty_weight);
    tape.add(total, weighted)
}

/// Squared error of the baseline heads against realized returns. Baseline
/// inputs are detached in the episode, so this trains only the heads.
pub fn baseline_loss(tape: &mut Tape, trace: &EpisodeTrace, ledger: &RewardLedger) -> Result<Var> {
    let mut total = tape.scalar(0.0);
    for (t, m) in trace.macros.iter().enumerate() {
        if let Some(b) = m.baseline {
            let target = tape.scalar(ledger.macro_returns[t]);
            let d = tape.sub(b, target)?;
            let e = tape.sum_squares(d);
            total = tape.add(total, e)?;
        }
        for (j, u) in m.micros.iter().enumerate() {
            let target = tape.scalar(ledger.micro_returns[t][j]);
            let d = tape.sub(u.baseline, target)?;
            let e = tape.sum_squares(d);
            total = tape.add(total, e)?;
        }
    }
    Ok(total)
}

/// The three per-episode losses and their sum.
pub struct EpisodeLosses {
    pub state: Var,
    pub action: Var,
    pub baseline: Var,
    pub total: Var,
}

pub fn episode_losses(
    tape: &mut Tape,
    trace: &EpisodeTrace,
    ledger: &RewardLedger,
    model: &dyn EpisodeModel,
    cfg: &ApcnConfig,
) -> Result<EpisodeLosses> {
    let state = state_loss(tape, trace)?;
    let action = action_loss(
        tape,
        trace,
        ledger,
        model,
        cfg.sigma,
        cfg.penalty_slope,
        cfg.penalty_weight,
    )?;
    let baseline = baseline_loss(tape, trace, ledger)?;
    let sa = tape.add(state, action)?;
    let total = tape.add(sa, baseline)?;
    Ok(EpisodeLosses {
        state,
        action,
        baseline,
        total,
    })
}

// ---- optimizer ----

/// Adam with bias correction.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Adam {
        Adam {
            m: store
                .iter()
                .map(|(_, e)| vec![0.0; e.value.numel()])
                .collect(),
            v: store
                .iter()
                .map(|(_, e)| vec![0.0; e.value.numel()])
                .collect(),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let m = &mut self.m[id.0 as usize];
            let v = &mut self.v[id.0 as usize];
            let p = store.value_mut(id).vals_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Flattened optimizer state in parameter order, for checkpoints.
    pub fn state_blobs(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (self.m.clone(), self.v.clone())
    }

    pub fn restore(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step_count: u64) {
        self.m = m;
        self.v = v;
        self.step_count = step_count;
    }
}

// ---- batched gradient accumulation ----

#[derive(Debug, Clone, Copy, Default)]
pub struct BatchStats {
    pub episodes: usize,
    pub total_loss: f64,
    pub state_loss: f64,
    pub action_loss: f64,
    pub baseline_loss: f64,
    pub final_mse: f64,
    pub mean_reward: f64,
}

impl BatchStats {
    fn merge(mut self, other: BatchStats) -> BatchStats {
        self.episodes += other.episodes;
        self.total_loss += other.total_loss;
        self.state_loss += other.state_loss;
        self.action_loss += other.action_loss;
        self.baseline_loss += other.baseline_loss;
        self.final_mse += other.final_mse;
        self.mean_reward += other.mean_reward;
        self
    }

    pub fn mean_total(&self) -> f64 {
        self.total_loss / self.episodes.max(1) as f64
    }

    pub fn mean_mse(&self) -> f64 {
        self.final_mse / self.episodes.max(1) as f64
    }

    pub fn mean_reward(&self) -> f64 {
        self.mean_reward / self.episodes.max(1) as f64
    }

    pub fn mean_baseline(&self) -> f64 {
        self.baseline_loss / self.episodes.max(1) as f64
    }

    pub fn mean_state(&self) -> f64 {
        self.state_loss / self.episodes.max(1) as f64
    }
}

/// Run one gradient episode: forward, losses, backward, accumulate.
fn grad_episode(
    model: &dyn EpisodeModel,
    store: &ParamStore,
    image: &Tensor,
    cfg: &ApcnConfig,
    seed: u64,
    grads: &mut GradStore,
) -> Result<BatchStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tape, trace) = model.run_episode(store, image, &Mode::Train, &mut rng)?;
    let ledger = dense_rewards(&tape, &trace);
    let losses = episode_losses(&mut tape, &trace, &ledger, model, cfg)?;
    let total = tape.vals(losses.total)[0];
    if !total.is_finite() || total.abs() > 1e9 {
        return Err(Error::Diverged(format!(
            "runaway loss {total:.3e} on episode seed {seed}"
        )));
    }
    tape.backward(losses.total)?;
    tape.param_grads_into(grads);
    Ok(BatchStats {
        episodes: 1,
        total_loss: total,
        state_loss: tape.vals(losses.state)[0],
        action_loss: tape.vals(losses.action)[0],
        baseline_loss: tape.vals(losses.baseline)[0],
        final_mse: trace.final_mse(&tape),
        mean_reward: ledger.mean_micro_reward(),
    })
}

/// Accumulate gradients over a batch of images. `deterministic` forces a
/// fixed, serial reduction order; otherwise episodes fold across threads.
pub fn batch_gradients(
    model: &dyn EpisodeModel,
    store: &ParamStore,
    images: &[&Tensor],
    seeds: &[u64],
    cfg: &ApcnConfig,
) -> Result<(GradStore, BatchStats)> {
    assert_eq!(images.len(), seeds.len());
    #[cfg(feature = "parallel")]
    if !cfg.deterministic {
        use rayon::prelude::*;
        return images
            .par_iter()
            .zip(seeds.par_iter())
            .try_fold(
                || (GradStore::zeros_like(store), BatchStats::default()),
                |(mut grads, stats), (image, &seed)| {
                    let s = grad_episode(model, store, image, cfg, seed, &mut grads)?;
                    Ok((grads, stats.merge(s)))
                },
            )
            .try_reduce(
                || (GradStore::zeros_like(store), BatchStats::default()),
                |(mut ga, sa), (gb, sb)| {
                    ga.add(&gb);
                    Ok((ga, sa.merge(sb)))
                },
            );
    }
    let mut grads = GradStore::zeros_like(store);
    let mut stats = BatchStats::default();
    for (image, &seed) in images.iter().zip(seeds) {
        let s = grad_episode(model, store, image, cfg, seed, &mut grads)?;
        stats = stats.merge(s);
    }
    Ok((grads, stats))
}

/// Mean per-pixel reconstruction error over a set of images, in eval mode.
pub fn evaluate_mse(
    model: &dyn EpisodeModel,
    store: &ParamStore,
    images: &[Tensor],
    seed: u64,
) -> Result<f64> {
    let eval_one = |(i, image): (usize, &Tensor)| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let (tape, trace) = model.run_episode(store, image, &Mode::Eval, &mut rng)?;
        Ok(trace.final_mse(&tape))
    };
    let total: f64 = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            images
                .par_iter()
                .enumerate()
                .map(eval_one)
                .try_reduce(|| 0.0, |a, b| Ok(a + b))?
        }
        #[cfg(not(feature = "parallel"))]
        {
            let mut acc = 0.0;
            for pair in images.iter().enumerate() {
                acc += eval_one(pair)?;
            }
            acc
        }
    };
    Ok(total / images.len().max(1) as f64)
}

// ---- metrics log ----

/// Appends `epoch,split,mse,mean_reward,baseline_mse` rows.
pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    pub fn create(path: impl Into<PathBuf>) -> Result<MetricsLog> {
        let path = path.into();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        if !path.exists() {
            std::fs::write(&path, "epoch,split,mse,mean_reward,baseline_mse\n")?;
        }
        Ok(MetricsLog { path })
    }

    pub fn append(
        &self,
        epoch: usize,
        split: &str,
        mse: f64,
        mean_reward: f64,
        baseline_mse: f64,
    ) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().append(true).open(&self.path)?;
        writeln!(f, "{epoch},{split},{mse},{mean_reward},{baseline_mse}")?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

// ---- training loop ----

pub struct TrainOutcome {
    pub epochs_run: usize,
    pub final_eval_mse: f64,
    pub first_epoch_start_loss: f64,
    pub first_epoch_end_loss: f64,
}

/// Progress callback data after each epoch.
pub struct EpochReport {
    pub epoch: usize,
    pub train: BatchStats,
    pub eval_mse: f64,
}

/// Train an episodic model: shuffled batches, summed-loss backward, Adam,
/// per-epoch eval and checkpointing via the provided callback.
pub fn train_episodic(
    model: &dyn EpisodeModel,
    store: &mut ParamStore,
    adam: &mut Adam,
    train: &[Tensor],
    eval: &[Tensor],
    cfg: &ApcnConfig,
    start_epoch: usize,
    metrics: Option<&MetricsLog>,
    mut on_epoch: impl FnMut(&ParamStore, &Adam, &EpochReport) -> Result<()>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let eval_subset: &[Tensor] = if cfg.eval_subset > 0 && cfg.eval_subset < eval.len() {
        &eval[..cfg.eval_subset]
    } else {
        eval
    };
    let mut first_start = f64::NAN;
    let mut first_end = f64::NAN;
    let mut last_eval = f64::NAN;
    let mut epochs_run = 0;

    for epoch in start_epoch..cfg.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        shuffle_order(&mut order, &mut shuffle_rng);

        let mut epoch_stats = BatchStats::default();
        let mut head_stats = BatchStats::default();
        let mut tail_stats = BatchStats::default();
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let head_batches = (batches.len() / 10).max(1);

        for (bi, batch) in batches.iter().enumerate() {
            let images: Vec<&Tensor> = batch.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> = batch
                .iter()
                .map(|&i| {
                    cfg.seed
                        .wrapping_add(1 + i as u64)
                        .wrapping_add((epoch as u64) << 32)
                })
                .collect();
            let (mut grads, stats) = batch_gradients(model, store, &images, &seeds, cfg)
                .map_err(|e| dump_divergence(cfg, epoch, bi, e))?;
            grads.scale(1.0 / batch.len() as f64);
            grads.clip_global_norm(cfg.clip_norm);
            adam.step(store, &grads);

            epoch_stats = epoch_stats.merge(stats);
            if bi < head_batches {
                head_stats = head_stats.merge(stats);
            }
            if bi + head_batches >= batches.len() {
                tail_stats = tail_stats.merge(stats);
            }
        }

        if epoch == start_epoch {
            first_start = head_stats.mean_total();
            first_end = tail_stats.mean_total();
        }

        let eval_mse = evaluate_mse(model, store, eval_subset, cfg.seed ^ EVAL_SEED)?;
        last_eval = eval_mse;
        if let Some(log) = metrics {
            log.append(
                epoch,
                "train",
                epoch_stats.mean_mse(),
                epoch_stats.mean_reward(),
                epoch_stats.mean_baseline(),
            )?;
            log.append(epoch, "eval", eval_mse, 0.0, 0.0)?;
        }
        on_epoch(
            store,
            adam,
            &EpochReport {
                epoch,
                train: epoch_stats,
                eval_mse,
            },
        )?;
        epochs_run += 1;
    }

    Ok(TrainOutcome {
        epochs_run,
        final_eval_mse: last_eval,
        first_epoch_start_loss: first_start,
        first_epoch_end_loss: first_end,
    })
}

const EVAL_SEED: u64 = 0x5eed;

fn shuffle_order(order: &mut [usize], rng: &mut impl Rng) {
    use rand::seq::SliceRandom;
    order.shuffle(rng);
}

fn dump_divergence(cfg: &ApcnConfig, epoch: usize, batch: usize, e: Error) -> Error {
    if let Error::Diverged(msg) = &e {
        let path = Path::new(&cfg.out_dir).join("divergence.json");
        let body = serde_json::json!({
            "epoch": epoch,
            "batch": batch,
            "message": msg,
            "config": cfg.to_text(),
        });
        let _ = std::fs::create_dir_all(&cfg.out_dir);
        let _ = std::fs::write(path, serde_json::to_string_pretty(&body).unwrap_or_default());
    }
    e
}

/// Audit that the state/action/baseline parameter sets are disjoint and that
/// each system's loss reaches only its own parameters. Returns the maximum
/// cross-system gradient magnitude (exactly zero when the partition holds).
pub fn gradient_partition_violation(
    model: &dyn EpisodeModel,
    store: &ParamStore,
    image: &Tensor,
    cfg: &ApcnConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tape, trace) = model.run_episode(store, image, &Mode::Train, &mut rng)?;
    let ledger = dense_rewards(&tape, &trace);
    let losses = episode_losses(&mut tape, &trace, &ledger, model, cfg)?;

    let mut worst: f64 = 0.0;
    let cases = [
        (losses.state, System::State),
        (losses.action, System::Action),
        (losses.baseline, System::Baseline),
    ];
    for (loss, owner) in cases {
        tape.backward(loss)?;
        let mut grads = GradStore::zeros_like(store);
        tape.param_grads_into(&mut grads);
        for (id, entry) in store.iter() {
            if entry.system != owner {
                let leak = grads
                    .get(id)
                    .iter()
                    .fold(0.0f64, |m, x| m.max(x.abs()));
                worst = worst.max(leak);
            }
        }
    }
    Ok(worst)
}
