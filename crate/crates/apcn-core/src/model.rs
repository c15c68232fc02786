//! The inference loops: macro-steps pick a reference frame and generate the
//! bottom-level sub-programs; micro-steps predict and sample glimpses inside
//! the frame. Produces an [`EpisodeTrace`] holding every tape handle the
//! losses need, and exports [`ParseTree`]s.
//!
//! Gradient flow is partitioned here, at the state/action boundaries:
//! whenever a state vector feeds an action network the tape value is
//! detached, and sampled locations enter state-side networks as constants.
//! The REINFORCE loss is then the only path training the location heads.

use crate::autodiff::{ParamStore, System, Tape, Tensor, Var};
use crate::config::ApcnConfig;
use crate::error::{Error, Result};
use crate::glimpse;
use crate::nets::{Activation, Dense, GeneratedRnn, Hypernet, Mlp, ParamLayout, RnnCell};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// How an episode samples and what it is allowed to observe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mode {
    /// Locations and options get exploration noise; noise is recorded.
    Train,
    /// Deterministic means everywhere.
    Eval,
    /// Deterministic, with prediction errors forced to zero for the flagged
    /// macro-steps, so the flagged steps run on internal dynamics alone.
    Hallucinate(Vec<bool>),
}

impl Mode {
    pub fn hallucinate_all(macro_steps: usize) -> Mode {
        Mode::Hallucinate(vec![true; macro_steps])
    }

    pub fn hallucinate_from(start: usize, macro_steps: usize) -> Mode {
        Mode::Hallucinate((0..macro_steps).map(|t| t >= start).collect())
    }

    fn noisy(&self) -> bool {
        matches!(self, Mode::Train)
    }

    fn masked(&self, t: usize) -> bool {
        match self {
            Mode::Hallucinate(mask) => mask.get(t).copied().unwrap_or(false),
            _ => false,
        }
    }
}

/// Record of the random initialization glimpse.
#[derive(Debug, Clone)]
pub struct InitTrace {
    pub loc: [f64; 2],
    pub glimpse: Var,
    pub state: Var,
    pub action: Var,
}

/// One micro-step: the action that chose a location, what was seen and
/// predicted there, and the running task loss.
#[derive(Debug, Clone)]
pub struct MicroTrace {
    pub action: Var,
    pub state: Var,
    pub loc_mean: Var,
    pub loc: [f64; 2],
    /// `None` when this macro-step is hallucinating (the image is not read).
    pub glimpse: Option<Var>,
    pub pred: Var,
    pub err: Var,
    pub baseline: Var,
    pub recon: Var,
    pub task_loss: Var,
}

/// One macro-step. Top-level fields are `None` in single-level episodes.
#[derive(Debug, Clone)]
pub struct MacroTrace {
    pub top_state: Option<Var>,
    pub top_action: Option<Var>,
    pub next_top_state: Option<Var>,
    pub loc_mean: Option<Var>,
    pub loc: Option<[f64; 2]>,
    pub opt_mean: Option<Var>,
    pub opt: Option<Var>,
    pub theta_s: Option<Var>,
    pub theta_a: Option<Var>,
    pub frame: Option<Var>,
    pub ref_pred: Option<Var>,
    pub ref_target: Option<Var>,
    pub baseline: Option<Var>,
    pub masked: bool,
    /// Task loss at macro entry, with the bottom action zeroed.
    pub task_entry: Var,
    pub micros: Vec<MicroTrace>,
}

/// Full record of one episode's parse, resolvable against its [`Tape`].
#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    pub image: Var,
    /// `None` for continuations that started from injected vectors.
    pub init: Option<InitTrace>,
    pub macros: Vec<MacroTrace>,
    pub two_level: bool,
    /// Whether exploration noise was recorded (train mode).
    pub noisy: bool,
}

impl EpisodeTrace {
    /// Final full-image reconstruction of the episode.
    pub fn final_recon(&self) -> Var {
        self.macros
            .last()
            .and_then(|m| m.micros.last())
            .map(|m| m.recon)
            .expect("episode has at least one micro-step")
    }

    /// Per-pixel reconstruction error of the final step.
    pub fn final_mse(&self, tape: &Tape) -> f64 {
        let m = self
            .macros
            .last()
            .and_then(|m| m.micros.last())
            .expect("episode has at least one micro-step");
        tape.vals(m.task_loss)[0]
    }
}

/// Mean squared error per element between a prediction and a constant target.
fn mse(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let ss = tape.sum_squares(d);
    let n = tape.numel(pred) as f64;
    Ok(tape.scale(ss, 1.0 / n))
}

fn sample_pair(
    rng: &mut (impl rand::RngCore + ?Sized),
    mean: &[f64],
    sigma: f64,
    noisy: bool,
) -> [f64; 2] {
    if noisy && sigma > 0.0 {
        [
            mean[0] + sigma * crate::training::standard_normal(rng),
            mean[1] + sigma * crate::training::standard_normal(rng),
        ]
    } else {
        [mean[0], mean[1]]
    }
}

/// Anything the episode trainer can drive.
pub trait EpisodeModel: Sync {
    fn run_episode<'p>(
        &self,
        store: &'p ParamStore,
        image: &Tensor,
        mode: &Mode,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Tape<'p>, EpisodeTrace)>;

    /// Penalty thresholds (top, bottom) for this model's location heads.
    fn penalty_thresholds(&self) -> (Option<f64>, f64);

    fn kind(&self) -> &'static str;
}

/// Two-level hierarchy: hypernetwork-generated bottom-level networks parsing
/// frames chosen by the top level.
pub struct Apcn {
    pub image_side: usize,
    pub frame_side: usize,
    pub glimpse_side: usize,
    pub init_side: usize,
    pub macro_steps: usize,
    pub micro_steps: usize,
    pub top_size: usize,
    pub bottom_size: usize,
    pub option_size: usize,
    pub sigma: f64,
    top_threshold: f64,
    bottom_threshold: f64,

    init_net: Dense,
    top_state: RnnCell,
    top_action: RnnCell,
    top_loc: Dense,
    top_opt: Dense,
    hyper_state: Hypernet,
    hyper_action: Hypernet,
    bottom_init: Dense,
    feedback_state: Dense,
    feedback_action: Dense,
    bottom_loc: Dense,
    decoder: Mlp,
    ref_decoder: Mlp,
    task_net: Mlp,
    baseline_top: Dense,
    baseline_bottom: Dense,
}

impl Apcn {
    pub fn new(store: &mut ParamStore, cfg: &ApcnConfig, rng: &mut impl Rng) -> Apcn {
        let n = cfg.image_side;
        let frame = cfg.frame_side();
        let g = cfg.glimpse_side();
        let init_side = cfg.init_side();
        let (top, bottom, opt) = (cfg.top_size, cfg.bottom_size, cfg.option_size);
        let g2 = g * g;

        let init_net = Dense::new(
            store,
            rng,
            "init",
            System::State,
            init_side * init_side + 2,
            top,
            Activation::Relu,
        );
        let top_state = RnnCell::new(store, rng, "top.state", System::State, top, bottom + 2);
        let top_action = RnnCell::new(store, rng, "top.action", System::Action, top, top + bottom);
        // location/option/baseline heads start at zero: locations begin at the
        // frame center and early advantages are unbiased
        let top_loc = Dense::scaled(store, rng, "top.loc", System::Action, top, 2, Activation::Linear, 0.0);
        let top_opt = Dense::scaled(store, rng, "top.opt", System::Action, top, opt, Activation::Linear, 0.0);
        let state_layout = ParamLayout::rnn(bottom, g2 + 2);
        let action_layout = ParamLayout::rnn(bottom, bottom);
        let hyper_state = Hypernet::new(
            store,
            rng,
            "hyper.state",
            System::State,
            top + 2,
            state_layout.total_len(),
        );
        let hyper_action = Hypernet::new(
            store,
            rng,
            "hyper.action",
            System::Action,
            opt,
            action_layout.total_len(),
        );
        let bottom_init = Dense::new(
            store,
            rng,
            "bottom.init",
            System::State,
            top,
            bottom,
            Activation::Relu,
        );
        let feedback_state = Dense::new(
            store,
            rng,
            "feedback.state",
            System::State,
            bottom,
            bottom,
            Activation::Linear,
        );
        let feedback_action = Dense::new(
            store,
            rng,
            "feedback.action",
            System::Action,
            bottom,
            bottom,
            Activation::Linear,
        );
        let bottom_loc = Dense::scaled(
            store,
            rng,
            "bottom.loc",
            System::Action,
            bottom,
            2,
            Activation::Linear,
            0.0,
        );
        let decoder = Mlp::new(
            store,
            rng,
            "decoder",
            System::State,
            &[bottom + 4, cfg.decoder_hidden, g2],
            &[Activation::Relu, Activation::Sigmoid],
            1.0,
        );
        let ref_decoder = Mlp::new(
            store,
            rng,
            "ref_decoder",
            System::State,
            &[top + 2, cfg.decoder_hidden, g2],
            &[Activation::Relu, Activation::Sigmoid],
            1.0,
        );
        let task_net = Mlp::new(
            store,
            rng,
            "task",
            System::Action,
            &[top + bottom, cfg.decoder_hidden, n * n],
            &[Activation::Relu, Activation::Sigmoid],
            1.0,
        );
        let baseline_top = Dense::scaled(
            store,
            rng,
            "baseline.top",
            System::Baseline,
            top,
            1,
            Activation::Linear,
            0.0,
        );
        let baseline_bottom = Dense::scaled(
            store,
            rng,
            "baseline.bottom",
            System::Baseline,
            bottom,
            1,
            Activation::Linear,
            0.0,
        );

        Apcn {
            image_side: n,
            frame_side: frame,
            glimpse_side: g,
            init_side,
            macro_steps: cfg.macro_steps,
            micro_steps: cfg.micro_steps,
            top_size: top,
            bottom_size: bottom,
            option_size: opt,
            sigma: cfg.sigma,
            top_threshold: cfg.top_threshold(),
            bottom_threshold: cfg.bottom_threshold(),
            init_net,
            top_state,
            top_action,
            top_loc,
            top_opt,
            hyper_state,
            hyper_action,
            bottom_init,
            feedback_state,
            feedback_action,
            bottom_loc,
            decoder,
            ref_decoder,
            task_net,
            baseline_top,
            baseline_bottom,
        }
    }

    /// Full-image reconstruction from concatenated `[top, bottom]` action
    /// vectors.
    pub fn reconstruct(&self, tape: &mut Tape, a_out: Var) -> Result<Var> {
        self.task_net.forward(tape, a_out)
    }

    fn init_episode<'p>(
        &self,
        tape: &mut Tape<'p>,
        image: &Tensor,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(InitTrace, Var, Var)> {
        let lx = rng.random_range(-0.5..=0.5);
        let ly = rng.random_range(-0.5..=0.5);
        let scale = self.init_side as f64 / self.image_side as f64;
        let g_init = glimpse::extract_data(image, (lx, ly), scale)?;
        let g_flat = tape.constant(Tensor::vector(g_init.vals().to_vec()));
        let l_init = tape.constant(Tensor::vector(vec![lx, ly]));
        let input = tape.concat(&[g_flat, l_init])?;
        let r0 = self.init_net.forward(tape, input)?;

        // A₀ = F_a(0, [detach(R₀), 0]) — previous action and feedback zeroed
        let zero_a = tape.constant(Tensor::zeros(vec![self.top_size]));
        let r0_detached = tape.detach(r0);
        let zero_fb = tape.constant(Tensor::zeros(vec![self.bottom_size]));
        let x = tape.concat(&[r0_detached, zero_fb])?;
        let a0 = self.top_action.step(tape, zero_a, x)?;

        Ok((
            InitTrace {
                loc: [lx, ly],
                glimpse: g_flat,
                state: r0,
                action: a0,
            },
            r0,
            a0,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_macro_step<'p>(
        &self,
        tape: &mut Tape<'p>,
        image: Var,
        image_flat: Var,
        top_state: Var,
        top_action: Var,
        masked: bool,
        mode: &Mode,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(MacroTrace, Var, Var)> {
        let g2 = self.glimpse_side * self.glimpse_side;

        // task loss at entry, bottom action zeroed
        let zero_bottom = tape.constant(Tensor::zeros(vec![self.bottom_size]));
        let entry_out = tape.concat(&[top_action, zero_bottom])?;
        let entry_recon = self.reconstruct(tape, entry_out)?;
        let task_entry = mse(tape, entry_recon, image_flat)?;

        // sample frame location and option
        let loc_mean = self.top_loc.forward(tape, top_action)?;
        let loc = sample_pair(rng, tape.vals(loc_mean), self.sigma, mode.noisy());
        let loc_const = tape.constant(Tensor::vector(loc.to_vec()));
        let opt_mean = self.top_opt.forward(tape, top_action)?;
        let opt = if mode.noisy() && self.sigma > 0.0 {
            let noise: Vec<f64> = (0..self.option_size)
                .map(|_| self.sigma * crate::training::standard_normal(rng))
                .collect();
            let noise = tape.constant(Tensor::vector(noise));
            tape.add(opt_mean, noise)?
        } else {
            opt_mean
        };

        // restrict the bottom level to the frame, unless hallucinating
        let frame = if masked {
            None
        } else {
            Some(tape.extract_patch(image, loc_const, self.frame_side)?)
        };

        // generate the bottom-level sub-programs
        let hyper_in = tape.concat(&[top_state, loc_const])?;
        let theta_s = self.hyper_state.forward(tape, hyper_in)?;
        let theta_a = self.hyper_action.forward(tape, opt)?;
        let gen_state = GeneratedRnn::bind(tape, self.bottom_size, g2 + 2, theta_s)?;
        let gen_action = GeneratedRnn::bind(tape, self.bottom_size, self.bottom_size, theta_a)?;

        let mut state = self.bottom_init.forward(tape, top_state)?;
        let mut action = tape.constant(Tensor::zeros(vec![self.bottom_size]));
        let mut micros = Vec::with_capacity(self.micro_steps);

        for _ in 0..self.micro_steps {
            let state_detached = tape.detach(state);
            let next_action = gen_action.step(tape, action, state_detached)?;
            let micro_loc_mean = self.bottom_loc.forward(tape, next_action)?;
            let micro_loc = sample_pair(rng, tape.vals(micro_loc_mean), self.sigma, mode.noisy());
            let micro_loc_const = tape.constant(Tensor::vector(micro_loc.to_vec()));

            let dec_in = tape.concat(&[state, loc_const, micro_loc_const])?;
            let pred = self.decoder.forward(tape, dec_in)?;

            let (glimpse_var, err) = if let Some(frame) = frame {
                let patch = tape.extract_patch(frame, micro_loc_const, self.glimpse_side)?;
                let flat = tape.reshape(patch, vec![g2])?;
                let err = tape.sub(flat, pred)?;
                (Some(flat), err)
            } else {
                // hallucination: the prediction error input is zero
                (None, tape.constant(Tensor::zeros(vec![g2])))
            };

            let state_in = tape.concat(&[err, micro_loc_const])?;
            let next_state = gen_state.step(tape, state, state_in)?;

            let action_detached = tape.detach(next_action);
            let baseline = self.baseline_bottom.forward(tape, action_detached)?;

            let a_out = tape.concat(&[top_action, next_action])?;
            let recon = self.reconstruct(tape, a_out)?;
            let task_loss = mse(tape, recon, image_flat)?;

            micros.push(MicroTrace {
                action: next_action,
                state: next_state,
                loc_mean: micro_loc_mean,
                loc: micro_loc,
                glimpse: glimpse_var,
                pred,
                err,
                baseline,
                recon,
                task_loss,
            });
            state = next_state;
            action = next_action;
        }

        // feed the sub-program results back up
        let fb_state = self.feedback_state.forward(tape, state)?;
        let top_in = tape.concat(&[fb_state, loc_const])?;
        let next_top_state = self.top_state.step(tape, top_state, top_in)?;

        let (ref_pred, ref_target) = if let Some(frame) = frame {
            let target = tape.downsample(frame, self.glimpse_side)?;
            let target_flat = tape.reshape(target, vec![g2])?;
            let pred_in = tape.concat(&[next_top_state, loc_const])?;
            let pred = self.ref_decoder.forward(tape, pred_in)?;
            (Some(pred), Some(target_flat))
        } else {
            (None, None)
        };

        let fb_action = self.feedback_action.forward(tape, action)?;
        let next_top_detached = tape.detach(next_top_state);
        let act_in = tape.concat(&[next_top_detached, fb_action])?;
        let next_top_action = self.top_action.step(tape, top_action, act_in)?;

        let action_detached = tape.detach(top_action);
        let baseline = self.baseline_top.forward(tape, action_detached)?;

        let trace = MacroTrace {
            top_state: Some(top_state),
            top_action: Some(top_action),
            next_top_state: Some(next_top_state),
            loc_mean: Some(loc_mean),
            loc: Some(loc),
            opt_mean: Some(opt_mean),
            opt: Some(opt),
            theta_s: Some(theta_s),
            theta_a: Some(theta_a),
            frame,
            ref_pred,
            ref_target,
            baseline: Some(baseline),
            masked,
            task_entry,
            micros,
        };
        Ok((trace, next_top_state, next_top_action))
    }

    /// Continue an episode from injected top-level vectors, in hallucination
    /// mode, starting at macro-step `start`. Used by vector swapping.
    pub fn continue_from<'p>(
        &self,
        store: &'p ParamStore,
        image: &Tensor,
        top_state: &Tensor,
        top_action: &Tensor,
        start: usize,
    ) -> Result<(Tape<'p>, EpisodeTrace)> {
        use rand::SeedableRng;
        let mut tape = Tape::with_params(store);
        let image_var = tape.constant(image.clone());
        let image_flat = tape.constant(Tensor::vector(image.vals().to_vec()));
        let mut r = tape.constant(top_state.clone());
        let mut a = tape.constant(top_action.clone());
        let mode = Mode::Eval;
        // hallucinated continuations are deterministic; the rng is never drawn
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut macros = Vec::new();
        for _ in start..self.macro_steps {
            let (m, nr, na) =
                self.run_macro_step(&mut tape, image_var, image_flat, r, a, true, &mode, &mut rng)?;
            macros.push(m);
            r = nr;
            a = na;
        }
        Ok((
            tape,
            EpisodeTrace {
                image: image_var,
                init: None,
                macros,
                two_level: true,
                noisy: false,
            },
        ))
    }

    /// Replay two evaluated episodes, exchange their top-level state/action
    /// vectors after `swap_after` macro-steps, and complete both in
    /// hallucination mode. Returns the two hybrid continuations.
    pub fn swap_vectors<'p>(
        &self,
        store: &'p ParamStore,
        a: (&Tape, &EpisodeTrace),
        b: (&Tape, &EpisodeTrace),
        swap_after: usize,
    ) -> Result<((Tape<'p>, EpisodeTrace), (Tape<'p>, EpisodeTrace))> {
        if swap_after >= self.macro_steps {
            return Err(Error::invalid(
                "swap_vectors",
                format!(
                    "swap_after {swap_after} must be below macro_steps {}",
                    self.macro_steps
                ),
            ));
        }
        let boundary = |tape: &Tape, trace: &EpisodeTrace| -> Result<(Tensor, Tensor, Tensor)> {
            let m = trace.macros.get(swap_after).ok_or_else(|| {
                Error::invalid("swap_vectors", "trace shorter than swap point")
            })?;
            if !trace.two_level {
                return Err(Error::invalid(
                    "swap_vectors",
                    "vector swapping needs two-level traces",
                ));
            }
            let r = m.top_state.expect("two-level trace has top state");
            let a = m.top_action.expect("two-level trace has top action");
            Ok((
                tape.value(trace.image),
                tape.value(r),
                tape.value(a),
            ))
        };
        let (img_a, r_a, a_a) = boundary(a.0, a.1)?;
        let (img_b, r_b, a_b) = boundary(b.0, b.1)?;
        if r_a.shape() != r_b.shape() || img_a.shape() != img_b.shape() {
            return Err(Error::invalid(
                "swap_vectors",
                "episodes come from different configurations",
            ));
        }
        // hybrid 1: image a continued with b's vectors; hybrid 2 the converse
        let h1 = self.continue_from(store, &img_a, &r_b, &a_b, swap_after)?;
        let h2 = self.continue_from(store, &img_b, &r_a, &a_a, swap_after)?;
        Ok((h1, h2))
    }
}

impl EpisodeModel for Apcn {
    fn run_episode<'p>(
        &self,
        store: &'p ParamStore,
        image: &Tensor,
        mode: &Mode,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Tape<'p>, EpisodeTrace)> {
        if image.shape() != [self.image_side, self.image_side] {
            return Err(Error::invalid(
                "episode",
                format!(
                    "image shape {:?} != [{n}, {n}]",
                    image.shape(),
                    n = self.image_side
                ),
            ));
        }
        let mut tape = Tape::with_params(store);
        let image_var = tape.constant(image.clone());
        let image_flat = tape.constant(Tensor::vector(image.vals().to_vec()));
        let (init, mut r, mut a) = self.init_episode(&mut tape, image, rng)?;
        let mut macros = Vec::with_capacity(self.macro_steps);
        for t in 0..self.macro_steps {
            let (m, nr, na) = self.run_macro_step(
                &mut tape,
                image_var,
                image_flat,
                r,
                a,
                mode.masked(t),
                mode,
                rng,
            )?;
            macros.push(m);
            r = nr;
            a = na;
        }
        Ok((
            tape,
            EpisodeTrace {
                image: image_var,
                init: Some(init),
                macros,
                two_level: true,
                noisy: mode.noisy(),
            },
        ))
    }

    fn penalty_thresholds(&self) -> (Option<f64>, f64) {
        (Some(self.top_threshold), self.bottom_threshold)
    }

    fn kind(&self) -> &'static str {
        "apcn2"
    }
}

/// Single-level ablation: one static state RNN and one static action RNN over
/// full-image glimpses, trained with the same predictive-coding and
/// dense-reward machinery. Matches the two-level model's glimpse budget.
pub struct ApcnSingle {
    pub image_side: usize,
    pub glimpse_side: usize,
    pub init_side: usize,
    pub steps: usize,
    pub state_size: usize,
    pub sigma: f64,
    threshold: f64,

    init_net: Dense,
    state_rnn: RnnCell,
    action_rnn: RnnCell,
    loc_head: Dense,
    decoder: Mlp,
    task_net: Mlp,
    baseline: Dense,
}

impl ApcnSingle {
    pub fn new(store: &mut ParamStore, cfg: &ApcnConfig, rng: &mut impl Rng) -> ApcnSingle {
        let n = cfg.image_side;
        let g = cfg.glimpse_side();
        let g2 = g * g;
        let size = cfg.top_size;
        let init_side = cfg.init_side();

        let init_net = Dense::new(
            store,
            rng,
            "init",
            System::State,
            init_side * init_side + 2,
            size,
            Activation::Relu,
        );
        let state_rnn = RnnCell::new(store, rng, "state", System::State, size, g2 + 2);
        let action_rnn = RnnCell::new(store, rng, "action", System::Action, size, size);
        let loc_head = Dense::scaled(store, rng, "loc", System::Action, size, 2, Activation::Linear, 0.0);
        let decoder = Mlp::new(
            store,
            rng,
            "decoder",
            System::State,
            &[size + 2, cfg.decoder_hidden, g2],
            &[Activation::Relu, Activation::Sigmoid],
            1.0,
        );
        let task_net = Mlp::new(
            store,
            rng,
            "task",
            System::Action,
            &[size, cfg.decoder_hidden, n * n],
            &[Activation::Relu, Activation::Sigmoid],
            1.0,
        );
        let baseline = Dense::scaled(
            store,
            rng,
            "baseline",
            System::Baseline,
            size,
            1,
            Activation::Linear,
            0.0,
        );

        ApcnSingle {
            image_side: n,
            glimpse_side: g,
            init_side,
            steps: cfg.macro_steps * cfg.micro_steps,
            state_size: size,
            sigma: cfg.sigma,
            threshold: cfg.flat_threshold(),
            init_net,
            state_rnn,
            action_rnn,
            loc_head,
            decoder,
            task_net,
            baseline,
        }
    }
}

impl EpisodeModel for ApcnSingle {
    fn run_episode<'p>(
        &self,
        store: &'p ParamStore,
        image: &Tensor,
        mode: &Mode,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Tape<'p>, EpisodeTrace)> {
        if image.shape() != [self.image_side, self.image_side] {
            return Err(Error::invalid(
                "episode",
                format!(
                    "image shape {:?} != [{n}, {n}]",
                    image.shape(),
                    n = self.image_side
                ),
            ));
        }
        let g2 = self.glimpse_side * self.glimpse_side;
        let mut tape = Tape::with_params(store);
        let image_var = tape.constant(image.clone());
        let image_flat = tape.constant(Tensor::vector(image.vals().to_vec()));

        // init from a random glimpse, then A₀ from zeroed previous action
        let lx = rng.random_range(-0.5..=0.5);
        let ly = rng.random_range(-0.5..=0.5);
        let scale = self.init_side as f64 / self.image_side as f64;
        let g_init = glimpse::extract_data(image, (lx, ly), scale)?;
        let g_flat = tape.constant(Tensor::vector(g_init.vals().to_vec()));
        let l_init = tape.constant(Tensor::vector(vec![lx, ly]));
        let input = tape.concat(&[g_flat, l_init])?;
        let r0 = self.init_net.forward(&mut tape, input)?;
        let zero_a = tape.constant(Tensor::zeros(vec![self.state_size]));
        let r0_detached = tape.detach(r0);
        let a0 = self.action_rnn.step(&mut tape, zero_a, r0_detached)?;
        let init = InitTrace {
            loc: [lx, ly],
            glimpse: g_flat,
            state: r0,
            action: a0,
        };

        let masked = mode.masked(0);
        let entry_recon = self.task_net.forward(&mut tape, a0)?;
        let task_entry = mse(&mut tape, entry_recon, image_flat)?;

        let mut state = r0;
        let mut action = a0;
        let mut micros = Vec::with_capacity(self.steps);
        for _ in 0..self.steps {
            let state_detached = tape.detach(state);
            let next_action = self.action_rnn.step(&mut tape, action, state_detached)?;
            let loc_mean = self.loc_head.forward(&mut tape, next_action)?;
            let loc = sample_pair(rng, tape.vals(loc_mean), self.sigma, mode.noisy());
            let loc_const = tape.constant(Tensor::vector(loc.to_vec()));

            let dec_in = tape.concat(&[state, loc_const])?;
            let pred = self.decoder.forward(&mut tape, dec_in)?;

            let (glimpse_var, err) = if masked {
                (None, tape.constant(Tensor::zeros(vec![g2])))
            } else {
                let patch = tape.extract_patch(image_var, loc_const, self.glimpse_side)?;
                let flat = tape.reshape(patch, vec![g2])?;
                let err = tape.sub(flat, pred)?;
                (Some(flat), err)
            };

            let state_in = tape.concat(&[err, loc_const])?;
            let next_state = self.state_rnn.step(&mut tape, state, state_in)?;

            let action_detached = tape.detach(next_action);
            let baseline = self.baseline.forward(&mut tape, action_detached)?;
            let recon = self.task_net.forward(&mut tape, next_action)?;
            let task_loss = mse(&mut tape, recon, image_flat)?;

            micros.push(MicroTrace {
                action: next_action,
                state: next_state,
                loc_mean,
                loc,
                glimpse: glimpse_var,
                pred,
                err,
                baseline,
                recon,
                task_loss,
            });
            state = next_state;
            action = next_action;
        }

        let macros = vec![MacroTrace {
            top_state: None,
            top_action: None,
            next_top_state: None,
            loc_mean: None,
            loc: None,
            opt_mean: None,
            opt: None,
            theta_s: None,
            theta_a: None,
            frame: None,
            ref_pred: None,
            ref_target: None,
            baseline: None,
            masked,
            task_entry,
            micros,
        }];
        Ok((
            tape,
            EpisodeTrace {
                image: image_var,
                init: Some(init),
                macros,
                two_level: false,
                noisy: mode.noisy(),
            },
        ))
    }

    fn penalty_thresholds(&self) -> (Option<f64>, f64) {
        (None, self.threshold)
    }

    fn kind(&self) -> &'static str {
        "apcn1"
    }
}

// ---- parse trees ----

/// Serialization-ready hierarchy of reference frames, part locations and
/// glimpse images. Locations are stored both in the parent's normalized
/// frame and as absolute pixel centers; composing frames reproduces the
/// exact rectangles the sensor sampled.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParseTree {
    pub image_side: usize,
    pub root: ParseNode,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParseNode {
    /// Index among this node's siblings, in sampling order.
    pub frame_index: usize,
    /// Center in the parent frame's normalized coordinates.
    pub location_norm: [f64; 2],
    /// Absolute center in image pixel coordinates.
    pub location_px: [f64; 2],
    /// Side fraction relative to the parent frame.
    pub scale: f64,
    /// Side of this node's patch in image pixels.
    pub side_px: usize,
    /// Sampled content, row-major; absent for hallucinated steps.
    pub glimpse: Option<Vec<f64>>,
    /// Decoder prediction for this node, if one was made.
    pub predicted: Option<Vec<f64>>,
    pub children: Vec<ParseNode>,
}

impl ParseTree {
    pub fn node_count(&self) -> usize {
        fn count(n: &ParseNode) -> usize {
            1 + n.children.iter().map(count).sum::<usize>()
        }
        count(&self.root)
    }
}

/// Build the parse tree for a completed two-level episode.
pub fn export_parse_tree(tape: &Tape, trace: &EpisodeTrace) -> Result<ParseTree> {
    if !trace.two_level {
        return Err(Error::invalid(
            "parse_tree",
            "parse trees require a two-level episode",
        ));
    }
    let n = tape.shape(trace.image)[0];
    let mut frames = Vec::with_capacity(trace.macros.len());
    for (t, m) in trace.macros.iter().enumerate() {
        let loc = m.loc.expect("two-level trace has frame locations");
        let frame_side = m
            .frame
            .map(|f| tape.shape(f)[0])
            .unwrap_or_else(|| glimpse::patch_side(n, 0.5));
        let mut leaves = Vec::with_capacity(m.micros.len());
        for (j, micro) in m.micros.iter().enumerate() {
            let abs = glimpse::compose((loc[0], loc[1]), frame_side, n, (micro.loc[0], micro.loc[1]));
            let side = (tape.numel(micro.pred) as f64).sqrt() as usize;
            leaves.push(ParseNode {
                frame_index: j,
                location_norm: micro.loc,
                location_px: [glimpse::to_pixel(abs.0, n), glimpse::to_pixel(abs.1, n)],
                scale: side as f64 / frame_side as f64,
                side_px: side,
                glimpse: micro.glimpse.map(|g| tape.vals(g).to_vec()),
                predicted: Some(tape.vals(micro.pred).to_vec()),
                children: Vec::new(),
            });
        }
        frames.push(ParseNode {
            frame_index: t,
            location_norm: loc,
            location_px: [
                glimpse::to_pixel(loc[0], n),
                glimpse::to_pixel(loc[1], n),
            ],
            scale: frame_side as f64 / n as f64,
            side_px: frame_side,
            glimpse: m.frame.map(|f| tape.vals(f).to_vec()),
            predicted: m.ref_pred.map(|p| tape.vals(p).to_vec()),
            children: leaves,
        });
    }
    Ok(ParseTree {
        image_side: n,
        root: ParseNode {
            frame_index: 0,
            location_norm: [0.0, 0.0],
            location_px: [
                glimpse::to_pixel(0.0, n),
                glimpse::to_pixel(0.0, n),
            ],
            scale: 1.0,
            side_px: n,
            glimpse: Some(tape.vals(trace.image).to_vec()),
            predicted: None,
            children: frames,
        },
    })
}
