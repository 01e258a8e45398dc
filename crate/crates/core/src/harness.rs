//! Orchestration: the two-phase training loop, deterministic seed
//! derivation, episode rollouts under several policies, and the
//! greedy/random/oracle comparison used for evaluation.
//!
//! Training runs in two phases over one long stream of environment steps:
//! a warm-up phase in which actions are uniformly random and only the
//! perception stack learns (transitions are still recorded), and a control
//! phase in which the agent acts epsilon-greedily and the Q-network trains
//! by one-step TD on every step. All randomness flows from one master seed
//! through tagged derivations, so runs are reproducible bit for bit.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::checkpoint::Snapshot;
use crate::controller::{
    combined_reward, epsilon_at, greedy_action, intrinsic_reward, select_action,
    td_update_sequential, DqnConfig, PolicyState, QNet, ReplayBuffer, TdWorkspace, Transition,
    Q_FC1_WIDTH, Q_FC2_WIDTH, Q_GRU_WIDTH,
};
use crate::env::{Action, Env, EnvConfig, ACTION_COUNT};
use crate::error::{Error, Result};
use crate::events::{entropy, normalize_window};
use crate::perception::{
    argmax_cell, prediction_error, uncertainty_map, Encoder, PerceptionConfig, Predictor,
};
use crate::trace::{event_kind_label, EpisodeTrace, TraceStep};

/// Deterministic seed derivation: every random stream in a run is keyed by
/// the master seed and a human-readable tag.
pub mod seeds {
    /// FNV-1a over the tag bytes.
    pub fn fnv1a64(s: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in s.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// SplitMix64 finaliser, used to decorrelate nearby inputs.
    pub fn splitmix64(x: u64) -> u64 {
        let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// The seed for the stream named `tag` under `master`.
    pub fn derive(master: u64, tag: &str) -> u64 {
        splitmix64(master ^ fnv1a64(tag))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub total_steps: u64,
    /// Steps of the warm-up phase (uniform random actions, perception only).
    pub phase1_steps: u64,
    /// Episode length in steps.
    pub horizon: u64,
    /// Held-out episodes per policy in evaluations.
    pub eval_episodes: usize,
    pub out_dir: PathBuf,
    pub master_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            total_steps: 50_000,
            phase1_steps: 10_000,
            horizon: 500,
            eval_episodes: 20,
            out_dir: PathBuf::from("out"),
            master_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be >= 1"));
        }
        if self.phase1_steps > self.total_steps {
            return Err(Error::config("phase1_steps", "must not exceed total_steps"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be >= 1"));
        }
        if self.eval_episodes == 0 {
            return Err(Error::config("eval_episodes", "must be >= 1"));
        }
        Ok(())
    }
}

/// How often periodic checkpoints are written during training.
pub const CHECKPOINT_EVERY: u64 = 10_000;
pub const TRAIN_LOG_NAME: &str = "train_log.csv";
pub const TRAIN_LOG_HEADER: &str = "step,eps,mean_q,td_loss,episode_reward";

/// Everything a finished training run hands back.
#[derive(Debug)]
pub struct TrainingOutputs {
    pub snapshot: Snapshot,
    pub out_dir: PathBuf,
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub episodes_completed: u64,
    /// Perception updates skipped because of non-finite gradients.
    pub predictor_skipped_updates: u64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// Runs the full two-phase training loop and writes the step log plus
/// periodic and final checkpoints into the output directory.
pub fn run_training(
    env_cfg: &EnvConfig,
    pcfg: &PerceptionConfig,
    dqn: &DqnConfig,
    run: &RunConfig,
) -> Result<TrainingOutputs> {
    env_cfg.validate()?;
    pcfg.validate()?;
    dqn.validate()?;
    run.validate()?;
    std::fs::create_dir_all(&run.out_dir)
        .map_err(|e| Error::io(&run.out_dir, e))?;

    let master = run.master_seed;
    let encoder = Encoder::new(env_cfg.frame_px, pcfg)?;
    let (fh, fw, fd) = encoder.feature_shape();
    let input_dim = fh * fw * fd + fh * fw;
    let mut predictor = Predictor::new(pcfg, seeds::derive(master, "init/predictor"))?;
    let mut online = QNet::new(
        seeds::derive(master, "init/qnet"),
        input_dim,
        Q_GRU_WIDTH,
        Q_FC1_WIDTH,
        Q_FC2_WIDTH,
        ACTION_COUNT,
    );
    let mut target = online.clone();
    let mut buffer = ReplayBuffer::new(dqn.buffer_capacity)?;
    let mut td_ws = TdWorkspace::for_net(&online);
    let mut explore_rng = ChaCha8Rng::seed_from_u64(seeds::derive(master, "explore"));
    let mut replay_rng = ChaCha8Rng::seed_from_u64(seeds::derive(master, "replay"));

    let mut log = String::with_capacity(run.total_steps as usize * 48 + 64);
    log.push_str(TRAIN_LOG_HEADER);
    log.push('\n');

    let mut global_t: u64 = 0;
    let mut episode: u64 = 0;
    let mut episodes_completed: u64 = 0;
    let mut predictor_skipped: u64 = 0;
    let mut input = vec![0.0; input_dim];

    while global_t < run.total_steps {
        // ----- episode start -----
        let ep_seed = seeds::derive(master, &format!("episode/{episode}"));
        let mut env = Env::new(&EnvConfig { seed: ep_seed, ..env_cfg.clone() })?;
        predictor.reset();
        let f0 = encoder.encode(&env.render())?;
        let out0 = predictor.train_step(&f0)?;
        if out0.skipped_update {
            predictor_skipped += 1;
        }
        let alpha0 = uncertainty_map(&out0.errors, pcfg.tau)?;
        let mut state = Arc::new(PolicyState::new(f0, alpha0)?);
        let mut episode_reward = 0.0;
        let mut episode_complete = true;

        for local_t in 0..run.horizon {
            if global_t >= run.total_steps {
                episode_complete = false;
                break;
            }
            let phase2 = global_t >= run.phase1_steps;
            let t2 = global_t.saturating_sub(run.phase1_steps);

            // ----- choose an action -----
            let (action, eps_now, mean_q) = if phase2 {
                let eps = epsilon_at(dqn, t2);
                state.write_input(&mut input);
                let q = online.q_values(&input);
                let a = select_action(&mut explore_rng, &q, eps);
                let mq = q.iter().sum::<f64>() / q.len() as f64;
                (Action::from_index(a).expect("q width equals action count"), eps, Some(mq))
            } else {
                let a = explore_rng.gen_range(0..ACTION_COUNT);
                (Action::from_index(a).expect("in range"), 1.0, None)
            };

            // ----- step world, observe, learn to predict -----
            let (obs, info) = env.step(action);
            let f_next = encoder.encode(&obs)?;
            let outcome = predictor.train_step(&f_next)?;
            if outcome.skipped_update {
                predictor_skipped += 1;
            }
            let alpha_next = uncertainty_map(&outcome.errors, pcfg.tau)?;
            let r_int = intrinsic_reward(&alpha_next, fh, fw);
            let r_ext = info.extrinsic_reward;
            let reward = combined_reward(dqn.reward_mode, dqn.reward_mix, r_int, r_ext);
            episode_reward += reward;

            let next_state = Arc::new(PolicyState::new(f_next, alpha_next)?);
            let terminal = local_t + 1 == run.horizon;
            buffer.push(Transition {
                state: Arc::clone(&state),
                action: action.index(),
                reward,
                next_state: Arc::clone(&next_state),
                terminal,
            });
            state = next_state;

            // ----- TD learning -----
            let mut td_loss = None;
            if phase2 && buffer.len() >= dqn.batch_size {
                if t2 % dqn.target_sync_every == 0 {
                    target.sync_from(&online);
                }
                let batch = buffer.sample(&mut replay_rng, dqn.batch_size)?;
                // The run is single-threaded by design, so the update goes
                // through the sequential chunk path directly.
                let out = td_update_sequential(
                    &mut online,
                    &target,
                    &batch,
                    dqn.gamma,
                    dqn.learn_rate,
                    &mut td_ws,
                )?;
                if out.skipped_update {
                    let fault = run.out_dir.join("checkpoint_fault.bin");
                    make_snapshot(env_cfg, pcfg, &encoder, &predictor, &online)?.save(&fault)?;
                    return Err(Error::Numeric(format!(
                        "non-finite TD gradients at step {global_t}; last good state saved to {}",
                        fault.display()
                    )));
                }
                td_loss = Some(out.loss);
            }

            // ----- log row -----
            let _ = write!(log, "{global_t},{eps_now:.6},{},{},", fmt_opt(mean_q), fmt_opt(td_loss));
            if terminal {
                let _ = writeln!(log, "{episode_reward:.6}");
            } else {
                log.push('\n');
            }

            global_t += 1;
            if global_t % CHECKPOINT_EVERY == 0 {
                let path = run.out_dir.join(format!("checkpoint_{global_t:07}.bin"));
                make_snapshot(env_cfg, pcfg, &encoder, &predictor, &online)?.save(&path)?;
            }
        }
        if episode_complete {
            episodes_completed += 1;
        }
        episode += 1;
    }

    let log_path = run.out_dir.join(TRAIN_LOG_NAME);
    std::fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = run.out_dir.join("checkpoint_final.bin");
    let snapshot = make_snapshot(env_cfg, pcfg, &encoder, &predictor, &online)?;
    snapshot.save(&final_checkpoint)?;

    Ok(TrainingOutputs {
        snapshot,
        out_dir: run.out_dir.clone(),
        log_path,
        final_checkpoint,
        episodes_completed,
        predictor_skipped_updates: predictor_skipped,
    })
}

fn make_snapshot(
    env_cfg: &EnvConfig,
    pcfg: &PerceptionConfig,
    encoder: &Encoder,
    predictor: &Predictor,
    online: &QNet,
) -> Result<Snapshot> {
    Snapshot::new(
        env_cfg.frame_px,
        pcfg.tau,
        encoder.clone(),
        predictor.clone(),
        online.clone(),
    )
}

/// Behaviour policy for evaluation rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// Argmax of the trained Q-network.
    Greedy,
    /// Uniform random actions.
    Random,
    /// One-step lookahead cheat: simulates every action and picks the one
    /// that moves the most-surprising cell closest to the grid centre.
    Oracle,
    /// Always the same action (a stationary camera uses `Stop`).
    Fixed(Action),
}

impl Policy {
    pub fn parse(s: &str) -> Result<Policy> {
        match s.trim() {
            "greedy" => Ok(Policy::Greedy),
            "random" => Ok(Policy::Random),
            "oracle" => Ok(Policy::Oracle),
            other => Action::parse(other).map(Policy::Fixed).map_err(|_| {
                Error::Usage(format!(
                    "unknown policy `{other}` (expected greedy, random, oracle, or an action name)"
                ))
            }),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Policy::Greedy => "greedy".into(),
            Policy::Random => "random".into(),
            Policy::Oracle => "oracle".into(),
            Policy::Fixed(a) => a.name().into(),
        }
    }
}

/// One evaluation episode: the pinned-format trace plus the per-step
/// controller aggregation vectors (aligned with trace rows).
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRollout {
    pub trace: EpisodeTrace,
    pub hiddens: Vec<Vec<f64>>,
}

/// Plays one episode with frozen weights (no learning) and records it.
///
/// The recurrent predictor still accumulates state within the episode, so
/// surprise reflects genuine dynamics; only parameters are frozen. The
/// `window_n` parameter sizes the trailing entropy window recorded in the
/// trace (`entropy` is null until the window first fills).
pub fn run_episode(
    snapshot: &Snapshot,
    env_cfg: &EnvConfig,
    horizon: u64,
    window_n: usize,
    seed: u64,
    policy: Policy,
) -> Result<EpisodeRollout> {
    if window_n < 2 {
        return Err(Error::config("window_n", "must be >= 2"));
    }
    let mut env = Env::new(&EnvConfig { seed, ..env_cfg.clone() })?;
    let encoder = &snapshot.encoder;
    let (fh, fw, _) = encoder.feature_shape();
    let mut predictor = snapshot.predictor.clone();
    predictor.reset();
    let qnet = &snapshot.qnet;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "policy"));

    let mut f = encoder.encode(&env.render())?;
    let err0 = predictor.observe(&f)?;
    let mut alpha = uncertainty_map(&err0, snapshot.tau)?;
    let mut input = vec![0.0; qnet.input_dim()];
    let mut le_window: Vec<f64> = Vec::new();

    let mut q_cached = {
        let st = PolicyState::new(f.clone(), alpha.clone())?;
        st.write_input(&mut input);
        qnet.q_values(&input)
    };

    let mut steps = Vec::with_capacity(horizon as usize);
    let mut hiddens = Vec::with_capacity(horizon as usize);

    for t in 0..horizon {
        let action = match policy {
            Policy::Greedy => Action::from_index(greedy_action(&q_cached)).expect("valid index"),
            Policy::Random => Action::from_index(rng.gen_range(0..ACTION_COUNT)).expect("valid"),
            Policy::Fixed(a) => a,
            Policy::Oracle => oracle_action(&env, encoder, &predictor)?,
        };

        let (obs, info) = env.step(action);
        let f_next = encoder.encode(&obs)?;
        let errors = predictor.observe(&f_next)?;
        let alpha_next = uncertainty_map(&errors, snapshot.tau)?;
        let r_int = intrinsic_reward(&alpha_next, fh, fw);

        le_window.push(errors.total);
        let window_entropy = if le_window.len() >= window_n {
            let tail = &le_window[le_window.len() - window_n..];
            Some(entropy(&normalize_window(tail)?))
        } else {
            None
        };

        let (ui, uj) = argmax_cell(&alpha_next, fw);
        steps.push(TraceStep {
            step: t,
            action: action.index(),
            le: errors.total,
            entropy: window_entropy,
            r_intrinsic: r_int,
            r_extrinsic: info.extrinsic_reward,
            alpha_argmax: [ui, uj],
            gt_boundary: info.gt_boundary,
            gt_event_kind: event_kind_label(info.gt_event_kind),
            target_visible: info.target_visible,
        });

        f = f_next;
        alpha = alpha_next;
        let st = PolicyState::new(f.clone(), alpha.clone())?;
        st.write_input(&mut input);
        let (q, h) = qnet.q_values_with_hidden(&input);
        q_cached = q;
        hiddens.push(h);
    }

    Ok(EpisodeRollout { trace: EpisodeTrace { steps }, hiddens })
}

/// Simulates all actions one step ahead and picks the one whose resulting
/// surprise peak lands closest to the grid centre (lowest index on ties).
fn oracle_action(env: &Env, encoder: &Encoder, predictor: &Predictor) -> Result<Action> {
    let predicted = predictor.predict();
    let (fh, fw, _) = encoder.feature_shape();
    let ci = (fh as f64 - 1.0) / 2.0;
    let cj = (fw as f64 - 1.0) / 2.0;
    let mut best: Option<(f64, usize)> = None;
    for a in Action::ALL {
        let mut sim = env.clone();
        let (obs, _) = sim.step(a);
        let f = encoder.encode(&obs)?;
        let err = prediction_error(&f, &predicted)?;
        let (ui, uj) = argmax_cell(&err.per_cell, fw);
        let d = ((ci - ui as f64).powi(2) + (cj - uj as f64).powi(2)).sqrt();
        let key = (d, a.index());
        if best.is_none() || key < best.unwrap() {
            best = Some(key);
        }
    }
    Ok(Action::from_index(best.expect("seven candidates").1).expect("valid index"))
}

/// Seeded specification of one evaluation episode.
#[derive(Debug, Clone, Copy)]
pub struct RolloutSpec {
    pub seed: u64,
    pub policy: Policy,
}

/// Rolls out many episodes, in parallel when the `parallel` feature is on.
/// Episodes are independent and individually seeded, so the output order
/// and contents are identical either way.
pub fn rollout_many(
    snapshot: &Snapshot,
    env_cfg: &EnvConfig,
    horizon: u64,
    window_n: usize,
    specs: &[RolloutSpec],
) -> Result<Vec<EpisodeRollout>> {
    #[cfg(feature = "parallel")]
    {
        specs
            .par_iter()
            .map(|s| run_episode(snapshot, env_cfg, horizon, window_n, s.seed, s.policy))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        rollout_many_seq(snapshot, env_cfg, horizon, window_n, specs)
    }
}

/// `rollout_many` pinned to one thread; exists so benchmarks can compare.
pub fn rollout_many_seq(
    snapshot: &Snapshot,
    env_cfg: &EnvConfig,
    horizon: u64,
    window_n: usize,
    specs: &[RolloutSpec],
) -> Result<Vec<EpisodeRollout>> {
    specs
        .iter()
        .map(|s| run_episode(snapshot, env_cfg, horizon, window_n, s.seed, s.policy))
        .collect()
}

/// Mean per-episode reward sums for the three comparison policies on a
/// shared set of held-out episode seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyComparison {
    pub greedy_intrinsic: f64,
    pub random_intrinsic: f64,
    pub oracle_intrinsic: f64,
    pub greedy_extrinsic: f64,
    pub random_extrinsic: f64,
    pub oracle_extrinsic: f64,
    pub episodes: usize,
}

/// Runs greedy, random, and oracle policies over the same held-out episode
/// seeds and averages their intrinsic and extrinsic returns.
pub fn policy_comparison(
    snapshot: &Snapshot,
    env_cfg: &EnvConfig,
    horizon: u64,
    window_n: usize,
    episodes: usize,
    master_seed: u64,
) -> Result<PolicyComparison> {
    if episodes == 0 {
        return Err(Error::Usage("policy comparison over zero episodes".into()));
    }
    let heldout: Vec<u64> = (0..episodes)
        .map(|i| seeds::derive(master_seed, &format!("heldout/{i}")))
        .collect();
    let mut means = [[0.0f64; 2]; 3];
    for (pi, policy) in [Policy::Greedy, Policy::Random, Policy::Oracle].into_iter().enumerate() {
        let specs: Vec<RolloutSpec> =
            heldout.iter().map(|&seed| RolloutSpec { seed, policy }).collect();
        let rollouts = rollout_many(snapshot, env_cfg, horizon, window_n, &specs)?;
        let n = rollouts.len() as f64;
        means[pi][0] = rollouts
            .iter()
            .map(|r| r.trace.steps.iter().map(|s| s.r_intrinsic).sum::<f64>())
            .sum::<f64>()
            / n;
        means[pi][1] = rollouts
            .iter()
            .map(|r| r.trace.steps.iter().map(|s| s.r_extrinsic).sum::<f64>())
            .sum::<f64>()
            / n;
    }
    Ok(PolicyComparison {
        greedy_intrinsic: means[0][0],
        random_intrinsic: means[1][0],
        oracle_intrinsic: means[2][0],
        greedy_extrinsic: means[0][1],
        random_extrinsic: means[1][1],
        oracle_extrinsic: means[2][1],
        episodes,
    })
}
