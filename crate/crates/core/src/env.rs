//! Deterministic 2D arena with a single scripted target and a first-person
//! grayscale view rendered through a pinhole camera model.
//!
//! The world is the square `[0, world_size]^2`. The agent carries a pose
//! `(x, y, heading)` and moves with a seven-action set; the target follows a
//! three-state script (walk straight, turn in place, stop) with seeded dwell
//! times. Rendering composites a static per-episode background texture with
//! a two-lobe shaded blob for the target, so both translation and rotation
//! of the target are visible on screen.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete action set. The indices are part of the controller contract:
/// Q-vectors are laid out in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Forward,
    Backward,
    Stop,
    TurnLeft,
    TurnRight,
    ForwardLeft,
    ForwardRight,
}

pub const ACTION_COUNT: usize = 7;

impl Action {
    pub const ALL: [Action; ACTION_COUNT] = [
        Action::Forward,
        Action::Backward,
        Action::Stop,
        Action::TurnLeft,
        Action::TurnRight,
        Action::ForwardLeft,
        Action::ForwardRight,
    ];

    pub fn index(self) -> usize {
        match self {
            Action::Forward => 0,
            Action::Backward => 1,
            Action::Stop => 2,
            Action::TurnLeft => 3,
            Action::TurnRight => 4,
            Action::ForwardLeft => 5,
            Action::ForwardRight => 6,
        }
    }

    pub fn from_index(idx: usize) -> Option<Action> {
        Action::ALL.get(idx).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Forward => "forward",
            Action::Backward => "backward",
            Action::Stop => "stop",
            Action::TurnLeft => "turn_left",
            Action::TurnRight => "turn_right",
            Action::ForwardLeft => "forward_left",
            Action::ForwardRight => "forward_right",
        }
    }

    /// Parses either an action name or a bare index, as used in action
    /// script files.
    pub fn parse(s: &str) -> Result<Action> {
        let t = s.trim();
        if let Ok(idx) = t.parse::<usize>() {
            return Action::from_index(idx)
                .ok_or_else(|| Error::Usage(format!("action index {idx} out of range 0..6")));
        }
        Action::ALL
            .iter()
            .copied()
            .find(|a| a.name() == t)
            .ok_or_else(|| Error::Usage(format!("unknown action `{t}`")))
    }
}

/// Behaviour states the target cycles through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    WalkStraight,
    Turn,
    Stop,
}

impl EventKind {
    pub const ALL: [EventKind; 3] = [EventKind::WalkStraight, EventKind::Turn, EventKind::Stop];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::WalkStraight => "walk",
            EventKind::Turn => "turn",
            EventKind::Stop => "stop",
        }
    }

    pub fn parse(s: &str) -> Option<EventKind> {
        EventKind::ALL.iter().copied().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Side length of the square arena, metres.
    pub world_size: f64,
    /// Rendered frame is frame_px x frame_px grayscale.
    pub frame_px: usize,
    /// Translation per Forward/Backward step, metres.
    pub agent_step: f64,
    /// Rotation per TurnLeft/TurnRight step, radians.
    pub agent_turn: f64,
    /// Horizontal field of view, radians, in (0, pi).
    pub fov: f64,
    /// Target translation per WalkStraight step, metres.
    pub target_speed: f64,
    /// Inclusive bounds on how many steps one target event lasts.
    pub event_dwell: (u32, u32),
    /// Distance at which the extrinsic reward's range term reaches zero.
    pub nominal_dist: f64,
    /// When false the arena is empty: no target is placed or rendered.
    pub target_enabled: bool,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            world_size: 8.0,
            frame_px: 64,
            agent_step: 0.15,
            agent_turn: 0.12,
            fov: 1.2,
            target_speed: 0.05,
            event_dwell: (50, 110),
            nominal_dist: 2.0,
            target_enabled: true,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.world_size > 0.0) {
            return Err(Error::config("world_size", "must be > 0"));
        }
        if self.frame_px < 16 {
            return Err(Error::config("frame_px", "must be >= 16"));
        }
        if !(self.agent_step > 0.0) {
            return Err(Error::config("agent_step", "must be > 0"));
        }
        if !(self.agent_turn > 0.0) {
            return Err(Error::config("agent_turn", "must be > 0"));
        }
        if !(self.fov > 0.0 && self.fov < PI) {
            return Err(Error::config("fov", "must lie strictly between 0 and pi"));
        }
        if !(self.target_speed > 0.0) {
            return Err(Error::config("target_speed", "must be > 0"));
        }
        if self.event_dwell.0 < 1 || self.event_dwell.0 > self.event_dwell.1 {
            return Err(Error::config("event_dwell", "requires 1 <= min <= max"));
        }
        if !(self.nominal_dist > 0.0) {
            return Err(Error::config("nominal_dist", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentPose {
    pub x: f64,
    pub y: f64,
    /// Radians, wrapped to [-pi, pi).
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct TargetState {
    pub(crate) x: f64,
    pub(crate) y: f64,
    pub(crate) heading: f64,
    /// +1 or -1; direction of rotation during Turn events.
    pub(crate) turn_dir: f64,
}

/// Seeded generator of the target's behaviour sequence.
#[derive(Debug, Clone)]
pub struct TargetScript {
    current: EventKind,
    dwell_remaining: u32,
    rng: ChaCha8Rng,
    /// `(step, kind)` for every event, starting with the initial one at step 0.
    event_log: Vec<(u64, EventKind)>,
}

impl TargetScript {
    fn new(mut rng: ChaCha8Rng, dwell: (u32, u32)) -> Self {
        let current = EventKind::ALL[rng.gen_range(0..EventKind::ALL.len())];
        let dwell_remaining = rng.gen_range(dwell.0..=dwell.1);
        TargetScript { current, dwell_remaining, rng, event_log: vec![(0, current)] }
    }

    pub fn current(&self) -> EventKind {
        self.current
    }

    pub fn event_log(&self) -> &[(u64, EventKind)] {
        &self.event_log
    }

    /// Advances the script by one step. Returns true when a new event begins
    /// on this step. The successor is drawn uniformly from the two kinds
    /// other than the current one.
    fn advance(&mut self, step: u64, dwell: (u32, u32)) -> bool {
        if self.dwell_remaining == 0 {
            let others: Vec<EventKind> =
                EventKind::ALL.iter().copied().filter(|k| *k != self.current).collect();
            self.current = others[self.rng.gen_range(0..others.len())];
            self.dwell_remaining = self.rng.gen_range(dwell.0..=dwell.1);
            self.event_log.push((step, self.current));
            self.dwell_remaining -= 1;
            true
        } else {
            self.dwell_remaining -= 1;
            false
        }
    }

    fn draw_turn_dir(&mut self) -> f64 {
        if self.rng.gen_range(0..2) == 0 {
            -1.0
        } else {
            1.0
        }
    }
}

/// Fresh ground truth attached to every step's observation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub target_visible: bool,
    /// `(u, v)` pixel coordinates of the target body centre, present iff visible.
    pub target_centroid_px: Option<(f64, f64)>,
    /// Current target event; `None` when the arena is empty.
    pub gt_event_kind: Option<EventKind>,
    /// True on the first step of a new target event.
    pub gt_boundary: bool,
    pub extrinsic_reward: f64,
}

/// Rendered grayscale frame, row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub px: usize,
    pub data: Vec<f64>,
}

const TARGET_BODY_RADIUS: f64 = 0.28;
const HEAD_OFFSET: f64 = 0.34;
const HEAD_RADIUS_FRAC: f64 = 0.55;
const TARGET_TURN_RATE: f64 = 0.09;
const BODY_PEAK: f64 = 0.95;
const HEAD_PEAK: f64 = 1.0;
const BACKGROUND_CELLS: usize = 8;

#[derive(Debug, Clone)]
pub struct Env {
    cfg: EnvConfig,
    agent: AgentPose,
    target: Option<TargetState>,
    script: TargetScript,
    background: Vec<f64>,
    step_count: u64,
}

impl Env {
    /// Builds the arena: agent at the centre facing +x, background texture
    /// fixed for the episode, and (unless disabled) the target placed at a
    /// seeded position inside the field of view.
    pub fn new(cfg: &EnvConfig) -> Result<Env> {
        cfg.validate()?;
        let mut root = ChaCha8Rng::seed_from_u64(cfg.seed);
        let background = render_background_texture(cfg.frame_px, &mut root);
        let agent = AgentPose { x: cfg.world_size / 2.0, y: cfg.world_size / 2.0, heading: 0.0 };

        let target = if cfg.target_enabled {
            // In front of the agent, comfortably inside the view cone.
            let bearing = root.gen_range(-0.8..0.8) * cfg.fov / 2.0;
            let lo = (0.6 * cfg.nominal_dist).min(cfg.world_size * 0.35);
            let hi = (1.4 * cfg.nominal_dist).min(cfg.world_size * 0.45);
            let dist = root.gen_range(lo..=hi.max(lo + 1e-9));
            let phi = agent.heading - bearing;
            let margin = 0.2;
            let x = (agent.x + dist * phi.cos()).clamp(margin, cfg.world_size - margin);
            let y = (agent.y + dist * phi.sin()).clamp(margin, cfg.world_size - margin);
            let heading = root.gen_range(-PI..PI);
            Some(TargetState { x, y, heading, turn_dir: 1.0 })
        } else {
            None
        };

        let script_rng = ChaCha8Rng::seed_from_u64(root.gen());
        let script = TargetScript::new(script_rng, cfg.event_dwell);
        let mut env = Env { cfg: cfg.clone(), agent, target, script, background, step_count: 0 };
        // Fix the initial turn direction from the script stream so Turn
        // events starting at step 0 are reproducible.
        let dir = env.script.draw_turn_dir();
        if let Some(t) = env.target.as_mut() {
            t.turn_dir = dir;
        }
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn agent(&self) -> AgentPose {
        self.agent
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn script(&self) -> &TargetScript {
        &self.script
    }

    /// Ground truth for the current state without advancing anything.
    /// The initial event is not flagged as a boundary.
    pub fn initial_info(&self) -> StepInfo {
        self.info(false)
    }

    /// Applies the agent action, advances the target script and motion, and
    /// returns the new observation plus fresh ground truth.
    pub fn step(&mut self, action: Action) -> (Observation, StepInfo) {
        self.apply_agent_action(action);
        let boundary = self.advance_target();
        self.step_count += 1;
        let info = self.info(boundary);
        (self.render(), info)
    }

    fn apply_agent_action(&mut self, action: Action) {
        let step = self.cfg.agent_step;
        let turn = self.cfg.agent_turn;
        match action {
            Action::Forward => self.translate(step),
            Action::Backward => self.translate(-step),
            Action::Stop => {}
            Action::TurnLeft => self.agent.heading = wrap_angle(self.agent.heading - turn),
            Action::TurnRight => self.agent.heading = wrap_angle(self.agent.heading + turn),
            Action::ForwardLeft => {
                self.translate(step);
                self.agent.heading = wrap_angle(self.agent.heading - turn);
            }
            Action::ForwardRight => {
                self.translate(step);
                self.agent.heading = wrap_angle(self.agent.heading + turn);
            }
        }
    }

    fn translate(&mut self, dist: f64) {
        self.agent.x = (self.agent.x + dist * self.agent.heading.cos())
            .clamp(0.0, self.cfg.world_size);
        self.agent.y = (self.agent.y + dist * self.agent.heading.sin())
            .clamp(0.0, self.cfg.world_size);
    }

    /// Advances the target script and moves the target; returns whether a
    /// new event started on this step.
    fn advance_target(&mut self) -> bool {
        if self.target.is_none() {
            return false;
        }
        let new_step = self.step_count + 1;
        let switched = self.script.advance(new_step, self.cfg.event_dwell);
        if switched && self.script.current() == EventKind::Turn {
            let dir = self.script.draw_turn_dir();
            if let Some(t) = self.target.as_mut() {
                t.turn_dir = dir;
            }
        }
        let kind = self.script.current();
        let speed = self.cfg.target_speed;
        let ws = self.cfg.world_size;
        if let Some(t) = self.target.as_mut() {
            match kind {
                EventKind::WalkStraight => {
                    let mut nx = t.x + speed * t.heading.cos();
                    let mut ny = t.y + speed * t.heading.sin();
                    // Reflect off the walls so walking never degenerates
                    // into standing still against a boundary.
                    if nx < 0.0 || nx > ws {
                        nx = nx.clamp(0.0, ws);
                        t.heading = wrap_angle(PI - t.heading);
                    }
                    if ny < 0.0 || ny > ws {
                        ny = ny.clamp(0.0, ws);
                        t.heading = wrap_angle(-t.heading);
                    }
                    t.x = nx;
                    t.y = ny;
                }
                EventKind::Turn => {
                    t.heading = wrap_angle(t.heading + t.turn_dir * TARGET_TURN_RATE);
                }
                EventKind::Stop => {}
            }
        }
        switched
    }

    fn info(&self, boundary: bool) -> StepInfo {
        let visible = self.target_visible();
        let centroid = if visible {
            let t = self.target.as_ref().unwrap();
            let b = self.screen_bearing(t.x, t.y);
            Some((self.project_u(b), self.cfg.frame_px as f64 / 2.0))
        } else {
            None
        };
        StepInfo {
            target_visible: visible,
            target_centroid_px: centroid,
            gt_event_kind: self.target.as_ref().map(|_| self.script.current()),
            gt_boundary: boundary,
            extrinsic_reward: self.extrinsic_reward(),
        }
    }

    /// Signed bearing of a world point relative to the agent's optical axis.
    /// Positive values are to the right on screen.
    pub fn screen_bearing(&self, x: f64, y: f64) -> f64 {
        let phi = (y - self.agent.y).atan2(x - self.agent.x);
        wrap_angle(self.agent.heading - phi)
    }

    pub fn target_bearing(&self) -> Option<f64> {
        self.target.as_ref().map(|t| self.screen_bearing(t.x, t.y))
    }

    pub fn target_distance(&self) -> Option<f64> {
        self.target
            .as_ref()
            .map(|t| ((t.x - self.agent.x).powi(2) + (t.y - self.agent.y).powi(2)).sqrt())
    }

    pub fn target_visible(&self) -> bool {
        match (self.target_bearing(), self.target_distance()) {
            (Some(b), Some(d)) => b.abs() < self.cfg.fov / 2.0 && d > 1e-9,
            _ => false,
        }
    }

    /// Approach-and-centre shaping: 1 - d/nominal - |bearing|/(fov/2),
    /// clamped to [-1, 1]; -1 whenever the target is out of view.
    pub fn extrinsic_reward(&self) -> f64 {
        if !self.target_visible() {
            return -1.0;
        }
        let d = self.target_distance().unwrap();
        let b = self.target_bearing().unwrap();
        let raw = 1.0 - d / self.cfg.nominal_dist - b.abs() / (self.cfg.fov / 2.0);
        raw.clamp(-1.0, 1.0)
    }

    fn focal_px(&self) -> f64 {
        (self.cfg.frame_px as f64 / 2.0) / (self.cfg.fov / 2.0).tan()
    }

    fn project_u(&self, bearing: f64) -> f64 {
        self.cfg.frame_px as f64 / 2.0 + self.focal_px() * bearing.tan()
    }

    /// The static per-episode background with no target drawn.
    pub fn background_frame(&self) -> Observation {
        Observation { px: self.cfg.frame_px, data: self.background.clone() }
    }

    /// Renders the current view. When the target body is outside the view
    /// cone the frame equals the background exactly.
    pub fn render(&self) -> Observation {
        let mut data = self.background.clone();
        if self.target_visible() {
            let t = self.target.as_ref().unwrap();
            self.draw_point(&mut data, t.x, t.y, TARGET_BODY_RADIUS, BODY_PEAK);
            let hx = t.x + HEAD_OFFSET * t.heading.cos();
            let hy = t.y + HEAD_OFFSET * t.heading.sin();
            self.draw_point(&mut data, hx, hy, TARGET_BODY_RADIUS * HEAD_RADIUS_FRAC, HEAD_PEAK);
        }
        Observation { px: self.cfg.frame_px, data }
    }

    /// Projects a world point and splats a shaded disc at its screen
    /// position, sized by pinhole scale, blended with max().
    fn draw_point(&self, frame: &mut [f64], x: f64, y: f64, radius_world: f64, peak: f64) {
        let b = self.screen_bearing(x, y);
        if b.abs() >= self.cfg.fov / 2.0 {
            return;
        }
        let d = ((x - self.agent.x).powi(2) + (y - self.agent.y).powi(2)).sqrt().max(1e-6);
        let px = self.cfg.frame_px;
        let u = self.project_u(b);
        let v = px as f64 / 2.0;
        let r = (self.focal_px() * radius_world / d).clamp(1.0, px as f64 / 2.0);
        let r2 = r * r;
        let x_lo = ((u - r).floor().max(0.0)) as usize;
        let x_hi = ((u + r).ceil().min(px as f64 - 1.0)) as usize;
        let y_lo = ((v - r).floor().max(0.0)) as usize;
        let y_hi = ((v + r).ceil().min(px as f64 - 1.0)) as usize;
        for yy in y_lo..=y_hi {
            for xx in x_lo..=x_hi {
                let dx = xx as f64 + 0.5 - u;
                let dy = yy as f64 + 0.5 - v;
                let rho2 = dx * dx + dy * dy;
                if rho2 < r2 {
                    let val = peak * (1.0 - rho2 / r2);
                    let slot = &mut frame[yy * px + xx];
                    if val > *slot {
                        *slot = val.min(1.0);
                    }
                }
            }
        }
    }
}

/// Smooth seeded texture: a coarse random grid upsampled bilinearly.
fn render_background_texture(px: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cells = BACKGROUND_CELLS;
    let grid: Vec<f64> = (0..cells * cells).map(|_| rng.gen_range(0.18..0.55)).collect();
    let mut out = vec![0.0; px * px];
    let scale = cells as f64 / px as f64;
    for y in 0..px {
        for x in 0..px {
            let gx = (x as f64 + 0.5) * scale - 0.5;
            let gy = (y as f64 + 0.5) * scale - 0.5;
            let x0 = gx.floor().clamp(0.0, (cells - 1) as f64) as usize;
            let y0 = gy.floor().clamp(0.0, (cells - 1) as f64) as usize;
            let x1 = (x0 + 1).min(cells - 1);
            let y1 = (y0 + 1).min(cells - 1);
            let fx = (gx - x0 as f64).clamp(0.0, 1.0);
            let fy = (gy - y0 as f64).clamp(0.0, 1.0);
            let top = grid[y0 * cells + x0] * (1.0 - fx) + grid[y0 * cells + x1] * fx;
            let bot = grid[y1 * cells + x0] * (1.0 - fx) + grid[y1 * cells + x1] * fx;
            out[y * px + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Wraps an angle into [-pi, pi).
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = (a + PI) % two_pi;
    if r < 0.0 {
        r += two_pi;
    }
    r - PI
}

/// Writes a binary PGM (P5, maxval 255) frame dump.
pub fn write_pgm(path: &Path, obs: &Observation) -> Result<()> {
    let mut buf = Vec::with_capacity(obs.data.len() + 32);
    write!(buf, "P5\n{} {}\n255\n", obs.px, obs.px).expect("in-memory write");
    for &v in &obs.data {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}
