use std::collections::VecDeque;
use std::time::{Duration, Instant};

use super::codec::{
    decimation, FrameHeader, WireFrame, FLAG_PAUSED, FLAG_RESET_AFTER_DIVERGENCE,
    FRAME_FORMAT_VERSION,
};
use super::protocol::{ClientMessage, ServerMessage};
use crate::actuation::{bind_actuators, ActuatorBinding, FrameAction};
use crate::error::{Error, Result};
use crate::material::ParticleMaterial;
use crate::math::Vec3;
use crate::mpm::{ParticleState, Solver};
use crate::residual::Kinematics;
use crate::rollout::{live_step, Model};

pub const DEFAULT_MAX_POINTS: usize = 20_000;
/// Environment variable overriding [`DEFAULT_MAX_POINTS`].
pub const MAX_POINTS_ENV: &str = "SOFTTWIN_MAX_POINTS";
pub const MOVE_TIMEOUT: Duration = Duration::from_millis(200);
pub const FPS_WINDOW: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub max_points: usize,
    pub move_timeout: Duration,
    /// Radius within which particles couple to the interaction anchor.
    pub grab_radius: f64,
    /// Sleep so frames are not produced faster than simulated time.
    pub realtime: bool,
}

impl SessionConfig {
    pub fn new(grab_radius: f64) -> Self {
        SessionConfig {
            max_points: DEFAULT_MAX_POINTS,
            move_timeout: MOVE_TIMEOUT,
            grab_radius,
            realtime: true,
        }
    }

    /// [`SessionConfig::new`] with the point budget read from
    /// [`MAX_POINTS_ENV`] when set.
    pub fn from_env(grab_radius: f64) -> Result<Self> {
        let mut cfg = Self::new(grab_radius);
        if let Ok(v) = std::env::var(MAX_POINTS_ENV) {
            cfg.max_points = v.parse().ok().filter(|&n: &usize| n > 0).ok_or_else(|| {
                Error::Config(format!(
                    "{MAX_POINTS_ENV} must be a positive integer, got `{v}`"
                ))
            })?;
        }
        Ok(cfg)
    }
}

/// Rolling frame rate over the last [`FPS_WINDOW`] completed frames.
#[derive(Debug, Clone, Default)]
pub struct FpsMeter {
    stamps: VecDeque<Instant>,
}

impl FpsMeter {
    pub fn record(&mut self, at: Instant) {
        if self.stamps.len() == FPS_WINDOW + 1 {
            self.stamps.pop_front();
        }
        self.stamps.push_back(at);
    }

    pub fn clear(&mut self) {
        self.stamps.clear();
    }

    /// Zero until two frames are recorded.
    pub fn fps(&self) -> f64 {
        match (self.stamps.front(), self.stamps.back()) {
            (Some(a), Some(b)) if self.stamps.len() > 1 => {
                let dt = b.duration_since(*a).as_secs_f64();
                if dt > 0.0 {
                    (self.stamps.len() - 1) as f64 / dt
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Grab {
    particle: usize,
    anchor: Vec3,
    binding: ActuatorBinding,
}

#[derive(Debug, Clone, Copy)]
struct Motion {
    velocity: Vec3,
    until: Instant,
}

/// What one [`Session::tick`] produced.
#[derive(Debug)]
pub struct Tick {
    pub frame: WireFrame,
    /// Set when the state diverged and was reset.
    pub notice: Option<ServerMessage>,
}

/// One live interactive rollout. The model is a snapshot taken at load;
/// only the material scale changes afterwards.
pub struct Session {
    model: Model,
    materials: Vec<ParticleMaterial>,
    solver: Solver,
    cfg: SessionConfig,
    initial: ParticleState,
    state: ParticleState,
    past: VecDeque<Kinematics>,
    history: usize,
    frame: u64,
    grab: Option<Grab>,
    motion: Option<Motion>,
    paused: bool,
    fps: FpsMeter,
    started: Instant,
    stride: usize,
    keep: Vec<usize>,
}

impl Session {
    pub fn new(model: Model, initial: ParticleState, cfg: SessionConfig) -> Result<Self> {
        initial.check_shapes()?;
        if model.materials.particle_count() != initial.len() {
            return Err(Error::arg(format!(
                "model has {} particles, initial state {}",
                model.materials.particle_count(),
                initial.len()
            )));
        }
        if !(cfg.grab_radius > 0.0) || cfg.max_points == 0 {
            return Err(Error::Config(
                "grab radius and point budget must be positive".into(),
            ));
        }
        let solver = Solver::new(model.sim.clone())?;
        let (stride, keep) = decimation(initial.len(), cfg.max_points);
        let history = model
            .residual
            .as_ref()
            .map_or(0, |n| n.params.config.history);
        let mut s = Session {
            materials: model.particle_materials(),
            model,
            solver,
            cfg,
            state: initial.clone(),
            initial,
            past: VecDeque::new(),
            history,
            frame: 0,
            grab: None,
            motion: None,
            paused: false,
            fps: FpsMeter::default(),
            started: Instant::now(),
            stride,
            keep,
        };
        s.reset();
        Ok(s)
    }

    pub fn state(&self) -> &ParticleState {
        &self.state
    }

    pub fn initial_state(&self) -> &ParticleState {
        &self.initial
    }

    pub fn frame(&self) -> u64 {
        self.frame
    }

    pub fn fps(&self) -> f64 {
        self.fps.fps()
    }

    pub fn material_scale(&self) -> f64 {
        self.model.youngs_scale
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn realtime(&self) -> bool {
        self.cfg.realtime
    }

    pub fn frame_dt(&self) -> f64 {
        self.model.sim.frame_dt
    }

    pub fn anchors(&self) -> Vec<Vec3> {
        self.grab.iter().map(|g| g.anchor).collect()
    }

    pub fn selected_particle(&self) -> Option<usize> {
        self.grab.as_ref().map(|g| g.particle)
    }

    pub fn hello(&self) -> ServerMessage {
        ServerMessage::Hello {
            protocol_version: FRAME_FORMAT_VERSION,
            particle_count: self.state.len(),
            streamed_points: self.keep.len(),
            stride: self.stride,
            frame_dt: self.model.sim.frame_dt,
        }
    }

    /// Restores the initial state and drops the interaction anchor. The
    /// material scale is kept.
    pub fn reset(&mut self) {
        self.state = self.initial.clone();
        self.past.clear();
        self.past.push_back(Kinematics::of(&self.state));
        self.frame = 0;
        self.grab = None;
        self.motion = None;
    }

    /// Applies one command; errors leave the session unchanged.
    pub fn handle(&mut self, msg: &ClientMessage, now: Instant) -> Result<()> {
        msg.validate()?;
        match *msg {
            ClientMessage::SelectPoint { x } => {
                let x = Vec3::from(x);
                let particle = (0..self.state.len())
                    .min_by(|&a, &b| {
                        (self.state.x[a] - x)
                            .norm_squared()
                            .total_cmp(&(self.state.x[b] - x).norm_squared())
                    })
                    .ok_or_else(|| Error::Message("no particles to select".into()))?;
                let anchor = self.state.x[particle];
                let binding = bind_actuators(&self.state.x, &[anchor], self.cfg.grab_radius)?;
                self.grab = Some(Grab {
                    particle,
                    anchor,
                    binding,
                });
                self.motion = None;
            }
            ClientMessage::Move { direction, speed } => {
                if self.grab.is_none() {
                    return Err(Error::Message(
                        "move needs a selected interaction point".into(),
                    ));
                }
                self.motion = Some(Motion {
                    velocity: Vec3::from(direction) * speed,
                    until: now + self.cfg.move_timeout,
                });
            }
            ClientMessage::SetMaterialScale { scale } => {
                self.model.youngs_scale = scale;
                self.materials = self.model.particle_materials();
            }
            ClientMessage::Reset => self.reset(),
            ClientMessage::Pause => self.paused = true,
            ClientMessage::Resume => self.paused = false,
        }
        Ok(())
    }

    fn header(&self, flags: u16) -> FrameHeader {
        FrameHeader {
            flags: flags | if self.paused { FLAG_PAUSED } else { 0 },
            frame: self.frame,
            timestamp: self.started.elapsed().as_secs_f64(),
            fps: self.fps.fps() as f32,
            particle_count: 0,
            material_scale: self.model.youngs_scale as f32,
            stride: 1,
        }
    }

    /// Current state as a wire frame, without stepping.
    pub fn snapshot(&self) -> WireFrame {
        WireFrame::from_state(
            self.header(0),
            &self.state.x,
            &self.keep,
            self.stride,
            &self.anchors(),
        )
    }

    /// Advances one frame unless paused. A failed step resets the session
    /// and reports why.
    pub fn tick(&mut self, now: Instant) -> Tick {
        if self.paused {
            return Tick {
                frame: self.snapshot(),
                notice: None,
            };
        }
        let notice = match self.advance(now) {
            Ok(()) => None,
            Err(e) => {
                tracing::warn!("session reset after step failure: {e}");
                self.reset();
                Some(ServerMessage::Reset {
                    reason: e.to_string(),
                })
            }
        };
        self.fps.record(Instant::now());
        let flags = if notice.is_some() {
            FLAG_RESET_AFTER_DIVERGENCE
        } else {
            0
        };
        Tick {
            frame: WireFrame::from_state(
                self.header(flags),
                &self.state.x,
                &self.keep,
                self.stride,
                &self.anchors(),
            ),
            notice,
        }
    }

    fn advance(&mut self, now: Instant) -> Result<()> {
        let sim = &self.model.sim;
        let action = self.grab.as_mut().map(|g| {
            let velocity = match self.motion {
                Some(m) if now < m.until => m.velocity,
                _ => Vec3::zeros(),
            };
            let start = g.anchor;
            let end =
                (start + velocity * sim.frame_dt).map(|c| c.clamp(sim.clip_min, sim.clip_max));
            g.anchor = end;
            FrameAction {
                start: vec![start],
                end: vec![end],
            }
        });
        let binding = self.grab.as_ref().map(|g| &g.binding);
        let state = self.state.clone();
        let past = self.past.make_contiguous();
        let (next, _) = live_step(
            &self.model,
            &mut self.solver,
            &self.materials,
            state,
            binding,
            action.as_ref(),
            past,
            self.frame as usize,
        )?;
        self.past.push_back(Kinematics::of(&next));
        while self.past.len() > self.history + 1 {
            self.past.pop_front();
        }
        self.state = next;
        self.frame += 1;
        Ok(())
    }

    /// Parses and applies one text message, returning the reply.
    pub fn handle_text(&mut self, text: &str, now: Instant) -> ServerMessage {
        match ClientMessage::parse(text).and_then(|m| self.handle(&m, now).map(|_| m)) {
            Ok(m) => ServerMessage::Ack {
                of: m.kind().into(),
            },
            Err(e) => ServerMessage::Error {
                message: e.to_string(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{MaterialBounds, MaterialField};
    use crate::mpm::{Category, SimConfig};

    fn session() -> Session {
        let mut rest = Vec::new();
        for i in 0..8 {
            for j in 0..4 {
                for k in 0..2 {
                    rest.push(Vec3::new(
                        0.4 + 0.02 * i as f64,
                        0.45 + 0.02 * j as f64,
                        0.06 + 0.02 * k as f64,
                    ));
                }
            }
        }
        let sim = SimConfig::for_category(Category::Planar);
        let field =
            MaterialField::init_patches(&rest, 4, MaterialBounds::for_category(Category::Planar))
                .unwrap();
        let s0 = ParticleState::at_rest(rest, 0.02f64.powi(3), sim.density).unwrap();
        let mut cfg = SessionConfig::new(0.05);
        cfg.realtime = false;
        Session::new(Model::new(sim, field), s0, cfg).unwrap()
    }

    #[test]
    fn reset_restores_initial_state_bitwise() {
        let mut s = session();
        let now = Instant::now();
        s.handle(&ClientMessage::SelectPoint { x: [0.5, 0.5, 0.1] }, now)
            .unwrap();
        s.handle(
            &ClientMessage::Move {
                direction: [0.0, 0.0, 1.0],
                speed: 0.3,
            },
            now,
        )
        .unwrap();
        for _ in 0..3 {
            s.tick(now);
        }
        assert_ne!(s.state().x, s.initial_state().x);
        s.handle(&ClientMessage::Reset, now).unwrap();
        assert_eq!(s.state().x, s.initial_state().x);
        assert_eq!(s.state().v, s.initial_state().v);
        assert_eq!(s.state().f, s.initial_state().f);
        assert_eq!(s.frame(), 0);
        assert!(s.anchors().is_empty());
    }

    #[test]
    fn move_drives_the_anchor_until_timeout() {
        let mut s = session();
        let t0 = Instant::now();
        s.handle(&ClientMessage::SelectPoint { x: [0.5, 0.5, 0.1] }, t0)
            .unwrap();
        let a0 = s.anchors()[0];
        s.handle(
            &ClientMessage::Move {
                direction: [1.0, 0.0, 0.0],
                speed: 0.3,
            },
            t0,
        )
        .unwrap();
        s.tick(t0);
        let a1 = s.anchors()[0];
        assert!((a1 - a0 - Vec3::new(0.3 * s.frame_dt(), 0.0, 0.0)).norm() < 1e-12);
        s.tick(t0 + MOVE_TIMEOUT);
        assert_eq!(s.anchors()[0], a1);
    }

    #[test]
    fn zero_speed_keeps_anchor_static() {
        let mut s = session();
        let t0 = Instant::now();
        s.handle(&ClientMessage::SelectPoint { x: [0.5, 0.5, 0.1] }, t0)
            .unwrap();
        let a0 = s.anchors()[0];
        s.handle(
            &ClientMessage::Move {
                direction: [0.0, 1.0, 0.0],
                speed: 0.0,
            },
            t0,
        )
        .unwrap();
        s.tick(t0);
        assert_eq!(s.anchors()[0], a0);
    }

    #[test]
    fn rejected_commands_preserve_the_session() {
        let mut s = session();
        let now = Instant::now();
        let reply = s.handle_text(r#"{"type":"move","direction":[0,0,1],"speed":0.1}"#, now);
        assert!(matches!(reply, ServerMessage::Error { .. }));
        let reply = s.handle_text(r#"{"type":"set_material_scale","scale":-1}"#, now);
        assert!(matches!(reply, ServerMessage::Error { .. }));
        assert_eq!(s.material_scale(), 1.0);
        assert!(matches!(
            s.handle_text("{", now),
            ServerMessage::Error { .. }
        ));
        let reply = s.handle_text(r#"{"type":"set_material_scale","scale":0.3}"#, now);
        assert_eq!(
            reply,
            ServerMessage::Ack {
                of: "set_material_scale".into()
            }
        );
        assert_eq!(s.material_scale(), 0.3);
    }

    #[test]
    fn pause_freezes_the_state() {
        let mut s = session();
        let now = Instant::now();
        s.tick(now);
        s.handle(&ClientMessage::Pause, now).unwrap();
        let before = s.state().x.clone();
        let t = s.tick(now);
        assert_eq!(s.state().x, before);
        assert_ne!(t.frame.header.flags & FLAG_PAUSED, 0);
        s.handle(&ClientMessage::Resume, now).unwrap();
        s.tick(now);
        assert_ne!(s.state().x, before);
    }

    #[test]
    fn divergence_resets_with_notice() {
        let mut s = session();
        let now = Instant::now();
        s.tick(now);
        s.state.v.fill(Vec3::new(0.0, 0.0, 500.0));
        let t = s.tick(now);
        assert!(matches!(t.notice, Some(ServerMessage::Reset { .. })));
        assert_ne!(t.frame.header.flags & FLAG_RESET_AFTER_DIVERGENCE, 0);
        assert_eq!(s.state().x, s.initial_state().x);
        assert_eq!(s.frame(), 0);
    }

    #[test]
    fn frames_carry_the_rolling_fps() {
        let mut s = session();
        let now = Instant::now();
        let mut last = None;
        for _ in 0..5 {
            let t = s.tick(now);
            assert_eq!(t.frame.header.fps, s.fps() as f32);
            last = Some(t.frame);
        }
        let f = last.unwrap();
        assert_eq!(f.header.frame, 5);
        assert_eq!(f.points.len(), s.state().len());
        assert!(f.header.fps > 0.0);
    }

    #[test]
    fn fps_meter_window() {
        let mut m = FpsMeter::default();
        let t0 = Instant::now();
        assert_eq!(m.fps(), 0.0);
        for i in 0..100 {
            m.record(t0 + Duration::from_millis(50 * i));
        }
        assert!((m.fps() - 20.0).abs() < 1e-9);
    }
}
