//! Procedural driving scenes: road templates, ego kinematics, agents and
//! camera rendering with ground-truth depth.
//!
//! Everything is expressed in the ego frame at the current time (t = 0):
//! origin at the rear axle, x forward, y left. The ego drives along the road
//! centreline at a clamped constant-acceleration speed profile; the centreline
//! is a chain of constant-curvature segments.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraRig, Coordinate3D, DepthMap};
use crate::shapes::{self, OrientedRect, Point2, Polygon};

pub const FAR_PLANE: f64 = 200.0;
pub const MAX_SPEED: f64 = 20.0;
pub const MAX_CURVATURE: f64 = 0.2;
pub const ROAD_HALF_WIDTH: f64 = 5.0;
pub const MAX_AGENTS: usize = 8;
pub const CHANNELS: usize = 3;
/// Raster channels: drivable ground, agent surface, off-road ground.
pub const CHANNEL_NAMES: [&str; CHANNELS] = ["drivable", "agent", "offroad"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Straight,
    Left,
    Right,
}

impl Command {
    pub const ALL: [Command; 3] = [Command::Straight, Command::Left, Command::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }

    /// Prompt wording.
    pub fn phrase(self) -> &'static str {
        match self {
            Command::Straight => "go straight",
            Command::Left => "turn left",
            Command::Right => "turn right",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadTemplate {
    Straight,
    Curve,
    Intersection,
}

impl RoadTemplate {
    pub const ALL: [RoadTemplate; 3] = [RoadTemplate::Straight, RoadTemplate::Curve, RoadTemplate::Intersection];

    fn supports(self, command: Command) -> bool {
        match self {
            RoadTemplate::Straight => command == Command::Straight,
            RoadTemplate::Curve => command != Command::Straight,
            RoadTemplate::Intersection => true,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "straight" => Ok(Self::Straight),
            "curve" => Ok(Self::Curve),
            "intersection" => Ok(Self::Intersection),
            other => Err(Error::Config(format!("unknown road template `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSegment {
    /// Meters; may be infinite for the final segment.
    pub length: f64,
    pub curvature: f64,
}

/// Arc-length parameterised centreline made of constant-curvature pieces.
/// Negative arc length extends straight backwards from the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub origin: Point2,
    pub heading: f64,
    pub segments: Vec<PathSegment>,
}

fn advance(p: Point2, h: f64, k: f64, ds: f64) -> (Point2, f64) {
    if k.abs() < 1e-12 {
        ([p[0] + ds * h.cos(), p[1] + ds * h.sin()], h)
    } else {
        let h2 = h + k * ds;
        ([p[0] + (h2.sin() - h.sin()) / k, p[1] + (h.cos() - h2.cos()) / k], h2)
    }
}

impl Path {
    pub fn straight(origin: Point2, heading: f64) -> Self {
        Self { origin, heading, segments: vec![PathSegment { length: f64::INFINITY, curvature: 0.0 }] }
    }

    /// Position, heading and curvature at arc length `s`.
    pub fn pose(&self, s: f64) -> (Point2, f64, f64) {
        if s <= 0.0 {
            let (p, h) = advance(self.origin, self.heading, 0.0, s);
            return (p, h, 0.0);
        }
        let (mut p, mut h) = (self.origin, self.heading);
        let mut left = s;
        for seg in &self.segments {
            if left <= seg.length {
                let (p2, h2) = advance(p, h, seg.curvature, left);
                return (p2, h2, seg.curvature);
            }
            (p, h) = advance(p, h, seg.curvature, seg.length);
            left -= seg.length;
        }
        let (p2, h2) = advance(p, h, 0.0, left);
        (p2, h2, 0.0)
    }

    fn sample(&self, from: f64, to: f64, step: f64) -> Vec<(Point2, f64)> {
        let n = ((to - from) / step).ceil() as usize;
        (0..=n).map(|i| {
            let (p, h, _) = self.pose((from + i as f64 * step).min(to));
            (p, h)
        })
        .collect()
    }
}

/// Speed clamped to `[0, MAX_SPEED]` under constant acceleration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    pub v0: f64,
    pub accel: f64,
}

impl SpeedProfile {
    pub fn speed(&self, t: f64) -> f64 {
        (self.v0 + self.accel * t).clamp(0.0, MAX_SPEED)
    }

    /// Effective acceleration (zero while clamped).
    pub fn accel_at(&self, t: f64) -> f64 {
        let raw = self.v0 + self.accel * t;
        if raw <= 0.0 || raw >= MAX_SPEED {
            0.0
        } else {
            self.accel
        }
    }

    /// Signed distance travelled from time 0 to `t`. The integrand is
    /// piecewise linear between clamp breakpoints, so midpoint sums are exact.
    pub fn distance(&self, t: f64) -> f64 {
        let (lo, hi) = if t >= 0.0 { (0.0, t) } else { (t, 0.0) };
        let mut cuts = vec![lo, hi];
        if self.accel != 0.0 {
            for target in [0.0, MAX_SPEED] {
                let tc = (target - self.v0) / self.accel;
                if tc > lo && tc < hi {
                    cuts.push(tc);
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        let total: f64 = cuts.windows(2).map(|w| (w[1] - w[0]) * self.speed(0.5 * (w[0] + w[1]))).sum();
        if t >= 0.0 {
            total
        } else {
            -total
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub position: Point2,
    pub heading: f64,
    pub speed: f64,
}

/// Longitudinal/lateral velocity and acceleration at one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub v_lon: f64,
    pub v_lat: f64,
    pub a_lon: f64,
    pub a_lat: f64,
}

/// Ego conditioning: dynamics of the previous and current frame plus the command.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoStatusRecord {
    pub dynamics: [Dynamics; 2],
    pub command: Command,
}

impl EgoStatusRecord {
    pub const FEATURES: usize = 11;

    /// `[v_lon, v_lat, a_lon, a_lat] x 2` then the command one-hot.
    pub fn features(&self) -> [f64; Self::FEATURES] {
        let mut f = [0.0; Self::FEATURES];
        for (i, d) in self.dynamics.iter().enumerate() {
            f[4 * i..4 * i + 4].copy_from_slice(&[d.v_lon, d.v_lat, d.a_lon, d.a_lat]);
        }
        f[8..].copy_from_slice(&self.command.one_hot());
        f
    }

    pub fn is_finite(&self) -> bool {
        self.features().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Car,
    Truck,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Car => "car",
            AgentKind::Truck => "truck",
        }
    }

    /// Length, width, height in meters.
    pub fn extent(self) -> (f64, f64, f64) {
        match self {
            AgentKind::Car => (4.5, 2.0, 1.6),
            AgentKind::Truck => (8.0, 2.5, 3.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Point2,
    pub heading: f64,
}

/// Constant-velocity box; `poses[t]` at time `t * dt` for `t = 0..=horizon`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub poses: Vec<Pose>,
}

impl Agent {
    pub fn footprint(&self, t: usize) -> OrientedRect {
        let p = self.poses[t];
        OrientedRect::new(p.position, p.heading, self.length, self.width)
    }
}

/// Per-camera semantic raster (`CHANNELS x height x width`) and depth.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub raster: Vec<f32>,
    pub depth: DepthMap,
}

impl View {
    pub fn width(&self) -> usize {
        self.depth.width
    }

    pub fn height(&self) -> usize {
        self.depth.height
    }

    pub fn channel_at(&self, channel: usize, u: usize, v: usize) -> f32 {
        self.raster[(channel * self.height() + v) * self.width() + u]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Past frames `T`; history holds `T + 1` poses ending at t = 0.
    pub history: usize,
    pub horizon: usize,
    /// Seconds between frames.
    pub dt: f64,
    pub max_agents: usize,
    /// Sampling weights for straight / left / right.
    pub command_mix: [f64; 3],
    pub templates: Vec<RoadTemplate>,
    /// Square image side in pixels.
    pub image: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            history: 2,
            horizon: 6,
            dt: 0.5,
            max_agents: MAX_AGENTS,
            command_mix: [0.5, 0.25, 0.25],
            templates: RoadTemplate::ALL.to_vec(),
            image: 64,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || self.horizon == 0 || !(self.dt > 0.0) || self.image == 0 {
            return Err(Error::Config("history, horizon, dt and image must be positive".into()));
        }
        if self.max_agents > MAX_AGENTS {
            return Err(Error::Scene(format!(
                "infeasible: {} agents requested, the road templates hold at most {MAX_AGENTS}",
                self.max_agents
            )));
        }
        if self.command_mix.iter().any(|w| !(*w >= 0.0)) || self.command_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("invalid command mixture {:?}", self.command_mix)));
        }
        for cmd in Command::ALL {
            if self.command_mix[cmd.index()] > 0.0 && !self.templates.iter().any(|t| t.supports(cmd)) {
                return Err(Error::Scene(format!("infeasible: no allowed template supports command {cmd:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub command: Command,
    pub template: RoadTemplate,
    /// `T + 1` poses at `t = -T*dt ..= 0`; the last is the origin.
    pub history: Vec<EgoState>,
    /// `H` ground-truth waypoints at `t = dt ..= H*dt`, z = 0.
    pub future: Vec<Coordinate3D>,
    pub ego_status: EgoStatusRecord,
    pub agents: Vec<Agent>,
    pub drivable: Vec<Polygon>,
    /// Whether the ground plane exists; false only for synthetic empty worlds.
    pub ground: bool,
    pub rig: CameraRig,
    pub views: Vec<View>,
}

impl Scene {
    /// A world with no surfaces at all.
    pub fn empty(rig: CameraRig) -> Self {
        let mut scene = Self {
            seed: 0,
            command: Command::Straight,
            template: RoadTemplate::Straight,
            history: vec![EgoState { position: [0.0, 0.0], heading: 0.0, speed: 0.0 }],
            future: Vec::new(),
            ego_status: EgoStatusRecord { dynamics: [Dynamics::default(); 2], command: Command::Straight },
            agents: Vec::new(),
            drivable: Vec::new(),
            ground: false,
            rig,
            views: Vec::new(),
        };
        scene.views = render_views(&scene);
        scene
    }

    pub fn future_xy(&self) -> Vec<Point2> {
        self.future.iter().map(|c| [c.x, c.y]).collect()
    }

    /// History positions as ground-plane coordinates, oldest first.
    pub fn history_coordinates(&self) -> Vec<Coordinate3D> {
        self.history.iter().map(|s| Coordinate3D::bev(s.position[0], s.position[1])).collect()
    }
}

fn sample_command(rng: &mut impl Rng, mix: &[f64; 3]) -> Command {
    let total: f64 = mix.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for cmd in Command::ALL {
        r -= mix[cmd.index()];
        if r < 0.0 {
            return cmd;
        }
    }
    *Command::ALL.iter().rev().find(|c| mix[c.index()] > 0.0).expect("validated mixture")
}

struct Layout {
    ego_path: Path,
    /// Lanes agents may occupy, with their usable arc-length ranges.
    lanes: Vec<(Path, f64, f64)>,
    drivable: Polygon,
    profile: SpeedProfile,
}

fn cross_polygon(xc: f64) -> Polygon {
    let w = ROAD_HALF_WIDTH;
    Polygon::new(vec![
        [-60.0, -w],
        [xc - w, -w],
        [xc - w, -60.0],
        [xc + w, -60.0],
        [xc + w, -w],
        [100.0, -w],
        [100.0, w],
        [xc + w, w],
        [xc + w, 60.0],
        [xc - w, 60.0],
        [xc - w, w],
        [-60.0, w],
    ])
}

fn layout(rng: &mut impl Rng, template: RoadTemplate, command: Command) -> Layout {
    let sign: f64 = match command {
        Command::Left => 1.0,
        Command::Right => -1.0,
        Command::Straight => 0.0,
    };
    match template {
        RoadTemplate::Straight => {
            let path = Path::straight([0.0, 0.0], 0.0);
            let drivable = Polygon::band(&path.sample(-60.0, 100.0, 10.0), ROAD_HALF_WIDTH);
            let profile = SpeedProfile { v0: rng.gen_range(0.0..15.0), accel: rng.gen_range(-1.0..1.0) };
            Layout { lanes: vec![(path.clone(), -50.0, 80.0)], ego_path: path, drivable, profile }
        }
        RoadTemplate::Curve => {
            let start = rng.gen_range(0.0..10.0);
            let k = sign * rng.gen_range(0.01..0.08);
            let arc = (1.5 * PI / k.abs()).min(80.0);
            let path = Path {
                origin: [0.0, 0.0],
                heading: 0.0,
                segments: vec![
                    PathSegment { length: start, curvature: 0.0 },
                    PathSegment { length: arc, curvature: k },
                    PathSegment { length: f64::INFINITY, curvature: 0.0 },
                ],
            };
            let drivable = Polygon::band(&path.sample(-60.0, start + arc, 1.0), ROAD_HALF_WIDTH);
            let profile = SpeedProfile { v0: rng.gen_range(3.0..8.0), accel: rng.gen_range(-1.0..1.0) };
            Layout { lanes: vec![(path.clone(), -40.0, start + arc - 5.0)], ego_path: path, drivable, profile }
        }
        RoadTemplate::Intersection => {
            let radius = rng.gen_range(6.0..12.0);
            let lead = rng.gen_range(0.0..10.0);
            let xc = radius + lead;
            let main = Path::straight([0.0, 0.0], 0.0);
            let cross = Path::straight([xc, -55.0], FRAC_PI_2);
            let ego_path = if command == Command::Straight {
                main.clone()
            } else {
                Path {
                    origin: [0.0, 0.0],
                    heading: 0.0,
                    segments: vec![
                        PathSegment { length: lead, curvature: 0.0 },
                        PathSegment { length: radius * FRAC_PI_2, curvature: sign / radius },
                        PathSegment { length: f64::INFINITY, curvature: 0.0 },
                    ],
                }
            };
            let profile = if command == Command::Straight {
                SpeedProfile { v0: rng.gen_range(0.0..15.0), accel: rng.gen_range(-1.0..1.0) }
            } else {
                SpeedProfile { v0: rng.gen_range(3.0..8.0), accel: rng.gen_range(-1.0..1.0) }
            };
            Layout {
                ego_path,
                lanes: vec![(main, -50.0, 90.0), (cross, 5.0, 105.0)],
                drivable: cross_polygon(xc),
                profile,
            }
        }
    }
}

fn ego_state(path: &Path, profile: &SpeedProfile, t: f64) -> (EgoState, Dynamics) {
    let s = profile.distance(t);
    let (position, heading, k) = path.pose(s);
    let v = profile.speed(t);
    let dynamics = Dynamics { v_lon: v, v_lat: 0.0, a_lon: profile.accel_at(t), a_lat: v * v * k };
    (EgoState { position, heading, speed: v }, dynamics)
}

const PLACEMENT_ATTEMPTS: usize = 200;
const CLEARANCE: f64 = 0.5;

fn place_agents(rng: &mut impl Rng, count: usize, lanes: &[(Path, f64, f64)], ego: &[OrientedRect], horizon: usize, dt: f64) -> Result<Vec<Agent>> {
    let mut agents: Vec<Agent> = Vec::with_capacity(count);
    for i in 0..count {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let kind = if rng.gen_bool(0.8) { AgentKind::Car } else { AgentKind::Truck };
            let (length, width, height) = kind.extent();
            let (lane, lo, hi) = &lanes[rng.gen_range(0..lanes.len())];
            let s = rng.gen_range(*lo..*hi);
            let max_lat = ROAD_HALF_WIDTH - width / 2.0 - 0.2;
            let lat = rng.gen_range(-max_lat..max_lat);
            let (p, h, _) = lane.pose(s);
            let start = [p[0] - h.sin() * lat, p[1] + h.cos() * lat];
            let heading = if rng.gen_bool(0.5) { h } else { h + PI };
            let speed = rng.gen_range(0.0..10.0);
            let poses: Vec<Pose> = (0..=horizon)
                .map(|t| {
                    let d = speed * t as f64 * dt;
                    Pose { position: [start[0] + d * heading.cos(), start[1] + d * heading.sin()], heading }
                })
                .collect();
            let agent = Agent { kind, length, width, height, poses };
            let clear = (0..=horizon).all(|t| {
                let mut fp = agent.footprint(t);
                fp.length += 2.0 * CLEARANCE;
                fp.width += 2.0 * CLEARANCE;
                !fp.overlaps(&ego[t]) && agents.iter().all(|other| !fp.overlaps(&other.footprint(t)))
            });
            if clear {
                placed = Some(agent);
                break;
            }
        }
        agents.push(placed.ok_or_else(|| {
            Error::Scene(format!("infeasible: agent {i} could not be placed after {PLACEMENT_ATTEMPTS} attempts"))
        })?);
    }
    Ok(agents)
}

pub const EGO_LENGTH: f64 = 4.5;
pub const EGO_WIDTH: f64 = 2.0;

/// Deterministic in `seed`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let command = sample_command(&mut rng, &config.command_mix);
    let options: Vec<RoadTemplate> = config.templates.iter().copied().filter(|t| t.supports(command)).collect();
    let template = options[rng.gen_range(0..options.len())];
    let lay = layout(&mut rng, template, command);

    let mut history = Vec::with_capacity(config.history + 1);
    let mut dynamics = Vec::with_capacity(config.history + 1);
    for k in (0..=config.history).rev() {
        let (state, dyn_) = ego_state(&lay.ego_path, &lay.profile, -(k as f64) * config.dt);
        history.push(state);
        dynamics.push(dyn_);
    }
    let future: Vec<Coordinate3D> = (1..=config.horizon)
        .map(|t| {
            let (state, _) = ego_state(&lay.ego_path, &lay.profile, t as f64 * config.dt);
            Coordinate3D::bev(state.position[0], state.position[1])
        })
        .collect();
    let ego_status = EgoStatusRecord { dynamics: [dynamics[dynamics.len() - 2], dynamics[dynamics.len() - 1]], command };

    let mut ego_rects = vec![OrientedRect::new([0.0, 0.0], 0.0, EGO_LENGTH, EGO_WIDTH)];
    let xy: Vec<Point2> = future.iter().map(|c| [c.x, c.y]).collect();
    ego_rects.extend(shapes::trajectory_footprints(&xy, EGO_LENGTH, EGO_WIDTH));
    let count = rng.gen_range(0..=config.max_agents);
    let agents = place_agents(&mut rng, count, &lay.lanes, &ego_rects, config.horizon, config.dt)?;

    let mut scene = Scene {
        seed,
        command,
        template,
        history,
        future,
        ego_status,
        agents,
        drivable: vec![lay.drivable],
        ground: true,
        rig: CameraRig::front_rear(config.image, config.image),
        views: Vec::new(),
    };
    scene.views = render_views(&scene);
    Ok(scene)
}

/// Ray parameter of the entry point into an agent box, if hit.
fn ray_box(origin: [f64; 3], dir: [f64; 3], agent: &Agent) -> Option<f64> {
    let pose = agent.poses[0];
    let (s, c) = pose.heading.sin_cos();
    let rel = [origin[0] - pose.position[0], origin[1] - pose.position[1]];
    let o = [rel[0] * c + rel[1] * s, -rel[0] * s + rel[1] * c, origin[2]];
    let d = [dir[0] * c + dir[1] * s, -dir[0] * s + dir[1] * c, dir[2]];
    let lo = [-agent.length / 2.0, -agent.width / 2.0, 0.0];
    let hi = [agent.length / 2.0, agent.width / 2.0, agent.height];
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
        } else {
            let (ta, tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// Nearest-surface rendering through pixel centres. Depth is z-depth, clipped
/// to the far plane; sky pixels are background (all channels 0).
pub fn render_views(scene: &Scene) -> Vec<View> {
    scene
        .rig
        .cameras
        .iter()
        .map(|cam| {
            let (w, h) = (cam.width, cam.height);
            let origin = cam.ego_from_camera.translation;
            let mut raster = vec![0.0f32; CHANNELS * w * h];
            let mut depth = vec![FAR_PLANE as f32; w * h];
            for v in 0..h {
                for u in 0..w {
                    // Unit z-depth ray, so the ray parameter is the z-depth.
                    let dir = cam.ray_ego(u as f64 + 0.5, v as f64 + 0.5);
                    let mut best: Option<(f64, usize)> = None;
                    if scene.ground && dir[2] < 0.0 {
                        let t = -origin[2] / dir[2];
                        let p = [origin[0] + t * dir[0], origin[1] + t * dir[1]];
                        let ch = if shapes::region_contains_point(&scene.drivable, p) { 0 } else { 2 };
                        best = Some((t, ch));
                    }
                    for agent in &scene.agents {
                        if let Some(t) = ray_box(origin, dir, agent) {
                            if best.map_or(true, |(bt, _)| t < bt) {
                                best = Some((t, 1));
                            }
                        }
                    }
                    if let Some((t, ch)) = best {
                        if t < FAR_PLANE {
                            depth[v * w + u] = t as f32;
                            raster[(ch * h + v) * w + u] = 1.0;
                        }
                    }
                }
            }
            View { raster, depth: DepthMap { width: w, height: h, values: depth } }
        })
        .collect()
}
