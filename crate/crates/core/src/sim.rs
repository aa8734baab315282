//! Deterministic 2-DOF planar arm that pushes discs around a square
//! workspace, plus a rasterizer and scripted expert controllers.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LINK1: f64 = 0.5;
pub const LINK2: f64 = 0.5;
/// Total arm length; the workspace is `[-REACH, REACH]^2`.
pub const REACH: f64 = LINK1 + LINK2;
pub const DT: f64 = 0.05;
pub const A_MAX: f64 = 2.0;
pub const EPISODE_STEPS: usize = 120;
pub const EE_RADIUS: f64 = 0.05;
pub const IMAGE_SIDE: usize = 64;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const PROPRIO_DIM: usize = 6;
pub const ACTION_DIM: usize = 2;
pub const TASK_COUNT: usize = 3;

/// Largest action norm the expert emits once the task is solved.
pub const HOLD_THRESHOLD: f64 = 1e-9;

const OBJECT_RADIUS: f64 = 0.06;
const GOAL_RADIUS: f64 = 0.1;
const EXPERT_STEP: f64 = 0.035;

pub type Image = Vec<f32>;

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap(x: f64) -> f64 {
    let w = (x + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2*pi for tiny negative inputs.
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

pub fn forward_kinematics(q: [f64; 2]) -> [f64; 2] {
    [
        LINK1 * q[0].cos() + LINK2 * (q[0] + q[1]).cos(),
        LINK1 * q[0].sin() + LINK2 * (q[0] + q[1]).sin(),
    ]
}

fn elbow(q: [f64; 2]) -> [f64; 2] {
    [LINK1 * q[0].cos(), LINK1 * q[0].sin()]
}

/// Elbow-up (positive `q2`) inverse kinematics.
pub fn inverse_kinematics(target: [f64; 2]) -> Result<[f64; 2]> {
    let r2 = target[0] * target[0] + target[1] * target[1];
    let r = r2.sqrt();
    if r > REACH || r < (LINK1 - LINK2).abs() {
        return Err(Error::UnreachableWaypoint { radius: r, reach: REACH });
    }
    let c2 = ((r2 - LINK1 * LINK1 - LINK2 * LINK2) / (2.0 * LINK1 * LINK2)).clamp(-1.0, 1.0);
    let q2 = c2.acos();
    let q1 = target[1].atan2(target[0]) - (LINK2 * q2.sin()).atan2(LINK1 + LINK2 * q2.cos());
    Ok([wrap(q1), wrap(q2)])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub q: [f64; 2],
    pub dq: [f64; 2],
}

impl ArmState {
    pub fn new(q: [f64; 2]) -> Self {
        Self {
            q: [wrap(q[0]), wrap(q[1])],
            dq: [0.0; 2],
        }
    }

    pub fn ee(&self) -> [f64; 2] {
        forward_kinematics(self.q)
    }

    /// `(q1, q2, dq1, dq2, ee_x, ee_y)`.
    pub fn proprio(&self) -> [f64; PROPRIO_DIM] {
        let ee = self.ee();
        [self.q[0], self.q[1], self.dq[0], self.dq[1], ee[0], ee[1]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    /// Bring the end effector into a target zone.
    Reach,
    /// Push one disc into a zone.
    Push,
    /// Push two discs into their zones, in order.
    SequentialPush,
}

impl Task {
    pub const ALL: [Task; TASK_COUNT] = [Task::Reach, Task::Push, Task::SequentialPush];

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or(Error::UnknownTask(id))
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Reach => "reach",
            Task::Push => "push",
            Task::SequentialPush => "sequential_push",
        }
    }

    pub fn object_count(self) -> usize {
        match self {
            Task::Reach => 0,
            Task::Push => 1,
            Task::SequentialPush => 2,
        }
    }

    /// Samples an initial world for this task from `seed`.
    pub fn initial_world(self, seed: u64) -> WorldState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let polar = |r: f64, th: f64| [r * th.cos(), r * th.sin()];
        let arm = ArmState::new([u(-1.3, -1.1), u(1.5, 1.8)]);
        let disc = |center, radius| Disc { center, radius };
        let (objects, goals) = match self {
            Task::Reach => {
                let goal = polar(u(0.45, 0.85), u(-0.5, 1.2));
                (vec![], vec![disc(goal, GOAL_RADIUS)])
            }
            Task::Push => {
                let r = u(0.55, 0.7);
                let th = u(-0.15, 0.15);
                let obj = polar(r, th);
                let goal = polar(u(0.55, 0.7), th + u(0.6, 0.8));
                (vec![disc(obj, OBJECT_RADIUS)], vec![disc(goal, GOAL_RADIUS)])
            }
            Task::SequentialPush => {
                let ra = u(0.45, 0.55);
                let tha = u(-0.3, -0.15);
                let rb = u(0.78, 0.85);
                let thb = u(0.5, 0.65);
                let objects = vec![disc(polar(ra, tha), OBJECT_RADIUS), disc(polar(rb, thb), OBJECT_RADIUS)];
                let goals = vec![
                    disc(polar(ra, tha + u(0.6, 0.7)), GOAL_RADIUS),
                    disc(polar(rb, thb + u(0.55, 0.65)), GOAL_RADIUS),
                ];
                (objects, goals)
            }
        };
        WorldState {
            arm,
            objects,
            goals,
            task: self,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub arm: ArmState,
    pub objects: Vec<Disc>,
    pub goals: Vec<Disc>,
    pub task: Task,
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    norm(sub(a, b))
}

fn clamp_to_workspace(d: &mut Disc) {
    let lim = REACH - d.radius;
    d.center[0] = d.center[0].clamp(-lim, lim);
    d.center[1] = d.center[1].clamp(-lim, lim);
}

/// Moves `d` along the contact normal until it no longer overlaps a disc of
/// radius `r` at `c`. `fallback` is the normal used for coincident centers.
fn separate(d: &mut Disc, c: [f64; 2], r: f64, fallback: [f64; 2]) {
    let rel = sub(d.center, c);
    let dd = norm(rel);
    let min = d.radius + r;
    if dd >= min {
        return;
    }
    let n = if dd > 1e-12 {
        [rel[0] / dd, rel[1] / dd]
    } else {
        fallback
    };
    d.center = [c[0] + n[0] * min, c[1] + n[1] * min];
}

impl WorldState {
    pub fn object_in_goal(&self, i: usize) -> bool {
        dist(self.objects[i].center, self.goals[i].center) <= self.goals[i].radius
    }

    pub fn is_success(&self) -> bool {
        match self.task {
            Task::Reach => dist(self.arm.ee(), self.goals[0].center) <= self.goals[0].radius,
            Task::Push | Task::SequentialPush => (0..self.objects.len()).all(|i| self.object_in_goal(i)),
        }
    }

    /// One Euler step with positional contact resolution.
    pub fn step(&self, action: [f64; 2], dt: f64) -> WorldState {
        debug_assert!(action.iter().all(|a| a.is_finite()), "non-finite action");
        let dq = [action[0].clamp(-A_MAX, A_MAX), action[1].clamp(-A_MAX, A_MAX)];
        let q = [wrap(self.arm.q[0] + dq[0] * dt), wrap(self.arm.q[1] + dq[1] * dt)];
        let arm = ArmState { q, dq };
        let ee = arm.ee();
        let motion = sub(ee, self.arm.ee());
        let m = norm(motion);
        let fallback = if m > 1e-12 { [motion[0] / m, motion[1] / m] } else { [1.0, 0.0] };
        let mut objects = self.objects.clone();
        for o in objects.iter_mut() {
            separate(o, ee, EE_RADIUS, fallback);
        }
        for i in 0..objects.len() {
            for j in (i + 1)..objects.len() {
                let (a, b) = objects.split_at_mut(j);
                separate(&mut b[0], a[i].center, a[i].radius, fallback);
            }
        }
        for o in objects.iter_mut() {
            clamp_to_workspace(o);
        }
        WorldState {
            arm,
            objects,
            goals: self.goals.clone(),
            task: self.task,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub show_arm: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { show_arm: true }
    }
}

const GOAL_SHADES: [f32; 2] = [0.25, 0.4];
const OBJECT_SHADES: [f32; 2] = [0.7, 0.55];
const ARM_SHADE: f32 = 1.0;
const LINK_HALF_WIDTH: f64 = 0.025;

/// Pixel-center coordinates; row 0 is the top edge (`y = REACH`).
fn pixel_center(row: usize, col: usize) -> [f64; 2] {
    let step = 2.0 * REACH / IMAGE_SIDE as f64;
    [
        -REACH + (col as f64 + 0.5) * step,
        REACH - (row as f64 + 0.5) * step,
    ]
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = sub(b, a);
    let ap = sub(p, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

pub fn render(world: &WorldState) -> Image {
    render_with(world, RenderOptions::default())
}

/// Binary-coverage rasterization (no anti-aliasing) with max compositing.
pub fn render_with(world: &WorldState, opts: RenderOptions) -> Image {
    let mut img = vec![0.0f32; IMAGE_PIXELS];
    let base = [0.0, 0.0];
    let el = elbow(world.arm.q);
    let ee = world.arm.ee();
    for row in 0..IMAGE_SIDE {
        for col in 0..IMAGE_SIDE {
            let p = pixel_center(row, col);
            let mut v = 0.0f32;
            for (i, g) in world.goals.iter().enumerate() {
                if dist(p, g.center) <= g.radius {
                    v = v.max(GOAL_SHADES[i % 2]);
                }
            }
            for (i, o) in world.objects.iter().enumerate() {
                if dist(p, o.center) <= o.radius {
                    v = v.max(OBJECT_SHADES[i % 2]);
                }
            }
            if opts.show_arm
                && (segment_distance(p, base, el) <= LINK_HALF_WIDTH
                    || segment_distance(p, el, ee) <= LINK_HALF_WIDTH
                    || dist(p, ee) <= EE_RADIUS)
            {
                v = ARM_SHADE;
            }
            img[row * IMAGE_SIDE + col] = v;
        }
    }
    img
}

fn push_waypoint(ee: [f64; 2], obj: &Disc, goal: [f64; 2]) -> [f64; 2] {
    let to_goal = sub(goal, obj.center);
    let len = norm(to_goal).max(1e-9);
    let dir = [to_goal[0] / len, to_goal[1] / len];
    let contact = obj.radius + EE_RADIUS;
    let rel = sub(ee, obj.center);
    let along = rel[0] * dir[0] + rel[1] * dir[1];
    let perp = [rel[0] - along * dir[0], rel[1] - along * dir[1]];
    let perp_len = norm(perp);
    let at = |d: f64| [obj.center[0] + dir[0] * d, obj.center[1] + dir[1] * d];

    let in_position = along < -0.6 * contact && along > -(contact + 0.05) && perp_len < 0.02;
    if in_position {
        // Drive through the contact point towards the goal.
        return at(-contact + 0.05);
    }
    let behind = at(-(contact + 0.025));
    // Detour around the disc if the end effector is beside or ahead of it
    // and the straight path to `behind` would touch it.
    if along > -0.5 * contact && segment_distance(obj.center, ee, behind) < contact + 0.01 {
        let side = if dir[0] * rel[1] - dir[1] * rel[0] >= 0.0 { 1.0 } else { -1.0 };
        let normal = [-dir[1] * side, dir[0] * side];
        let clear = contact + 0.05;
        return [
            obj.center[0] + normal[0] * clear - dir[0] * 0.5 * contact,
            obj.center[1] + normal[1] * clear - dir[1] * 0.5 * contact,
        ];
    }
    behind
}

/// The current Cartesian waypoint the expert is heading for.
pub fn expert_waypoint(world: &WorldState) -> [f64; 2] {
    let ee = world.arm.ee();
    match world.task {
        Task::Reach => world.goals[0].center,
        Task::Push | Task::SequentialPush => {
            let i = (0..world.objects.len())
                .find(|&i| !world.object_in_goal(i))
                .unwrap_or(0);
            push_waypoint(ee, &world.objects[i], world.goals[i].center)
        }
    }
}

/// Scripted expert: a Cartesian proportional controller towards the
/// current waypoint, converted to joint velocities through inverse
/// kinematics.
pub fn scripted_expert(world: &WorldState) -> Result<[f64; 2]> {
    if world.is_success() {
        return Ok([0.0, 0.0]);
    }
    let target = expert_waypoint(world);
    inverse_kinematics(target)?;
    let ee = world.arm.ee();
    let d = sub(target, ee);
    let len = norm(d);
    let k = if len > EXPERT_STEP { EXPERT_STEP / len } else { 1.0 };
    let mut next = [ee[0] + d[0] * k, ee[1] + d[1] * k];
    let r = norm(next);
    if r > 0.98 * REACH {
        next = [next[0] * 0.98 * REACH / r, next[1] * 0.98 * REACH / r];
    }
    let q_next = inverse_kinematics(next)?;
    let q = world.arm.q;
    Ok([
        (wrap(q_next[0] - q[0]) / DT).clamp(-A_MAX, A_MAX),
        (wrap(q_next[1] - q[1]) / DT).clamp(-A_MAX, A_MAX),
    ])
}

/// One recorded step: observations at time `t` and the action taken there.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub proprio: [f32; PROPRIO_DIM],
    pub image: Image,
    pub action: [f32; ACTION_DIM],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub task_id: usize,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub success: bool,
}

/// Runs the expert for a full episode from `Task::initial_world(seed)`.
pub fn record_expert_episode(task: Task, seed: u64) -> Result<EpisodeRecord> {
    let mut world = task.initial_world(seed);
    let mut steps = Vec::with_capacity(EPISODE_STEPS);
    let mut success = world.is_success();
    for _ in 0..EPISODE_STEPS {
        let action = scripted_expert(&world)?;
        steps.push(StepRecord {
            proprio: world.arm.proprio().map(|x| x as f32),
            image: render(&world),
            action: action.map(|x| x as f32),
        });
        world = world.step(action, DT);
        success |= world.is_success();
    }
    Ok(EpisodeRecord {
        task_id: task.id(),
        seed,
        steps,
        success,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: [f64; 2], b: [f64; 2]) -> bool {
        (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12
    }

    #[test]
    fn forward_kinematics_examples() {
        assert!(close(forward_kinematics([0.0, 0.0]), [1.0, 0.0]));
        assert!(close(forward_kinematics([PI / 2.0, 0.0]), [0.0, 1.0]));
        assert!(close(forward_kinematics([PI / 2.0, -PI / 2.0]), [0.5, 0.5]));
    }

    #[test]
    fn inverse_kinematics_round_trip_and_reach() {
        for target in [[0.5, 0.5], [0.3, -0.6], [-0.2, 0.9]] {
            let q = inverse_kinematics(target).unwrap();
            assert!(close(forward_kinematics(q), target) || {
                let p = forward_kinematics(q);
                (p[0] - target[0]).abs() < 1e-9 && (p[1] - target[1]).abs() < 1e-9
            });
        }
        assert!(matches!(
            inverse_kinematics([1.2, 0.0]),
            Err(Error::UnreachableWaypoint { .. })
        ));
    }

    #[test]
    fn zero_action_is_identity_away_from_contact() {
        let w = Task::Push.initial_world(3);
        let next = w.step([0.0, 0.0], DT);
        assert_eq!(next.arm.q, w.arm.q);
        assert_eq!(next.arm.dq, [0.0, 0.0]);
        assert_eq!(next.objects, w.objects);
    }

    #[test]
    fn euler_integration_from_rest() {
        let mut w = Task::Reach.initial_world(0);
        w.arm = ArmState::new([0.0, 0.0]);
        let next = w.step([1.5, 0.0], DT);
        assert_eq!(next.arm.q, [wrap(1.5 * DT), 0.0]);
        let clipped = w.step([10.0, -10.0], DT);
        assert_eq!(clipped.arm.dq, [A_MAX, -A_MAX]);
    }

    #[test]
    fn overlap_pushes_object_at_least_the_overlap() {
        // Rotating from q=(0.1, 0) to q=(0, 0) lands the end effector at
        // (1, 0), overlapping a disc on the x axis by `delta`.
        let contact = EE_RADIUS + OBJECT_RADIUS;
        let delta = 0.02;
        let mut w = Task::Push.initial_world(0);
        w.arm = ArmState::new([0.1, 0.0]);
        w.objects[0].center = [1.0 - contact + delta, 0.0];
        assert!(dist(w.arm.ee(), w.objects[0].center) > contact);
        let next = w.step([-0.1 / DT, 0.0], DT);
        let ee = next.arm.ee();
        assert!((ee[0] - 1.0).abs() < 1e-12 && ee[1].abs() < 1e-12);
        let shift = w.objects[0].center[0] - next.objects[0].center[0];
        assert!(shift >= delta - 1e-12, "shift {shift} < overlap {delta}");
        assert!(dist(next.objects[0].center, ee) >= contact - 1e-12);
    }

    #[test]
    fn empty_hidden_arm_renders_black() {
        let w = WorldState {
            arm: ArmState::new([0.0, 0.0]),
            objects: vec![],
            goals: vec![],
            task: Task::Reach,
        };
        let img = render_with(&w, RenderOptions { show_arm: false });
        assert!(img.iter().all(|&p| p == 0.0));
        assert_eq!(render(&w), render(&w));
    }

    #[test]
    fn centered_object_lights_the_central_block() {
        let w = WorldState {
            arm: ArmState::new([0.0, 0.0]),
            objects: vec![Disc { center: [0.0, 0.0], radius: OBJECT_RADIUS }],
            goals: vec![],
            task: Task::Push,
        };
        let img = render_with(&w, RenderOptions { show_arm: false });
        // A radius of 0.06 covers pixel centers at distance <= 0.06, i.e.
        // within ~1.9 pixels of the image center (pixel pitch 1/32 m).
        let mut lit = 0;
        for row in 28..36 {
            for col in 28..36 {
                if img[row * IMAGE_SIDE + col] > 0.0 {
                    lit += 1;
                }
            }
        }
        let expected = (28..36)
            .flat_map(|r| (28..36).map(move |c| (r, c)))
            .filter(|&(r, c)| norm(pixel_center(r, c)) <= OBJECT_RADIUS)
            .count();
        assert!(expected > 0);
        assert_eq!(lit, expected);
        assert_eq!(img.iter().filter(|&&p| p > 0.0).count(), expected);
    }

    #[test]
    fn render_distinguishes_test_states() {
        let mut images = Vec::new();
        for task in Task::ALL {
            for seed in 0..8 {
                images.push(render(&task.initial_world(seed)));
            }
        }
        for i in 0..images.len() {
            for j in (i + 1)..images.len() {
                assert_ne!(images[i], images[j], "states {i} and {j} collide");
            }
        }
    }

    #[test]
    fn expert_holds_in_success() {
        let mut w = Task::Reach.initial_world(1);
        w.arm = ArmState::new(inverse_kinematics(w.goals[0].center).unwrap());
        assert!(w.is_success());
        let a = scripted_expert(&w).unwrap();
        assert!(a[0].hypot(a[1]) <= HOLD_THRESHOLD);
    }

    #[test]
    fn expert_rejects_unreachable_waypoint() {
        let mut w = Task::Reach.initial_world(1);
        w.goals[0].center = [1.2 / 2f64.sqrt(), 1.2 / 2f64.sqrt()];
        w.goals[0].radius = 0.01;
        assert!(matches!(
            scripted_expert(&w),
            Err(Error::UnreachableWaypoint { .. })
        ));
    }

    #[test]
    fn expert_reaches_from_straight_arm() {
        let mut w = Task::Reach.initial_world(5);
        w.arm = ArmState::new([0.0, 0.3]);
        let mut success = false;
        for _ in 0..EPISODE_STEPS {
            w = w.step(scripted_expert(&w).unwrap(), DT);
            success |= w.is_success();
        }
        assert!(success);
    }

    #[test]
    fn expert_success_rate_per_task() {
        for task in Task::ALL {
            let n = 40;
            let ok = (0..n)
                .filter(|&s| record_expert_episode(task, 1000 + s).unwrap().success)
                .count();
            assert!(ok as f64 >= 0.95 * n as f64, "{task:?}: {ok}/{n}");
        }
    }

    proptest! {
        #[test]
        fn wrap_is_idempotent_and_in_range(x in -100.0f64..100.0) {
            let w = wrap(x);
            prop_assert!((-PI..PI).contains(&w));
            prop_assert_eq!(wrap(w), w);
        }

        #[test]
        fn objects_stay_in_workspace(seed in 0u64..64, a0 in -3.0f64..3.0, a1 in -3.0f64..3.0, n in 1usize..60) {
            let mut w = Task::SequentialPush.initial_world(seed);
            for _ in 0..n {
                w = w.step([a0, a1], DT);
                for o in &w.objects {
                    prop_assert!(o.center[0].abs() <= REACH && o.center[1].abs() <= REACH);
                }
            }
        }

        #[test]
        fn step_is_deterministic(seed in 0u64..32, a0 in -3.0f64..3.0, a1 in -3.0f64..3.0) {
            let w = Task::Push.initial_world(seed);
            prop_assert_eq!(w.step([a0, a1], DT), w.step([a0, a1], DT));
        }
    }
}
