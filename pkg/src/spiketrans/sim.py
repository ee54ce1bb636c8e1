"""Deterministic desk-scale driving simulator: highway and roundabout.

The world is a set of rectangles on lanes.  The ego vehicle executes
discrete meta-actions (lane left/right, idle, faster, slower) at the policy
rate; between decisions the physics advance in fixed substeps at the
simulation rate.  Traffic follows a simple car-following rule: hold the
desired speed, brake when the time headway to the leader drops below a
threshold.  Everything — spawning, traffic, sensors — is a pure function of
(seed, episode index, action sequence), so trajectories replay bit-exactly.

Observations bundle an ego-centered top-down raster, a 360-degree beam
array of (range, radial velocity) pairs, and the ego kinematics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, UsageError

__all__ = [
    "ACTIONS",
    "A_LANE_LEFT",
    "A_IDLE",
    "A_LANE_RIGHT",
    "A_FASTER",
    "A_SLOWER",
    "VehicleState",
    "ScenarioConfig",
    "default_config",
    "Observation",
    "HighwayEnv",
    "RoundaboutEnv",
    "FrameStackEnv",
    "make_env",
    "reward_highway",
    "reward_roundabout",
    "rollout",
]

ACTIONS = ("LANE_LEFT", "IDLE", "LANE_RIGHT", "FASTER", "SLOWER")
A_LANE_LEFT, A_IDLE, A_LANE_RIGHT, A_FASTER, A_SLOWER = range(5)

_MASK64 = (1 << 64) - 1

# Raster intensities
_BG, _ROAD, _MARK, _VEHICLE = 0.0, 0.3, 0.6, 1.0
_MARK_HALFWIDTH = 0.6


@dataclass
class VehicleState:
    """Pose and motion of one vehicle; traffic carries its cruise target."""

    x: float
    y: float
    speed: float
    heading: float = 0.0
    lane: int = 0
    length: float = 5.0
    width: float = 2.0
    desired_speed: float = 0.0
    arc_pos: float = 0.0  # roundabout: position along the ring, meters


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "highway"
    lanes: int = 4
    n_vehicles: int = 12
    sim_hz: int = 15
    policy_hz: int = 1
    episode_len_s: float = 40.0
    bev_fov: float = 35.0  # half-width of the rendered window, meters
    bev_resolution: int = 64
    lidar_range: float = 60.0
    lidar_beams: int = 32
    v_min: float = 20.0
    v_max: float = 30.0
    highway_alpha: float = 1.0
    highway_beta: float = 1.0
    round_alpha: float = 0.2
    round_beta: float = 1.0
    round_gamma: float = 0.05
    round_delta: float = 0.5
    seed: int = 0
    lane_width: float = 4.0
    speed_step: float = 5.0
    ego_accel: float = 5.0
    traffic_accel: float = 1.5
    brake: float = 5.0
    headway_s: float = 2.0
    ego_start_speed: float = 25.0
    traffic_speed_min: float = 20.0
    traffic_speed_max: float = 24.0
    spawn_gap_min: float = 18.0
    spawn_gap_max: float = 45.0
    spawn_ahead: float = 25.0
    spawn_span: float = 250.0
    recycle_behind: float = 80.0
    recycle_ahead: float = 120.0
    ring_radius: float = 30.0
    arm_length: float = 40.0
    ring_speed_min: float = 9.0
    ring_speed_max: float = 13.0

    def __post_init__(self):
        if self.scenario not in ("highway", "roundabout"):
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.sim_hz % self.policy_hz != 0:
            raise ConfigError("sim_hz must be an integer multiple of policy_hz")
        if self.lanes < 1:
            raise ConfigError("at least one lane required")
        if not self.v_min < self.v_max:
            raise ConfigError("v_min must be below v_max")

    @property
    def substeps(self) -> int:
        return self.sim_hz // self.policy_hz

    @property
    def max_policy_steps(self) -> int:
        return int(round(self.episode_len_s * self.policy_hz))


# Per-scenario tweaks applied by default_config: merging onto a slow ring at
# highway entry speed is unsurvivable, so the roundabout starts gentler.
_SCENARIO_DEFAULTS = {
    "highway": {},
    "roundabout": {"n_vehicles": 6, "ego_start_speed": 12.0},
}


def default_config(scenario: str = "highway", **overrides) -> ScenarioConfig:
    """ScenarioConfig with per-scenario defaults, then explicit overrides."""
    base = dict(_SCENARIO_DEFAULTS.get(scenario, {}))
    base.update(overrides)
    return ScenarioConfig(scenario=scenario, **base)


@dataclass
class Observation:
    """One step's sensory bundle."""

    bev: np.ndarray  # [C, res, res] float32 in [0, 1]
    lidar_beams: np.ndarray  # [N, 2] float32: (range / d_max, radial velocity)
    ego_speed: float
    ego_heading: float


# --------------------------------------------------------------------------
# Rewards
# --------------------------------------------------------------------------


def _speed_norm(speed: float, v_min: float, v_max: float) -> float:
    return min(max((speed - v_min) / (v_max - v_min), 0.0), 1.0)


def reward_highway(speed: float, crashed: bool, v_min: float = 20.0, v_max: float = 30.0,
                   alpha: float = 1.0, beta: float = 1.0) -> float:
    """Speed-tracking reward minus the collision penalty."""
    return alpha * _speed_norm(speed, v_min, v_max) - beta * float(crashed)


def reward_roundabout(speed: float, crashed: bool, lane_changed: bool, on_road: bool,
                      v_min: float = 20.0, v_max: float = 30.0, alpha: float = 0.2,
                      beta: float = 1.0, gamma: float = 0.05, delta: float = 0.5) -> float:
    """Speed, collision, lane-change, and road-keeping terms combined."""
    return (alpha * _speed_norm(speed, v_min, v_max)
            - beta * float(crashed)
            + gamma * float(lane_changed)
            + delta * float(on_road))


# --------------------------------------------------------------------------
# Geometry helpers
# --------------------------------------------------------------------------


def _rect_axes(heading: float):
    c, s = math.cos(heading), math.sin(heading)
    return (c, s), (-s, c)


def _rects_overlap(a: VehicleState, b: VehicleState) -> bool:
    """Separating-axis test for two oriented rectangles."""
    ax_a = _rect_axes(a.heading)
    ax_b = _rect_axes(b.heading)
    half_a = (a.length / 2.0, a.width / 2.0)
    half_b = (b.length / 2.0, b.width / 2.0)
    dx, dy = b.x - a.x, b.y - a.y
    for ux, uy in (*ax_a, *ax_b):
        ra = half_a[0] * abs(ux * ax_a[0][0] + uy * ax_a[0][1]) + \
             half_a[1] * abs(ux * ax_a[1][0] + uy * ax_a[1][1])
        rb = half_b[0] * abs(ux * ax_b[0][0] + uy * ax_b[0][1]) + \
             half_b[1] * abs(ux * ax_b[1][0] + uy * ax_b[1][1])
        if abs(dx * ux + dy * uy) > ra + rb:
            return False
    return True


def _ray_rect_distance(ox: float, oy: float, dx: float, dy: float,
                       rect: VehicleState) -> float:
    """Distance along the ray to the rectangle, or inf when it misses."""
    c, s = math.cos(rect.heading), math.sin(rect.heading)
    # ray in the rectangle frame
    rx, ry = ox - rect.x, oy - rect.y
    o1 = c * rx + s * ry
    o2 = -s * rx + c * ry
    d1 = c * dx + s * dy
    d2 = -s * dx + c * dy
    t_near, t_far = -math.inf, math.inf
    for o, d, half in ((o1, d1, rect.length / 2.0), (o2, d2, rect.width / 2.0)):
        if abs(d) < 1e-12:
            if abs(o) > half:
                return math.inf
            continue
        t1 = (-half - o) / d
        t2 = (half - o) / d
        if t1 > t2:
            t1, t2 = t2, t1
        t_near = max(t_near, t1)
        t_far = min(t_far, t2)
    if t_near > t_far or t_far < 0:
        return math.inf
    return max(t_near, 0.0)


def _smoothstep(t: float) -> float:
    t = min(max(t, 0.0), 1.0)
    return t * t * (3.0 - 2.0 * t)


# --------------------------------------------------------------------------
# Base environment
# --------------------------------------------------------------------------


class _DrivingEnv:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.ego: VehicleState | None = None
        self.vehicles: list[VehicleState] = []
        self._episode = -1
        self._done = True
        self._crashed = False
        self._steps = 0
        self._lane_change: tuple | None = None  # (y_from, y_to, progress)

    # -- episode control ----------------------------------------------------

    def _episode_rng(self) -> np.random.Generator:
        key = np.array([self.cfg.seed & _MASK64, self._episode & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def reset(self) -> Observation:
        self._episode += 1
        self._done = False
        self._crashed = False
        self._steps = 0
        self._lane_change = None
        self._spawn(self._episode_rng())
        return self._observe()

    def step(self, action: int):
        if self._done:
            raise UsageError("episode is done; call reset()")
        if not isinstance(action, (int, np.integer)) or not 0 <= int(action) < len(ACTIONS):
            raise UsageError(f"action index out of range: {action!r}")
        action = int(action)
        lane_changed = self._apply_action(action)
        dt = 1.0 / self.cfg.sim_hz
        crashed = False
        for _ in range(self.cfg.substeps):
            self._substep(dt)
            if self._check_collision():
                crashed = True
                break
        self._crashed = crashed
        self._steps += 1
        done = crashed or self._steps >= self.cfg.max_policy_steps or self._route_completed()
        self._done = done
        on_road = self._ego_on_road()
        reward = self._reward(crashed, lane_changed, on_road)
        info = {
            "crashed": crashed,
            "ego_speed": self.ego.speed,
            "on_road": on_road,
            "lane_changed": lane_changed,
            "time": self._steps / self.cfg.policy_hz,
        }
        return self._observe(), reward, done, info

    # -- hooks implemented per scenario --------------------------------------

    def _spawn(self, rng):
        raise NotImplementedError

    def _apply_action(self, action: int) -> bool:
        raise NotImplementedError

    def _substep(self, dt: float) -> None:
        raise NotImplementedError

    def _reward(self, crashed: bool, lane_changed: bool, on_road: bool) -> float:
        raise NotImplementedError

    def _route_completed(self) -> bool:
        return False

    def _ego_on_road(self) -> bool:
        return True

    def _classify_surface(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # -- shared dynamics ------------------------------------------------------

    def _ego_speed_update(self, dt: float) -> None:
        ego = self.ego
        delta = ego.desired_speed - ego.speed
        limit = self.cfg.ego_accel * dt
        ego.speed += min(max(delta, -limit), limit)
        ego.speed = max(ego.speed, 0.0)

    def _check_collision(self) -> bool:
        for v in self.vehicles:
            if _rects_overlap(self.ego, v):
                return True
        return False

    # -- sensors --------------------------------------------------------------

    def _observe(self) -> Observation:
        return Observation(
            bev=self.render_bev(),
            lidar_beams=self.cast_lidar(),
            ego_speed=self.ego.speed,
            ego_heading=self.ego.heading,
        )

    def render_bev(self) -> np.ndarray:
        """Ego-centered, heading-aligned grayscale raster [1, res, res]."""
        cfg = self.cfg
        res, fov = cfg.bev_resolution, cfg.bev_fov
        ego = self.ego
        # pixel centers in the ego frame: columns grow forward, rows leftward
        coords = (np.arange(res) + 0.5) / res * (2 * fov) - fov
        u = coords[None, :].repeat(res, axis=0)  # forward
        v = coords[::-1, None].repeat(res, axis=1)  # lateral (top row = +left)
        c, s = math.cos(ego.heading), math.sin(ego.heading)
        xs = ego.x + c * u - s * v
        ys = ego.y + s * u + c * v
        img = np.full((res, res), _BG, np.float32)
        surface = self._classify_surface(xs, ys)
        img = np.maximum(img, surface)
        for veh in (*self.vehicles, ego):
            cv, sv = math.cos(veh.heading), math.sin(veh.heading)
            rx, ry = xs - veh.x, ys - veh.y
            lx = cv * rx + sv * ry
            ly = -sv * rx + cv * ry
            inside = (np.abs(lx) <= veh.length / 2.0) & (np.abs(ly) <= veh.width / 2.0)
            img[inside] = _VEHICLE
        return img[None]

    def cast_lidar(self) -> np.ndarray:
        """[N, 2] of (range / d_max, radial closing velocity), 360 degrees."""
        cfg = self.cfg
        ego = self.ego
        n = cfg.lidar_beams
        out = np.zeros((n, 2), np.float32)
        out[:, 0] = 1.0
        ego_vx = ego.speed * math.cos(ego.heading)
        ego_vy = ego.speed * math.sin(ego.heading)
        for j in range(n):
            ang = ego.heading + 2.0 * math.pi * j / n
            dx, dy = math.cos(ang), math.sin(ang)
            best = math.inf
            best_v = None
            for veh in self.vehicles:
                t = _ray_rect_distance(ego.x, ego.y, dx, dy, veh)
                if t < best:
                    best = t
                    best_v = veh
            if best_v is not None and best <= cfg.lidar_range:
                out[j, 0] = best / cfg.lidar_range
                tvx = best_v.speed * math.cos(best_v.heading)
                tvy = best_v.speed * math.sin(best_v.heading)
                out[j, 1] = (tvx - ego_vx) * dx + (tvy - ego_vy) * dy
        return out


# --------------------------------------------------------------------------
# Highway
# --------------------------------------------------------------------------


class HighwayEnv(_DrivingEnv):
    """Straight multi-lane road with recycled forward traffic."""

    def __init__(self, cfg: ScenarioConfig):
        super().__init__(cfg)
        feasible = cfg.n_vehicles * cfg.spawn_gap_min / max(cfg.lanes, 1)
        if feasible > cfg.spawn_span:
            raise ConfigError(
                f"cannot place {cfg.n_vehicles} vehicles in a {cfg.spawn_span} m span "
                f"across {cfg.lanes} lanes at {cfg.spawn_gap_min} m gaps"
            )
        self.road_y0 = 0.0  # center of lane 0; shared origin for translations

    def lane_center(self, lane: int) -> float:
        return self.road_y0 + lane * self.cfg.lane_width

    def _lane_of(self, y: float) -> int:
        return int(round((y - self.road_y0) / self.cfg.lane_width))

    def _spawn(self, rng) -> None:
        cfg = self.cfg
        ego_lane = int(rng.integers(cfg.lanes))
        self.ego = VehicleState(x=0.0, y=self.lane_center(ego_lane),
                                speed=cfg.ego_start_speed, lane=ego_lane,
                                desired_speed=cfg.ego_start_speed)
        self.vehicles = []
        frontier = [cfg.spawn_ahead] * cfg.lanes
        for _ in range(cfg.n_vehicles):
            lane = int(rng.integers(cfg.lanes))
            gap = float(rng.uniform(cfg.spawn_gap_min, cfg.spawn_gap_max))
            x = frontier[lane] + gap
            frontier[lane] = x
            speed = float(rng.uniform(cfg.traffic_speed_min, cfg.traffic_speed_max))
            self.vehicles.append(VehicleState(
                x=x, y=self.lane_center(lane), speed=speed, lane=lane,
                desired_speed=speed))

    def _apply_action(self, action: int) -> bool:
        cfg = self.cfg
        ego = self.ego
        if action == A_FASTER:
            ego.desired_speed = min(ego.desired_speed + cfg.speed_step, cfg.v_max)
        elif action == A_SLOWER:
            ego.desired_speed = max(ego.desired_speed - cfg.speed_step, 0.0)
        elif action in (A_LANE_LEFT, A_LANE_RIGHT):
            target = ego.lane + (1 if action == A_LANE_LEFT else -1)
            if 0 <= target < cfg.lanes:  # invalid changes fall back to idling
                self._lane_change = (ego.y, self.lane_center(target), 0.0)
                ego.lane = target
                return True
        return False

    def _substep(self, dt: float) -> None:
        cfg = self.cfg
        ego = self.ego
        self._ego_speed_update(dt)
        ego.x += ego.speed * dt
        if self._lane_change is not None:
            y_from, y_to, progress = self._lane_change
            progress += dt * cfg.policy_hz  # the maneuver spans one decision second
            y_new = y_from + (y_to - y_from) * _smoothstep(progress)
            vy = (y_new - ego.y) / dt
            ego.y = y_new
            ego.heading = math.atan2(vy, max(ego.speed, 1e-6)) if ego.speed > 1e-6 else 0.0
            if progress >= 1.0:
                ego.y = y_to
                ego.heading = 0.0
                self._lane_change = None
            else:
                self._lane_change = (y_from, y_to, progress)
        self._traffic_substep(dt)
        self._recycle()

    def _traffic_substep(self, dt: float) -> None:
        cfg = self.cfg
        ego = self.ego
        ego_lane = self._lane_of(ego.y)
        for veh in self.vehicles:
            leader_gap = math.inf
            for other in self.vehicles:
                if other is veh or other.lane != veh.lane or other.x <= veh.x:
                    continue
                leader_gap = min(leader_gap, other.x - veh.x - other.length)
            if ego_lane == veh.lane and ego.x > veh.x:
                leader_gap = min(leader_gap, ego.x - veh.x - ego.length)
            if leader_gap < cfg.headway_s * veh.speed:
                veh.speed = max(veh.speed - cfg.brake * dt, 0.0)
            elif veh.speed < veh.desired_speed:
                veh.speed = min(veh.speed + cfg.traffic_accel * dt, veh.desired_speed)
            veh.x += veh.speed * dt

    def _recycle(self) -> None:
        cfg = self.cfg
        ego = self.ego
        for idx, veh in enumerate(self.vehicles):
            if veh.x < ego.x - cfg.recycle_behind:
                same_lane = [v.x for v in self.vehicles if v.lane == veh.lane and v is not veh]
                frontier = max(same_lane + [ego.x + cfg.recycle_ahead])
                # deterministic pseudo-gap derived from the vehicle index
                gap = cfg.spawn_gap_min + (idx * 7.31) % (cfg.spawn_gap_max - cfg.spawn_gap_min)
                veh.x = max(frontier + gap, ego.x + cfg.recycle_ahead)

    def _reward(self, crashed, lane_changed, on_road) -> float:
        cfg = self.cfg
        return reward_highway(self.ego.speed, crashed, cfg.v_min, cfg.v_max,
                              cfg.highway_alpha, cfg.highway_beta)

    def _classify_surface(self, xs, ys) -> np.ndarray:
        cfg = self.cfg
        w = cfg.lane_width
        y_lo = self.road_y0 - w / 2.0
        y_hi = self.road_y0 + (cfg.lanes - 1) * w + w / 2.0
        out = np.where((ys >= y_lo) & (ys <= y_hi), _ROAD, _BG).astype(np.float32)
        for i in range(cfg.lanes + 1):
            boundary = y_lo + i * w
            out[np.abs(ys - boundary) <= _MARK_HALFWIDTH] = _MARK
        return out


# --------------------------------------------------------------------------
# Roundabout
# --------------------------------------------------------------------------


class RoundaboutEnv(_DrivingEnv):
    """Single circulating lane with four radial arms; ego enters from the
    south, circulates counter-clockwise three quarters, and exits west."""

    ENTRY_ANGLE = -math.pi / 2.0
    EXIT_ANGLE = math.pi

    def __init__(self, cfg: ScenarioConfig):
        super().__init__(cfg)
        r = cfg.ring_radius
        self._entry_len = cfg.arm_length
        self._arc_len = 1.5 * math.pi * r  # 270 degrees of circulation
        self._exit_len = cfg.arm_length
        self._route_len = self._entry_len + self._arc_len + self._exit_len
        self._ego_route_s = 0.0

    # ego route: (0, -(R+arm)) -> (0, -R) -> CCW arc to (-R, 0) -> (-(R+arm), 0)
    def _locate(self, s: float):
        r = self.cfg.ring_radius
        if s < self._entry_len:
            return 0.0, -(r + self._entry_len) + s, math.pi / 2.0
        s2 = s - self._entry_len
        if s2 < self._arc_len:
            theta = self.ENTRY_ANGLE + s2 / r
            return r * math.cos(theta), r * math.sin(theta), theta + math.pi / 2.0
        s3 = s2 - self._arc_len
        return -r - s3, 0.0, math.pi

    def _ego_on_ring(self) -> bool:
        return self._entry_len <= self._ego_route_s < self._entry_len + self._arc_len

    def _ego_ring_arc(self) -> float:
        return self._ego_route_s - self._entry_len

    def _spawn(self, rng) -> None:
        cfg = self.cfg
        self._ego_route_s = 0.0
        x, y, heading = self._locate(0.0)
        self.ego = VehicleState(x=x, y=y, speed=cfg.ego_start_speed, heading=heading,
                                desired_speed=cfg.ego_start_speed)
        ring_len = 2.0 * math.pi * cfg.ring_radius
        min_gap = 12.0
        if cfg.n_vehicles * min_gap > ring_len:
            raise ConfigError(
                f"cannot place {cfg.n_vehicles} vehicles on a {ring_len:.0f} m ring"
            )
        self.vehicles = []
        base = float(rng.uniform(0.0, ring_len))
        spacing = ring_len / max(cfg.n_vehicles, 1)
        for i in range(cfg.n_vehicles):
            # even spacing plus jitter below (spacing - min_gap) keeps all gaps legal
            jitter = float(rng.uniform(0.0, max(spacing - min_gap, 0.0)))
            arc = (base + i * spacing + jitter) % ring_len
            speed = float(rng.uniform(cfg.ring_speed_min, cfg.ring_speed_max))
            veh = VehicleState(x=0.0, y=0.0, speed=speed, desired_speed=speed, arc_pos=arc)
            self._place_on_ring(veh)
            self.vehicles.append(veh)

    def _place_on_ring(self, veh: VehicleState) -> None:
        r = self.cfg.ring_radius
        theta = self.ENTRY_ANGLE + veh.arc_pos / r
        veh.x = r * math.cos(theta)
        veh.y = r * math.sin(theta)
        veh.heading = theta + math.pi / 2.0

    def _apply_action(self, action: int) -> bool:
        cfg = self.cfg
        ego = self.ego
        if action == A_FASTER:
            ego.desired_speed = min(ego.desired_speed + cfg.speed_step, cfg.v_max)
        elif action == A_SLOWER:
            ego.desired_speed = max(ego.desired_speed - cfg.speed_step, 0.0)
        # single circulating lane: lane changes are invalid and become IDLE
        return False

    def _substep(self, dt: float) -> None:
        self._ego_speed_update(dt)
        self._ego_route_s += self.ego.speed * dt
        x, y, heading = self._locate(min(self._ego_route_s, self._route_len))
        self.ego.x, self.ego.y, self.ego.heading = x, y, heading
        ring_len = 2.0 * math.pi * self.cfg.ring_radius
        cfg = self.cfg
        ego_arc = self._ego_ring_arc() if self._ego_on_ring() else None
        for veh in self.vehicles:
            gap = math.inf
            for other in self.vehicles:
                if other is veh:
                    continue
                ahead = (other.arc_pos - veh.arc_pos) % ring_len
                gap = min(gap, ahead - other.length)
            if ego_arc is not None:
                ahead = (ego_arc - veh.arc_pos) % ring_len
                gap = min(gap, ahead - self.ego.length)
            if gap < cfg.headway_s * veh.speed:
                veh.speed = max(veh.speed - cfg.brake * dt, 0.0)
            elif veh.speed < veh.desired_speed:
                veh.speed = min(veh.speed + cfg.traffic_accel * dt, veh.desired_speed)
            veh.arc_pos = (veh.arc_pos + veh.speed * dt) % ring_len
            self._place_on_ring(veh)

    def _route_completed(self) -> bool:
        return self._ego_route_s >= self._route_len

    def _reward(self, crashed, lane_changed, on_road) -> float:
        cfg = self.cfg
        return reward_roundabout(self.ego.speed, crashed, lane_changed, on_road,
                                 cfg.v_min, cfg.v_max, cfg.round_alpha, cfg.round_beta,
                                 cfg.round_gamma, cfg.round_delta)

    def _classify_surface(self, xs, ys) -> np.ndarray:
        cfg = self.cfg
        r = cfg.ring_radius
        half = cfg.lane_width / 2.0
        rad = np.hypot(xs, ys)
        out = np.where(np.abs(rad - r) <= half, _ROAD, _BG).astype(np.float32)
        arm_hi = r + cfg.arm_length
        for ux, uy in ((1, 0), (0, 1), (-1, 0), (0, -1)):
            along = xs * ux + ys * uy
            across = -xs * uy + ys * ux
            on_arm = (along >= r - half) & (along <= arm_hi) & (np.abs(across) <= half)
            out[on_arm] = np.maximum(out[on_arm], _ROAD)
        for edge in (r - half, r + half):
            out[np.abs(rad - edge) <= _MARK_HALFWIDTH] = _MARK
        return out


# --------------------------------------------------------------------------
# Wrappers and helpers
# --------------------------------------------------------------------------


class FrameStackEnv:
    """Stacks the last k top-down frames as channels (uni-modal baselines)."""

    def __init__(self, env: _DrivingEnv, k: int):
        if k not in (1, 4):
            raise ConfigError(f"frame stack must be 1 or 4, got {k}")
        self.env = env
        self.k = k
        self._frames: list[np.ndarray] = []

    @property
    def cfg(self) -> ScenarioConfig:
        return self.env.cfg

    def _stacked(self, obs: Observation) -> Observation:
        bev = np.concatenate(self._frames, axis=0)
        return replace(obs, bev=bev)

    def reset(self) -> Observation:
        obs = self.env.reset()
        self._frames = [obs.bev.copy() for _ in range(self.k)]
        return self._stacked(obs)

    def step(self, action: int):
        obs, reward, done, info = self.env.step(action)
        self._frames.pop(0)
        self._frames.append(obs.bev.copy())
        return self._stacked(obs), reward, done, info


def make_env(cfg: ScenarioConfig, frame_stack: int = 1):
    env = HighwayEnv(cfg) if cfg.scenario == "highway" else RoundaboutEnv(cfg)
    if frame_stack > 1:
        return FrameStackEnv(env, frame_stack)
    return env


def rollout(env, policy, n_steps: int, csv_path=None, pgm_dir=None, pgm_every: int = 0):
    """Drive ``policy(obs, step) -> action`` and optionally log artifacts.

    Returns the trajectory as a list of row dicts; the CSV columns are
    step,action,reward,crashed,ego_speed,ego_x,ego_y.  When PGM dumping is
    requested, each selected step writes the top-down raster and the
    lidar-image luminance channel.
    """
    from .lidar_image import LidarImageSpec, lidar_to_image, write_pgm

    rows = []
    obs = env.reset()
    base = env.env if isinstance(env, FrameStackEnv) else env
    raster = LidarImageSpec(d_max=base.cfg.lidar_range, scale=base.cfg.v_max)
    for step in range(n_steps):
        action = int(policy(obs, step))
        obs, reward, done, info = env.step(action)
        rows.append({
            "step": step,
            "action": action,
            "reward": reward,
            "crashed": info["crashed"],
            "ego_speed": info["ego_speed"],
            "ego_x": base.ego.x,
            "ego_y": base.ego.y,
        })
        if pgm_dir is not None and pgm_every and step % pgm_every == 0:
            write_pgm(f"{pgm_dir}/bev_{step:05d}.pgm", obs.bev[-1])
            img = lidar_to_image(obs.lidar_beams, obs.ego_speed, obs.ego_heading, raster)
            write_pgm(f"{pgm_dir}/lidar_{step:05d}.pgm", img[0])
        if done:
            obs = env.reset()
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(
                f, fieldnames=["step", "action", "reward", "crashed",
                               "ego_speed", "ego_x", "ego_y"])
            writer.writeheader()
            writer.writerows(rows)
    return rows
