"""Deterministic 2.5-D tabletop world with a point gripper.

Cubes and plates sit on a unit table; the gripper is a point that moves in
normalized displacement steps, can attach a nearby cube when it closes,
and pushes non-attached objects out of the way by the minimal separating
vector. Every object movement accumulates into a per-object displacement
ledger, which is what "without displacing other objects" is enforced
against. Two orthographic camera views (full-table base, gripper-centered
wrist) are rasterized with matching instance-ID buffers.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .disentangle import SceneRegistry
from .imaging import (GRIPPER_GRAY, HELDOUT_PALETTE, TABLE_GRAY,
                      TRAIN_PALETTE, Frame, Palette, palettes_disjoint)

# geometry (abstract length units; workspace is the unit square, 0.3 tall)
WORKSPACE_XY = (0.0, 1.0)
WORKSPACE_Z = (0.0, 0.3)
CUBE_SIDE = 0.06
CUBE_HALF = CUBE_SIDE / 2.0
PLATE_RADIUS = 0.06
PLATE_HEIGHT = 0.01
STEP_DELTA = 0.03
GRASP_XY = 0.025
GRASP_Z_PAD = 0.01
LIFT_Z = 0.15
PLACE_XY_TOL = 0.03
SUCCESS_LEDGER_TOL = 0.01
FAIL_LEDGER_TOL = 0.05
MIN_SPACING = 0.12
ROBOT_ID = 1

# reward shaping coefficients
REACH_COEF = 1.0
GRASP_BONUS = 0.5
LIFT_COEF = 2.0
DISTURB_COEF = 5.0
SUCCESS_BONUS = 10.0
TIME_PENALTY = 0.01


@dataclass
class Action:
    arm: np.ndarray            # 3-vector, clamped to [-1, 1] before use
    gripper: float             # -1 open, +1 close


@dataclass
class RewardBreakdown:
    reach: float = 0.0
    grasp_bonus: float = 0.0
    lift: float = 0.0
    disturb_penalty: float = 0.0
    success_bonus: float = 0.0
    time_penalty: float = 0.0

    @property
    def total(self):
        return (self.reach + self.grasp_bonus + self.lift
                + self.disturb_penalty + self.success_bonus + self.time_penalty)


@dataclass
class ObjectState:
    oid: int
    kind: str                  # "cube" | "plate"
    pos: np.ndarray            # (x, y, z_bottom)
    color: tuple
    initial_pos: np.ndarray
    eligible_target: bool = True

    @property
    def half_extents(self):
        if self.kind == "cube":
            return np.array([CUBE_HALF, CUBE_HALF, CUBE_HALF])
        return np.array([PLATE_RADIUS, PLATE_RADIUS, PLATE_HEIGHT / 2.0])

    @property
    def center(self):
        return self.pos + np.array([0.0, 0.0, self.half_extents[2]])

    @property
    def top(self):
        return self.pos[2] + 2.0 * self.half_extents[2]


@dataclass
class Observation:
    frames: dict               # view -> Frame (None for vector-only envs)
    proprio: np.ndarray        # 11-vector
    registry: SceneRegistry = None
    target_id: int = 0


@dataclass
class SceneState:
    gripper: np.ndarray
    closed: bool
    attached: int | None       # instance id, implies closed
    attach_offset: np.ndarray | None
    objects: dict              # oid -> ObjectState
    ledger: dict               # oid -> cumulative displacement
    step_count: int
    target_id: int
    carried_id: int | None     # the picked cube during place episodes
    last_disp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    prev_action: np.ndarray = field(default_factory=lambda: np.zeros(4))
    done: bool = False
    success: bool = False

    def manipulated_id(self, task):
        return self.carried_id if task == "place" else self.target_id

    def to_json(self):
        return {
            "gripper": self.gripper.tolist(),
            "closed": self.closed,
            "attached": self.attached,
            "attach_offset": None if self.attach_offset is None else self.attach_offset.tolist(),
            "target_id": self.target_id,
            "objects": {str(o.oid): {"kind": o.kind, "pos": o.pos.tolist(),
                                     "color": list(o.color),
                                     "eligible": o.eligible_target}
                        for o in self.objects.values()},
        }

    @staticmethod
    def from_json(d):
        objects = {}
        for k, v in d["objects"].items():
            pos = np.array(v["pos"])
            objects[int(k)] = ObjectState(int(k), v["kind"], pos.copy(),
                                          tuple(v["color"]), pos.copy(),
                                          v.get("eligible", True))
        return SceneState(
            gripper=np.array(d["gripper"]),
            closed=d["closed"],
            attached=d["attached"],
            attach_offset=None if d["attach_offset"] is None else np.array(d["attach_offset"]),
            objects=objects,
            ledger={oid: 0.0 for oid in objects},
            step_count=0,
            target_id=d["target_id"],
            carried_id=d["attached"],
        )


@dataclass
class SceneConfig:
    n_cubes: int = 2
    n_plates: int = 1
    palette: Palette = TRAIN_PALETTE
    resolution: int = 64
    episode_horizon: int = 100
    variant: str = "fixed_target"        # or "varying_target"
    distractor_count: int = 0
    fixed_pick_target: int | None = None   # defaults to the first cube id
    fixed_place_target: int | None = None  # defaults to the first plate id

    def object_kinds(self):
        """(oid, kind, eligible) triples; robot is id 1, objects follow."""
        out = []
        oid = ROBOT_ID + 1
        for _ in range(self.n_cubes):
            out.append((oid, "cube", True))
            oid += 1
        for _ in range(self.n_plates):
            out.append((oid, "plate", True))
            oid += 1
        for i in range(self.distractor_count):
            out.append((oid, "cube" if i % 2 == 0 else "plate", False))
            oid += 1
        return out

    def registry(self):
        return SceneRegistry(frozenset({ROBOT_ID}),
                             frozenset(oid for oid, _, _ in self.object_kinds()))


def ood_recolor(config: SceneConfig, heldout: Palette = HELDOUT_PALETTE) -> SceneConfig:
    """Swap every object color to the held-out palette (geometry/IDs unchanged)."""
    if not palettes_disjoint(config.palette, heldout):
        raise ValueError("held-out palette overlaps the training palette")
    return _replace(config, palette=heldout)


def _replace(config, **kw):
    d = {f: getattr(config, f) for f in config.__dataclass_fields__}
    d.update(kw)
    return SceneConfig(**d)


def add_distractors(config: SceneConfig, m: int) -> SceneConfig:
    """Append m extra objects registered as obstacles (never eligible targets)."""
    if m < 0:
        raise ValueError("distractor count must be non-negative")
    return _replace(config, distractor_count=config.distractor_count + m)


# ---------------------------------------------------------------------------
# geometry helpers

def _clamp_point(p):
    q = p.copy()
    q[0] = np.clip(q[0], *WORKSPACE_XY)
    q[1] = np.clip(q[1], *WORKSPACE_XY)
    q[2] = np.clip(q[2], *WORKSPACE_Z)
    return q


def _clamp_object(obj):
    h = obj.half_extents
    obj.pos[0] = np.clip(obj.pos[0], WORKSPACE_XY[0] + h[0], WORKSPACE_XY[1] - h[0])
    obj.pos[1] = np.clip(obj.pos[1], WORKSPACE_XY[0] + h[1], WORKSPACE_XY[1] - h[1])
    obj.pos[2] = np.clip(obj.pos[2], 0.0, WORKSPACE_Z[1] - 2.0 * h[2])


def _push_from_point(obj, p):
    """If point p is inside obj's AABB, move obj by the minimal separating
    vector; returns True if a push happened."""
    c, h = obj.center, obj.half_extents
    lo, hi = c - h, c + h
    if not np.all((p > lo) & (p < hi)):
        return False
    best_axis, best_mag, best_dir = 0, np.inf, 1.0
    for a in range(3):
        plus = p[a] - lo[a]      # push obj in +a
        minus = hi[a] - p[a]     # push obj in -a
        if plus < best_mag:
            best_axis, best_mag, best_dir = a, plus, 1.0
        if minus < best_mag:
            best_axis, best_mag, best_dir = a, minus, -1.0
    obj.pos[best_axis] += best_dir * best_mag
    _clamp_object(obj)
    return True


def _push_from_box(obj, center, half):
    """Separate obj's AABB from a moving box (the carried cube)."""
    c, h = obj.center, obj.half_extents
    ov = (h + half) - np.abs(c - center)
    if not np.all(ov > 0):
        return False
    a = int(np.argmin(ov))
    direction = 1.0 if c[a] >= center[a] else -1.0
    obj.pos[a] += direction * ov[a]
    _clamp_object(obj)
    return True


def _support_height(cube_pos, objects, exclude):
    """Highest support top under the cube's footprint (table = 0)."""
    top = 0.0
    for o in objects.values():
        if o.oid == exclude:
            continue
        if (abs(o.pos[0] - cube_pos[0]) < o.half_extents[0] + CUBE_HALF
                and abs(o.pos[1] - cube_pos[1]) < o.half_extents[1] + CUBE_HALF
                and o.top <= cube_pos[2] + 0.02):
            top = max(top, o.top)
    return top


# ---------------------------------------------------------------------------
# success predicates

def pick_success(state: SceneState) -> bool:
    if state.attached != state.target_id or state.gripper[2] < LIFT_Z:
        return False
    return all(v <= SUCCESS_LEDGER_TOL for oid, v in state.ledger.items()
               if oid != state.target_id)


def place_success(state: SceneState) -> bool:
    cid = state.carried_id
    if cid is None or state.attached is not None:
        return False
    cube = state.objects[cid]
    target = state.objects[state.target_id]
    if np.hypot(*(cube.pos[:2] - target.pos[:2])) > PLACE_XY_TOL:
        return False
    if abs(cube.pos[2] - target.top) > 1e-9:
        return False
    return all(v <= SUCCESS_LEDGER_TOL for oid, v in state.ledger.items()
               if oid != cid)


# ---------------------------------------------------------------------------
# reward

def reward(prev: SceneState, nxt: SceneState, task: str,
           succeeded: bool = False) -> RewardBreakdown:
    manip = prev.manipulated_id(task)
    rb = RewardBreakdown(time_penalty=-TIME_PENALTY)
    rb.reach = REACH_COEF * (_task_dist(prev, task) - _task_dist(nxt, task))
    if nxt.attached == manip and prev.attached != manip:
        rb.grasp_bonus = GRASP_BONUS
    if nxt.attached == manip:
        rb.lift = LIFT_COEF * max(0.0, nxt.gripper[2] - prev.gripper[2])
    disturbed = sum(nxt.ledger[oid] - prev.ledger[oid]
                    for oid in nxt.ledger if oid != manip)
    rb.disturb_penalty = -DISTURB_COEF * disturbed
    if succeeded:
        rb.success_bonus = SUCCESS_BONUS
    return rb


def _task_dist(state: SceneState, task: str) -> float:
    if task == "pick":
        target = state.objects[state.target_id]
        return float(np.linalg.norm(state.gripper - target.center))
    cube = state.objects[state.carried_id]
    target = state.objects[state.target_id]
    goal = np.array([target.pos[0], target.pos[1], target.top + CUBE_HALF])
    return float(np.linalg.norm(cube.center - goal))


# ---------------------------------------------------------------------------
# rasterizer

def _rasterize(state: SceneState, res: int, center_xy, width: float):
    """Orthographic top-down render; returns (rgb (R,R,3), ids (R,R))."""
    rgb = np.full((res, res, 3), TABLE_GRAY, dtype=np.float64)
    ids = np.zeros((res, res), dtype=np.int32)
    half = width / 2.0
    coords = (np.arange(res) + 0.5) * (width / res)
    px = coords + (center_xy[0] - half)          # columns -> x
    py = coords + (center_xy[1] - half)          # rows -> y
    gx, gy = np.meshgrid(px, py)

    for o in sorted(state.objects.values(), key=lambda o: (o.top, o.oid)):
        if o.kind == "cube":
            m = (np.abs(gx - o.pos[0]) <= CUBE_HALF) & (np.abs(gy - o.pos[1]) <= CUBE_HALF)
        else:
            m = (gx - o.pos[0]) ** 2 + (gy - o.pos[1]) ** 2 <= PLATE_RADIUS ** 2
        rgb[m] = o.color
        ids[m] = o.oid

    # gripper sprite: two finger bars plus a crossbar, always on top
    sep = 0.028 if state.closed else 0.056
    x0, y0 = state.gripper[0], state.gripper[1]
    parts = [
        (x0 - sep / 2.0, y0, 0.006, 0.025),   # left finger
        (x0 + sep / 2.0, y0, 0.006, 0.025),   # right finger
        (x0, y0 - 0.028, sep / 2.0 + 0.006, 0.006),  # crossbar
    ]
    for cx, cy, hx, hy in parts:
        m = (np.abs(gx - cx) <= hx) & (np.abs(gy - cy) <= hy)
        rgb[m] = GRIPPER_GRAY
        ids[m] = ROBOT_ID
    return rgb, ids


def observe(state: SceneState, config: SceneConfig) -> Observation:
    res = config.resolution
    rgb_b, ids_b = _rasterize(state, res, (0.5, 0.5), 1.0)
    rgb_w, ids_w = _rasterize(state, res, (state.gripper[0], state.gripper[1]), 0.25)
    proprio = np.concatenate([
        state.gripper,
        state.last_disp,
        state.prev_action,
        [1.0 if state.attached is not None else 0.0],
    ])
    return Observation(frames={"base": Frame(rgb_b, ids_b, "base"),
                               "wrist": Frame(rgb_w, ids_w, "wrist")},
                       proprio=proprio,
                       registry=config.registry(),
                       target_id=state.target_id)


# ---------------------------------------------------------------------------
# init-state sets (successful Pick terminal states reused for Place)

class InitStateSet:
    def __init__(self, states=None):
        self.states = list(states or [])

    def __len__(self):
        return len(self.states)

    def sample(self, rng):
        return self.states[int(rng.integers(len(self.states)))]

    def save(self, path):
        with open(path, "w") as f:
            json.dump({"states": self.states}, f)

    @staticmethod
    def load(path):
        with open(path) as f:
            return InitStateSet(json.load(f)["states"])


# ---------------------------------------------------------------------------
# environment

class PickPlaceEnv:
    """One independent episode state machine. Deterministic given its seed."""

    def __init__(self, config: SceneConfig, task: str = "pick", seed: int = 0,
                 init_set: InitStateSet | None = None):
        if task not in ("pick", "place"):
            raise ValueError(f"unknown task {task!r}")
        if task == "place" and (init_set is None or len(init_set) == 0):
            raise ValueError("place episodes need a nonempty init-state set")
        self.config = config
        self.task = task
        self.init_set = init_set
        self.rng = np.random.default_rng(seed)
        self.state: SceneState | None = None

    # -- reset ---------------------------------------------------------------

    def reset(self):
        if self.task == "place":
            self.state = self._reset_place()
        else:
            self.state = self._reset_pick()
        return self.state, observe(self.state, self.config)

    def _layout_objects(self):
        kinds = self.config.object_kinds()
        colors = self.config.palette.colors
        margin = 0.08
        positions = []
        for attempt_budget in [1000]:
            for _ in range(attempt_budget):
                positions = []
                ok = True
                for _ in kinds:
                    p = self.rng.uniform(margin, 1.0 - margin, size=2)
                    if any(np.linalg.norm(p - q) < MIN_SPACING for q in positions):
                        ok = False
                        break
                    positions.append(p)
                if ok:
                    break
            else:
                raise RuntimeError("could not lay out objects without overlap "
                                   "after 1000 attempts (workspace too crowded)")
        objects = {}
        for (oid, kind, eligible), p in zip(kinds, positions):
            pos = np.array([p[0], p[1], 0.0])
            objects[oid] = ObjectState(oid, kind, pos,
                                       colors[(oid - ROBOT_ID - 1) % len(colors)],
                                       pos.copy(), eligible)
        return objects

    def _pick_targets(self, objects, exclude=None):
        if self.task == "pick":
            pool = [o.oid for o in objects.values()
                    if o.kind == "cube" and o.eligible_target]
        else:
            pool = [o.oid for o in objects.values()
                    if o.eligible_target and o.oid != exclude]
        return pool

    def _reset_pick(self):
        objects = self._layout_objects()
        if self.config.variant == "fixed_target":
            target = self.config.fixed_pick_target
            if target is None:
                target = min(o.oid for o in objects.values() if o.kind == "cube")
        else:
            pool = self._pick_targets(objects)
            target = int(self.rng.choice(pool))
        g = np.array([self.rng.uniform(0.2, 0.8), self.rng.uniform(0.2, 0.8),
                      self.rng.uniform(0.10, 0.20)])
        return SceneState(gripper=g, closed=False, attached=None,
                          attach_offset=None, objects=objects,
                          ledger={oid: 0.0 for oid in objects},
                          step_count=0, target_id=target, carried_id=None)

    def _reset_place(self):
        stored = self.init_set.sample(self.rng)
        state = SceneState.from_json(stored)
        if state.attached is None:
            raise ValueError("stored pick terminal has no attached cube")
        state.carried_id = state.attached
        if self.config.variant == "fixed_target":
            target = self.config.fixed_place_target
            if target is None:
                target = min((o.oid for o in state.objects.values()
                              if o.kind == "plate"), default=None)
                if target is None or target == state.carried_id:
                    target = min(o.oid for o in state.objects.values()
                                 if o.oid != state.carried_id)
        else:
            pool = self._pick_targets(state.objects, exclude=state.carried_id)
            target = int(self.rng.choice(pool))
        state.target_id = target
        return state

    # -- step ----------------------------------------------------------------

    def step(self, action: Action):
        state = self.state
        if state is None:
            raise RuntimeError("call reset() first")
        if state.done:
            raise RuntimeError("episode is done; reset the environment")
        prev = copy.deepcopy(state)
        before = {oid: o.pos.copy() for oid, o in state.objects.items()}

        arm = np.clip(np.asarray(action.arm, dtype=np.float64), -1.0, 1.0)
        move = STEP_DELTA * arm
        new_g = _clamp_point(state.gripper + move)
        disp = new_g - state.gripper
        if state.attached is not None:
            # keep the attached cube inside the workspace as well, preserving
            # the attach offset (cube and gripper move by the same vector)
            cube = state.objects[state.attached]
            h = cube.half_extents
            lo = np.array([WORKSPACE_XY[0] + h[0], WORKSPACE_XY[0] + h[1], 0.0])
            hi = np.array([WORKSPACE_XY[1] - h[0], WORKSPACE_XY[1] - h[1],
                           WORKSPACE_Z[1] - 2.0 * h[2]])
            disp = np.clip(cube.pos + disp, lo, hi) - cube.pos
            cube.pos += disp
        state.gripper = state.gripper + disp
        state.last_disp = disp

        grip_cmd = 1.0 if action.gripper > 0 else -1.0
        if grip_cmd > 0:
            state.closed = True
            if state.attached is None:
                self._try_attach(state)
        else:
            state.closed = False
            if state.attached is not None:
                self._release(state)

        self._resolve_pushes(state)

        for oid, o in state.objects.items():
            state.ledger[oid] += float(np.linalg.norm(o.pos - before[oid]))

        state.step_count += 1
        state.prev_action = np.array([arm[0], arm[1], arm[2], grip_cmd])

        success = pick_success(state) if self.task == "pick" else place_success(state)
        manip = state.manipulated_id(self.task)
        over = any(v > FAIL_LEDGER_TOL for oid, v in state.ledger.items()
                   if oid != manip)
        terminated = success or over or state.step_count >= self.config.episode_horizon
        state.done = terminated
        state.success = success
        rb = reward(prev, state, self.task, succeeded=success)
        return state, observe(state, self.config), rb, terminated, success

    def _try_attach(self, state):
        best, best_d = None, np.inf
        for o in state.objects.values():
            if o.kind != "cube":
                continue
            d = np.hypot(*(state.gripper[:2] - o.pos[:2]))
            if d <= GRASP_XY and state.gripper[2] <= o.top + GRASP_Z_PAD and d < best_d:
                best, best_d = o, d
        if best is not None:
            state.attached = best.oid
            state.attach_offset = best.pos - state.gripper

    def _release(self, state):
        cube = state.objects[state.attached]
        state.attached = None
        state.attach_offset = None
        cube.pos[2] = _support_height(cube.pos, state.objects, cube.oid)

    def _resolve_pushes(self, state):
        carried = state.objects.get(state.attached) if state.attached is not None else None
        for o in sorted(state.objects.values(), key=lambda o: o.oid):
            if carried is not None and o.oid == carried.oid:
                continue
            _push_from_point(o, state.gripper)
            if carried is not None:
                _push_from_box(o, carried.center, carried.half_extents)


# ---------------------------------------------------------------------------
# harvesting pick terminals for place initialization

def harvest_pick_terminals(policy_fn, config: SceneConfig, n: int = 200,
                           seed: int = 0, max_episodes: int | None = None) -> InitStateSet:
    """Run deterministic pick episodes until n successful terminal states are
    stored. ``policy_fn(obs) -> Action`` must be deterministic."""
    max_episodes = max_episodes or 50 * n
    states = []
    env = PickPlaceEnv(config, task="pick", seed=seed)
    for _ in range(max_episodes):
        _, obs = env.reset()
        while True:
            state, obs, _, terminated, success = env.step(policy_fn(obs))
            if terminated:
                if success:
                    states.append(state.to_json())
                break
        if len(states) >= n:
            return InitStateSet(states)
    raise RuntimeError(f"harvested only {len(states)}/{n} terminal states in "
                       f"{max_episodes} episodes (success rate too low)")


# ---------------------------------------------------------------------------
# tiny vector-only task for optimizer smoke tests

class PointReachEnv:
    """Proprio-only point-reach: move the gripper to a random goal. Shares
    the mixed action space; the gripper bit is ignored."""

    HORIZON = 60
    TOL = 0.04

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.pos = None
        self.goal = None
        self.steps = 0
        self.prev_action = np.zeros(4)

    def _obs(self):
        d = self.goal - self.pos
        proprio = np.concatenate([self.pos, d, self.prev_action,
                                  [np.linalg.norm(d)]])
        return Observation(frames=None, proprio=proprio)

    def reset(self):
        self.pos = self.rng.uniform(0.1, 0.9, size=3) * np.array([1, 1, 0.3])
        self.goal = self.rng.uniform(0.1, 0.9, size=3) * np.array([1, 1, 0.3])
        self.steps = 0
        self.prev_action = np.zeros(4)
        return None, self._obs()

    def step(self, action: Action):
        arm = np.clip(np.asarray(action.arm, dtype=np.float64), -1.0, 1.0)
        prev_d = np.linalg.norm(self.goal - self.pos)
        self.pos = _clamp_point(self.pos + STEP_DELTA * arm)
        self.steps += 1
        self.prev_action = np.array([arm[0], arm[1], arm[2],
                                     1.0 if action.gripper > 0 else -1.0])
        d = np.linalg.norm(self.goal - self.pos)
        success = bool(d <= self.TOL)
        rb = RewardBreakdown(reach=REACH_COEF * (prev_d - d),
                             success_bonus=SUCCESS_BONUS if success else 0.0,
                             time_penalty=-TIME_PENALTY)
        terminated = success or self.steps >= self.HORIZON
        return None, self._obs(), rb, terminated, success
