"""Kinematic tabletop pick-and-place environment.

World geometry is metric (meters) over a 0.5 m x 1.0 m board with the arm
base at the origin; the end effector is confined to a workspace box whose
footprint is the largest square inscribed in the 0.46 m reach disc. Provides
deterministic resets, a five-phase scripted expert, OOD/distractor
perturbations, and the closed-loop episode runner that ties a policy to an
ensembler.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .actionspace import Action, ActionChunk, GRIP_THRESHOLD
from .ensemble import Ensembler
from .kinematics import MAX_EE_SPEED_MS
from .policy import Observation

DT = 0.1  # s per control tick
EPISODE_CAP = 200
MAX_STEP_M = MAX_EE_SPEED_MS * DT  # per-tick translation clamp

WORKSPACE_LO = np.array([0.03, -0.325, 0.0])
WORKSPACE_HI = np.array([0.325, 0.325, 0.25])

TRAIN_SPAWN_LO = np.array([0.10, -0.07])
TRAIN_SPAWN_HI = np.array([0.19, 0.07])
OOD_ENV_SHIFT = np.array([0.0, 0.15, 0.0])

GRASP_RADIUS = 0.02
GOAL_RADIUS = 0.02
PLACE_OFFSET = 0.09  # goal displacement from the object spawn
OOD_TASK_OFFSET = 0.13  # unseen placement distance
OOD_TASK_HEIGHT = 0.032  # unseen object size

CLASSES = ("block", "ball", "rock")
PLACEMENTS = ("away", "left", "right")
CLASS_HEIGHT = {"block": 0.015, "ball": 0.020, "rock": 0.025}
PLACEMENT_DIR = {
    "away": np.array([1.0, 0.0, 0.0]),
    "left": np.array([0.0, 1.0, 0.0]),
    "right": np.array([0.0, -1.0, 0.0]),
}
PLACEMENT_PHRASE = {"away": "away from you", "left": "to the left", "right": "to the right"}

EE_HOME = np.array([0.16, 0.0, 0.12])
HOVER_Z = 0.10

PERTURB_MODES = ("none", "static_distractors", "dynamic_distractor", "ood_task", "ood_env")


def instruction_id(object_class: str, placement: str) -> int:
    return CLASSES.index(object_class) * 3 + PLACEMENTS.index(placement)


@dataclass(frozen=True)
class TaskSpec:
    object_class: str = "block"
    placement: str = "away"

    def __post_init__(self):
        if self.object_class not in CLASSES:
            raise ValueError(f"object_class must be one of {CLASSES}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")

    @property
    def instruction_id(self) -> int:
        return instruction_id(self.object_class, self.placement)

    @property
    def instruction(self) -> str:
        return f"pick up the {self.object_class} and place it {PLACEMENT_PHRASE[self.placement]}"


def all_tasks() -> list:
    return [TaskSpec(c, p) for c in CLASSES for p in PLACEMENTS]


def task_from_instruction_id(iid: int) -> TaskSpec:
    if not 0 <= iid < 9:
        raise ValueError("instruction_id must be in [0, 9)")
    return TaskSpec(CLASSES[iid // 3], PLACEMENTS[iid % 3])


@dataclass(frozen=True)
class PerturbSpec:
    """Evaluation-condition perturbations.

    Distractor modes corrupt the *observed* object position (a stand-in for
    a vision stack confusing nearby objects): zero-mean jitter, a pull
    toward the nearest distractor, and occasional full mis-identification.
    OOD modes shift the task geometry instead and keep observations clean.
    """

    mode: str = "none"
    distractor_count: int = 3
    motion_amplitude: float = 0.05  # dynamic path half-span, m
    motion_omega: float = 0.35  # rad per tick
    env_shift: tuple = (0.0, 0.15, 0.0)
    task_offset: float = OOD_TASK_OFFSET
    task_height: float = OOD_TASK_HEIGHT
    confusion_gain: float = 0.25
    confusion_radius: float = 0.12
    jitter_std: float = 0.004
    flicker_prob: float = 0.07  # per-tick chance of starting a confusion burst
    flicker_len: int = 6  # burst length drawn uniformly from [2, flicker_len]

    def __post_init__(self):
        if self.mode not in PERTURB_MODES:
            raise ValueError(f"mode must be one of {PERTURB_MODES}")
        if self.mode == "static_distractors" and self.distractor_count < 1:
            raise ValueError("static_distractors needs distractor_count >= 1")
        if self.mode == "dynamic_distractor" and (self.motion_amplitude <= 0 or self.motion_omega <= 0):
            raise ValueError("dynamic_distractor needs positive amplitude and omega")
        if self.mode == "ood_env" and len(self.env_shift) != 3:
            raise ValueError("env_shift must be a 3-vector")

    @property
    def has_distractors(self) -> bool:
        return self.mode in ("static_distractors", "dynamic_distractor")


@dataclass
class ObjectState:
    oid: int
    object_class: str
    pos: np.ndarray
    held: bool = False
    held_offset: np.ndarray | None = None
    rest_height: float = 0.0
    dynamic: bool = False
    path_center: np.ndarray | None = None
    path_phase: float = 0.0


@dataclass
class WorldState:
    ee_pos: np.ndarray
    ee_euler: np.ndarray
    grip: int
    objects: list
    goal_pos: np.ndarray
    goal_radius: float
    steps: int
    task: TaskSpec
    perturb: PerturbSpec
    obs_rng: np.random.Generator = field(repr=False, default=None)
    # per-tick misidentification schedule: oid of the object reported in
    # place of the target, or -1 when perception is clean that tick
    flicker_timeline: np.ndarray = field(repr=False, default=None)

    @property
    def task_object(self) -> ObjectState:
        return self.objects[0]

    def held_object(self):
        for o in self.objects:
            if o.held:
                return o
        return None


def _spawn_region(perturb: PerturbSpec):
    lo, hi = TRAIN_SPAWN_LO.copy(), TRAIN_SPAWN_HI.copy()
    if perturb.mode == "ood_env":
        shift = np.asarray(perturb.env_shift)[:2]
        lo += shift
        hi += shift
    return lo, hi


def spawn_regions_overlap(a_lo, a_hi, b_lo, b_hi) -> bool:
    return bool(np.all(np.maximum(a_lo, b_lo) < np.minimum(a_hi, b_hi)))


def _sample_distractor(rng, anchor, goal, others, workspace_margin=0.02):
    """Rejection-sample near the anchor, keeping clear of object/goal/peers."""
    pos = None
    for _ in range(100):
        r = rng.uniform(0.05, 0.11)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        cand = anchor[:2] + r * np.array([math.cos(theta), math.sin(theta)])
        cand = np.clip(cand, WORKSPACE_LO[:2] + workspace_margin, WORKSPACE_HI[:2] - workspace_margin)
        if np.linalg.norm(cand - anchor[:2]) < 0.05:
            continue
        if np.linalg.norm(cand - goal[:2]) < 0.05:
            continue
        if any(np.linalg.norm(cand - o[:2]) < 0.03 for o in others):
            continue
        pos = cand
        break
    if pos is None:
        pos = cand
    return pos


def reset(task: TaskSpec, perturb: PerturbSpec = PerturbSpec(), seed: int = 0) -> WorldState:
    """Deterministic initial WorldState for (task, perturb, seed)."""
    mode_idx = PERTURB_MODES.index(perturb.mode)
    rng = np.random.default_rng([int(seed), task.instruction_id, mode_idx])

    lo, hi = _spawn_region(perturb)
    height = perturb.task_height if perturb.mode == "ood_task" else CLASS_HEIGHT[task.object_class]
    obj_xy = rng.uniform(lo, hi)
    obj_pos = np.array([obj_xy[0], obj_xy[1], height])

    offset = perturb.task_offset if perturb.mode == "ood_task" else PLACE_OFFSET
    goal = obj_pos + offset * PLACEMENT_DIR[task.placement]

    objects = [ObjectState(oid=0, object_class=task.object_class, pos=obj_pos, rest_height=height)]
    if perturb.mode == "static_distractors":
        placed = []
        for i in range(perturb.distractor_count):
            cls = CLASSES[i % len(CLASSES)]
            xy = _sample_distractor(rng, obj_pos, goal, placed)
            placed.append(xy)
            h = CLASS_HEIGHT[cls]
            objects.append(ObjectState(oid=i + 1, object_class=cls, pos=np.array([xy[0], xy[1], h]), rest_height=h))
    elif perturb.mode == "dynamic_distractor":
        mid = (obj_pos + goal) / 2.0
        xy = _sample_distractor(rng, mid, goal, [obj_pos[:2]])
        cls = CLASSES[int(rng.integers(len(CLASSES)))]
        h = CLASS_HEIGHT[cls]
        center = np.array([xy[0], xy[1], h])
        phase = float(rng.uniform(0.0, 2.0 * math.pi))
        start = center + np.array([0.0, perturb.motion_amplitude * math.sin(phase), 0.0])
        objects.append(
            ObjectState(
                oid=1,
                object_class=cls,
                pos=start,
                rest_height=h,
                dynamic=True,
                path_center=center,
                path_phase=phase,
            )
        )

    timeline = None
    if perturb.has_distractors:
        # Mis-identification arrives in bursts: once perception latches onto
        # the wrong object it stays wrong for a few ticks, so smoothing over
        # recent predictions cannot average the error away.
        timeline = np.full(EPISODE_CAP + 8, -1, dtype=np.int64)
        distractor_ids = [o.oid for o in objects if o.oid != 0]
        t = 0
        while t < timeline.size:
            if rng.uniform() < perturb.flicker_prob:
                length = int(rng.integers(2, perturb.flicker_len + 1))
                wrong = distractor_ids[int(rng.integers(len(distractor_ids)))]
                timeline[t : t + length] = wrong
                t += length
            else:
                t += 1

    ee = EE_HOME + np.concatenate([rng.uniform(-0.01, 0.01, size=2), [0.0]])
    return WorldState(
        ee_pos=ee,
        ee_euler=np.zeros(3),
        grip=0,
        objects=objects,
        goal_pos=goal,
        goal_radius=GOAL_RADIUS,
        steps=0,
        task=task,
        perturb=perturb,
        obs_rng=np.random.default_rng([int(seed), task.instruction_id, mode_idx, 17]),
        flicker_timeline=timeline,
    )


def observe(state: WorldState) -> Observation:
    """Policy-facing observation; distractor modes corrupt the object estimate."""
    obj = state.task_object
    obs_pos = obj.pos.copy()
    p = state.perturb
    if p.has_distractors and not obj.held:
        rng = state.obs_rng
        t = min(state.steps, state.flicker_timeline.size - 1)
        wrong_oid = int(state.flicker_timeline[t])
        if wrong_oid >= 0:
            wrong = next(o for o in state.objects if o.oid == wrong_oid)
            obs_pos = wrong.pos.copy()
        else:
            distractors = [o for o in state.objects if o.oid != 0]
            nearest = min(distractors, key=lambda o: np.linalg.norm(o.pos - obj.pos))
            if float(np.linalg.norm(nearest.pos - obj.pos)) < p.confusion_radius:
                obs_pos = obs_pos + p.confusion_gain * (nearest.pos - obj.pos)
        obs_pos = obs_pos + rng.normal(0.0, p.jitter_std, size=3)
    return Observation(
        ee_pos=state.ee_pos,
        ee_euler=state.ee_euler,
        grip_state=float(state.grip),
        object_pos=obs_pos,
        goal_pos=state.goal_pos,
        instruction_id=state.task.instruction_id,
    )


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def step(state: WorldState, action: Action) -> WorldState:
    """Advance one tick: clamped ee motion, grasp/release edges, dynamic paths."""
    dpos = np.array([action.dx, action.dy, action.dz])
    n = float(np.linalg.norm(dpos))
    if n > MAX_STEP_M:
        dpos *= MAX_STEP_M / n
    state.ee_pos = np.clip(state.ee_pos + dpos, WORKSPACE_LO, WORKSPACE_HI)
    state.ee_euler = _wrap_angle(state.ee_euler + np.array([action.rx, action.ry, action.rz]))

    grip_cmd = 1 if action.grip > GRIP_THRESHOLD else 0
    if grip_cmd == 1 and state.grip == 0:
        free = [o for o in state.objects if not o.held]
        if free:
            nearest = min(free, key=lambda o: np.linalg.norm(o.pos - state.ee_pos))
            if np.linalg.norm(nearest.pos - state.ee_pos) <= GRASP_RADIUS and state.held_object() is None:
                nearest.held = True
                # parallel jaws center the object between the fingertips,
                # so the carry pose does not depend on how far off-center
                # the gripper closed
                nearest.held_offset = np.zeros(3)
                nearest.pos = state.ee_pos.copy()
    elif grip_cmd == 0 and state.grip == 1:
        for o in state.objects:
            if o.held:
                o.held = False
                o.held_offset = None
                # released objects settle straight down onto the board
                o.pos = np.array([o.pos[0], o.pos[1], o.rest_height])
    state.grip = grip_cmd

    for o in state.objects:
        if o.held:
            o.pos = state.ee_pos + o.held_offset
        elif o.dynamic:
            o.path_phase += state.perturb.motion_omega
            offset = state.perturb.motion_amplitude * math.sin(o.path_phase)
            o.pos = o.path_center + np.array([0.0, offset, 0.0])

    state.steps += 1
    return state


def is_success(state: WorldState, task: TaskSpec) -> bool:
    obj = state.task_object
    if obj.held or state.steps > EPISODE_CAP:
        return False
    return float(np.linalg.norm(obj.pos - state.goal_pos)) <= state.goal_radius


# Scripted expert: five phases, derived from state so the controller stays
# memoryless (a cloning target must be a function of the observation).
PHASES = ("approach", "descend", "close", "transport", "open", "done")
ALIGN_TOL = 0.005
GRASP_APPROACH = 0.012
EXPERT_STEP = 0.012
YAW_TARGET = {"away": 0.0, "left": 0.4, "right": -0.4}
YAW_STEP = 0.1
# commands snap to the transport grid of the real controller (1 mm / 10 mrad),
# so demonstrations draw from a small repeatable action vocabulary instead of
# a continuum of almost-unique deltas
POS_GRID = 0.001
YAW_GRID = 0.01


def expert_phase(state: WorldState) -> str:
    obj = state.task_object
    if obj.held:
        # align the carried object over the goal, not the gripper: the grasp
        # may hold the object off-center
        horiz = float(np.linalg.norm(obj.pos[:2] - state.goal_pos[:2]))
        return "transport" if horiz > ALIGN_TOL else "open"
    if float(np.linalg.norm(obj.pos - state.goal_pos)) <= state.goal_radius:
        return "done"
    if float(np.linalg.norm(state.ee_pos - obj.pos)) <= GRASP_APPROACH:
        return "close"
    # alignment funnel: tolerance widens with height so jitter near the
    # boundary cannot flip the controller back into a re-ascend
    horiz = float(np.linalg.norm(state.ee_pos[:2] - obj.pos[:2]))
    funnel = max(ALIGN_TOL, 0.5 * (state.ee_pos[2] - obj.pos[2]))
    return "approach" if horiz > funnel else "descend"


def _toward(ee: np.ndarray, target: np.ndarray) -> np.ndarray:
    d = target - ee
    n = float(np.linalg.norm(d))
    if n > EXPERT_STEP:
        d *= EXPERT_STEP / n
    return d


def scripted_expert(state: WorldState, task: TaskSpec) -> Action:
    obj = state.task_object
    phase = expert_phase(state)
    dpos = np.zeros(3)
    grip = 0.0
    if phase == "approach":
        dpos = _toward(state.ee_pos, np.array([obj.pos[0], obj.pos[1], HOVER_Z]))
    elif phase == "descend":
        dpos = _toward(state.ee_pos, obj.pos + np.array([0.0, 0.0, 0.002]))
    elif phase == "close":
        # a grasp needs an open->close edge, so a closed empty gripper
        # reopens here and retries on the next tick
        grip = 0.0 if state.grip else 1.0
    elif phase == "transport":
        # steer so the object (not the gripper) ends up over the goal
        carry = state.ee_pos[:2] + state.goal_pos[:2] - obj.pos[:2]
        dpos = _toward(state.ee_pos, np.array([carry[0], carry[1], HOVER_Z]))
        grip = 1.0
    elif phase == "open":
        grip = 0.0
    drz = float(np.clip(YAW_TARGET[task.placement] - state.ee_euler[2], -YAW_STEP, YAW_STEP))
    if phase in ("open", "done"):
        drz = 0.0
    dpos = np.round(dpos / POS_GRID) * POS_GRID
    drz = round(drz / YAW_GRID) * YAW_GRID
    return Action(dx=dpos[0], dy=dpos[1], dz=dpos[2], rx=0.0, ry=0.0, rz=drz, grip=grip)


def _scatter_start(state: WorldState, rng: np.random.Generator) -> None:
    obj = state.task_object
    for _ in range(50):
        xy = rng.uniform([0.06, -0.20], [0.28, 0.20])
        if np.linalg.norm(xy - state.goal_pos[:2]) > 2.0 * GOAL_RADIUS:
            obj.pos = np.array([xy[0], xy[1], obj.rest_height])
            break
    state.ee_pos = rng.uniform([0.05, -0.25, 0.03], [0.30, 0.25, 0.16])
    state.ee_euler[2] = float(rng.uniform(-0.5, 0.5))
    state.grip = int(rng.uniform() < 0.5)


def run_expert_episode(
    task: TaskSpec,
    seed: int,
    perturb: PerturbSpec = PerturbSpec(),
    cap: int = EPISODE_CAP,
    exec_noise_std: float = 0.0,
    grip_flip_prob: float = 0.0,
    scatter_prob: float = 0.0,
):
    """Roll the scripted expert; returns (frames, success, steps).

    exec_noise_std / grip_flip_prob perturb the *executed* action while the
    recorded label stays the expert's clean action, so the demonstrations
    cover recovery states around the nominal trajectory (the expert is
    memoryless and corrects whatever the noise did on the next tick).
    grip_flip_prob is the chance the episode contains a single gripper
    glitch, injected at one random early tick; the recovery that follows
    (reopen, regrasp, or re-pick a dropped object) lands in the data.
    scatter_prob is the chance the episode starts from a scrambled state:
    object anywhere on the table, gripper anywhere (possibly closed on
    nothing), yaw off target. The expert solves the task from there, so the
    data teach recovery from far off the nominal path, with clean labels.
    """
    state = reset(task, perturb, seed)
    noise_rng = np.random.default_rng([int(seed), task.instruction_id, 29])
    flip_at = -1
    if grip_flip_prob > 0.0 and noise_rng.uniform() < grip_flip_prob:
        flip_at = int(noise_rng.integers(0, 100))
    if scatter_prob > 0.0 and noise_rng.uniform() < scatter_prob:
        _scatter_start(state, noise_rng)
    frames = []
    while state.steps < cap:
        obs = observe(state)
        a = scripted_expert(state, task)
        frames.append((obs, a))
        executed = a
        if exec_noise_std > 0.0 or state.steps == flip_at:
            d = noise_rng.normal(0.0, exec_noise_std, size=3) if exec_noise_std > 0.0 else np.zeros(3)
            grip = 1.0 - a.grip if state.steps == flip_at else a.grip
            executed = Action(a.dx + d[0], a.dy + d[1], a.dz + d[2], a.rx, a.ry, a.rz, grip)
        step(state, executed)
        if is_success(state, task):
            break
    return frames, is_success(state, task), state.steps


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    horizons: list
    mean_mads: list
    inference_ns: list
    seed: int
    instruction_id: int
    perturb_mode: str
    ensembler: str

    @property
    def inferences(self) -> int:
        return len(self.horizons)

    def to_record(self) -> dict:
        return {
            "seed": self.seed,
            "instruction_id": self.instruction_id,
            "perturb_mode": self.perturb_mode,
            "ensembler": self.ensembler,
            "success": self.success,
            "steps": self.steps,
            "horizons": self.horizons,
            "mean_mads": self.mean_mads,
            "inference_ns": self.inference_ns,
        }


def run_episode(
    net,
    ensembler: Ensembler,
    task: TaskSpec,
    perturb: PerturbSpec = PerturbSpec(),
    seed: int = 0,
    cap: int = EPISODE_CAP,
) -> EpisodeResult:
    """Closed loop: observe -> infer -> plan -> execute the plan tick by tick."""
    from .policy import forward  # local import keeps module load cheap for workers

    state = reset(task, perturb, seed)
    ensembler.reset()
    horizons, mean_mads, timings = [], [], []
    done = False
    while state.steps < cap and not done:
        obs = observe(state)
        t0 = time.perf_counter_ns()
        chunk = forward(net, obs)
        plan = ensembler.plan(chunk)
        timings.append(time.perf_counter_ns() - t0)
        horizons.append(plan.k)
        mad = getattr(ensembler, "last_mad", None)
        mean_mads.append(float(np.mean(mad)) if mad is not None else float("nan"))
        for a in plan:
            step(state, a)
            if is_success(state, task) or state.steps >= cap:
                done = is_success(state, task)
                break
        if done:
            break
    return EpisodeResult(
        success=is_success(state, task),
        steps=state.steps,
        horizons=horizons,
        mean_mads=mean_mads,
        inference_ns=timings,
        seed=seed,
        instruction_id=task.instruction_id,
        perturb_mode=perturb.mode,
        ensembler=ensembler.name,
    )
