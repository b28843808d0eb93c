"""Forward/inverse kinematics for a 6-DOF roll-pitch-pitch-roll-pitch-roll arm.

Link lengths default to a 107/130/130/15 mm split with a 78 mm gripper,
giving 382 mm base-to-wrist and 460 mm base-to-tip at the straight-up
calibration pose. Includes the servo-angle to 12-bit PWM tick mapping and a
Cartesian speed check used by the simulator's command clamp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

AXIS_PATTERN = ("roll", "pitch", "pitch", "roll", "pitch", "roll")
WRIST_REACH_MM = 382.0
TIP_REACH_MM = 460.0
REACH_TOL_MM = 1.0
MAX_EE_SPEED_MS = 0.7


def _rot(axis: str, q: float) -> np.ndarray:
    c, s = math.cos(q), math.sin(q)
    if axis == "roll":  # about z
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    if axis == "pitch":  # about y
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    raise ValueError(f"unknown axis {axis!r}")


def rotation_vector(r: np.ndarray) -> np.ndarray:
    """Log map of a rotation matrix: axis * angle, angle in [0, pi]."""
    tr = float(np.trace(r))
    cos_t = min(1.0, max(-1.0, (tr - 1.0) / 2.0))
    theta = math.acos(cos_t)
    if theta < 1e-10:
        return np.zeros(3)
    if theta > math.pi - 1e-6:
        # Near pi the off-diagonal formula degenerates; recover the axis
        # from the symmetric part instead.
        a = np.sqrt(np.maximum(0.0, (np.diag(r) + 1.0) / 2.0))
        k = int(np.argmax(a))
        axis = np.zeros(3)
        axis[k] = a[k]
        idx = [(0, 1), (0, 2), (1, 2)]
        for i, j in idx:
            if i == k:
                axis[j] = (r[i, j] + r[j, i]) / (4.0 * a[k])
            elif j == k:
                axis[i] = (r[i, j] + r[j, i]) / (4.0 * a[k])
        axis /= np.linalg.norm(axis)
        return theta * axis
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return theta * axis / (2.0 * math.sin(theta))


@dataclass(frozen=True)
class Joint:
    axis: str
    offset_mm: np.ndarray  # fixed translation to the next joint, own frame
    limits: tuple  # (lo, hi) rad

    def __post_init__(self):
        off = np.asarray(self.offset_mm, dtype=np.float64).reshape(3).copy()
        off.setflags(write=False)
        object.__setattr__(self, "offset_mm", off)
        lo, hi = float(self.limits[0]), float(self.limits[1])
        if lo >= hi:
            raise ValueError("joint limits must satisfy lo < hi")
        object.__setattr__(self, "limits", (lo, hi))


@dataclass(frozen=True)
class KinematicChain:
    joints: tuple
    gripper_offset_mm: np.ndarray

    def __post_init__(self):
        joints = tuple(self.joints)
        if tuple(j.axis for j in joints) != AXIS_PATTERN:
            raise ValueError(f"joint axes must follow {AXIS_PATTERN}")
        object.__setattr__(self, "joints", joints)
        g = np.asarray(self.gripper_offset_mm, dtype=np.float64).reshape(3).copy()
        g.setflags(write=False)
        object.__setattr__(self, "gripper_offset_mm", g)
        home = fk(self, np.zeros(6))
        wrist = float(np.linalg.norm(home.wrist_mm))
        tip = float(np.linalg.norm(home.position_mm))
        if abs(wrist - WRIST_REACH_MM) > REACH_TOL_MM:
            raise ValueError(f"calibration wrist reach {wrist:.2f} mm, expected {WRIST_REACH_MM}")
        if abs(tip - TIP_REACH_MM) > REACH_TOL_MM:
            raise ValueError(f"calibration tip reach {tip:.2f} mm, expected {TIP_REACH_MM}")

    @property
    def tip_reach_mm(self) -> float:
        return sum(float(np.linalg.norm(j.offset_mm)) for j in self.joints) + float(
            np.linalg.norm(self.gripper_offset_mm)
        )

    def clip_to_limits(self, q: np.ndarray) -> np.ndarray:
        lo = np.array([j.limits[0] for j in self.joints])
        hi = np.array([j.limits[1] for j in self.joints])
        return np.clip(q, lo, hi)

    def check_limits(self, q: np.ndarray) -> bool:
        return all(j.limits[0] <= qi <= j.limits[1] for j, qi in zip(self.joints, q))

    @classmethod
    def from_dict(cls, d: dict) -> "KinematicChain":
        joints = tuple(
            Joint(axis=j["axis"], offset_mm=j["offset_mm"], limits=tuple(j["limits_rad"]))
            for j in d["joints"]
        )
        return cls(joints=joints, gripper_offset_mm=d["gripper_offset_mm"])


def default_chain() -> KinematicChain:
    pitch_lim = (-math.pi / 2, math.pi / 2)  # unverified against hardware
    roll_lim = (-math.pi, math.pi)
    return KinematicChain(
        joints=(
            Joint("roll", [0.0, 0.0, 107.0], roll_lim),
            Joint("pitch", [0.0, 0.0, 130.0], pitch_lim),
            Joint("pitch", [0.0, 0.0, 130.0], pitch_lim),
            Joint("roll", [0.0, 0.0, 15.0], roll_lim),
            Joint("pitch", [0.0, 0.0, 0.0], pitch_lim),
            Joint("roll", [0.0, 0.0, 0.0], roll_lim),
        ),
        gripper_offset_mm=[0.0, 0.0, 78.0],
    )


@dataclass(frozen=True)
class Pose:
    position_mm: np.ndarray  # gripper tip
    rotation: np.ndarray  # 3x3, base frame
    wrist_mm: np.ndarray

    def __post_init__(self):
        for name in ("position_mm", "wrist_mm"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(3).copy()
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3).copy()
        r.setflags(write=False)
        object.__setattr__(self, "rotation", r)


def fk(chain: KinematicChain, q) -> Pose:
    """Tip pose (and wrist point) from joint angles, via chained rigid transforms."""
    q = np.asarray(q, dtype=np.float64).reshape(6)
    r = np.eye(3)
    p = np.zeros(3)
    for joint, qi in zip(chain.joints, q):
        r = r @ _rot(joint.axis, float(qi))
        p = p + r @ joint.offset_mm
    tip = p + r @ chain.gripper_offset_mm
    return Pose(position_mm=tip, rotation=r, wrist_mm=p)


@dataclass
class IKResult:
    q: np.ndarray
    converged: bool
    pos_err_mm: float
    rot_err_rad: float
    iterations: int


# Position residuals are expressed in meters and rotation-vector residuals
# weighted so 0.1 rad counts like 10 mm; the damping default then has the
# usual magnitude relative to the Jacobian.
_ROT_WEIGHT = 0.1
_MAX_STEP_RAD = 0.5
# Elbow-angle seed pairs covering the forward, folded, and mirrored bends.
_ELBOW_SEEDS = [(0.5, 0.9), (1.0, 0.4), (0.2, 1.2), (1.4, 0.1), (1.5, 1.5), (1.2, 1.5), (1.5, 0.9), (0.9, 1.5)]
_ELBOW_SEEDS += [(-a, -b) for a, b in _ELBOW_SEEDS] + [(0.9, -0.9), (-0.9, 0.9)]


def _clamp_joints(chain, q):
    """Full-circle joints wrap; bounded joints clip to their limits."""
    out = q.copy()
    for i, j in enumerate(chain.joints):
        lo, hi = j.limits
        if hi - lo >= 2.0 * math.pi - 1e-9:
            out[i] = (out[i] + math.pi) % (2.0 * math.pi) - math.pi
        else:
            out[i] = min(max(out[i], lo), hi)
    return out


def _pose_error(chain, q, target_pos, target_rot):
    pose = fk(chain, q)
    dp = (target_pos - pose.position_mm) / 1000.0
    if target_rot is None:
        return dp, float(np.linalg.norm(dp)) * 1000.0, 0.0
    drot = rotation_vector(target_rot @ pose.rotation.T)
    err = np.concatenate([dp, _ROT_WEIGHT * drot])
    return err, float(np.linalg.norm(dp)) * 1000.0, float(np.linalg.norm(drot))


def _ik_attempt(chain, target_pos, target_rot, q0, max_iters, pos_goal, rot_goal, damping, rng):
    """One Levenberg-Marquardt descent; rejected steps raise the damping,
    stalls near the solution get a random kick (wrist-singularity escape)."""
    q = _clamp_joints(chain, np.asarray(q0, dtype=np.float64).reshape(6))
    err, pos_err, rot_err = _pose_error(chain, q, target_pos, target_rot)
    best = IKResult(q.copy(), False, pos_err, rot_err, 0)
    lam = damping
    kicks = 0
    h = 1e-6
    for it in range(1, max_iters + 1):
        if pos_err <= pos_goal and rot_err <= rot_goal:
            break
        jac = np.empty((err.size, 6))
        for i in range(6):
            qp, qm = q.copy(), q.copy()
            qp[i] += h
            qm[i] -= h
            ep, _, _ = _pose_error(chain, qp, target_pos, target_rot)
            em, _, _ = _pose_error(chain, qm, target_pos, target_rot)
            jac[:, i] = (ep - em) / (2.0 * h)
        moved = False
        for _ in range(6):
            jjt = jac @ jac.T + (lam**2) * np.eye(err.size)
            dq = -np.clip(jac.T @ np.linalg.solve(jjt, err), -_MAX_STEP_RAD, _MAX_STEP_RAD)
            qn = _clamp_joints(chain, q + dq)
            en, pn, rn = _pose_error(chain, qn, target_pos, target_rot)
            if np.linalg.norm(en) < np.linalg.norm(err):
                q, err, pos_err, rot_err = qn, en, pn, rn
                lam = max(damping, lam / 3.0)
                moved = True
                break
            lam *= 10.0
        if (pos_err, rot_err) < (best.pos_err_mm, best.rot_err_rad):
            best = IKResult(q.copy(), False, pos_err, rot_err, it)
        if not moved:
            if kicks < 2 and best.pos_err_mm <= 5.0:
                kicks += 1
                q = _clamp_joints(chain, best.q + rng.normal(0.0, 0.2, size=6))
                err, pos_err, rot_err = _pose_error(chain, q, target_pos, target_rot)
                lam = damping
                continue
            break
    return best


def _seed_list(chain, target_pos, target_rot, q0, restarts, rng):
    seeds = []
    if q0 is not None:
        seeds.append(np.asarray(q0, dtype=np.float64).reshape(6))
    seeds.append(np.zeros(6))
    gripper = target_rot @ chain.gripper_offset_mm if target_rot is not None else chain.gripper_offset_mm
    wrist = target_pos - gripper
    az = math.atan2(wrist[1], wrist[0])
    for base in (az, az + math.pi):
        for e2, e3 in _ELBOW_SEEDS:
            seeds.append(np.array([base, e2, e3, 0.0, 0.3, 0.0]))
    lo = np.array([j.limits[0] for j in chain.joints])
    hi = np.array([j.limits[1] for j in chain.joints])
    for _ in range(restarts):
        seeds.append(rng.uniform(lo, hi))
    return seeds


def ik(
    chain: KinematicChain,
    target_position_mm,
    target_rotation=None,
    q0=None,
    max_iters: int = 200,
    pos_tol_mm: float = 1.0,
    rot_tol_rad: float = 0.01,
    damping: float = 0.01,
    restarts: int = 24,
    seed: int = 0,
) -> IKResult:
    """Damped-least-squares IK with a numerical Jacobian and seeded restarts.

    Raises ValueError("unreachable ...") when the target lies beyond the tip
    reach sphere. Tries q0, a family of geometry-informed seeds, then random
    restarts; each attempt polishes well past the tolerances, and the result
    is flagged converged once position error <= pos_tol_mm and (if a
    rotation was given) orientation error <= rot_tol_rad.
    """
    target_pos = np.asarray(target_position_mm, dtype=np.float64).reshape(3)
    dist = float(np.linalg.norm(target_pos))
    if dist > chain.tip_reach_mm + REACH_TOL_MM:
        raise ValueError(
            f"unreachable: target at {dist:.1f} mm exceeds {chain.tip_reach_mm:.1f} mm reach"
        )
    if target_rotation is not None:
        target_rotation = np.asarray(target_rotation, dtype=np.float64).reshape(3, 3)

    rng = np.random.default_rng(seed)
    pos_goal, rot_goal = pos_tol_mm / 5.0, rot_tol_rad / 5.0
    best = None
    for s in _seed_list(chain, target_pos, target_rotation, q0, restarts, rng):
        res = _ik_attempt(chain, target_pos, target_rotation, s, max_iters, pos_goal, rot_goal, damping, rng)
        if best is None or (res.pos_err_mm, res.rot_err_rad) < (best.pos_err_mm, best.rot_err_rad):
            best = res
        if best.pos_err_mm <= pos_tol_mm and best.rot_err_rad <= rot_tol_rad:
            best.converged = True
            return best
    return best


@dataclass(frozen=True)
class ServoCalib:
    pulse_min_us: float = 500.0
    pulse_max_us: float = 2500.0
    angle_range_rad: float = math.pi
    frame_us: float = 20000.0
    resolution: int = 4096

    def __post_init__(self):
        if not (0.0 <= self.pulse_min_us < self.pulse_max_us <= self.frame_us):
            raise ValueError("pulse range must sit inside the PWM frame")
        if self.resolution != 2**12:
            raise ValueError("driver resolution is 12-bit")


def angles_to_pwm(q, calib: ServoCalib = ServoCalib()) -> np.ndarray:
    """Servo-frame angles (clamped to [0, angle_range]) -> integer PWM ticks.

    pulse_us = pulse_min + (q / angle_range) * span; tick = round(pulse_us /
    frame * resolution). 0 -> 102, pi/2 -> 307, pi -> 512 with the default
    calibration.
    """
    q = np.clip(np.asarray(q, dtype=np.float64), 0.0, calib.angle_range_rad)
    span = calib.pulse_max_us - calib.pulse_min_us
    pulse = calib.pulse_min_us + (q / calib.angle_range_rad) * span
    ticks = np.rint(pulse / calib.frame_us * calib.resolution).astype(np.int64)
    return np.clip(ticks, 0, calib.resolution - 1)


def joint_to_servo(chain: KinematicChain, q) -> np.ndarray:
    """Map each joint's limit range linearly onto the servo's [0, angle_range]."""
    q = np.asarray(q, dtype=np.float64).reshape(6)
    out = np.empty(6)
    for i, joint in enumerate(chain.joints):
        lo, hi = joint.limits
        out[i] = (q[i] - lo) / (hi - lo) * math.pi
    return out


def joint_angles_to_pwm(chain: KinematicChain, q, calib: ServoCalib = ServoCalib()) -> np.ndarray:
    return angles_to_pwm(joint_to_servo(chain, q), calib)


def ee_speed_check(chain: KinematicChain, trajectory, dt: float) -> float:
    """Max tip speed (m/s) over consecutive waypoint pairs of a joint trajectory."""
    traj = [np.asarray(q, dtype=np.float64).reshape(6) for q in trajectory]
    if len(traj) < 2:
        raise ValueError("trajectory needs at least 2 waypoints")
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    tips = np.stack([fk(chain, q).position_mm for q in traj])
    deltas = np.linalg.norm(np.diff(tips, axis=0), axis=1)
    return float(deltas.max() / 1000.0 / dt)
