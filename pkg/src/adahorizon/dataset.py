"""Demonstration generation, chunking, and on-disk storage.

A dataset directory holds `manifest.json`, `norm_stats.json`, and
`demos.jsonl` (one JSON record per demonstration). Floats serialize via
repr-shortest JSON, which round-trips 64-bit values losslessly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .actionspace import Action, ActionChunk, NormStats, compute_norm_stats
from .policy import Observation
from .sim import PerturbSpec, TaskSpec, all_tasks, run_expert_episode

DATASET_FORMAT = "dataset/1"
EXPERT_VERSION = "scripted-expert/1"
DEFAULT_DEMOS = 1200
# Execution noise during collection (labels stay clean): covers the states a
# cloned policy actually visits, which kills compounding drift at eval time.
DEFAULT_EXEC_NOISE_STD = 0.0
DEFAULT_GRIP_FLIP_PROB = 0.25
# Fraction of demos that start from a scrambled state (object and gripper
# anywhere): recovery coverage for a policy that wanders off the nominal path.
DEFAULT_SCATTER_PROB = 0.3

MANIFEST_FILE = "manifest.json"
NORM_STATS_FILE = "norm_stats.json"
DEMOS_FILE = "demos.jsonl"


@dataclass
class Demonstration:
    instruction: str
    instruction_id: int
    frames: list  # ordered (Observation, Action) pairs
    metadata: dict

    def __post_init__(self):
        if not self.frames:
            raise ValueError("frames must be non-empty")


def generate_demo(
    task: TaskSpec,
    seed: int,
    perturb: PerturbSpec = PerturbSpec(),
    exec_noise_std: float = 0.0,
    grip_flip_prob: float = 0.0,
    scatter_prob: float = 0.0,
) -> Demonstration:
    frames, success, steps = run_expert_episode(
        task,
        seed,
        perturb,
        exec_noise_std=exec_noise_std,
        grip_flip_prob=grip_flip_prob,
        scatter_prob=scatter_prob,
    )
    if not success:
        raise RuntimeError(f"scripted expert failed on task {task.instruction_id} seed {seed}")
    return Demonstration(
        instruction=task.instruction,
        instruction_id=task.instruction_id,
        frames=frames,
        metadata={
            "seed": int(seed),
            "object_class": task.object_class,
            "placement": task.placement,
            "expert_version": EXPERT_VERSION,
            "steps": int(steps),
            "exec_noise_std": float(exec_noise_std),
            "grip_flip_prob": float(grip_flip_prob),
            "scatter_prob": float(scatter_prob),
        },
    )


def generate_dataset(
    n: int = DEFAULT_DEMOS,
    tasks=None,
    seed: int = 0,
    out_dir=None,
    exec_noise_std: float = DEFAULT_EXEC_NOISE_STD,
    grip_flip_prob: float = DEFAULT_GRIP_FLIP_PROB,
    scatter_prob: float = DEFAULT_SCATTER_PROB,
):
    """n expert demos cycled uniformly over the task templates.

    Returns (demos, stats, manifest); writes the directory when out_dir is
    given. Demo seeds are drawn from a generator seeded by `seed` so they
    do not collide with small evaluation seeds. The rare noisy rollout that
    times out is retried on a fresh seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    tasks = list(tasks) if tasks is not None else all_tasks()
    rng = np.random.default_rng(seed)
    demos = []
    for i in range(n):
        for _ in range(20):
            demo_seed = int(rng.integers(2**62))
            try:
                demos.append(
                    generate_demo(
                        tasks[i % len(tasks)],
                        demo_seed,
                        exec_noise_std=exec_noise_std,
                        grip_flip_prob=grip_flip_prob,
                        scatter_prob=scatter_prob,
                    )
                )
                break
            except RuntimeError:
                continue
        else:
            raise RuntimeError(f"expert kept failing for task {tasks[i % len(tasks)].instruction_id}")
    stats = compute_norm_stats(dataset_actions(demos))
    manifest = build_manifest(demos)
    if out_dir is not None:
        save_dataset(demos, out_dir, stats)
    return demos, stats, manifest


def dataset_actions(demos) -> np.ndarray:
    return np.stack([a.as_array() for d in demos for _, a in d.frames])


def chunkify(demo: Demonstration, k: int):
    """One (Observation, ActionChunk) pair per frame; targets past the end
    repeat the final action (grip state carried along)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    actions = [a.as_array() for _, a in demo.frames]
    n = len(actions)
    pairs = []
    for t in range(n):
        rows = [actions[min(t + j, n - 1)] for j in range(k)]
        pairs.append((demo.frames[t][0], ActionChunk(np.stack(rows))))
    return pairs


def chunkify_all(demos, k: int):
    pairs = []
    for d in demos:
        pairs.extend(chunkify(d, k))
    return pairs


def build_manifest(demos) -> dict:
    per_task = {}
    for d in demos:
        key = str(d.instruction_id)
        per_task[key] = per_task.get(key, 0) + 1
    return {
        "format": DATASET_FORMAT,
        "count": len(demos),
        "per_task": per_task,
        "norm_stats": NORM_STATS_FILE,
        "demos": DEMOS_FILE,
    }


def _obs_to_dict(obs: Observation) -> dict:
    return {
        "ee_pos": obs.ee_pos.tolist(),
        "ee_euler": obs.ee_euler.tolist(),
        "grip_state": obs.grip_state,
        "object_pos": obs.object_pos.tolist(),
        "goal_pos": obs.goal_pos.tolist(),
        "instruction_id": obs.instruction_id,
    }


def _obs_from_dict(d: dict) -> Observation:
    return Observation(
        ee_pos=d["ee_pos"],
        ee_euler=d["ee_euler"],
        grip_state=d["grip_state"],
        object_pos=d["object_pos"],
        goal_pos=d["goal_pos"],
        instruction_id=d["instruction_id"],
    )


def _demo_to_record(demo: Demonstration) -> dict:
    return {
        "instruction": demo.instruction,
        "instruction_id": demo.instruction_id,
        "metadata": demo.metadata,
        "frames": [
            {"obs": _obs_to_dict(o), "action": a.as_array().tolist()} for o, a in demo.frames
        ],
    }


def _demo_from_record(rec: dict) -> Demonstration:
    frames = [
        (_obs_from_dict(f["obs"]), Action.from_array(np.asarray(f["action"])))
        for f in rec["frames"]
    ]
    return Demonstration(
        instruction=rec["instruction"],
        instruction_id=rec["instruction_id"],
        frames=frames,
        metadata=rec["metadata"],
    )


def save_dataset(demos, out_dir, stats: NormStats | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if stats is None:
        stats = compute_norm_stats(dataset_actions(demos))
    stats.save(out / NORM_STATS_FILE)
    with open(out / DEMOS_FILE, "w") as f:
        for d in demos:
            f.write(json.dumps(_demo_to_record(d)) + "\n")
    manifest = build_manifest(demos)
    with open(out / MANIFEST_FILE, "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def load_dataset(in_dir):
    """Returns (demos, stats, manifest); validates format and counts."""
    src = Path(in_dir)
    with open(src / MANIFEST_FILE) as f:
        manifest = json.load(f)
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')!r}")
    stats = NormStats.load(src / NORM_STATS_FILE)
    demos = []
    with open(src / manifest["demos"]) as f:
        for i, line in enumerate(f):
            if not line.strip():
                continue
            try:
                demos.append(_demo_from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as e:
                raise ValueError(f"corrupted record {i}: {e}") from e
    if len(demos) != manifest["count"]:
        raise ValueError(
            f"manifest inconsistent: count {manifest['count']} != {len(demos)} records"
        )
    return demos, stats, manifest
