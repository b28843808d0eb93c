"""Action-chunk execution runtime: a dual-head policy, an adaptive-horizon
ensembler with smoothing/fusion baselines, a kinematic pick-and-place
simulator with a scripted expert, 6-DOF arm kinematics, and a benchmark CLI.
"""

from .actionspace import (
    ACTION_DIM,
    DEFAULT_CHUNK_LEN,
    NUM_BINS,
    Action,
    ActionChunk,
    NormStats,
    TokenChunk,
    compute_norm_stats,
    denormalize,
    dequantize,
    dequantize_normalized,
    normalize,
    quantize,
)
from .ensemble import (
    ENSEMBLER_NAMES,
    AdaHorizonEnsembler,
    AdaHorizonParams,
    DualChunk,
    EnsemblerState,
    adahorizon_step,
    mad_per_step,
    make_ensembler,
)
from .policy import (
    Observation,
    PolicyNet,
    TrainConfig,
    forward,
    grad,
    init_net,
    load_checkpoint,
    loss,
    save_checkpoint,
    train,
)
from .kinematics import (
    KinematicChain,
    ServoCalib,
    angles_to_pwm,
    default_chain,
    ee_speed_check,
    fk,
    ik,
)
from .sim import (
    EpisodeResult,
    PerturbSpec,
    TaskSpec,
    all_tasks,
    is_success,
    observe,
    reset,
    run_episode,
    scripted_expert,
    step,
)
from .dataset import Demonstration, chunkify, generate_dataset, load_dataset, save_dataset

__version__ = "0.1.0"
