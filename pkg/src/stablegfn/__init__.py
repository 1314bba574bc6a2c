"""GFlowNet training on finite DAGs with stabilized losses and TV certificates."""

from .envs import (
    DagEnv,
    Hypergrid,
    OneMoreMode,
    RegularTree,
    enumerate_terminating,
    hypergrid_default_r0,
    hypergrid_reward,
    make_env,
    one_more_mode_tree,
    target_distribution,
    true_partition,
)
from .policy import (
    PolicyModel,
    Trajectory,
    exact_terminal_distribution,
    sample_backward,
    sample_forward,
)
from .trainer import TopKBuffer, TrainConfig, Trainer, update_threshold

__version__ = "0.1.0"
