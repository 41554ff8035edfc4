"""Goal-oriented model-based RL toolkit: foresight goal relabeling and
universal model-based policy optimization, with a 2D-World benchmark."""

__version__ = "0.1.0"

from mapgo.gomdp import (
    EnvironmentConfig,
    Trajectory,
    Transition,
    World2D,
    goal_reward,
    make_env,
)

__all__ = [
    "EnvironmentConfig",
    "Trajectory",
    "Transition",
    "World2D",
    "goal_reward",
    "make_env",
    "__version__",
]
