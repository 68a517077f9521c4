"""Multi-view point cloud registration by co-evolving six search tasks
(three coarse aiding tasks, three consensus-plus-loop original tasks)
with probabilistic intra-pair and inter-task knowledge sharing."""

from .geometry import (GimbalLockError, combine_for_task, compose, euler_to_rotation,
                       invert, loop_residual, pose_to_transform, rotation_error,
                       transform_to_pose, translation_error)
from .pointcloud import (EmptyCloudError, NNResult, NonFiniteCoordinateError,
                         PlyParseError, PointCloud, adaptive_threshold,
                         apply_transform, decentralize, load_ply, mean_nn_distance,
                         nearest, save_ply, subsample)
from .fitness import FitnessContext, aiding_fitness, consensus_loss, original_fitness
from .multitask import (MTConfig, RegistrationProblem, RunReport, SearchSpace,
                        build_search_space, prepare_problem, run)
from .bench import (Metrics, OverlapError, SyntheticProblem, add_noise, evaluate,
                    generate, load_problem, make_base_cloud, save_problem)

__version__ = "0.1.0"

__all__ = [
    "GimbalLockError", "combine_for_task", "compose", "euler_to_rotation",
    "invert", "loop_residual", "pose_to_transform", "rotation_error",
    "transform_to_pose", "translation_error",
    "EmptyCloudError", "NNResult", "NonFiniteCoordinateError", "PlyParseError",
    "PointCloud", "adaptive_threshold", "apply_transform", "decentralize",
    "load_ply", "mean_nn_distance", "nearest", "save_ply", "subsample",
    "FitnessContext", "aiding_fitness", "consensus_loss", "original_fitness",
    "MTConfig", "RegistrationProblem", "RunReport", "SearchSpace",
    "build_search_space", "prepare_problem", "run",
    "Metrics", "OverlapError", "SyntheticProblem", "add_noise", "evaluate",
    "generate", "load_problem", "make_base_cloud", "save_problem",
    "__version__",
]
