"""Policy-gradient training."""
from .collect import allocate, collect_multitask, env_seeds, episode_objective
from .loop import (IterationLog, TrainConfig, TrainResult, read_log, select_best_checkpoint,
                   train, write_log)
from .stats import RunningStats, returns_to_go
from .trpo import (StepInfo, TrajectoryBatch, TrpoConfig, conjugate_gradient,
                   fisher_vector_product, mean_kl, reinforce_gradient, reinforce_step,
                   surrogate_loss, trpo_step)
