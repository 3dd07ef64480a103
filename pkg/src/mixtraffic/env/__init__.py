"""Environment layer: observations, actions, rewards and episode control."""
from .core import (UNCONTROLLED, AgentAction, EnvConfig, Objective, StepResult, action_accel,
                   bang_value, compute_reward, default_objective, env_step, reset)
from .observe import Observation, obs_dims, obs_scale, observe
from .ring_batch import RingBatch
