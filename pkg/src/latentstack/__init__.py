"""Latent-space policies for hierarchical maximum-entropy reinforcement learning."""

from .autodiff import Tensor, make_rng, split_rng
from .envs import PointMass2D, PointMaze, QuadraticBandit, TabularMDP, make_env
from .flow import FlowPolicy, GaussianPrior
from .hierarchy import (ComposedPolicy, EmbeddedEnvironment, LayerSpec, LayerStack, compose,
                        embed_layer, train_layerwise)
from .sac import Trainer, TrainerConfig, TrainingDivergence, evaluate_policy, train

__version__ = "0.1.0"
