"""Structured prompt tuning: prompts generated from task embeddings by a small hypernetwork."""

from .autograd import DimensionError, NumericError, Tensor, no_grad
from .generators import (
    DirectGenerator, LinearGenerator, LowRankGenerator, MLPGenerator, PromptGenerator, PromptShape,
    TaskEmbedding, generate, make_generator, parameter_count, reduce_to_standard,
)
from .lm import FrozenSeq2SeqLM, LMConfig
from .tasks import ConfigError, MultiTaskMixer, TaskDataset, make_task
from .trainer import RunRecord, TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "DirectGenerator", "FrozenSeq2SeqLM", "LMConfig", "LinearGenerator",
    "LowRankGenerator", "MLPGenerator", "MultiTaskMixer", "NumericError", "PromptGenerator", "PromptShape",
    "RunRecord", "TaskDataset", "TaskEmbedding", "Tensor", "TrainConfig", "Trainer", "generate", "make_generator",
    "make_task", "no_grad", "parameter_count", "reduce_to_standard", "train",
]
