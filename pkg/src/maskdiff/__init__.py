"""Masked diffusion language modelling at desk scale."""

from .masking import FrequencyTable, build_frequency_table, conditional_scaling, curriculum_power
from .model import ModelConfig, TimeConditionedEncoder
from .schedules import BimodalGaussian, Constant, Cosine, Linear, SimpleGaussian, make_schedule
from .tokenizer import Vocab, train_bpe

__all__ = [
    "BimodalGaussian", "Constant", "Cosine", "Linear", "SimpleGaussian", "make_schedule",
    "FrequencyTable", "build_frequency_table", "conditional_scaling", "curriculum_power",
    "ModelConfig", "TimeConditionedEncoder", "Vocab", "train_bpe",
]
__version__ = "0.1.0"
