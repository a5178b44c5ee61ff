"""Multi-band ExG tokenization, bidirectional state-space encoding and reconstruction pre-training."""

from .analysis import BandPreset, SaliencyMap, band_presets, saliency
from .config import ExperimentConfig
from .datagen import SyntheticTaskSpec, TaskClass, synth_freeliving, synth_task
from .encoder import Encoder, EncoderConfig
from .heads import FinetuneConfig, FinetuneModel, macro_f1, run_finetune
from .model import Backbone, BackboneConfig, build_backbone
from .pipeline import SignalConfig, prepare_windows
from .pretrain import LossWeights, PretrainConfig, run_pretrain
from .sigproc import FilterBank, Recording, decompose, default_filter_bank, preprocess

__version__ = "0.1.0"
