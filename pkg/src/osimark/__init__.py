"""Latent-sign diffusion watermark lab: embedding, a toy generation/inversion
channel, a one-step sign extractor, and detection/capacity statistics."""

from .chanstats import bit_accuracy, bsc_rates, log_auc, threshold_for_fpr, tpr_at_fpr
from .cipher import Scheme, WatermarkKey, decrypt_mask, encrypt_mask, keystream
from .distort import BscSpec, DistortionSpec, Kind, bsc_flip, default_suite
from .latentlab import extract_signs, inject_signs, sample_gaussian
from .osinet import OsiModel, Strategy, TrainConfig, predict, train
from .toypipe import PipelineConfig, encode, generate, invert_multistep, synth_dataset
from .wmcodec import LatentShape, majority_decode, repeat_expand, soft_decode

__version__ = "0.1.0"
