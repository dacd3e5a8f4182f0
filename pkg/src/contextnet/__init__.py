"""Convolutional speech encoder with squeeze-excite context, trained as a transducer."""
from .analysis import CostReport, count_flops, count_params, receptive_field
from .encoder import BlockSpec, EncoderConfig, default_config, encode, reduced_config
from .errors import ContextNetError
from .frontend import AcousticFeatures, Waveform, load_wav, log_mel_filterbank
from .training import TrainConfig, ToyTaskSpec, train_toy
from .transducer import DecoderConfig, TransducerModel, Vocab, greedy_decode, rnnt_loss

__version__ = "0.1.0"

__all__ = [
    "AcousticFeatures", "BlockSpec", "ContextNetError", "CostReport", "DecoderConfig", "EncoderConfig",
    "ToyTaskSpec", "TrainConfig", "TransducerModel", "Vocab", "Waveform", "count_flops", "count_params",
    "default_config", "encode", "greedy_decode", "load_wav", "log_mel_filterbank", "receptive_field",
    "reduced_config", "rnnt_loss", "train_toy",
]
