"""Duration and F0 prediction."""
from .bins import (BinError, BinSpec, SpeakerStats, decode_f0, decode_normalized, denormalize_f0,
                   encode_f0_targets, f0_mae_voiced, fit_speaker_stats, gaussian_row, make_bins,
                   normalize_f0)
from .duration import (CNNDurationModel, DurationCNN, DurationError, NgramDurationModel,
                       duration_metrics, round_durations, train_duration_cnn, train_duration_ngram)
from .f0 import F0Example, F0Model, F0Net, encode_example, train_f0

__all__ = [
    "BinError", "BinSpec", "SpeakerStats", "decode_f0", "decode_normalized", "denormalize_f0",
    "encode_f0_targets", "f0_mae_voiced", "fit_speaker_stats", "gaussian_row", "make_bins",
    "normalize_f0",
    "CNNDurationModel", "DurationCNN", "DurationError", "NgramDurationModel", "duration_metrics",
    "round_durations", "train_duration_cnn", "train_duration_ngram",
    "F0Example", "F0Model", "F0Net", "encode_example", "train_f0",
]
