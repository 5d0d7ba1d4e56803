"""melkey: masked-contrastive spectrogram pretraining, frozen-feature
probing, and MIREX-style musical key evaluation on synthetic keyed audio.
"""

from .audio import Waveform, pitch_shift, read_wav, write_wav
from .contrastive import PretrainConfig, cosine_sim, make_views, ntxent_loss, pretrain
from .encoder import (Encoder, EncoderConfig, MelStats, TokenSequence, compute_mel_stats,
                      extract_features, mask_tokens, patchify)
from .errors import DataError, MelkeyError, NumericalError, UsageError
from .keys import (Key, classify_relation, evaluate, format_key, parse_key, predict_track,
                   transpose_key, weighted_score)
from .linmap import aug_linearity_report, fit_linear_map
from .mel import MelSpectrogram, mel_filterbank, mel_spectrogram
from .probe import (BB_REFERENCE, GS_REFERENCE, LINEAR_PROBE, LabeledFeature, MlpProbe,
                    ProbeArch, TrainConfig, build_probe, enumerate_probe_archs,
                    enumerate_train_configs, expand_with_shifts, grid_search, mixup_batch,
                    train_probe)
from .synth import SynthSpec, synth_clip, synth_shifted
from .tensor import Parameter, Tensor, no_grad

__version__ = "0.1.0"
