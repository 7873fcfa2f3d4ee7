"""Loss-resilient token transport for neural-codec style audio streams.

The stack: a DCT toy codec stands in for a neural encoder, an RVQ turns
features into layered tokens, a neighbor-count context model prices and
predicts tokens, a range coder packs fine layers, and a packet transport
with coarse-layer FEC plus windowed concealment carries them across lossy
channels, in batch or bounded-latency streaming mode.
"""

__version__ = "0.1.0"

from .audio import (AudioSignal, CodecConfig, analyze, pad_to_frames,
                    read_audio, synthesize, write_audio)
from .context import (PMF_TOTAL, CountModel, MaskedQuery, Pmf, TrainSchedule,
                      UniformModel, beta, load_count_model, quantize_weights,
                      save_count_model, train_count_model, uniform_pmf)
from .dependency import (ConcealmentWindow, LossCase, build_coding_dependency,
                         build_conceal_mask, build_windows, classify_loss,
                         coding_visibility, propagate_invalid)
from .errors import ConfigError, DecodeError
from .experiment import (ExperimentConfig, MetricsRow, TrainedStack,
                         config_from_dict, load_config, run_experiment,
                         run_trial, summarize, train_stack)
from .grid import (GosConfig, SliceGrid, SliceId, StreamConfig, TokenGrid,
                   TokenState, TokenStateGrid, build_slice_grid,
                   default_layer_bounds, load_token_grid, periodic_slicing,
                   save_token_grid, streaming_slicing)
from .metrics import mfcc, mfcc_distance, sdr, si_snr, token_accuracy
from .pipeline import (ReceiverReport, SenderReport, receive, receive_tokens,
                       send, send_tokens)
from .rangecoder import CodedSlice, decode_symbols, encode_symbols, ideal_bits
from .rvq import (Codebook, RvqCodec, dequantize, load_codec, quantize,
                  save_codec, train_codebooks)
from .streaming import StreamReceiver, StreamSender
from .synthetic import (TokenSource, bayes_accuracy, bayes_predict,
                        conditional_entropy, identity_transition,
                        marginal_entropy, marginal_mode_accuracy,
                        random_transition, sample_tokens, stationary,
                        sticky_transition, synth_audio)
from .transport import (BernoulliChannel, MarkovChannel, Packet,
                        channel_from_spec, channel_to_spec, load_channel,
                        read_packets, read_trace, save_channel, write_packets,
                        write_trace)
