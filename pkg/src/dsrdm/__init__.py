"""Digital bit transmission through the forward noise of a diffusion model.

Bits are QAM-modulated, standardized into Gaussian-like blocks, embedded in
a carrier's forward diffusion in place of the noise, sent over a fading
channel and read back with a noise predictor.
"""
from .carrier import Carrier, LatentCodec, build_codec, encode_latent, load_ppm, save_ppm, synth_carrier
from .channel import (
    ChannelState,
    TransmitFrame,
    draw_channel,
    effective_noise,
    pack_complex,
    snr_to_sigma,
    transmit,
    unpack_complex,
    zf_equalize,
)
from .denoiser import (
    MLPPredictor,
    OraclePredictor,
    TrainConfig,
    load_checkpoint,
    oracle_predictor,
    save_checkpoint,
    train_mlp,
)
from .modem import (
    SignalBlock,
    analytic_qam_ber,
    demodulate,
    modulate,
    signal_to_symbols,
    symbols_to_signal,
)
from .pipeline import LinkConfig, RecoveryReport, embed_multi, embed_single, end_to_end, recover_multi, recover_single
from .schedule import (
    MatchInfeasible,
    MatchedSchedule,
    NoiseSchedule,
    forward_sample,
    linear_schedule,
    match_to_channel,
    verify_matching,
)

__version__ = "0.1.0"
