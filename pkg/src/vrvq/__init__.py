"""Variable-bitrate residual vector quantization of speech features.

The pipeline: a DSP front-end turns audio into feature matrices, a residual
vector quantizer cascade represents them at up to ``n_stages`` codebooks per
frame, and a per-frame importance score decides how many stages each frame
actually spends. A feature-domain denoiser can sit in front of the
quantizer. Bitstream packing, SI-SDR / BD-rate evaluation, and a command
line round out the toolkit.
"""

from .features import (
    AudioClip,
    FeatureConfig,
    FeatureSequence,
    SynthSpec,
    compute_feature_stats,
    extract_features,
    load_features,
    load_wav,
    mel_filterbank,
    mix_at_snr,
    save_wav,
    synth_feature_dataset,
)
from .rvq import (
    RvqModel,
    load_model,
    lloyd_kmeans,
    nearest_code,
    quantization_error,
    rvq_decode,
    rvq_encode,
    train_codebooks,
)
from .importance import (
    ImportanceNet,
    ScaleRange,
    i2m_hard,
    i2m_ste,
    importance_backward,
    importance_forward,
    load_importance_net,
    mask_depths,
    rate_loss,
    sample_scale,
    save_importance_net,
    soft_masks,
    surrogate_eval,
)
from .vbr import (
    RdStep,
    SweepPoint,
    TrainConfig,
    VrvqEncoding,
    cbr_encode,
    draw_batch_plan,
    masked_reconstruction,
    rd_loss_and_grad,
    rd_step,
    sweep_curves,
    train_importance,
    vrvq_encode,
    write_trace_csv,
)
from .denoiser import (
    DenoiseStep,
    DenoiseTrainConfig,
    FeatureMasker,
    denoise_forward,
    denoise_step,
    feature_guidance_loss,
    finetune_denoiser,
    learnable_sigmoid,
    learnable_sigmoid_grads,
    load_masker,
    masker_backward,
    save_masker,
    total_loss,
    two_stage_train,
)
from .bitstream import EncodedStream, StreamHeader, measure_bitrate, pack, unpack
from .evaluation import (
    BDRateReport,
    RDCurve,
    akima_interp,
    bd_rate,
    composite_simpson,
    distortion_metrics,
    export_importance_csv,
    read_rd_curve,
    si_sdr,
    write_rd_csv,
)

__version__ = "0.1.0"
