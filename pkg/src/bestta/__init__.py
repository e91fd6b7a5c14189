"""Single-image continual test-time adaptation with a BeIN layer.

The package pairs a closed-form normalization layer that blends source anchor
statistics with single-image statistics (two learnable scalars) with style,
content, entropy and L2 losses, a numpy toy network, synthetic domain-shift
streams and a benchmark CLI.
"""
from .adapter import (
    BESTTA,
    AdaptationState,
    AdapterConfig,
    SourceCalibration,
    StepResult,
    adapt_step,
    calibrate_source,
    run_stream,
    sgd_momentum_step,
)
from .baselines import BaselineKind, BNStatsAdapt, SourceOnly, TentContinual, make_adapter
from .bench import (
    Protocol,
    ablate,
    compare,
    estimation_error,
    emit_report,
    parse_grid,
    pearson_correlation,
    run_baseline,
)
from .exceptions import *  # noqa: F401,F403
from .losses import (
    EmbeddingContext,
    LossReport,
    LossWeights,
    content_loss,
    entropy_loss,
    l2_reg,
    style_loss_direct,
    style_loss_directional,
    total_loss,
)
from .models import ModelFixture, ToyModel, forward, forward_with_bein, pretrain
from .normalization import (
    BeINCache,
    BeINLayer,
    FrozenBatchNorm,
    adain,
    bein_backward,
    bein_estimate_mu,
    bein_estimate_sigma,
    bein_forward,
    bn_forward,
    tent_forward,
)
from .runner import RunReport, SegmentResult, evaluate, execute_stream
from .simulator import (
    DomainSpec,
    LabeledSample,
    SourceSpec,
    StreamSchedule,
    apply_corruption,
    continual_schedule,
    default_domains,
    gradual_schedule,
    make_source_dataset,
)
from .tensor import channel_mean, channel_std, cosine_similarity, ema_update, global_average_pool

__version__ = "0.1.0"
