"""PCA-regularized conditional adversarial posterior samplers on Gaussian
linear inverse problems with analytically known posteriors."""

__version__ = "0.1.0"

from .errors import (
    ChecksumMismatchError,
    DataFormatError,
    InvalidArgumentError,
    NumericalFailureError,
    PcaGanError,
    PriorMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .gaussian_world import (
    ConditionalOracle,
    GaussianDist,
    GaussianPrior,
    MeasurementModel,
    analytic_posterior,
    even_masked_model,
    make_prior_chain,
    sample_pair,
    sample_pairs,
    w2_gaussian,
)
from .netcore import (
    AdamState,
    AffineGenerator,
    LinearDiscriminator,
    ParamLayout,
    ParamVector,
    adam_step,
    disc_forward,
    gen_forward,
    grad_of,
)
from .regularizers import (
    PcaEstimate,
    SdController,
    SdStats,
    adv_loss_disc,
    adv_loss_gen,
    eval_loss,
    evec_loss,
    l1_reg,
    pca_extract,
    sd_reward,
    update_beta_sd,
)
from .datakit import DatasetHandle, generate_dataset, load_dataset, save_dataset
from .trainer import RunRecord, TrainConfig, train
from .evaluation import (
    EvalReport,
    ExactPosteriorSampler,
    PriorSampler,
    cfid_raw,
    empirical_stats,
    eval_w2,
    evaluate_model,
    rem_k,
    rmse,
)

__all__ = [name for name in dir() if not name.startswith("_")]
