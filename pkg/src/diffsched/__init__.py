"""A desk-scale diffusion-model lab.

Forward/reverse Gaussian diffusion with a trained noise predictor, a second
network that learns how fast inference may step through noise levels, a
two-phase sampler (schedule prediction, then sampling), and estimators that
check the training objectives and evidence bounds against closed-form and
quadrature oracles.
"""

from .numerics import GaussianParams, RngState, gaussian_sample, kl_isotropic_gaussians
from .schedule import (
    InferenceSchedule,
    NoiseSchedule,
    alphas_from_betas,
    beta_upper_bound,
    linear_schedule,
    validate_inference_schedule,
)
from .neuralnet import (
    AdamState,
    MlpModel,
    ScheduleNetwork,
    adam_step,
    mlp_backward,
    mlp_forward,
    mlp_predict,
    schedule_network,
    score_network,
)
from .diffusion import (
    DiffusionStep,
    ddim_reverse_step,
    ddpm_reverse_step,
    forward_marginal_sample,
    forward_posterior,
    sample,
)
from .losses import (
    CT_EXACT_KL,
    CT_QUARTER_LOG,
    LossValue,
    l_ddpm,
    l_noise_estimation,
    l_score_simplified,
    l_step,
    reconstruction_loss,
    step_loss_constant,
)
from .data import DatasetSpec, generate
from .training import TrainConfig, sample_beta_next, train_schedule, train_score
from .scheduling import legacy_grid_search, predict_schedule, search_init
from .evaluation import (
    AnalyticScoreModel,
    BoundReport,
    TrueNoiseOracle,
    analytic_eps,
    energy_distance,
    estimate_bounds,
    gap_identity_check,
)

__version__ = "0.1.0"
