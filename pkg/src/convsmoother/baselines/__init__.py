"""Classical smoothers used as comparison baselines."""

from .filters import ButterworthDesign, butterworth_bandpass_twopass, design_butterworth_bandpass, filter_twopass
from .gp import gp_lml_and_grad, gp_log_marginal_likelihood, gp_optimize_hyperparams, gp_posterior_mean
from .kalman import (
    LinearGaussianModel,
    NonlinearModel,
    SigmaParams,
    SmootherOutput,
    extended_kalman_smoother,
    kalman_rts_smoother,
    oscillator_model,
    sigma_points,
    unscented_kalman_smoother,
    unscented_transform,
    validate_jacobians,
)
