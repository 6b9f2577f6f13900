"""Covariance function estimation for discretely observed functional data.

Pairwise least-squares estimators (symmetrized ReLU network, local linear
smoother, truncated tensor-product Fourier) for the repeated-measurement
model, plus risk evaluation, PSD post-projection, and a convergence-rate
sweep harness.
"""

from .core import (
    CovarianceField,
    FunctionalDataset,
    NoiseSpec,
    SeedSpec,
    clip,
    derive_stream,
    field_difference_sup,
)
from .synth import (
    AnisotropicSmoothTruth,
    SpectralCoefficients,
    TensorSobolevTruth,
    TruthSpec,
    basis_eval,
    eval_tensor_cov,
    generate_dataset,
    make_psd_coeffs,
    rkhs_norm_sq,
    sample_paths_kl,
)
from .pairloss import PairLossValue, full_pair_loss, permutation_average_loss, split_pair_loss
from .dnn import MlpParams, TrainConfig, arch_from_theory, init_params, sym_eval, train
from .loclin import LoclinConfig, loclin_field, loclin_fit_at, select_bandwidth
from .spectral import SpectralFit, enumerate_index_set, fit_spectral, m_from_theory, spectral_field
from .postrisk import GridField, RiskValue, l2_risk, psd_project, to_grid
from .sweep import (
    DnnSpec,
    ExperimentPlan,
    LoclinSpec,
    RateReport,
    SpectralSpec,
    detect_phase_transition,
    fit_slope,
    run_plan,
)

__version__ = "0.1.0"
