"""Personalized time-series prediction with per-patient exact GPs.

Each series gets its own Gaussian process whose mean is a shared deep
network and whose RBF kernel acts on shared deep embeddings; the joint
covariance over a cohort is block-diagonal, so training scales linearly in
the number of patients while predictions stay exact and carry calibrated
uncertainty. New patients are adapted by optimizing only their kernel
hyperparameters with the shared networks frozen.
"""
from .errors import (ConfigError, DataError, DimensionMismatch, DmegpError,
                     EmptyCohort, InstanceTooLarge, MalformedRow, NewtonDivergence,
                     NonMonotonicTime, NotPositiveDefinite, NumericError,
                     SeriesTooShort, ShapeMismatch, TraceMissing)
from .linalg import (DEFAULT_JITTER, CholeskyFactor, JitterConfig, SpdMatrix,
                     chol_solve, cholesky, log_det)
from .nn import (Architecture, Embedding, Mlp, NetworkGradients, NetworkParams,
                 RnnCell, backprop_series, embed_series, init_network, mean_series,
                 mixture_mean_series)
from .kernel import (KernelGradients, KernelParams, default_kernel_params,
                     kernel_grads, kernel_matrix, rbf_ard, rbf_matrix)
from .model import (DmeGpModel, ModelConfig, PatientSeries, SHARED_KERNEL_KEY,
                    cohort_log_marginal, megp_joint_log_marginal,
                    mtgp_joint_log_marginal, new_model, patient_grads,
                    patient_log_marginal, patient_objective)
from .optim import AdamState, adam_step
from .train import TrainConfig, TrainerState, fit, train_epoch, validation_metric
from .infer import (AdaptationConfig, PredictiveDistribution, adapt_new_patient,
                    adapt_p_gps_patient, initial_theta, predict_classification,
                    predict_regression, sequential_forecast)
from .data import (DatasetManifest, SyntheticSpec, generate_classification,
                   generate_motivating, load_csv, make_windows, motivating_split,
                   normalize, save_csv, split_by_patient)
from .metrics import auc, rmse

__version__ = "0.1.0"
