"""Shared defaults for data generation, fitting, resampling and studies."""

# Data-generating mechanism (strong-decay AIPW study)
OUTCOME_COEFFICIENTS = (0.5, 0.4, 0.3, 0.15)  # intercept, A, W, A*W
PROPENSITY_SLOPE = 0.3                        # logit g0(w) = 0.3 * w
SIGMA_EPS = 0.5
TRUE_ATE = 0.4

# Near-boundary injection; c_R / sigma2_EIF ~= 0.30 with kappa = 1
LAMBDA_Q = 0.375
LAMBDA_G = 1.49
NEAR_BOUNDARY_MECHANISM = "residual-propensity"

# Logistic Newton solver
NEWTON_TOL = 1e-10           # max |score| at convergence
NEWTON_MAX_ITER = 50
NEWTON_MAX_HALVINGS = 30
SEPARATION_ETA = 30.0        # |linear predictor| beyond this is treated as separation

# Estimation and resampling
G_MIN = 1e-6                 # positivity guard, violations raise instead of truncating
BOOT_B = 200
BOOT_MAX_RETRIES = 20
BCA_MIN_REPLICATES = 50
LEVEL = 0.95

# Diagnostics
REGIME_THRESHOLD = 0.05
REGIME_MIN_RELATIVE_DECREASE = 0.5
MALLOWS_GRID_MAX = 4096
MC_BATCHES = 20

# Study harness
BASE_SEED = 2024
REPS = 500
CLUSTER_SIZE = 40
MAX_FAILURE_FRACTION = 0.05
LOO_MAX_UNITS = 5000
LOO_MAX_CLUSTERS = 500
REPORT_SIGNIFICANT_DIGITS = 6

CSV_COLUMNS = (
    "size",
    "icc",
    "bias",
    "mcsd",
    "cp_sand",
    "cp_jk",
    "cp_boot",
    "cp_bca",
    "cp_hc",
    "rho_hat",
    "n_failures",
)
