"""This module contains application-wide used parameters and string
messages.
"""

import types

FAILURE_EXIT_CODE = 1

RADIO = types.SimpleNamespace()
RADIO.BANDWIDTH_HZ = 1e6
RADIO.CARRIER_HZ = 2.4e9
RADIO.TX_POWER_DBM = 20.0
RADIO.NOISE_PSD_DBM_PER_HZ = -174.0
RADIO.PATHLOSS_EXPONENT = 2.2
RADIO.REF_LOSS_DB = 40.0
RADIO.REF_DISTANCE_M = 1.0
RADIO.R_MAX_M = 200.0

LEARNING = types.SimpleNamespace()
LEARNING.N_CLASSES = 10
LEARNING.INPUT_DIM = 784
LEARNING.REG = 0.01
LEARNING.MINIMIZER_TOL = 1e-8
LEARNING.MINIMIZER_MAX_ITER = 200_000
LEARNING.POWER_ITER_TOL = 1e-13
LEARNING.POWER_ITER_MAX_ITER = 20_000
LEARNING.GMAX_FLOOR = 1e-12

EXPERIMENT = types.SimpleNamespace()
EXPERIMENT.N_DEVICES = 10
EXPERIMENT.SAMPLES_PER_CLASS = 10
EXPERIMENT.TEST_SIZE = 1000
EXPERIMENT.BUDGET_MS = 4000.0
EXPERIMENT.REPLICATES = 50
EXPERIMENT.GRID_REPLICATES = 5
EXPERIMENT.LOG_EVERY = 5
EXPERIMENT.GMAX_SAFETY = 1.5
EXPERIMENT.R_IN_FRACTION = 0.6
EXPERIMENT.MIX_PROBABILITY = 0.5
EXPERIMENT.GRID_POINTS = 10
EXPERIMENT.GRID_LOW = 1e-3
EXPERIMENT.GRID_HIGH = 1.0
EXPERIMENT.DIVERGENCE_FACTOR = 1e3
EXPERIMENT.SEED = 0

# Named random sub-streams; the integer is the spawn key of the stream.
STREAMS = types.SimpleNamespace()
STREAMS.DEPLOYMENT = 0
STREAMS.DATA = 1
STREAMS.FADING = 2
STREAMS.NOISE = 3
STREAMS.POLICY = 4
STREAMS.SOLVER = 5

OUTPUT_FILE_NAMES = types.SimpleNamespace()
OUTPUT_FILE_NAMES.LOSS = "loss.csv"
OUTPUT_FILE_NAMES.ACCURACY = "accuracy.csv"
OUTPUT_FILE_NAMES.PARTICIPATION = "participation.csv"
OUTPUT_FILE_NAMES.BOUND = "bound.csv"
OUTPUT_FILE_NAMES.SUMMARY = "summary.json"
OUTPUT_FILE_NAMES.DEPLOYMENT = "deployment.json"
OUTPUT_FILE_NAMES.DESIGN = "design.json"

MESSAGES = types.SimpleNamespace()
MESSAGES.DIMENSION_MISMATCH = (
    "Parameter length {} does not match {} classes x {} inputs."
)
MESSAGES.EMPTY_DATASET = "Dataset of device {} is empty."
MESSAGES.ROW_MISMATCH = "Device {} has {} feature rows but {} labels."
MESSAGES.NEGATIVE_LABEL = "Device {} holds a negative label {}."
MESSAGES.LABEL_RANGE = "Device {} holds label {}, outside the {} classes."
MESSAGES.NO_DEVICES = "At least one device dataset is required."
MESSAGES.BAD_WEIGHTS = "Participation weights must be non-negative and sum to 1."
MESSAGES.MISSING_CLASS = "Example pool contains no example of class {}."
MESSAGES.DEVICE_CLASS_MISMATCH = "One-class partition needs {} devices, got {}."
MESSAGES.NOT_CONVERGED = (
    "Minimizer stopped after {} iterations at gradient norm {:.3e}."
)
MESSAGES.POWER_ITERATION = "Power iteration did not converge in {} iterations."
MESSAGES.EMPTY_TRAJECTORY = "Gradient warmup trajectory is empty."
MESSAGES.EMPTY_TEST_SET = "Test set is empty."
MESSAGES.ZERO_REFERENCE_ACCURACY = "Reference accuracy is zero."
MESSAGES.BAD_IDX_MAGIC = "Magic number mismatch in IDX file {} ({:#010x})."
MESSAGES.NON_POSITIVE = "{} must be strictly positive, got {}."
MESSAGES.DEPLOYMENT_SHAPE = "Deployment has {} positions for {} path losses."
MESSAGES.DEPLOYMENT_RADIUS = "Device {} at {} m lies outside (0, {}] m."
MESSAGES.GMAX_VIOLATION = (
    "Gradient norm {:.6e} of device {} exceeds G_max {:.6e}; "
    "increase the G_max safety factor."
)
MESSAGES.ZERO_ALPHA = "Post-scaler is zero: no device ever participates."
MESSAGES.LAMBERT_DOMAIN = "Lambert W0 is undefined below -1/e, got {}."
MESSAGES.ZERO_BIAS_INFEASIBLE = "Zero-bias target unreachable for device {}."
MESSAGES.EMPTY_INTERIOR = "No device lies within the interior radius {} m."
MESSAGES.ZERO_CHANNEL = "Round skipped: a scheduled device has a zero channel."
MESSAGES.STEPSIZE_RANGE = "Stepsize {} outside the admissible range [0, {}]."
MESSAGES.BUDGET_TOO_SHORT = "Budget of {} ms is shorter than one round ({} ms)."
MESSAGES.ALL_DIVERGED = "Every stepsize in the grid diverged: {}."
MESSAGES.EMPTY_GRID = "Stepsize grid is empty."
MESSAGES.INCONSISTENT_DEPLOYMENT = "Policies must share one deployment."
MESSAGES.BAD_CONFIG_KEY = "Unknown configuration key {!r}."
MESSAGES.BAD_CONFIG_VALUE = "Invalid configuration value for {}: {!r}."
MESSAGES.BAD_CONFIG_FILE = "Configuration file must be .json or .toml: {}."
MESSAGES.UNKNOWN_POLICY = "Unknown policy {!r}."
MESSAGES.PRESCALER_SHAPE = "Got {} pre-scalers for {} path losses."
MESSAGES.BAD_CONSTANTS = (
    "Bound constants need 0 < mu~ <= L~ and kappa >= 0 (got {}, {}, {})."
)
MESSAGES.NOT_PRESCALED = "Policy {!r} has no fixed pre-scalers."
MESSAGES.DESIGN_MISMATCH = "Design of {!r} does not match the deployment or model."
MESSAGES.DIVERGED = "Policy {!r} diverged with stepsize {} at round {}."
