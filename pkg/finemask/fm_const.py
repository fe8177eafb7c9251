"""Constants for the finemask library."""

# Reserved token ids, shared by corpus and task generation
MASK_TOKEN = 0
SEP_TOKEN = 1
CLS_TOKEN = 2
NUM_RESERVED_TOKENS = 3

# Desk-scale model defaults
DEFAULT_NUM_BLOCKS = 2
DEFAULT_HIDDEN_SIZE = 32
DEFAULT_NUM_HEADS = 2
DEFAULT_VOCAB_SIZE = 64
DEFAULT_MAX_SEQ_LEN = 16
DEFAULT_DROPOUT_RATE = 0.1
LAYERNORM_EPS = 1e-12

# Optimizer defaults
DEFAULT_WEIGHT_LR = 1e-3
DEFAULT_MASK_LR = 2e-1
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_ADAM_EPS = 1e-8
DEFAULT_WARMUP_FRACTION = 0.1
DEFAULT_TOTAL_STEPS = 1000
DEFAULT_BATCH_SIZE = 32
DEFAULT_EVAL_EVERY = 100
DEFAULT_LOG_EVERY = 50

# Supermask initialization and evaluation
MASK_PARAM_MAGNITUDE = 5.0
MASK_EVAL_SAMPLES = 10
MLM_MASK_FRACTION = 0.15
PRUNE_EVERY = 10

# Probe threshold certifying a task as head-inseparable
HEAD_INSEPARABLE_MAX_ACCURACY = 0.6

# Artifact formats
CHECKPOINT_MAGIC = b"FTCK"
BUNDLE_MAGIC = b"FTMK"
FORMAT_VERSION = 1
BUNDLE_HEADER_ALLOWANCE = 4096

# Environment
ENV_SEED = "FT_SEED"
ENV_ACCEPTANCE = "FINEMASK_ACCEPTANCE"

RUN_RECORD_COLUMNS = [
    "step",
    "loss",
    "metric",
    "sparsity",
    "angular_distance",
    "l1_distance",
]

SWEEP_COLUMNS = [
    "task",
    "mode",
    "init_sparsity",
    "final_sparsity",
    "mask_lr",
    "metric_mean",
    "metric_std",
    "seeds",
    "error",
]


class InitScheme:
    """Weight initialization schemes."""

    UNIFORM = "uniform"
    NORMAL = "normal"


class HeadKind:
    """Task head kinds."""

    CLASSIFICATION = "classification"
    REGRESSION = "regression"


class MatrixRole:
    """The six block matrices analyzed per layer."""

    QUERY = "q"
    KEY = "k"
    VALUE = "v"
    DENSE = "d"
    INTERMEDIATE = "in"
    OUTPUT = "out"

    ALL = [QUERY, KEY, VALUE, DENSE, INTERMEDIATE, OUTPUT]


class FreezePreset:
    """Layer-exclusion presets for L0-close fine-tuning."""

    KEY_PROJECTIONS = "key"
    DEEPEST_BLOCKS = "deepest2"
    WORD_EMBEDDING = "embed"

    ALL = [KEY_PROJECTIONS, DEEPEST_BLOCKS, WORD_EMBEDDING]


class FinetuneMode:
    """Fine-tuning procedures exposed by the command line."""

    BASELINE = "baseline"
    L0CLOSE = "l0close"
    SUPERMASK = "supermask"
    PRUNE = "prune"
    HEAD_ONLY = "head-only"
    SHUFFLED = "shuffled"

    ALL = [BASELINE, L0CLOSE, SUPERMASK, PRUNE, HEAD_ONLY, SHUFFLED]


class StraightThrough:
    """Backward rules through the Bernoulli sampler."""

    SIGMOID = "sigmoid"
    IDENTITY = "identity"


class Metric:
    """Evaluation metrics."""

    ACCURACY = "accuracy"
    F1 = "f1"
    MATTHEWS = "matthews"

    ALL = [ACCURACY, F1, MATTHEWS]


class TaskFamily:
    """Synthetic task families."""

    PARITY = "parity"
    PATTERN = "pattern"
    PAIR_MATCH = "pair-match"

    ALL = [PARITY, PATTERN, PAIR_MATCH]


class Difficulty:
    """Synthetic task difficulty levels."""

    EASY = "easy"
    HARD = "hard"


class Analysis:
    """Analyses available from `finemask analyze`."""

    DISTANCES = "distances"
    LAYERS = "layers"
    OVERLAP = "overlap"
    MAGNITUDES = "magnitudes"
    POWERLAW = "powerlaw"
    LEARNING_CURVE = "learning-curve"
    LAYER_SPARSITY = "layer-sparsity"
    SPARSITY_CONTROL = "sparsity-control"

    ALL = [
        DISTANCES,
        LAYERS,
        OVERLAP,
        MAGNITUDES,
        POWERLAW,
        LEARNING_CURVE,
        LAYER_SPARSITY,
        SPARSITY_CONTROL,
    ]
