from enum import IntEnum

A_STAR_DEFAULT = 1
CONTROL_LABEL = 0

PAD_TOKEN = 1

# Strong positivity ceiling for inverse propensities
CLIP_DEFAULT = 100.0

# Monte Carlo draws from Pi per observation
MC_U_TRAIN = 8
MC_U_REPORT = 128

# Desk-scale ceiling for exact enumeration of token sequences
MAX_ENUMERATION = 10**6

# MCP responses with more rows than this are TOON-encoded
TOON_AUTO_THRESHOLD_ITEMS = 10

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3


class Stream(IntEnum):
    """Per-purpose RNG stream ids; one seed drives all of them."""

    DATA = 0
    COUNTERFACTUAL = 1
    FOLDS = 2
    TRAINING = 4
    SAMPLING = 5
    EVALUATION = 6
    INIT = 7
