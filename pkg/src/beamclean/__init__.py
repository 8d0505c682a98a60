"""Toolkit for additive-noise embedding obfuscation and its inversion attacks.

Defender side: Gaussian/Laplace mechanisms with DP calibration. Attacker
side: the nearest-neighbor baseline and prior-guided causal beam decoding
with adaptive noise-parameter estimation. A FastAPI service and a thin CLI
wrap the same core.
"""

from .decoder import AttackResult, BeamHypothesis, DecodeConfig, candidate_pool, decode, expand_beam
from .errors import (
    BeamcleanError,
    DataFormatError,
    DecodeAborted,
    ParameterError,
    PriorProtocolError,
)
from .formats import (
    CorpusEntry,
    load_corpus,
    load_obfuscated,
    load_table,
    save_corpus,
    save_obfuscated,
    save_table,
)
from .harness import SweepConfig, SweepOutcome, run_sweep
from .mechanisms import (
    NoiseMechanismSpec,
    calibrate_scale,
    derive_subseed,
    epsilon_from_scale,
    obfuscate_sequence,
    scale_from_epsilon,
)
from .metrics import PiiAnnotation, asr, pii_recovery
from .priors import (
    MappedPrior,
    NgramPrior,
    PriorModel,
    TokenMap,
    UniformPrior,
    build_token_map,
    load_prior,
    save_prior,
    train_ngram,
    translate_context,
    uniform_logprobs,
)
from .surrogate import (
    AdaptiveEstimator,
    SufficientStats,
    SurrogateParams,
    estimate_step,
    init_params,
    marginal_grad,
    step_marginal_loglik,
    surrogate_loglik,
)
from .tables import (
    EmbeddingTable,
    ObfuscatedSequence,
    TokenSequence,
    embed_sequence,
    generate_synthetic_table,
    nn_decode,
    table_sensitivity,
)

__version__ = "0.1.0"
