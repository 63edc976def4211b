"""Differentially private matrix factorization with a cache-aware training core.

Pipeline: ingest -> trim/reweight/budget -> tiered blocks -> train (SGD) or
sample (SGLD posterior) -> private release of item factors -> local per-user
recommender. See README.md for the CLI walkthrough and file formats.
"""

from . import backends
from .data import (
    BlockedDataset,
    RatingDataset,
    RatingTriple,
    TierPlan,
    UserBlock,
    ingest,
    plan_tiers,
    random_plan,
    read_blocks,
    write_blocks,
)
from .errors import (
    DataError,
    DivergenceError,
    DpmfError,
    RetryLimitError,
    SingularSystemError,
)
from .model import (
    FactorModel,
    HyperParams,
    init_model,
    load_item_factors,
    load_snapshot,
    objective,
    predict,
    predict_many,
    rmse,
    save_item_factors,
    save_snapshot,
)
from .preprocess import (
    PrivacyBudget,
    compute_budget,
    compute_weights,
    load_budget_report,
    trim,
    write_budget_report,
)
from .privacy import (
    PrivacyReport,
    ReleaseResult,
    accounting,
    check_predictions,
    exp_mechanism_oracle,
    rejection_sample,
    run_dpmf,
)
from .recommend import evaluate_local, local_fit, recommend_top_n
from .sgd import EpochStats, SgdConfig, learning_rate, sgd_step, tiered_update_order, train
from .sgld import (
    ExactNoise,
    GaussianTable,
    NoiseLedger,
    SgldConfig,
    TableNoise,
    TracePoint,
    VarianceSchedule,
    catch_up,
    gibbs_hyperparams,
    sample,
    scaled_gradient,
    sgld_step,
)

__version__ = "0.1.0"
