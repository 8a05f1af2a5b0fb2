"""Coordinate-wise optimal linear shrinkage (coolish) for multivariate regression."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CoolishError,
    DegenerateSample,
    EmptyCell,
    IllPosed,
    InvalidBound,
    InvalidConfig,
    NoConvergence,
    RankDeficient,
    ShapeMismatch,
    StageError,
)
from .ols import Dataset, OlsFit, fit_ols, predictive_moments  # noqa: E402
from .shrinkage import (  # noqa: E402
    ShrinkagePoint,
    SolveMode,
    ThetaSolution,
    build_point,
    empirical_risk,
    empirical_risk_gradient,
    make_point,
    ols_theta,
    oracle_constrained,
    oracle_unconstrained,
    predict,
    predict_point,
    solve_constrained,
    solve_unconstrained,
    true_loss,
)
