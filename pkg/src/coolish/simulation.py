"""Monte Carlo study of the shrinkage rules on synthetic multivariate data.

Each replication draws a coefficient matrix, a standard-normal training
design, compound-symmetric noise and fresh standard-normal test points, then
scores OLS, both feasible shrinkage rules and both oracles with the true
squared-error loss. Replication ``i`` of a scenario always uses the Philox
stream keyed by ``(seed, i)``, so results do not depend on scheduling.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import IllPosed, InvalidConfig, NoConvergence
from .ols import Dataset, fit_ols
from .shrinkage import (
    DEFAULT_M,
    build_point,
    ols_theta,
    oracle_constrained,
    oracle_unconstrained,
    solve_constrained,
    solve_unconstrained,
    true_loss,
)

METHODS = (
    "ols",
    "coolish-unconstrained",
    "coolish-constrained",
    "oracle-unconstrained",
    "oracle-constrained",
)

GROUP_SPARSE_ROWS = 5
ENTRY_SPARSE_FRACTION = 0.6


class Structure(str, enum.Enum):
    DENSE = "dense"
    GROUP_SPARSE = "group"
    ENTRY_SPARSE = "entry"


@dataclass(frozen=True)
class ScenarioConfig:
    n_train: int = 100
    n_test: int = 50
    p: int = 10
    q: int = 1000
    rho: float = 0.0
    structure: Structure = Structure.DENSE
    n_replications: int = 100
    M: float = DEFAULT_M
    seed: int = 0
    noise_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "structure", Structure(self.structure))
        self.validate()

    def validate(self):
        if self.p < 1:
            raise InvalidConfig(f"p must be >= 1, got {self.p}")
        if self.n_train <= self.p:
            raise InvalidConfig(f"n_train must exceed p (n_train={self.n_train}, p={self.p})")
        if self.q <= self.p + 1:
            raise InvalidConfig(f"q must exceed p + 1 (q={self.q}, p={self.p})")
        if not 0.0 <= self.rho < 1.0:
            raise InvalidConfig(f"rho must lie in [0, 1), got {self.rho}")
        if self.n_test < 1 or self.n_replications < 1:
            raise InvalidConfig("n_test and n_replications must be positive")
        if not self.M > 0:
            raise InvalidConfig(f"M must be positive, got {self.M}")
        if self.structure is Structure.GROUP_SPARSE and self.p < GROUP_SPARSE_ROWS:
            raise InvalidConfig(f"group-sparse structure needs p >= {GROUP_SPARSE_ROWS}")
        if self.noise_scale < 0:
            raise InvalidConfig("noise_scale must be non-negative")

    @property
    def scenario_id(self) -> str:
        return (
            f"{self.structure.value}_n{self.n_train}_p{self.p}_q{self.q}"
            f"_rho{self.rho:g}_M{self.M:g}_seed{self.seed}"
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["structure"] = self.structure.value
        return d


@dataclass(frozen=True)
class ScenarioReport:
    config: ScenarioConfig
    per_method_losses: dict = field(default_factory=dict)

    @property
    def per_method_mean_loss(self) -> dict:
        return {m: float(np.mean(v)) for m, v in self.per_method_losses.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["scenario", "method", "replication", "loss"])
        sid = self.config.scenario_id
        for method, losses in self.per_method_losses.items():
            for i, loss in enumerate(losses):
                writer.writerow([sid, method, i, repr(float(loss))])
        return buf.getvalue()


def replication_rng(seed: int, index: int) -> np.random.Generator:
    """Independent Philox stream for replication ``index`` of ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def gen_coefficients(structure, p: int, q: int, rng: np.random.Generator) -> np.ndarray:
    """Coefficient matrix whose columns scatter tightly around a shared vector.

    Column ``k`` is ``b + tau_k`` with ``b ~ N(0, 4 I)`` and
    ``tau_k ~ N(0, 0.01 I)``. Group-sparse keeps only the first five rows;
    entry-sparse zeroes each entry independently with probability 0.6.
    """
    structure = Structure(structure)
    if structure is Structure.GROUP_SPARSE and p < GROUP_SPARSE_ROWS:
        raise InvalidConfig(f"group-sparse structure needs p >= {GROUP_SPARSE_ROWS}, got {p}")
    b = rng.normal(0.0, 2.0, size=p)
    B = b[:, None] + rng.normal(0.0, 0.1, size=(p, q))
    if structure is Structure.GROUP_SPARSE:
        B[GROUP_SPARSE_ROWS:, :] = 0.0
    elif structure is Structure.ENTRY_SPARSE:
        B[rng.random((p, q)) < ENTRY_SPARSE_FRACTION] = 0.0
    return B


def sample_noise(n: int, q: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Rows iid ``N(0, (1 - rho) I + rho 11^T)`` via a shared scalar factor."""
    if not 0.0 <= rho < 1.0:
        raise InvalidConfig(f"rho must lie in [0, 1), got {rho}")
    shared = rng.standard_normal((n, 1))
    own = rng.standard_normal((n, q))
    return math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * own


def _min_norm_stationary(pt, rhs):
    return np.linalg.lstsq(pt.gram, rhs, rcond=None)[0]


def _unconstrained_thetas(pt, B):
    """Feasible and oracle unconstrained weights.

    When ``X~^T X~`` is too ill-conditioned for the strict solver (some
    ``|x0[j]|`` is tiny) the minimum-norm stationary point is scored instead.
    """
    try:
        return solve_unconstrained(pt).theta, oracle_unconstrained(pt, B).theta
    except IllPosed:
        target = B.T @ pt.x0
        return (
            _min_norm_stationary(pt, pt.xty - pt.q * pt.q_vec),
            _min_norm_stationary(pt, pt.cross_with(target)),
        )


def _constrained_theta(solver, *args):
    try:
        return solver(*args).theta
    except NoConvergence as exc:
        return exc.solution.theta


def run_replication(cfg: ScenarioConfig, rng: np.random.Generator) -> dict:
    """Per-method loss averaged over ``cfg.n_test`` fresh test points."""
    B = gen_coefficients(cfg.structure, cfg.p, cfg.q, rng)
    X = rng.standard_normal((cfg.n_train, cfg.p))
    E = sample_noise(cfg.n_train, cfg.q, cfg.rho, rng)
    fit = fit_ols(Dataset(X, X @ B + cfg.noise_scale * E))
    X_test = rng.standard_normal((cfg.n_test, cfg.p))

    totals = dict.fromkeys(METHODS, 0.0)
    theta_ols = ols_theta(cfg.p)
    for x0 in X_test:
        pt = build_point(fit, x0)
        totals["ols"] += true_loss(pt, B, theta_ols)
        totals["coolish-constrained"] += true_loss(
            pt, B, _constrained_theta(solve_constrained, pt, cfg.M)
        )
        totals["oracle-constrained"] += true_loss(
            pt, B, _constrained_theta(oracle_constrained, pt, B, cfg.M)
        )
        theta_u, theta_star = _unconstrained_thetas(pt, B)
        totals["coolish-unconstrained"] += true_loss(pt, B, theta_u)
        totals["oracle-unconstrained"] += true_loss(pt, B, theta_star)
    return {m: v / cfg.n_test for m, v in totals.items()}


def run_scenario(cfg: ScenarioConfig, threads: int = 1) -> ScenarioReport:
    def one(i):
        return run_replication(cfg, replication_rng(cfg.seed, i))

    indices = range(cfg.n_replications)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, indices))
    else:
        results = [one(i) for i in indices]

    losses = {m: np.array([r[m] for r in results]) for m in METHODS}
    return ScenarioReport(config=cfg, per_method_losses=losses)
