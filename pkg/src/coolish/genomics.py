"""Gene-panel imputation on single-cell expression matrices.

Workflow: keep genes detected in enough cells of both datasets, scale every
cell to one million counts, apply ``log10(x + 1.01)``, pick a K-gene probe
panel by clustering genes, then predict all remaining genes of the test
cells from their panel genes with OLS or the shrinkage rules.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import CoolishError, EmptyCell, ShapeMismatch, StageError
from .ols import Dataset, fit_ols
from .shrinkage import DEFAULT_M, predict

LOG_OFFSET = 1.01
CPM_TOTAL = 1e6
PAPER_PANEL_SIZES = (14, 18, 30, 35, 51, 65, 91, 105, 140, 157, 198, 228, 285)


class Stage(enum.Enum):
    RAW_COUNTS = "raw"
    CPM = "cpm"
    LOG_TRANSFORMED = "log"


class MalformedInput(CoolishError, ValueError):
    pass


@dataclass(frozen=True)
class ExpressionMatrix:
    """Cells x genes matrix with gene identifiers and a processing stage."""

    values: np.ndarray
    gene_ids: tuple
    stage: Stage = Stage.RAW_COUNTS

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        gene_ids = tuple(str(g) for g in self.gene_ids)
        if values.shape[1] != len(gene_ids):
            raise ShapeMismatch(
                f"{values.shape[1]} expression columns but {len(gene_ids)} gene ids"
            )
        if len(set(gene_ids)) != len(gene_ids):
            dupes = sorted({g for g in gene_ids if gene_ids.count(g) > 1})
            raise MalformedInput(f"duplicate gene ids: {', '.join(dupes[:5])}")
        stage = Stage(self.stage)
        if stage is not Stage.LOG_TRANSFORMED and np.any(values < 0):
            raise MalformedInput(f"{stage.value} expression values must be non-negative")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "gene_ids", gene_ids)
        object.__setattr__(self, "stage", stage)

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def n_genes(self) -> int:
        return self.values.shape[1]

    def select_genes(self, gene_ids) -> "ExpressionMatrix":
        index = {g: j for j, g in enumerate(self.gene_ids)}
        missing = [g for g in gene_ids if g not in index]
        if missing:
            raise MalformedInput(f"gene ids not present: {', '.join(missing[:5])}")
        cols = [index[g] for g in gene_ids]
        return ExpressionMatrix(self.values[:, cols], tuple(gene_ids), self.stage)


def _require_stage(m: ExpressionMatrix, stage: Stage, op: str):
    if m.stage is not stage:
        raise StageError(f"{op} needs {stage.value} input, got {m.stage.value}")


def read_expression_csv(path) -> ExpressionMatrix:
    """Read a cells x genes CSV (header row = gene ids); ``.gz`` is accepted."""
    try:
        # header=None keeps repeated gene ids intact for validation
        frame = pd.read_csv(path, header=None, dtype=str, compression="infer")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise MalformedInput(f"{path}: cannot parse CSV ({exc})") from exc
    gene_ids = [str(g).strip() for g in frame.iloc[0]]
    try:
        values = frame.iloc[1:].astype(np.float64).to_numpy()
    except ValueError as exc:
        raise MalformedInput(f"{path}: non-numeric expression value ({exc})") from exc
    if not np.all(np.isfinite(values)):
        raise MalformedInput(f"{path}: missing or non-finite expression values")
    try:
        return ExpressionMatrix(values, tuple(gene_ids), Stage.RAW_COUNTS)
    except CoolishError as exc:
        raise MalformedInput(f"{path}: {exc}") from exc


def write_expression_csv(m: ExpressionMatrix, path):
    frame = pd.DataFrame(m.values, columns=list(m.gene_ids))
    frame.to_csv(path, index=False, float_format="%.17g", compression="infer")


def cpm_normalize(m: ExpressionMatrix) -> ExpressionMatrix:
    _require_stage(m, Stage.RAW_COUNTS, "cpm_normalize")
    totals = m.values.sum(axis=1)
    empty = np.flatnonzero(totals <= 0)
    if empty.size:
        raise EmptyCell(f"cells with zero total count: {empty[:10].tolist()}")
    return ExpressionMatrix(m.values * (CPM_TOTAL / totals)[:, None], m.gene_ids, Stage.CPM)


def log_transform(m: ExpressionMatrix) -> ExpressionMatrix:
    _require_stage(m, Stage.CPM, "log_transform")
    return ExpressionMatrix(np.log10(m.values + LOG_OFFSET), m.gene_ids, Stage.LOG_TRANSFORMED)


def filter_genes(a: ExpressionMatrix, b: ExpressionMatrix, min_cells: int = 300) -> list:
    """Gene ids detected in at least ``min_cells`` cells of both matrices.

    The result follows the column order of ``a``.
    """
    _require_stage(a, Stage.RAW_COUNTS, "filter_genes")
    _require_stage(b, Stage.RAW_COUNTS, "filter_genes")
    keep_b = {g for g, c in zip(b.gene_ids, (b.values > 0).sum(axis=0)) if c >= min_cells}
    return [
        g for g, c in zip(a.gene_ids, (a.values > 0).sum(axis=0)) if c >= min_cells and g in keep_b
    ]


def prepare_pair(a: ExpressionMatrix, b: ExpressionMatrix, min_cells: int = 300):
    """Filter to the shared detected genes, then CPM-normalize and log-transform both."""
    genes = filter_genes(a, b, min_cells)
    if not genes:
        raise MalformedInput(f"no gene is detected in >= {min_cells} cells of both datasets")
    return tuple(log_transform(cpm_normalize(m.select_genes(genes))) for m in (a, b))


# --------------------------------------------------------------------------
# K-means panel selection
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PanelSelection:
    panel_indices: np.ndarray
    assignments: np.ndarray
    gene_ids: tuple = field(default=())
    iterations: int = 0

    @property
    def K(self) -> int:
        return int(self.panel_indices.shape[0])

    @property
    def panel_genes(self) -> tuple:
        return tuple(self.gene_ids[i] for i in self.panel_indices)


def _sq_distances(points, sq_norms, centroids):
    d2 = sq_norms[:, None] - 2.0 * points @ centroids.T + np.einsum("ij,ij->i", centroids, centroids)
    return np.maximum(d2, 0.0)


def _kmeans_plusplus(points, sq_norms, K, rng):
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_distances(points, sq_norms, points[chosen])[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # every remaining point coincides with a centre
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_distances(points, sq_norms, points[[idx]])[:, 0])
    return points[chosen].copy()


def _repair_empty(points, labels, centroids, d2):
    """Move the worst-fitting point of a multi-member cluster into each empty one."""
    K = centroids.shape[0]
    for c in range(K):
        counts = np.bincount(labels, minlength=K)
        if counts[c]:
            continue
        own = d2[np.arange(points.shape[0]), labels]
        own = np.where(counts[labels] > 1, own, -np.inf)
        idx = int(np.argmax(own))
        labels[idx] = c
        centroids[c] = points[idx]


def kmeans(points, K: int, rng, max_iter: int = 200, rel_tol: float = 1e-6):
    """Lloyd's algorithm with k-means++ seeding; every cluster ends non-empty.

    Returns ``(labels, centroids, iterations)``.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= K <= n:
        raise ValueError(f"K must lie in [1, {n}], got {K}")
    sq_norms = np.einsum("ij,ij->i", points, points)
    centroids = _kmeans_plusplus(points, sq_norms, K, rng)

    prev_inertia = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        d2 = _sq_distances(points, sq_norms, centroids)
        labels = np.argmin(d2, axis=1)
        _repair_empty(points, labels, centroids, d2)
        for c in range(K):
            centroids[c] = points[labels == c].mean(axis=0)
        inertia = float(((points - centroids[labels]) ** 2).sum())
        if prev_inertia - inertia <= rel_tol * max(inertia, np.finfo(float).tiny):
            break
        prev_inertia = inertia

    d2 = _sq_distances(points, sq_norms, centroids)
    labels = np.argmin(d2, axis=1)
    _repair_empty(points, labels, centroids, d2)
    for c in range(K):
        centroids[c] = points[labels == c].mean(axis=0)
    return labels, centroids, iterations


def select_panel_kmeans(train: ExpressionMatrix, K: int, rng) -> PanelSelection:
    """Cluster genes (as vectors over cells) and keep the gene nearest each centroid.

    Ties in distance go to the lowest gene index.
    """
    _require_stage(train, Stage.LOG_TRANSFORMED, "select_panel_kmeans")
    if not 1 <= K <= train.n_genes:
        raise ValueError(f"K={K} must lie in [1, {train.n_genes}] (number of genes)")
    points = train.values.T
    labels, centroids, iterations = kmeans(points, K, rng)
    panel = np.empty(K, dtype=np.int64)
    for c in range(K):
        members = np.flatnonzero(labels == c)
        dist = ((points[members] - centroids[c]) ** 2).sum(axis=1)
        panel[c] = members[np.argmin(dist)]
    return PanelSelection(
        panel_indices=panel,
        assignments=labels,
        gene_ids=train.gene_ids,
        iterations=iterations,
    )


# --------------------------------------------------------------------------
# Imputation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ImputationResult:
    rule: str
    K: int
    mse: float
    seconds: float
    error: str = ""


def _panel_design(m: ExpressionMatrix, panel_idx, intercept: bool):
    X = m.values[:, panel_idx]
    if intercept:
        X = np.hstack([np.ones((X.shape[0], 1)), X])
    return X


def evaluate_imputation(
    train: ExpressionMatrix,
    test: ExpressionMatrix,
    panel: PanelSelection,
    rules=("ols", "unconstrained", "constrained"),
    M: float = DEFAULT_M,
    intercept: bool = True,
    threads: int = 1,
) -> list:
    """Fit on ``train`` and score imputation of non-panel genes in ``test``.

    The error is the mean squared difference over test cells and imputed
    genes. A rule that cannot be applied (for example an ill-posed
    unconstrained solve) yields a NaN row carrying the error message.
    """
    _require_stage(train, Stage.LOG_TRANSFORMED, "evaluate_imputation")
    _require_stage(test, Stage.LOG_TRANSFORMED, "evaluate_imputation")
    if train.gene_ids != test.gene_ids:
        test = test.select_genes(train.gene_ids)
    panel_idx = np.asarray(panel.panel_indices)
    outcome_idx = np.setdiff1d(np.arange(train.n_genes), panel_idx)
    X_train = _panel_design(train, panel_idx, intercept)
    X_test = _panel_design(test, panel_idx, intercept)
    Y_train = train.values[:, outcome_idx]
    Y_test = test.values[:, outcome_idx]

    results = []
    for rule in rules:
        start = time.perf_counter()
        try:
            fit = fit_ols(Dataset(X_train, Y_train))
            pred = predict(fit, X_test, rule=rule, M=M, threads=threads)
        except CoolishError as exc:
            results.append(ImputationResult(rule, panel.K, float("nan"), time.perf_counter() - start, str(exc)))
            continue
        seconds = time.perf_counter() - start
        mse = float(np.mean((Y_test - pred) ** 2))
        results.append(ImputationResult(rule, panel.K, mse, seconds))
    return results


def synthetic_counts(n_cells: int, gene_ids, rng, n_programs: int = 6, depth: float = 2000.0,
                     loadings=None, dropout_genes: int = 0) -> ExpressionMatrix:
    """Poisson counts driven by a few shared expression programs.

    Passing the same ``loadings`` to two calls gives two datasets over the
    same genes with different cells, like a train/test pair.
    """
    n_genes = len(gene_ids)
    if loadings is None:
        loadings = rng.normal(0.0, 1.0, size=(n_programs, n_genes))
    scores = rng.normal(0.0, 0.6, size=(n_cells, loadings.shape[0]))
    log_rate = scores @ loadings + rng.normal(0.0, 0.3, size=(n_cells, n_genes))
    rates = np.exp(log_rate)
    rates /= rates.sum(axis=1, keepdims=True)
    counts = rng.poisson(rates * depth).astype(np.float64)
    if dropout_genes:
        # rarely detected genes exercise the cell-count filter
        counts[:, -dropout_genes:] *= rng.random((n_cells, dropout_genes)) < 0.05
    return ExpressionMatrix(counts, tuple(gene_ids), Stage.RAW_COUNTS)


def synthetic_pair(n_genes: int = 400, n_cells=(500, 550), seed: int = 0, dropout_genes: int = 20):
    """Train/test pair of raw-count matrices sharing gene ids and programs."""
    rng = np.random.default_rng(seed)
    gene_ids = [f"gene{j:05d}" for j in range(n_genes)]
    loadings = rng.normal(0.0, 1.0, size=(6, n_genes))
    a = synthetic_counts(n_cells[0], gene_ids, rng, loadings=loadings, dropout_genes=dropout_genes)
    b = synthetic_counts(n_cells[1], gene_ids, rng, loadings=loadings, dropout_genes=dropout_genes)
    return a, b
