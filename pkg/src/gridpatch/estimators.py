"""Scikit-learn style facade over the detection pipeline.

The detector behaves like a clustering estimator on 2-D grids: ``fit`` takes
an (n_rows, n_cols) array with NaN marking missing plots and exposes one
patch label per cell. The GLS transformer turns raw responses into the
marginal residual grid the detector expects. Both cooperate with
``get_params``/``set_params``/``clone`` so they drop into pipelines and
parameter searches.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .analysis import build_design, gls_fit
from .grf import EvidenceLevel, GrfFamily, ScoreKind, all_families
from .grid import Adjacency, TrialGrid
from .segment import IdentifyKind, PipelineConfig, detect
from .tree import SplitConstraints, TreeKind


def check_grid_array(X) -> np.ndarray:
    """Validate a 2-D float array with at least one finite cell (NaN =
    missing plot); rejects infinities."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D grid array, got ndim={arr.ndim}")
    if np.isinf(arr).any():
        raise ValueError("grid array contains infinities")
    if not np.isfinite(arr).any():
        raise ValueError("grid array holds no finite values")
    return arr


def _parse_families(families, nugget: bool) -> tuple[GrfFamily, ...]:
    if families == "all":
        return all_families(nugget=nugget)
    fams = [GrfFamily.parse(tok) for tok in families]
    if nugget:
        fams += [
            GrfFamily(f.correlation, True)
            for f in fams
            if not f.nugget and f.min_plots > 2
        ]
    return tuple(dict.fromkeys(fams))


class GridPatchDetector(BaseEstimator):
    """Nonstationarity detector over grid-indexed values.

    Parameters mirror the pipeline configuration as plain strings/numbers so
    the estimator clones cleanly. After ``fit``:

    ``labels_``
        (n_rows, n_cols) int array of patch ids, -1 at missing plots.
    ``n_patches_``, ``flagged_``, ``evidence_``, ``report_``
        final patch count, the quality flag (more than one patch), the Bayes
        factor against a single stationary field, and the full report.
    """

    def __init__(
        self,
        tree: str = "binary",
        identify: str = "top_down",
        score: str = "cv_nll",
        tree_score: str | None = "bic",
        families: tuple[str, ...] | str = "all",
        nugget: bool = True,
        threshold: str = "decisive",
        adjacency: str = "rook",
        min_plots: int = 6,
        cv_folds: int = 5,
        seed: int = 0,
    ):
        self.tree = tree
        self.identify = identify
        self.score = score
        self.tree_score = tree_score
        self.families = families
        self.nugget = nugget
        self.threshold = threshold
        self.adjacency = adjacency
        self.min_plots = min_plots
        self.cv_folds = cv_folds
        self.seed = seed

    def _config(self) -> PipelineConfig:
        return PipelineConfig(
            tree=TreeKind(self.tree),
            identify=IdentifyKind(self.identify),
            score=ScoreKind(self.score),
            tree_score=None if self.tree_score is None else ScoreKind(self.tree_score),
            candidates=_parse_families(self.families, self.nugget),
            adjacency=Adjacency(self.adjacency),
            threshold=EvidenceLevel(self.threshold),
            constraints=SplitConstraints(min_plots=self.min_plots),
            cv_folds=self.cv_folds,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        arr = check_grid_array(X)
        trial = TrialGrid.from_array(arr)
        report = detect(trial, self._config())
        labels = np.full(arr.shape, -1, dtype=int)
        for patch in report.final().partition:
            for (i, j) in patch.coords:
                labels[i, j] = patch.id
        self.report_ = report
        self.labels_ = labels
        self.n_patches_ = report.m
        self.flagged_ = report.flagged
        self.evidence_ = report.evidence
        return self

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).labels_

    def _check_fitted(self):
        if not hasattr(self, "report_"):
            raise NotFittedError("call fit first")

    def predict(self, X=None) -> np.ndarray:
        """Patch labels of the fitted grid (grid estimators do not
        extrapolate to unseen plots)."""
        self._check_fitted()
        return self.labels_


class GlsResidualTransformer(BaseEstimator, TransformerMixin):
    """First-stage GLS residualiser.

    ``fit(X, blocks=...)`` fits intercept+block effects under the chosen
    field family; ``transform`` maps a response grid of the same layout to
    its marginal residual grid (NaN preserved at missing plots).
    """

    def __init__(self, family: str = "iid", conditional: bool = False):
        self.family = family
        self.conditional = conditional

    def fit(self, X, y=None, blocks=None):
        arr = check_grid_array(X)
        self.blocks_ = None if blocks is None else np.asarray(blocks)
        self.n_rows_, self.n_cols_ = arr.shape
        self.fit_ = self._run(arr)
        return self

    def _run(self, arr):
        trial = TrialGrid.from_array(arr)
        blocks = None
        if self.blocks_ is not None:
            blocks = {c: str(self.blocks_[c]) for c in trial.coords}
        design = build_design(trial, blocks)
        return gls_fit(trial, design, GrfFamily.parse(self.family))

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "fit_"):
            raise NotFittedError("call fit first")
        arr = check_grid_array(X)
        if arr.shape != (self.n_rows_, self.n_cols_):
            raise ValueError("grid layout differs from the fitted one")
        result = self._run(arr)
        grid = (
            result.conditional_residuals if self.conditional else result.marginal_residuals
        )
        return grid.to_array()
