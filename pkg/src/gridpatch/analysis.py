"""Minimal first-stage analysis: generalised least squares under one field
family, producing effect estimates and the residual grids the quality
control pipeline consumes.

The mean model is a design matrix over the present plots (intercept, block
dummies, optional variety dummies). Estimation alternates the GLS solution
for the effects with a covariance refit on the residuals until the effect
vector stabilises. Marginal residuals are data minus fitted effects;
conditional residuals additionally remove the best linear predictor of the
correlated field component (they coincide with marginal residuals for the
independent family).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.linalg import qr, solve_triangular

from .errors import ConvergenceError, DegenerateDataError, DesignError, ParseError
from .grf import (
    Correlation,
    FittedModel,
    GrfFamily,
    GrfParams,
    ScoreKind,
    build_correlation,
    fit_mle,
)
from .grid import PlotCoord, TrialGrid

# variance assigned to an exactly-constant residual vector so downstream
# reports stay finite
_PINNED_SIGMA2 = 1e-24


def _fit_or_pin(resid_grid: TrialGrid, family: GrfFamily) -> FittedModel:
    try:
        return fit_mle(resid_grid, resid_grid.coords, family)
    except DegenerateDataError:
        n = len(resid_grid.coords)
        mu = float(np.mean(resid_grid.value_vector(resid_grid.coords)))
        params = GrfParams(mu=mu, sigma2=_PINNED_SIGMA2)
        loglik = -0.5 * n * (math.log(2 * math.pi) + math.log(_PINNED_SIGMA2))
        return FittedModel(GrfFamily(Correlation.IID), params, loglik, n, 2)


@dataclass(frozen=True)
class DesignMatrix:
    """Full-column-rank design aligned to a trial's present plots."""

    matrix: np.ndarray
    labels: tuple[str, ...]
    plots: tuple[PlotCoord, ...]
    dropped: tuple[str, ...] = ()

    def __post_init__(self):
        if self.matrix.shape != (len(self.plots), len(self.labels)):
            raise DesignError("matrix shape does not match labels/plots")


def build_design(
    trial: TrialGrid,
    blocks: Mapping[PlotCoord, str] | None = None,
    varieties: Mapping[PlotCoord, str] | None = None,
) -> DesignMatrix:
    """Intercept plus dummy-coded blocks (and optional varieties).

    The first level of each factor is absorbed into the intercept;
    rank-deficient results are reduced by QR column pivoting with the
    dropped columns recorded.
    """
    plots = trial.coords
    columns = [np.ones(len(plots))]
    labels = ["intercept"]
    for name, factor in (("block", blocks), ("variety", varieties)):
        if factor is None:
            continue
        missing = [c for c in plots if c not in factor]
        if missing:
            raise DesignError(f"{name} labels missing for {len(missing)} plots")
        levels = sorted({str(factor[c]) for c in plots})
        for lev in levels[1:]:
            columns.append(
                np.array([1.0 if str(factor[c]) == lev else 0.0 for c in plots])
            )
            labels.append(f"{name}:{lev}")
    x = np.column_stack(columns)
    if x.shape[0] < x.shape[1]:
        raise DesignError(
            f"{x.shape[1]} columns exceed {x.shape[0]} plots"
        )
    _, r, piv = qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(x.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    if rank == 0:
        raise DesignError("design has no informative columns")
    keep = sorted(piv[:rank])
    dropped = tuple(labels[k] for k in sorted(piv[rank:]))
    return DesignMatrix(
        matrix=x[:, keep],
        labels=tuple(labels[k] for k in keep),
        plots=plots,
        dropped=dropped,
    )


def parse_design_csv(text: str) -> tuple[dict[PlotCoord, str], dict[PlotCoord, str] | None]:
    """Parse ``row,col,block[,variety]`` rows aligned to the trial CSV."""
    blocks: dict[PlotCoord, str] = {}
    varieties: dict[PlotCoord, str] = {}
    has_variety = False
    header_done = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if not header_done:
            if parts[:3] != ["row", "col", "block"]:
                raise ParseError("expected header 'row,col,block[,variety]'", line=lineno)
            has_variety = len(parts) > 3 and parts[3] == "variety"
            header_done = True
            continue
        try:
            coord = (int(parts[0]), int(parts[1]))
        except (ValueError, IndexError):
            raise ParseError(f"bad design row {line!r}", line=lineno) from None
        if len(parts) < 3 or not parts[2]:
            raise ParseError("missing block label", line=lineno)
        blocks[coord] = parts[2]
        if has_variety and len(parts) > 3 and parts[3]:
            varieties[coord] = parts[3]
    if not header_done:
        raise ParseError("missing design header", line=1)
    return blocks, (varieties if has_variety else None)


@dataclass(frozen=True)
class FirstStageFit:
    beta: np.ndarray
    beta_se: np.ndarray
    labels: tuple[str, ...]
    marginal_residuals: TrialGrid
    conditional_residuals: TrialGrid
    grf: FittedModel


def gls_fit(
    trial: TrialGrid,
    design: DesignMatrix,
    family: GrfFamily,
    score: ScoreKind = ScoreKind.CV_NLL,
    max_rounds: int = 50,
    tol: float = 1e-8,
) -> FirstStageFit:
    """Alternate GLS effect estimation with covariance refitting.

    ``score`` is carried through for reporting symmetry with the detection
    pipeline; the covariance family here is fixed by the caller.
    """
    if design.plots != trial.coords:
        raise DesignError("design rows must align with the trial's present plots")
    x = design.matrix
    y = trial.value_vector(trial.coords)
    n = len(y)
    corr = np.eye(n)
    beta = None
    model = None
    for _ in range(max_rounds):
        chol = np.linalg.cholesky(corr)
        xw = solve_triangular(chol, x, lower=True, check_finite=False)
        yw = solve_triangular(chol, y, lower=True, check_finite=False)
        new_beta, *_ = np.linalg.lstsq(xw, yw, rcond=None)
        if beta is not None and np.max(np.abs(new_beta - beta)) < tol:
            beta = new_beta
            break
        beta = new_beta
        resid_grid = trial.with_values(
            {c: float(v) for c, v in zip(trial.coords, y - x @ beta)}
        )
        model = _fit_or_pin(resid_grid, family)
        corr = build_correlation(
            trial.coords, model.params.rho_r, model.params.rho_c, model.params.phi
        )
    else:
        raise ConvergenceError(f"GLS did not stabilise in {max_rounds} rounds")
    resid = y - x @ beta
    marginal = trial.with_values({c: float(v) for c, v in zip(trial.coords, resid)})
    if model is None:
        model = _fit_or_pin(marginal, family)
    cov_beta = np.linalg.inv(x.T @ np.linalg.solve(model.params.sigma2 * corr, x))
    beta_se = np.sqrt(np.diag(cov_beta))
    conditional = _conditional_residuals(marginal, model, model.family)
    return FirstStageFit(
        beta=beta,
        beta_se=beta_se,
        labels=design.labels,
        marginal_residuals=marginal,
        conditional_residuals=conditional,
        grf=model,
    )


def _conditional_residuals(
    marginal: TrialGrid, model: FittedModel, family: GrfFamily
) -> TrialGrid:
    """Marginal residuals minus the BLUP of the correlated component.

    For the independent family there is no correlated component and the two
    residual kinds coincide; for a correlated family without nugget the
    correlated component absorbs the whole residual (zero conditionals).
    """
    if family.correlation is Correlation.IID:
        return marginal
    coords = marginal.coords
    r = marginal.value_vector(coords)
    p = model.params
    pure = build_correlation(coords, p.rho_r, p.rho_c, 0.0)
    mixed = (1.0 - p.phi) * pure + p.phi * np.eye(len(r))
    u_hat = (1.0 - p.phi) * pure @ np.linalg.solve(mixed, r)
    return marginal.with_values(
        {c: float(v) for c, v in zip(coords, r - u_hat)}
    )
