"""Detection engine: identification, authentication, verification, pipeline.

The stages mirror a coarse-to-fine narrowing of hypotheses:

* identification picks the tree cut whose leaves best represent the data,
  either Top-Down (accept a split when the children's summed score beats the
  vertex) or Bottom-Up (merge siblings into their parent when the parent
  scores at least as well);
* authentication repeatedly merges the pair of patches with the highest
  posterior of belonging together, then keeps the best-scoring point of the
  merge chain; local mode restricts merges to adjacent patches;
* the final authentication round instead gates each merge on a Bayes factor
  so the caller controls stringency on the Jeffreys scale;
* verification re-challenges border plots one at a time, switching a plot to
  a neighbouring patch when the joint density prefers the reassignment.

``detect`` orchestrates the cycles and returns a :class:`QcReport` with a
snapshot after every stage.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import (
    DegenerateDataError,
    InsufficientDataError,
    NumericalError,
)
from .grf import (
    FitCache,
    FittedModel,
    GrfFamily,
    ScoreKind,
    EvidenceLevel,
    all_families,
    bayes_factor,
    fit_mle,
    log_likelihood,
)
from .grid import (
    Adjacency,
    GridShape,
    Partition,
    Patch,
    PlotCoord,
    TrialGrid,
    border_pairs,
    connected_components,
    coords_to_runs,
)
from .tree import (
    IndexTree,
    SplitConstraints,
    TreeKind,
    build_binary_tree,
    build_quad_tree,
)

_LOG_2PI = float(np.log(2.0 * np.pi))


class IdentifyKind(enum.Enum):
    TOP_DOWN = "top_down"
    BOTTOM_UP = "bottom_up"


class AuthMode(enum.Enum):
    LOCAL = "local"
    GLOBAL = "global"


class VerifyStage(enum.Enum):
    CYCLE1 = "cycle1"
    CYCLE2 = "cycle2"


@dataclass(frozen=True)
class PatchModelSet:
    """A partition plus one fitted model per patch."""

    partition: Partition
    models: dict[int, FittedModel]

    def __post_init__(self):
        ids = {p.id for p in self.partition}
        if set(self.models) != ids:
            raise ValueError("each patch needs exactly one model")
        for p in self.partition:
            if self.models[p.id].n != len(p.coords):
                raise ValueError(f"model n mismatch on patch {p.id}")

    def __len__(self):
        return len(self.partition)


@dataclass(frozen=True)
class MergeCandidate:
    p: int
    q: int
    posterior: float


@dataclass(frozen=True)
class SwitchCandidate:
    plot: PlotCoord
    from_patch: int
    to_patch: int
    posterior: float
    #: log-density advantage of switching over staying; positive favours the switch
    gain: float
    neighbor: PlotCoord


@dataclass(frozen=True)
class PipelineConfig:
    tree: TreeKind = TreeKind.BINARY
    identify: IdentifyKind = IdentifyKind.TOP_DOWN
    score: ScoreKind = ScoreKind.CV_NLL
    #: score used while building the binary tree; None reuses `score`
    tree_score: ScoreKind | None = ScoreKind.BIC
    candidates: tuple[GrfFamily, ...] = all_families()
    adjacency: Adjacency = Adjacency.ROOK
    threshold: EvidenceLevel = EvidenceLevel.DECISIVE
    min_plots_local: int = 2
    min_plots_global: int = 6
    max_cycle_iterations: int = 20
    max_switch_iterations: int = 200
    constraints: SplitConstraints = SplitConstraints()
    cv_folds: int = 5
    seed: int = 0

    def effective_tree_score(self) -> ScoreKind:
        return self.tree_score if self.tree_score is not None else self.score


@dataclass(frozen=True)
class StageSnapshot:
    pms: PatchModelSet
    total_score: float

    @property
    def m(self) -> int:
        return len(self.pms)


@dataclass(frozen=True)
class QcReport:
    stages: dict[str, StageSnapshot]
    m: int
    flagged: bool
    #: Bayes factor of the final partition against a single stationary field
    evidence: float
    config: PipelineConfig

    def final(self) -> PatchModelSet:
        return self.stages["final"].pms


# ---------------------------------------------------------------------------
# shared helpers


def _make_pms(
    cache: FitCache, shape: GridShape, coord_sets: list[frozenset[PlotCoord]], config: PipelineConfig
) -> PatchModelSet:
    coord_sets = sorted(coord_sets, key=min)
    patches = [Patch(k, cs) for k, cs in enumerate(coord_sets)]
    models = {
        p.id: cache.select_scored(p.coords, config.candidates, config.score)[0]
        for p in patches
    }
    return PatchModelSet(Partition(patches, shape), models)


def _patch_score(cache: FitCache, coords, config: PipelineConfig) -> float:
    try:
        return cache.select_scored(coords, config.candidates, config.score)[1]
    except (InsufficientDataError, NumericalError, DegenerateDataError):
        return float("inf")


def total_score(cache: FitCache, pms: PatchModelSet, config: PipelineConfig) -> float:
    """Score of the whole partition model (independent per-patch fields).

    CV_NLL and AIC both add up per patch. BIC penalises the pooled parameter
    count against the full plot count, so partitions with more patches pay
    for every extra parameter at the scale of the whole trial.
    """
    if config.score is not ScoreKind.BIC:
        return sum(_patch_score(cache, p.coords, config) for p in pms.partition)
    total_ll = 0.0
    total_k = 0
    n = len(pms.partition.shape.present)
    for p in pms.partition:
        try:
            model, _ = cache.select_scored(p.coords, config.candidates, config.score)
        except (InsufficientDataError, NumericalError, DegenerateDataError):
            return float("inf")
        total_ll += model.loglik
        total_k += model.k
    return total_k * np.log(n) - 2.0 * total_ll


def _cv_or_iid(cache: FitCache, coords, family: GrfFamily) -> float:
    """CV-NLL of the given family, falling back to IID when the subset is too
    small to cross-validate a correlated fit."""
    from .grf import IID as IID_FAMILY

    try:
        return cache.cv(coords, family)
    except (InsufficientDataError, NumericalError, DegenerateDataError):
        return cache.cv(coords, IID_FAMILY)


# ---------------------------------------------------------------------------
# identification


def identify_top_down(
    tree: IndexTree,
    trial: TrialGrid,
    config: PipelineConfig,
    cache: FitCache | None = None,
) -> PatchModelSet:
    """Walk from the root, accepting a split when the children's summed score
    strictly beats the vertex's own; accepted children recurse."""
    cache = cache or FitCache(trial, config.cv_folds, config.seed)

    def score_of(coords) -> float | None:
        try:
            return cache.select_scored(coords, config.candidates, config.score)[1]
        except (InsufficientDataError, NumericalError, DegenerateDataError):
            return None

    def recurse(vid: int) -> list[frozenset]:
        vertex = tree.vertex(vid)
        if vertex.is_leaf:
            return [vertex.coords]
        own = score_of(vertex.coords)
        child_scores = [score_of(tree.vertex(c).coords) for c in vertex.children]
        if own is None or any(s is None for s in child_scores):
            return [vertex.coords]
        if sum(child_scores) < own:
            out: list[frozenset] = []
            for c in vertex.children:
                out.extend(recurse(c))
            return out
        return [vertex.coords]

    return _make_pms(cache, trial.shape, recurse(tree.root), config)


def identify_bottom_up(
    tree: IndexTree,
    trial: TrialGrid,
    config: PipelineConfig,
    cache: FitCache | None = None,
) -> PatchModelSet:
    """Walk from the leaves, merging a sibling group into its parent when the
    parent scores at least as well as the siblings combined."""
    cache = cache or FitCache(trial, config.cv_folds, config.seed)

    def score_of(coords) -> float | None:
        try:
            return cache.select_scored(coords, config.candidates, config.score)[1]
        except (InsufficientDataError, NumericalError, DegenerateDataError):
            return None

    def recurse(vid: int) -> tuple[list[frozenset], float | None, bool]:
        """Returns (patches, summed score, fully merged to this vertex?)."""
        vertex = tree.vertex(vid)
        own = score_of(vertex.coords)
        if vertex.is_leaf:
            return [vertex.coords], own, own is not None
        results = [recurse(c) for c in vertex.children]
        child_patches = [p for r in results for p in r[0]]
        child_total = (
            None
            if any(r[1] is None for r in results)
            else sum(r[1] for r in results)
        )
        if (
            all(r[2] for r in results)
            and own is not None
            and child_total is not None
            and own <= child_total
        ):
            return [vertex.coords], own, True
        return child_patches, child_total, False

    return _make_pms(cache, trial.shape, recurse(tree.root)[0], config)


def identify(
    tree: IndexTree,
    trial: TrialGrid,
    config: PipelineConfig,
    cache: FitCache | None = None,
) -> PatchModelSet:
    fn = (
        identify_top_down
        if config.identify is IdentifyKind.TOP_DOWN
        else identify_bottom_up
    )
    return fn(tree, trial, config, cache)


# ---------------------------------------------------------------------------
# authentication


def _adjacent_patch_pairs(pms: PatchModelSet, adjacency: Adjacency) -> set[tuple[int, int]]:
    pairs = set()
    for _, own, _, other in border_pairs(pms.partition, pms.partition.shape, adjacency):
        pairs.add((own, other))
    return pairs


def authentication_posteriors(
    trial: TrialGrid,
    pms: PatchModelSet,
    mode: AuthMode,
    config: PipelineConfig,
    cache: FitCache | None = None,
) -> list[MergeCandidate]:
    """Posterior that patch p belongs with patch q, for every admissible
    ordered pair.

    The likelihood of (p joined to q) is the log-density of p's data under
    the model fitted on the union; posteriors are the softmax over q for
    fixed p. Pairs whose union cannot be fitted are skipped.
    """
    if len(pms) < 2:
        raise InsufficientDataError("authentication needs at least 2 patches")
    cache = cache or FitCache(trial, config.cv_folds, config.seed)
    if mode is AuthMode.LOCAL:
        admissible = _adjacent_patch_pairs(pms, config.adjacency)
    else:
        ids = [p.id for p in pms.partition]
        admissible = {(p, q) for p in ids for q in ids if p != q}
    by_patch = {p.id: p for p in pms.partition}
    logliks: dict[int, list[tuple[int, float]]] = {}
    for (p, q) in sorted(admissible):
        union = by_patch[p].coords | by_patch[q].coords
        try:
            model, _ = cache.select_scored(union, config.candidates, config.score)
            ll = cache.restricted_loglik(by_patch[p].coords, model)
        except (InsufficientDataError, NumericalError, DegenerateDataError):
            continue
        logliks.setdefault(p, []).append((q, ll))
    out: list[MergeCandidate] = []
    for p in sorted(logliks):
        qs, lls = zip(*logliks[p])
        weights = np.exp(np.array(lls) - logsumexp(np.array(lls)))
        out.extend(MergeCandidate(p, q, float(w)) for q, w in zip(qs, weights))
    return out


def _merge_patches(
    cache: FitCache, pms: PatchModelSet, p: int, q: int, config: PipelineConfig
) -> PatchModelSet:
    keep = min(p, q)
    union = pms.partition.patch(p).coords | pms.partition.patch(q).coords
    model, _ = cache.select_scored(union, config.candidates, config.score)
    patches = [pt for pt in pms.partition if pt.id not in (p, q)]
    patches.append(Patch(keep, union))
    models = {pt.id: pms.models[pt.id] for pt in pms.partition if pt.id not in (p, q)}
    models[keep] = model
    return PatchModelSet(Partition(patches, pms.partition.shape), models)


def _best_candidate(cands: list[MergeCandidate]) -> MergeCandidate:
    return sorted(cands, key=lambda c: (-c.posterior, c.p, c.q))[0]


def authenticate(
    trial: TrialGrid,
    pms: PatchModelSet,
    mode: AuthMode,
    config: PipelineConfig,
    cache: FitCache | None = None,
) -> PatchModelSet:
    """Merge the argmax-posterior pair until one patch remains, then return
    the recorded partition with the best total score.

    Partitions containing a patch below the stage minimum (local: 2, global:
    6) are not eligible to be returned; if none qualifies the most merged
    one is used.
    """
    cache = cache or FitCache(trial, config.cv_folds, config.seed)
    stage_min = (
        config.min_plots_local if mode is AuthMode.LOCAL else config.min_plots_global
    )
    current = pms
    history = [(current, total_score(cache, current, config))]
    while len(current) > 1:
        try:
            cands = authentication_posteriors(trial, current, mode, config, cache)
        except InsufficientDataError:
            break
        if not cands:
            break
        best = _best_candidate(cands)
        current = _merge_patches(cache, current, best.p, best.q, config)
        history.append((current, total_score(cache, current, config)))
    eligible = [
        (score, k, cand)
        for k, (cand, score) in enumerate(history)
        if min(len(p.coords) for p in cand.partition) >= stage_min
    ]
    if not eligible:
        return history[-1][0]
    eligible.sort(key=lambda e: (e[0], e[1]))
    return eligible[0][2]


def separation_bayes_factor(
    trial: TrialGrid,
    pms: PatchModelSet,
    p: int,
    q: int,
    config: PipelineConfig,
    cache: FitCache,
) -> float:
    """Evidence for keeping p and q separate rather than merged, from
    cross-validated NLLs (used regardless of the pipeline score).

    The NLL difference is taken per fold (total divided by the fold count)
    before exponentiation, so the evidence scale is comparable to the
    Jeffreys cutoffs whatever the patch sizes; total-NLL differences grow
    with plot count and would saturate every threshold.
    """
    coords_p = pms.partition.patch(p).coords
    coords_q = pms.partition.patch(q).coords
    nll_sep = _cv_or_iid(cache, coords_p, pms.models[p].family) + _cv_or_iid(
        cache, coords_q, pms.models[q].family
    )
    union = coords_p | coords_q
    merged, _ = cache.select_scored(union, config.candidates, config.score)
    nll_merged = _cv_or_iid(cache, union, merged.family)
    folds = max(config.cv_folds, 1)
    return bayes_factor(nll_sep / folds, nll_merged / folds)


def authenticate_final(
    trial: TrialGrid,
    pms: PatchModelSet,
    threshold: EvidenceLevel,
    config: PipelineConfig,
    cache: FitCache | None = None,
) -> PatchModelSet:
    """Global authentication gated by evidence: candidates are tried in
    posterior order and a pair is merged whenever the Bayes factor for
    keeping it separate falls below the threshold cutoff; the loop ends once
    every remaining pair carries evidence at or above the cutoff."""
    cache = cache or FitCache(trial, config.cv_folds, config.seed)
    current = pms
    while len(current) > 1:
        try:
            cands = authentication_posteriors(trial, current, AuthMode.GLOBAL, config, cache)
        except InsufficientDataError:
            break
        merged = None
        for cand in sorted(cands, key=lambda c: (-c.posterior, c.p, c.q)):
            try:
                bf = separation_bayes_factor(trial, current, cand.p, cand.q, config, cache)
            except (InsufficientDataError, NumericalError, DegenerateDataError):
                continue
            if bf < threshold.cutoff:
                merged = _merge_patches(cache, current, cand.p, cand.q, config)
                break
        if merged is None:
            break
        current = merged
    return current


# ---------------------------------------------------------------------------
# verification


def _marginal_logpdf(value: float, model: FittedModel) -> float:
    s2 = model.params.sigma2
    d = value - model.params.mu
    return -0.5 * (_LOG_2PI + np.log(s2) + d * d / s2)


def _pair_logpdf(y1: float, y2: float, c1: PlotCoord, c2: PlotCoord, model: FittedModel) -> float:
    p = model.params
    r = (
        (1.0 - p.phi)
        * p.rho_r ** abs(c1[0] - c2[0])
        * p.rho_c ** abs(c1[1] - c2[1])
    )
    det = p.sigma2 * p.sigma2 * (1.0 - r * r)
    d1, d2 = y1 - p.mu, y2 - p.mu
    quad = (d1 * d1 - 2.0 * r * d1 * d2 + d2 * d2) / (p.sigma2 * (1.0 - r * r))
    return -0.5 * (2.0 * _LOG_2PI + np.log(det) + quad)


def switch_posteriors(
    trial: TrialGrid,
    pms: PatchModelSet,
    config: PipelineConfig,
) -> list[SwitchCandidate]:
    """For every border plot, the posterior of switching to each adjacent
    foreign patch versus staying put.

    Each cross-patch neighbour pair (plot in p, neighbour in q) is scored by
    the joint log-density of the two values with the plot reassigned to q
    against the current assignment; per plot, the best pair per target patch
    is kept and posteriors are the softmax over {stay} + targets.
    """
    if len(pms) < 2:
        return []
    part = pms.partition
    gains: dict[PlotCoord, dict[int, tuple[float, PlotCoord]]] = {}
    owners: dict[PlotCoord, int] = {}
    for plot, own, nb, other in border_pairs(part, part.shape, config.adjacency):
        y1 = trial[plot]
        y2 = trial[nb]
        stay = _marginal_logpdf(y1, pms.models[own]) + _marginal_logpdf(
            y2, pms.models[other]
        )
        switch = _pair_logpdf(y1, y2, plot, nb, pms.models[other])
        gain = float(switch - stay)
        owners[plot] = own
        best = gains.setdefault(plot, {})
        if other not in best or gain > best[other][0]:
            best[other] = (gain, nb)
    out: list[SwitchCandidate] = []
    for plot in sorted(gains):
        targets = sorted(gains[plot])
        logw = np.array([0.0] + [gains[plot][t][0] for t in targets])
        post = np.exp(logw - logsumexp(logw))
        for t, pr in zip(targets, post[1:]):
            g, nb = gains[plot][t]
            out.append(SwitchCandidate(plot, owners[plot], t, float(pr), g, nb))
    return out


def _switch_allowed(
    pms: PatchModelSet, cand: SwitchCandidate, stage_min: int, adjacency: Adjacency
) -> bool:
    source = pms.partition.patch(cand.from_patch)
    remaining = source.coords - {cand.plot}
    if not remaining:
        return False
    if len(remaining) < pms.models[cand.from_patch].family.min_plots:
        return False
    comps = connected_components(
        Patch(0, frozenset(remaining)), pms.partition.shape, adjacency
    )
    return all(len(c) >= stage_min for c in comps)


def verify(
    trial: TrialGrid,
    pms: PatchModelSet,
    stage: VerifyStage,
    config: PipelineConfig,
    cache: FitCache | None = None,
) -> PatchModelSet:
    """Iteratively apply the best accepted border-plot switch.

    A switch must strictly beat staying, must not empty its source patch or
    leave a connected sub-area below the stage minimum (cycle 1: 2, cycle 2:
    6), and must leave the source fittable under its current family. Both
    affected models are refitted with their families fixed after each
    switch; when no switch qualifies every patch is refitted with full model
    selection.
    """
    cache = cache or FitCache(trial, config.cv_folds, config.seed)
    stage_min = (
        config.min_plots_local if stage is VerifyStage.CYCLE1 else config.min_plots_global
    )
    current = pms
    seen = {current.partition.coord_key()}
    for _ in range(config.max_switch_iterations):
        cands = [
            c
            for c in switch_posteriors(trial, current, config)
            if c.gain > 0
            and _switch_allowed(current, c, stage_min, config.adjacency)
        ]
        if not cands:
            break
        cands.sort(key=lambda c: (-c.gain, c.plot, c.to_patch))
        applied = None
        for cand in cands:
            try:
                applied = _apply_switch(trial, current, cand)
                break
            except (NumericalError, DegenerateDataError, InsufficientDataError):
                continue
        if applied is None:
            break
        current = applied
        key = current.partition.coord_key()
        if key in seen:
            # refits turned a previous state "improving" again: a limit
            # cycle, so switching no longer makes progress
            break
        seen.add(key)
    final_models = {
        p.id: cache.select_scored(p.coords, config.candidates, config.score)[0]
        for p in current.partition
    }
    return PatchModelSet(current.partition, final_models)


def _apply_switch(trial: TrialGrid, pms: PatchModelSet, cand: SwitchCandidate) -> PatchModelSet:
    part = pms.partition
    new_patches = []
    for p in part:
        if p.id == cand.from_patch:
            new_patches.append(Patch(p.id, p.coords - {cand.plot}))
        elif p.id == cand.to_patch:
            new_patches.append(Patch(p.id, p.coords | {cand.plot}))
        else:
            new_patches.append(p)
    models = dict(pms.models)
    for pid in (cand.from_patch, cand.to_patch):
        patch = next(p for p in new_patches if p.id == pid)
        old = pms.models[pid]
        models[pid] = fit_mle(trial, patch.coords, old.family, start=old.params)
    return PatchModelSet(Partition(new_patches, part.shape), models)


# ---------------------------------------------------------------------------
# pipeline


def build_tree(trial: TrialGrid, config: PipelineConfig, cache: FitCache | None = None) -> IndexTree:
    if config.tree is TreeKind.QUAD:
        return build_quad_tree(trial.shape, config.constraints)
    return build_binary_tree(
        trial,
        config.effective_tree_score(),
        config.candidates,
        config.constraints,
        cache,
    )


def _snapshot(cache: FitCache, pms: PatchModelSet, config: PipelineConfig) -> StageSnapshot:
    return StageSnapshot(pms, total_score(cache, pms, config))


def run_cycles(
    trial: TrialGrid, config: PipelineConfig, cache: FitCache
) -> dict[str, PatchModelSet]:
    """Tree, identification, and the two authenticate/verify cycles.

    Returns the partition state after each named stage; the thresholded
    final round is applied separately (see :func:`final_stage`) so callers
    can study several stringencies on one prefix.
    """
    tree = build_tree(trial, config, cache)
    pms = identify(tree, trial, config, cache)
    out = {"identified": pms}

    for _ in range(config.max_cycle_iterations):
        before = pms.partition.coord_key()
        if len(pms) > 1:
            pms = authenticate(trial, pms, AuthMode.LOCAL, config, cache)
        pms = verify(trial, pms, VerifyStage.CYCLE1, config, cache)
        if pms.partition.coord_key() == before:
            break
    out["cycle1"] = pms

    for _ in range(config.max_cycle_iterations):
        before = pms.partition.coord_key()
        if len(pms) > 1:
            pms = authenticate(trial, pms, AuthMode.LOCAL, config, cache)
        if len(pms) > 1:
            pms = authenticate(trial, pms, AuthMode.GLOBAL, config, cache)
        pms = verify(trial, pms, VerifyStage.CYCLE2, config, cache)
        if pms.partition.coord_key() == before:
            break
    out["cycle2"] = pms
    return out


def final_stage(
    trial: TrialGrid,
    pms: PatchModelSet,
    threshold: EvidenceLevel,
    config: PipelineConfig,
    cache: FitCache,
) -> PatchModelSet:
    """One local round, thresholded global authentication, verification."""
    if len(pms) > 1:
        pms = authenticate(trial, pms, AuthMode.LOCAL, config, cache)
    if len(pms) > 1:
        pms = authenticate_final(trial, pms, threshold, config, cache)
    return verify(trial, pms, VerifyStage.CYCLE2, config, cache)


def detect(trial: TrialGrid, config: PipelineConfig = PipelineConfig()) -> QcReport:
    """Full nonstationarity scan of one trial.

    Pipeline: index tree, identification, a first cycle of {local
    authentication, verification} run to convergence, a second cycle of
    {local once, global authentication, verification} run to convergence,
    then a final thresholded authentication framed by one local round and a
    last verification.
    """
    required = max(2 * config.min_plots_local, config.min_plots_global)
    if len(trial.shape.present) < required:
        raise InsufficientDataError(
            f"{len(trial.shape.present)} plots; pipeline needs at least {required}"
        )
    cache = FitCache(trial, config.cv_folds, config.seed)
    states = run_cycles(trial, config, cache)
    pms = final_stage(trial, states["cycle2"], config.threshold, config, cache)
    stages = {name: _snapshot(cache, state, config) for name, state in states.items()}
    stages["final"] = _snapshot(cache, pms, config)
    m = len(pms)
    evidence = _partition_evidence(trial, pms, config, cache)
    return QcReport(stages=stages, m=m, flagged=m > 1, evidence=evidence, config=config)


def _partition_evidence(
    trial: TrialGrid, pms: PatchModelSet, config: PipelineConfig, cache: FitCache
) -> float:
    """Bayes factor of the final partition against one stationary field,
    on the same per-fold scale as :func:`separation_bayes_factor`."""
    if len(pms) == 1:
        return 1.0
    try:
        single, _ = cache.select_scored(
            trial.shape.present, config.candidates, config.score
        )
        nll_single = _cv_or_iid(cache, frozenset(trial.shape.present), single.family)
        nll_parts = sum(
            _cv_or_iid(cache, p.coords, pms.models[p.id].family)
            for p in pms.partition
        )
    except (InsufficientDataError, NumericalError, DegenerateDataError):
        return float("nan")
    folds = max(config.cv_folds, 1)
    return bayes_factor(nll_parts / folds, nll_single / folds)


# ---------------------------------------------------------------------------
# report serialization


def report_to_dict(report: QcReport) -> dict:
    """JSON-ready view of a report; ordering is deterministic."""

    def model_dict(model: FittedModel) -> dict:
        return {
            "family": model.family.label,
            "mu": model.params.mu,
            "sigma2": model.params.sigma2,
            "rho_r": model.params.rho_r,
            "rho_c": model.params.rho_c,
            "phi": model.params.phi,
            "loglik": model.loglik,
            "n": model.n,
            "k": model.k,
        }

    def stage_dict(snap: StageSnapshot) -> dict:
        return {
            "m": snap.m,
            "total_score": snap.total_score,
            "patches": [
                {
                    "id": p.id,
                    "coords": coords_to_runs(p.coords),
                    "model": model_dict(snap.pms.models[p.id]),
                }
                for p in snap.pms.partition
            ],
        }

    cfg = report.config
    return {
        "config": {
            "tree": cfg.tree.value,
            "identify": cfg.identify.value,
            "score": cfg.score.value,
            "tree_score": cfg.effective_tree_score().value,
            "candidates": [f.label for f in cfg.candidates],
            "adjacency": cfg.adjacency.value,
            "threshold": cfg.threshold.value,
            "cv_folds": cfg.cv_folds,
            "seed": cfg.seed,
        },
        "stages": {name: stage_dict(snap) for name, snap in report.stages.items()},
        "m": report.m,
        "flagged": report.flagged,
        "evidence": report.evidence,
    }
