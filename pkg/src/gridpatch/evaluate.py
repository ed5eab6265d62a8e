"""Evaluation harness: partition similarity, oracle pipelines, benchmarks.

Similarity between partitions is the Adjusted Rand Index of the induced plot
labelings (chance-corrected; 1 means identical) with a best-match Jaccard
overlap as a secondary diagnostic. Oracle variants replace the data-driven
decisions of identification and authentication with similarity-to-truth
decisions, isolating how much the tree geometry itself can deliver.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, GridPatchError, ShapeMismatchError
from .grf import FitCache
from .grid import Partition, Patch
from .segment import (
    IdentifyKind,
    PatchModelSet,
    PipelineConfig,
    QcReport,
    VerifyStage,
    build_tree,
    detect,
    verify,
)
from .simulate import SimTrial
from .tree import IndexTree, TreeKind


@dataclass(frozen=True)
class SimilarityScore:
    ari: float
    best_match_jaccard: float


def _comb2(x: int) -> float:
    return x * (x - 1) / 2.0


def adjusted_rand_index(labels_a: Sequence[int], labels_b: Sequence[int]) -> float:
    """ARI from the contingency table; degenerate tables (both partitions
    trivial) score 1 when the labelings agree as partitions, else 0."""
    if len(labels_a) != len(labels_b):
        raise ShapeMismatchError("labelings differ in length")
    n = len(labels_a)
    counts: dict[tuple[int, int], int] = {}
    rows: dict[int, int] = {}
    cols: dict[int, int] = {}
    for a, b in zip(labels_a, labels_b):
        counts[(a, b)] = counts.get((a, b), 0) + 1
        rows[a] = rows.get(a, 0) + 1
        cols[b] = cols.get(b, 0) + 1
    index = sum(_comb2(c) for c in counts.values())
    sum_a = sum(_comb2(c) for c in rows.values())
    sum_b = sum(_comb2(c) for c in cols.values())
    total = _comb2(n)
    expected = sum_a * sum_b / total if total else 0.0
    maximum = 0.5 * (sum_a + sum_b)
    if math.isclose(maximum, expected):
        same = len(rows) == len(cols) == len(counts)
        return 1.0 if same else 0.0
    return (index - expected) / (maximum - expected)


def similarity(a: Partition, b: Partition) -> SimilarityScore:
    """ARI plus mean best-match Jaccard of a's patches against b's."""
    if a.shape.present != b.shape.present:
        raise ShapeMismatchError("partitions cover different plot sets")
    order = sorted(a.shape.present)
    ari = adjusted_rand_index(a.labels(order), b.labels(order))
    jac = float(
        np.mean(
            [
                max(
                    len(pa.coords & pb.coords) / len(pa.coords | pb.coords)
                    for pb in b
                )
                for pa in a
            ]
        )
    )
    return SimilarityScore(ari=ari, best_match_jaccard=jac)


# ---------------------------------------------------------------------------
# oracle algorithms


def oracle_bottom_up(tree: IndexTree, truth: Partition) -> Partition:
    """Bottom-Up identification where each sibling-group merge is accepted
    iff it does not reduce similarity to the truth."""
    current: dict[int, frozenset] = {
        vid: tree.vertex(vid).coords for vid in tree.leaves()
    }

    def as_partition(state: dict[int, frozenset]) -> Partition:
        return Partition(
            [Patch(k, cs) for k, cs in enumerate(sorted(state.values(), key=min))],
            tree.shape,
        )

    def post_order(vid: int) -> list[int]:
        out = []
        for c in tree.vertex(vid).children:
            out.extend(post_order(c))
        out.append(vid)
        return out

    score = similarity(as_partition(current), truth).ari
    for vid in post_order(tree.root):
        vertex = tree.vertex(vid)
        if vertex.is_leaf:
            continue
        if not all(c in current for c in vertex.children):
            continue
        candidate = {k: v for k, v in current.items() if k not in vertex.children}
        candidate[vid] = vertex.coords
        cand_score = similarity(as_partition(candidate), truth).ari
        if cand_score >= score:
            current = candidate
            score = cand_score
    return as_partition(current)


def _greedy_merge_to_truth(parts: Partition, truth: Partition) -> list[tuple[Partition, float]]:
    """Merge chain: at each step apply the pair merge maximising ARI to the
    truth, recording every iteration down to a single patch."""
    current = parts
    chain = [(current, similarity(current, truth).ari)]
    while len(current) > 1:
        ids = sorted(p.id for p in current)
        best = None
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                merged_coords = current.patch(a).coords | current.patch(b).coords
                patches = [Patch(a, merged_coords)] + [
                    p for p in current if p.id not in (a, b)
                ]
                cand = Partition(patches, current.shape)
                s = similarity(cand, truth).ari
                if best is None or s > best[0]:
                    best = (s, a, b, cand)
        current = best[3]
        chain.append((current, best[0]))
    return chain


def oracle_authenticate(parts: Partition, truth: Partition) -> Partition:
    """Greedy similarity-guided merging; returns the best iteration of the
    chain (ties resolve to the most merged partition)."""
    chain = _greedy_merge_to_truth(parts, truth)
    best = chain[0]
    for entry in chain[1:]:
        if entry[1] >= best[1]:
            best = entry
    return best[0]


def optimal_merge(detected: Partition, truth: Partition) -> tuple[Partition, SimilarityScore]:
    """Best merged version of a detected partition under truth guidance."""
    merged = oracle_authenticate(detected, truth)
    return merged, similarity(merged, truth)


# ---------------------------------------------------------------------------
# benchmark harness


@dataclass(frozen=True)
class BenchmarkVariant:
    """A named pipeline variation to benchmark."""

    name: str
    tree: TreeKind | None = None
    identify: IdentifyKind | None = None
    oracle: bool = False

    def apply(self, config: PipelineConfig) -> PipelineConfig:
        cfg = config
        if self.tree is not None:
            cfg = replace(cfg, tree=self.tree)
        if self.identify is not None:
            cfg = replace(cfg, identify=self.identify)
        return cfg


STANDARD_VARIANTS = {
    "top_down": BenchmarkVariant("top_down", identify=IdentifyKind.TOP_DOWN),
    "bottom_up": BenchmarkVariant("bottom_up", identify=IdentifyKind.BOTTOM_UP),
    "binary_oracle": BenchmarkVariant("binary_oracle", tree=TreeKind.BINARY, oracle=True),
    "quad_oracle": BenchmarkVariant("quad_oracle", tree=TreeKind.QUAD, oracle=True),
}


def parse_variants(tokens: Iterable[str]) -> list[BenchmarkVariant]:
    out = []
    for tok in tokens:
        tok = tok.strip()
        if tok not in STANDARD_VARIANTS:
            raise ConfigError(
                f"unknown variant {tok!r}; choose from {sorted(STANDARD_VARIANTS)}"
            )
        out.append(STANDARD_VARIANTS[tok])
    if not out:
        raise ConfigError("variant list must be nonempty")
    return out


@dataclass(frozen=True)
class TrialRecord:
    trial_index: int
    variant: str
    seed: int
    rows: int
    cols: int
    n_plots: int
    separation_bf: float
    m_identified: int | None = None
    m_cycle1: int | None = None
    m_cycle2: int | None = None
    m_authenticated: int | None = None
    m_final: int | None = None
    ari_identified: float | None = None
    ari_cycle1: float | None = None
    ari_cycle2: float | None = None
    ari_authenticated: float | None = None
    ari_final: float | None = None
    jaccard_final: float | None = None
    ari_optimal: float | None = None
    flagged: bool | None = None
    error: str | None = None


CSV_COLUMNS = [
    "trial_index", "variant", "seed", "rows", "cols", "n_plots",
    "separation_bf", "m_identified", "m_cycle1", "m_cycle2",
    "m_authenticated", "m_final", "ari_identified", "ari_cycle1",
    "ari_cycle2", "ari_authenticated", "ari_final", "jaccard_final",
    "ari_optimal", "flagged", "error",
]


@dataclass(frozen=True)
class BenchmarkSummary:
    records: tuple[TrialRecord, ...]
    aggregates: dict
    #: wall-clock seconds aligned with records; non-deterministic, kept out
    #: of the primary CSV
    timings: tuple[float, ...]

    def to_csv(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        for r in self.records:
            cells = []
            for col in CSV_COLUMNS:
                v = getattr(r, col)
                if v is None:
                    cells.append("")
                elif isinstance(v, float):
                    cells.append(repr(v))
                else:
                    cells.append(str(v))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def _run_real_variant(sim: SimTrial, index: int, variant: BenchmarkVariant,
                      config: PipelineConfig) -> TrialRecord:
    cfg = variant.apply(config)
    base = dict(
        trial_index=index, variant=variant.name, seed=sim.seed,
        rows=sim.trial.shape.n_rows, cols=sim.trial.shape.n_cols,
        n_plots=len(sim.trial.shape.present), separation_bf=sim.separation_bf,
    )
    try:
        report: QcReport = detect(sim.trial, cfg)
    except GridPatchError as exc:
        return TrialRecord(**base, error=f"{type(exc).__name__}: {exc}")
    truth = sim.oracle_partition

    def ari_of(stage: str) -> float:
        return similarity(report.stages[stage].pms.partition, truth).ari

    final_part = report.final().partition
    final_sim = similarity(final_part, truth)
    _, opt = optimal_merge(final_part, truth)
    return TrialRecord(
        **base,
        m_identified=report.stages["identified"].m,
        m_cycle1=report.stages["cycle1"].m,
        m_cycle2=report.stages["cycle2"].m,
        m_final=report.m,
        ari_identified=ari_of("identified"),
        ari_cycle1=ari_of("cycle1"),
        ari_cycle2=ari_of("cycle2"),
        ari_final=final_sim.ari,
        jaccard_final=final_sim.best_match_jaccard,
        ari_optimal=opt.ari,
        flagged=report.flagged,
    )


def _run_oracle_variant(sim: SimTrial, index: int, variant: BenchmarkVariant,
                        config: PipelineConfig) -> TrialRecord:
    cfg = variant.apply(config)
    base = dict(
        trial_index=index, variant=variant.name, seed=sim.seed,
        rows=sim.trial.shape.n_rows, cols=sim.trial.shape.n_cols,
        n_plots=len(sim.trial.shape.present), separation_bf=sim.separation_bf,
    )
    truth = sim.oracle_partition
    try:
        cache = FitCache(sim.trial, cfg.cv_folds, cfg.seed)
        tree = build_tree(sim.trial, cfg, cache)
        identified = oracle_bottom_up(tree, truth)
        authenticated = oracle_authenticate(identified, truth)
        models = {
            p.id: cache.select_scored(p.coords, cfg.candidates, cfg.score)[0]
            for p in authenticated
        }
        pms = PatchModelSet(authenticated, models)
        verified = verify(sim.trial, pms, VerifyStage.CYCLE2, cfg, cache)
    except GridPatchError as exc:
        return TrialRecord(**base, error=f"{type(exc).__name__}: {exc}")
    final_part = verified.partition
    final_sim = similarity(final_part, truth)
    return TrialRecord(
        **base,
        m_identified=len(identified),
        m_authenticated=len(authenticated),
        m_final=len(final_part),
        ari_identified=similarity(identified, truth).ari,
        ari_authenticated=similarity(authenticated, truth).ari,
        ari_final=final_sim.ari,
        jaccard_final=final_sim.best_match_jaccard,
        flagged=len(final_part) > 1,
    )


def _run_cell(args) -> tuple[TrialRecord, float]:
    sim, index, variant, config = args
    started = time.perf_counter()
    if variant.oracle:
        rec = _run_oracle_variant(sim, index, variant, config)
    else:
        rec = _run_real_variant(sim, index, variant, config)
    return rec, time.perf_counter() - started


def _limit_worker_threads():
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1)
    except ImportError:
        pass


def run_benchmark(
    trials: Sequence[SimTrial],
    config: PipelineConfig,
    variants: Sequence[BenchmarkVariant],
    jobs: int = 1,
) -> BenchmarkSummary:
    """Run each variant over each trial and aggregate.

    Rows are ordered (trial, variant) regardless of ``jobs``; per-trial
    failures are recorded in the row, not raised.
    """
    if not trials:
        raise ConfigError("trial list must be nonempty")
    if not variants:
        raise ConfigError("variant list must be nonempty")
    cells = [
        (sim, idx, variant, config)
        for idx, sim in enumerate(trials)
        for variant in variants
    ]
    if jobs > 1:
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=_limit_worker_threads
        ) as pool:
            results = list(pool.map(_run_cell, cells, chunksize=1))
    else:
        results = [_run_cell(c) for c in cells]
    records = tuple(r for r, _ in results)
    timings = tuple(t for _, t in results)
    return BenchmarkSummary(records, _aggregate(records, variants), timings)


def _quantiles(values: list[float]) -> dict:
    if not values:
        return {}
    arr = np.array(values)
    return {
        "min": float(arr.min()),
        "q25": float(np.quantile(arr, 0.25)),
        "median": float(np.median(arr)),
        "q75": float(np.quantile(arr, 0.75)),
        "max": float(arr.max()),
        "mean": float(arr.mean()),
    }


def _aggregate(records: tuple[TrialRecord, ...], variants) -> dict:
    out = {}
    for variant in variants:
        rows = [r for r in records if r.variant == variant.name]
        ok = [r for r in rows if r.error is None]
        hist: dict[str, int] = {}
        for r in ok:
            hist[str(r.m_final)] = hist.get(str(r.m_final), 0) + 1
        out[variant.name] = {
            "trials": len(rows),
            "errors": len(rows) - len(ok),
            "m_final_hist": dict(sorted(hist.items())),
            "m_identified": _quantiles([r.m_identified for r in ok if r.m_identified is not None]),
            "ari_final": _quantiles([r.ari_final for r in ok if r.ari_final is not None]),
            "ari_optimal": _quantiles([r.ari_optimal for r in ok if r.ari_optimal is not None]),
            "flag_rate": (
                float(np.mean([bool(r.flagged) for r in ok])) if ok else None
            ),
        }
    return out
