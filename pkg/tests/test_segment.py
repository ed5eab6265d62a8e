import numpy as np
import pytest

from gridpatch.errors import InsufficientDataError
from gridpatch.grf import (
    FitCache,
    IID,
    ScoreKind,
    all_families,
)
from gridpatch.grid import GridShape, Partition, Patch, TrialGrid
from gridpatch.segment import (
    AuthMode,
    PatchModelSet,
    PipelineConfig,
    VerifyStage,
    authenticate,
    authenticate_final,
    authentication_posteriors,
    build_tree,
    detect,
    identify_bottom_up,
    identify_top_down,
    report_to_dict,
    switch_posteriors,
    verify,
)
from gridpatch.tree import SplitConstraints, build_binary_tree

FAMS = all_families(nugget=False)
CFG = PipelineConfig(score=ScoreKind.CV_NLL, tree_score=ScoreKind.BIC, candidates=FAMS)
CFG_IID = PipelineConfig(score=ScoreKind.CV_NLL, tree_score=ScoreKind.BIC, candidates=(IID,))


def iid_trial(shape, mu_of, seed):
    rng = np.random.default_rng(seed)
    values = {c: mu_of(c) + rng.standard_normal() for c in sorted(shape.present)}
    return TrialGrid(shape, values)


def make_pms(trial, coord_sets, config=CFG):
    cache = FitCache(trial, config.cv_folds, config.seed)
    patches = [Patch(k, frozenset(cs)) for k, cs in enumerate(coord_sets)]
    models = {
        p.id: cache.select_scored(p.coords, config.candidates, config.score)[0]
        for p in patches
    }
    return PatchModelSet(Partition(patches, trial.shape), models), cache


class TestIdentify:
    def test_trivial_tree_gives_one_patch(self):
        shape = GridShape.full(2, 4)
        trial = iid_trial(shape, lambda c: 0.0, 1)
        tree = build_binary_tree(trial, ScoreKind.BIC, (IID,), SplitConstraints(min_plots=6))
        assert tree.leaves() == [tree.root]
        pms = identify_top_down(tree, trial, CFG_IID)
        assert len(pms) == 1

    def test_mean_break_recovered_at_tree_split(self):
        shape = GridShape.full(4, 12)
        trial = iid_trial(shape, lambda c: 0.0 if c[1] < 6 else 10.0, 5)
        tree = build_binary_tree(trial, ScoreKind.BIC, (IID,), SplitConstraints(min_plots=6))
        pms = identify_top_down(tree, trial, CFG_IID)
        assert len(pms) >= 2
        # the identified boundary separates the two halves exactly
        left = frozenset(c for c in shape.present if c[1] < 6)
        union_left = frozenset().union(
            *(p.coords for p in pms.partition if p.coords <= left)
        )
        assert union_left == left

    def test_bottom_up_counts_at_least_top_down(self):
        shape = GridShape.full(6, 8)
        for seed in range(4):
            trial = iid_trial(shape, lambda c: 0.4 * (c[1] >= 4), 20 + seed)
            cache = FitCache(trial, CFG.cv_folds, CFG.seed)
            tree = build_tree(trial, CFG, cache)
            td = identify_top_down(tree, trial, CFG, cache)
            bu = identify_bottom_up(tree, trial, CFG, cache)
            assert len(bu) >= len(td)

    def test_stationary_identifies_single_patch(self):
        shape = GridShape.full(6, 8)
        trial = iid_trial(shape, lambda c: 0.0, 104)
        cache = FitCache(trial, CFG.cv_folds, CFG.seed)
        tree = build_tree(trial, CFG, cache)
        pms = identify_top_down(tree, trial, CFG, cache)
        assert len(pms) == 1


class TestAuthenticationPosteriors:
    def test_singleton_candidate_gets_posterior_one(self):
        shape = GridShape.full(2, 6)
        trial = iid_trial(shape, lambda c: 0.0, 3)
        pms, cache = make_pms(
            trial,
            [
                {(i, j) for i in range(2) for j in range(3)},
                {(i, j) for i in range(2) for j in range(3, 6)},
            ],
            CFG_IID,
        )
        cands = authentication_posteriors(trial, pms, AuthMode.LOCAL, CFG_IID, cache)
        assert len(cands) == 2
        assert all(c.posterior == pytest.approx(1.0) for c in cands)

    def test_twin_patches_attract(self):
        shape = GridShape.full(3, 9)
        trial = iid_trial(shape, lambda c: 25.0 if c[1] >= 6 else 0.0, 9)
        thirds = [
            {(i, j) for i in range(3) for j in range(3)},
            {(i, j) for i in range(3) for j in range(3, 6)},
            {(i, j) for i in range(3) for j in range(6, 9)},
        ]
        pms, cache = make_pms(trial, thirds, CFG_IID)
        cands = authentication_posteriors(trial, pms, AuthMode.GLOBAL, CFG_IID, cache)
        best_for_0 = max((c for c in cands if c.p == 0), key=lambda c: c.posterior)
        best_for_1 = max((c for c in cands if c.p == 1), key=lambda c: c.posterior)
        assert best_for_0.q == 1
        assert best_for_1.q == 0

    def test_diagonal_contact_is_not_local(self):
        present = frozenset({(0, 0), (0, 1), (1, 2), (1, 3)})
        shape = GridShape(2, 4, present)
        rng = np.random.default_rng(0)
        trial = TrialGrid(shape, {c: float(v) for c, v in zip(sorted(present), rng.normal(size=4))})
        pms, cache = make_pms(trial, [{(0, 0), (0, 1)}, {(1, 2), (1, 3)}], CFG_IID)
        cands = authentication_posteriors(trial, pms, AuthMode.LOCAL, CFG_IID, cache)
        assert cands == []

    def test_requires_two_patches(self):
        shape = GridShape.full(2, 4)
        trial = iid_trial(shape, lambda c: 0.0, 4)
        pms, cache = make_pms(trial, [set(shape.present)], CFG_IID)
        with pytest.raises(InsufficientDataError):
            authentication_posteriors(trial, pms, AuthMode.GLOBAL, CFG_IID, cache)


class TestAuthenticate:
    def test_single_patch_unchanged(self):
        shape = GridShape.full(2, 6)
        trial = iid_trial(shape, lambda c: 0.0, 7)
        pms, cache = make_pms(trial, [set(shape.present)], CFG_IID)
        out = authenticate(trial, pms, AuthMode.GLOBAL, CFG_IID, cache)
        assert out.partition.coord_key() == pms.partition.coord_key()

    def test_same_field_halves_merge(self):
        shape = GridShape.full(4, 8)
        trial = iid_trial(shape, lambda c: 0.0, 11)
        halves = [
            {(i, j) for i in range(4) for j in range(4)},
            {(i, j) for i in range(4) for j in range(4, 8)},
        ]
        pms, cache = make_pms(trial, halves, CFG_IID)
        out = authenticate(trial, pms, AuthMode.GLOBAL, CFG_IID, cache)
        assert len(out) == 1

    def test_twins_merge_outlier_survives(self):
        shape = GridShape.full(3, 9)
        trial = iid_trial(shape, lambda c: 25.0 if c[1] >= 6 else 0.0, 13)
        thirds = [
            {(i, j) for i in range(3) for j in range(3)},
            {(i, j) for i in range(3) for j in range(3, 6)},
            {(i, j) for i in range(3) for j in range(6, 9)},
        ]
        pms, cache = make_pms(trial, thirds, CFG_IID)
        out = authenticate(trial, pms, AuthMode.GLOBAL, CFG_IID, cache)
        assert len(out) == 2
        sizes = sorted(len(p.coords) for p in out.partition)
        assert sizes == [9, 18]

    def test_patch_count_never_increases(self):
        shape = GridShape.full(4, 8)
        trial = iid_trial(shape, lambda c: c[1] * 0.3, 17)
        quarters = [
            {(i, j) for i in range(4) for j in range(2 * k, 2 * k + 2)}
            for k in range(4)
        ]
        pms, cache = make_pms(trial, quarters, CFG_IID)
        out = authenticate(trial, pms, AuthMode.LOCAL, CFG_IID, cache)
        assert len(out) <= len(pms)


class TestAuthenticateFinal:
    def test_strong_separation_survives_decisive(self):
        shape = GridShape.full(4, 8)
        trial = iid_trial(shape, lambda c: 40.0 if c[1] >= 4 else 0.0, 19)
        halves = [
            {(i, j) for i in range(4) for j in range(4)},
            {(i, j) for i in range(4) for j in range(4, 8)},
        ]
        pms, cache = make_pms(trial, halves, CFG_IID)
        from gridpatch.grf import EvidenceLevel

        out = authenticate_final(trial, pms, EvidenceLevel.DECISIVE, CFG_IID, cache)
        assert len(out) == 2

    def test_identical_fields_merge_below_cutoff(self):
        shape = GridShape.full(4, 8)
        trial = iid_trial(shape, lambda c: 0.0, 23)
        halves = [
            {(i, j) for i in range(4) for j in range(4)},
            {(i, j) for i in range(4) for j in range(4, 8)},
        ]
        pms, cache = make_pms(trial, halves, CFG_IID)
        from gridpatch.grf import EvidenceLevel

        out = authenticate_final(trial, pms, EvidenceLevel.DECISIVE, CFG_IID, cache)
        assert len(out) == 1

    def test_monotone_in_threshold(self):
        from gridpatch.grf import EvidenceLevel

        shape = GridShape.full(4, 9)
        trial = iid_trial(shape, lambda c: 1.2 * (c[1] // 3), 29)
        thirds = [
            {(i, j) for i in range(4) for j in range(3 * k, 3 * k + 3)}
            for k in range(3)
        ]
        counts = []
        for level in EvidenceLevel:
            pms, cache = make_pms(trial, thirds, CFG_IID)
            out = authenticate_final(trial, pms, level, CFG_IID, cache)
            counts.append(len(out))
        assert counts == sorted(counts, reverse=True)


class TestSwitchPosteriors:
    def test_single_patch_has_no_candidates(self):
        shape = GridShape.full(3, 3)
        trial = iid_trial(shape, lambda c: 0.0, 31)
        pms, _ = make_pms(trial, [set(shape.present)], CFG_IID)
        assert switch_posteriors(trial, pms, CFG_IID) == []

    def test_interior_plots_have_no_candidates(self):
        shape = GridShape.full(3, 8)
        trial = iid_trial(shape, lambda c: 0.0, 37)
        halves = [
            {(i, j) for i in range(3) for j in range(4)},
            {(i, j) for i in range(3) for j in range(4, 8)},
        ]
        pms, _ = make_pms(trial, halves, CFG_IID)
        plots = {c.plot for c in switch_posteriors(trial, pms, CFG_IID)}
        assert all(p[1] in (3, 4) for p in plots)

    def test_misfit_border_plot_prefers_switch(self):
        shape = GridShape.full(3, 8)
        values = {}
        rng = np.random.default_rng(41)
        for c in sorted(shape.present):
            base = 0.0 if c[1] < 4 else 12.0
            values[c] = base + 0.1 * rng.standard_normal()
        # plot (1,3) belongs to the left patch but carries a right-side value
        values[(1, 3)] = 12.0
        trial = TrialGrid(shape, values)
        halves = [
            {(i, j) for i in range(3) for j in range(4)},
            {(i, j) for i in range(3) for j in range(4, 8)},
        ]
        pms, _ = make_pms(trial, halves, CFG_IID)
        cands = [c for c in switch_posteriors(trial, pms, CFG_IID) if c.plot == (1, 3)]
        assert cands
        best = max(cands, key=lambda c: c.gain)
        assert best.gain > 0
        assert best.to_patch == 1
        stay_posterior = 1.0 - sum(c.posterior for c in cands)
        assert best.posterior > stay_posterior


class TestVerify:
    def test_restores_misassigned_border_plot(self):
        shape = GridShape.full(3, 8)
        values = {}
        rng = np.random.default_rng(43)
        for c in sorted(shape.present):
            base = 0.0 if c[1] < 4 else 12.0
            values[c] = base + 0.1 * rng.standard_normal()
        values[(1, 3)] = 12.0
        trial = TrialGrid(shape, values)
        wrong = [
            {(i, j) for i in range(3) for j in range(4)},
            {(i, j) for i in range(3) for j in range(4, 8)},
        ]
        pms, cache = make_pms(trial, wrong, CFG_IID)
        out = verify(trial, pms, VerifyStage.CYCLE1, CFG_IID, cache)
        assert out.partition.patch_of((1, 3)) == 1

    def test_fixpoint_returns_identical_coords(self):
        shape = GridShape.full(3, 8)
        trial = iid_trial(shape, lambda c: 0.0 if c[1] < 4 else 30.0, 47)
        halves = [
            {(i, j) for i in range(3) for j in range(4)},
            {(i, j) for i in range(3) for j in range(4, 8)},
        ]
        pms, cache = make_pms(trial, halves, CFG_IID)
        out = verify(trial, pms, VerifyStage.CYCLE2, CFG_IID, cache)
        assert out.partition.coord_key() == pms.partition.coord_key()

    def test_small_subarea_rejected_in_cycle2(self):
        # a 6-plot patch cannot lose a plot in cycle 2 without dropping below
        # the minimum, whatever the values say
        shape = GridShape.full(2, 6)
        values = {c: 0.0 + 0.01 * (c[0] + c[1]) for c in sorted(shape.present)}
        values[(0, 2)] = 50.0  # would love to join the right patch
        values[(0, 3)] = 50.0
        trial = TrialGrid(shape, values)
        halves = [
            {(i, j) for i in range(2) for j in range(3)},
            {(i, j) for i in range(2) for j in range(3, 6)},
        ]
        pms, cache = make_pms(trial, halves, CFG_IID)
        out = verify(trial, pms, VerifyStage.CYCLE2, CFG_IID, cache)
        assert sorted(len(p.coords) for p in out.partition) == [6, 6]


class TestDetect:
    def test_two_block_trial_flagged(self):
        shape = GridShape.full(6, 10)
        trial = iid_trial(shape, lambda c: 0.0 if c[1] < 5 else 9.0, 54)
        report = detect(trial, CFG)
        assert report.m == 2
        assert report.flagged
        assert report.evidence > 100.0
        left = frozenset(c for c in shape.present if c[1] < 5)
        parts = {p.coords for p in report.final().partition}
        assert left in parts

    def test_stationary_trial_clean(self):
        shape = GridShape.full(6, 10)
        trial = iid_trial(shape, lambda c: 0.0, 59)
        report = detect(trial, CFG)
        assert report.m == 1
        assert not report.flagged
        assert report.evidence == pytest.approx(1.0)

    def test_too_small_trial_rejected(self):
        shape = GridShape.full(2, 4)
        trial = iid_trial(shape, lambda c: 0.0, 61)
        small = PipelineConfig(
            score=ScoreKind.CV_NLL,
            candidates=(IID,),
            min_plots_global=12,
        )
        with pytest.raises(InsufficientDataError):
            detect(trial, small)

    def test_deterministic_report(self):
        shape = GridShape.full(6, 10)
        trial = iid_trial(shape, lambda c: 0.0 if c[1] < 5 else 6.0, 67)
        a = report_to_dict(detect(trial, CFG))
        b = report_to_dict(detect(trial, CFG))
        assert a == b

    def test_every_stage_is_valid_partition(self):
        shape = GridShape.full(6, 10)
        trial = iid_trial(shape, lambda c: 0.5 * (c[1] >= 5), 71)
        report = detect(trial, CFG)
        for snap in report.stages.values():
            # Partition construction revalidates cover/disjointness
            Partition(list(snap.pms.partition), trial.shape)
        assert report.stages["cycle1"].m >= report.stages["cycle2"].m
