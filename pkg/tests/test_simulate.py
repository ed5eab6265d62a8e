import json

import numpy as np
import pytest

from gridpatch.errors import ConfigError, ParamError, SimulationError
from gridpatch.grf import (
    Correlation,
    GrfFamily,
    GrfParams,
    IID,
    ScoreKind,
    sample_values,
)
from gridpatch.grid import GridShape
from gridpatch.segment import PipelineConfig
from gridpatch.simulate import (
    ParamPrior,
    PriorConfig,
    lloyd_partition,
    load_priors,
    run_study,
    simulate_trial,
)

AR1R = GrfFamily(Correlation.AR1_ROWS)
FAST_CFG = PipelineConfig(score=ScoreKind.CV_NLL, tree_score=ScoreKind.BIC, candidates=(IID,))


def point_priors(mu, sigma=1.0, family=IID):
    return PriorConfig(
        mu=ParamPrior("point", (mu,)),
        sigma=ParamPrior("point", (sigma,)),
        rho_r=ParamPrior("point", (0.0,)),
        rho_c=ParamPrior("point", (0.0,)),
        phi=ParamPrior("point", (0.0,)),
        family_probs=((family, 1.0),),
    )


class TestLloyd:
    def test_k1_covers_everything(self):
        shape = GridShape.full(4, 5)
        part = lloyd_partition(shape, 1, seed=0)
        assert len(part) == 1
        assert part.patches[0].coords == shape.present

    def test_k3_partitions_full_grid(self):
        shape = GridShape.full(6, 6)
        for seed in range(5):
            part = lloyd_partition(shape, 3, seed=seed)
            assert len(part) == 3
            assert all(len(p.coords) > 0 for p in part)
            assert sum(len(p.coords) for p in part) == 36

    def test_line_split_from_extreme_seeds(self):
        # hand iteration: seeds 0 and 9 -> centroids 2 and 7 -> stable split
        # with five plots each side of the midpoint
        shape = GridShape.full(1, 10)
        part = lloyd_partition(shape, 2, seed=0, initial=[(0, 0), (0, 9)])
        sizes = sorted(len(p.coords) for p in part)
        assert sizes == [5, 5]
        assert part.patch_of((0, 4)) == part.patch_of((0, 0))
        assert part.patch_of((0, 5)) == part.patch_of((0, 9))

    def test_k_bounds(self):
        shape = GridShape.full(2, 2)
        with pytest.raises(ParamError):
            lloyd_partition(shape, 0, seed=1)
        with pytest.raises(ParamError):
            lloyd_partition(shape, 5, seed=1)

    def test_deterministic(self):
        shape = GridShape.full(5, 7)
        a = lloyd_partition(shape, 3, seed=9)
        b = lloyd_partition(shape, 3, seed=9)
        assert a.coord_key() == b.coord_key()


class TestSimulateTrial:
    def test_distinct_point_priors_pass_first_draw(self):
        shape = GridShape.full(5, 8)
        rng_priors = PriorConfig(
            mu=ParamPrior("uniform", (-6.0, 6.0)),
            sigma=ParamPrior("point", (1.0,)),
            rho_r=ParamPrior("point", (0.0,)),
            rho_c=ParamPrior("point", (0.0,)),
            phi=ParamPrior("point", (0.0,)),
            family_probs=((IID, 1.0),),
        )
        sim = simulate_trial(shape, rng_priors, seed=6, config=FAST_CFG)
        assert len(sim.true_partition) == 2
        assert all(len(p.coords) >= 8 for p in sim.true_partition)
        assert len(sim.oracle_partition) == 2
        assert sim.separation_bf > 0

    def test_identical_priors_exhaust_redraws(self):
        # under the penalized score, two same-distribution patches always
        # merge, so the distinctness filter can never pass
        shape = GridShape.full(5, 8)
        bic_cfg = PipelineConfig(score=ScoreKind.BIC, candidates=(IID,))
        with pytest.raises(SimulationError):
            simulate_trial(
                shape,
                point_priors(0.0),
                seed=2,
                config=bic_cfg,
                max_param_redraws=2,
                max_geometry_redraws=2,
            )

    def test_shape_too_small_for_two_patches(self):
        shape = GridShape.full(2, 5)
        with pytest.raises(SimulationError):
            simulate_trial(shape, point_priors(0.0), seed=1, config=FAST_CFG)


class TestRunStudy:
    def test_deterministic_rerun(self):
        shape = GridShape.full(5, 8)
        priors = PriorConfig(
            mu=ParamPrior("uniform", (-6.0, 6.0)),
            sigma=ParamPrior("point", (1.0,)),
            rho_r=ParamPrior("point", (0.0,)),
            rho_c=ParamPrior("point", (0.0,)),
            phi=ParamPrior("point", (0.0,)),
            family_probs=((IID, 1.0),),
        )
        a = run_study([shape], priors, 2, seed=3, config=FAST_CFG)
        b = run_study([shape], priors, 2, seed=3, config=FAST_CFG)
        assert [t.trial_csv() for t in a] == [t.trial_csv() for t in b]
        assert [t.truth_dict() for t in a] == [t.truth_dict() for t in b]

    def test_empty_shape_list(self):
        with pytest.raises(ConfigError):
            run_study([], PriorConfig(), 1, seed=0)

    def test_singleton(self):
        shape = GridShape.full(5, 8)
        priors = PriorConfig(
            mu=ParamPrior("uniform", (-9.0, 9.0)),
            sigma=ParamPrior("point", (1.0,)),
            rho_r=ParamPrior("point", (0.0,)),
            rho_c=ParamPrior("point", (0.0,)),
            phi=ParamPrior("point", (0.0,)),
            family_probs=((IID, 1.0),),
        )
        out = run_study([shape], priors, 1, seed=11, config=FAST_CFG)
        assert len(out) == 1


class TestSamplingStatistics:
    def test_iid_moments_within_three_se(self):
        shape = GridShape.full(40, 40)
        mu, s2 = 1.5, 2.0
        rng = np.random.default_rng(0)
        draw = sample_values(sorted(shape.present), IID, GrfParams(mu=mu, sigma2=s2), rng)
        x = np.array(list(draw.values()))
        n = x.size
        assert abs(x.mean() - mu) <= 3 * np.sqrt(s2 / n)
        # var of the sample variance for normal data: 2 sigma^4 / (n-1)
        assert abs(x.var() - s2) <= 3 * np.sqrt(2 * s2 * s2 / (n - 1))

    def test_row_lag1_correlation(self):
        shape = GridShape.full(50, 50)
        rho = 0.6
        rng = np.random.default_rng(1)
        draw = sample_values(
            sorted(shape.present), AR1R, GrfParams(mu=0.0, sigma2=1.0, rho_r=rho), rng
        )
        grid = np.array([[draw[(i, j)] for j in range(50)] for i in range(50)])
        a = grid[:-1, :].ravel()
        b = grid[1:, :].ravel()
        sample_rho = np.corrcoef(a, b)[0, 1]
        assert abs(sample_rho - rho) < 0.05

    def test_distinctness_filter_idempotent(self):
        from gridpatch.grf import FitCache
        from gridpatch.segment import AuthMode, PatchModelSet, authenticate

        shape = GridShape.full(5, 8)
        priors = PriorConfig(
            mu=ParamPrior("uniform", (-6.0, 6.0)),
            sigma=ParamPrior("point", (1.0,)),
            rho_r=ParamPrior("point", (0.0,)),
            rho_c=ParamPrior("point", (0.0,)),
            phi=ParamPrior("point", (0.0,)),
            family_probs=((IID, 1.0),),
        )
        sim = simulate_trial(shape, priors, seed=21, config=FAST_CFG)
        cache = FitCache(sim.trial, FAST_CFG.cv_folds, FAST_CFG.seed)
        pms = PatchModelSet(
            sim.true_partition,
            {
                p.id: cache.select_scored(p.coords, FAST_CFG.candidates, FAST_CFG.score)[0]
                for p in sim.true_partition
            },
        )
        kept = authenticate(sim.trial, pms, AuthMode.GLOBAL, FAST_CFG, cache)
        assert len(kept) == 2


class TestPriorsIO:
    def test_json_round_trip(self):
        priors = PriorConfig()
        doc = json.dumps(priors.to_json_dict())
        again = load_priors(doc)
        assert again.to_json_dict() == priors.to_json_dict()

    def test_family_probabilities_validated(self):
        with pytest.raises(ConfigError):
            PriorConfig(family_probs=((IID, 0.4),))

    def test_bad_file_rejected(self):
        with pytest.raises(ConfigError):
            load_priors("{not json")

    def test_prior_kinds(self):
        rng = np.random.default_rng(0)
        assert ParamPrior("point", (2.5,)).sample(rng) == 2.5
        assert 0 <= ParamPrior("beta", (2.0, 2.0, 0.5)).sample(rng) <= 0.5
        assert -1 <= ParamPrior("uniform", (-1.0, 1.0)).sample(rng) <= 1
        assert ParamPrior("lognormal", (0.0, 0.5)).sample(rng) > 0
        with pytest.raises(ConfigError):
            ParamPrior("cauchy", (0.0,)).sample(rng)
