import re

import numpy as np
import pytest

from gridpatch.grid import GridShape, Partition, Patch, TrialGrid
from gridpatch.render import svg_heatmap


def small_trial():
    return TrialGrid.from_array(np.array([[1.0, 2.0], [3.0, 4.0]]))


def halves_partition(shape):
    return Partition(
        [
            Patch(0, frozenset({(0, 0), (1, 0)})),
            Patch(1, frozenset({(0, 1), (1, 1)})),
        ],
        shape,
    )


def test_cell_count_matches_plots():
    svg = svg_heatmap(small_trial())
    # one background rect plus one per plot
    assert svg.count("<rect") == 1 + 4
    assert svg.startswith("<svg ")


def test_deterministic_bytes():
    assert svg_heatmap(small_trial()) == svg_heatmap(small_trial())


def test_two_patch_overlay_uses_two_colors():
    trial = small_trial()
    part = halves_partition(trial.shape)
    svg = svg_heatmap(trial, part)
    colors = set(re.findall(r'<line [^>]*stroke="(#[0-9a-f]{6})"', svg))
    assert len(colors) == 2


def test_partition_only_render():
    shape = GridShape.full(2, 2)
    svg = svg_heatmap(partition=halves_partition(shape))
    assert svg.count("<rect") == 1 + 4


def test_missing_plots_left_blank():
    trial = TrialGrid.from_array(np.array([[1.0, np.nan], [3.0, 4.0]]))
    svg = svg_heatmap(trial)
    assert svg.count("<rect") == 1 + 3


def test_requires_some_input():
    with pytest.raises(ValueError):
        svg_heatmap()
