from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hclab import microgeometry as mg


def test_central_block_volume():
    cell = mg.builtin_cell("block4")
    assert cell.vol_soft == Fraction(1, 4)
    assert cell.vol_stiff == Fraction(3, 4)
    assert cell.vol_soft + cell.vol_stiff == 1


def test_full_column_disconnects_2d():
    mask = np.zeros((4, 4), dtype=bool)
    mask[:, 1] = True
    with pytest.raises(mg.DisconnectedMatrix):
        mg.build_unit_cell(2, 4, mask)


def test_fiber_3d_accepted():
    # a full-height soft column leaves the 3d complement connected
    cell = mg.builtin_cell("fiber3d")
    assert cell.dim == 3
    assert cell.vol_soft == Fraction(1, 4)


def test_all_soft_rejected_all_stiff_degenerate():
    with pytest.raises(mg.EmptyPhase):
        mg.build_unit_cell(2, 4, np.ones((4, 4), dtype=bool))
    cell = mg.build_unit_cell(2, 4, np.zeros((4, 4), dtype=bool))
    assert cell.degenerate


def test_bad_mask_shape():
    with pytest.raises(mg.GeometryError):
        mg.build_unit_cell(2, 4, np.zeros((4, 3), dtype=bool))
    with pytest.raises(mg.GeometryError):
        mg.build_unit_cell(4, 4, np.zeros((4, 4, 4, 4), dtype=bool))


def test_mask_file_roundtrip(tmp_path):
    for name in ("block4", "fiber3d"):
        cell = mg.builtin_cell(name)
        path = tmp_path / f"{name}.mask"
        mg.save_cell_mask(path, cell)
        loaded = mg.load_cell_mask(path)
        assert loaded.dim == cell.dim
        assert np.array_equal(loaded.soft_mask, cell.soft_mask)


def _admitted_by_enumeration(cell, n, strip):
    """Independent oracle: test the distance predicate on a fine sample of the
    soft set of every cell (distance function is min over coordinates)."""
    m = cell.resolution
    admitted = []
    pts = []
    for idx in np.argwhere(cell.soft_mask):
        for corner in np.ndindex((2,) * cell.dim):
            pts.append((idx + np.array(corner)) / m)
    pts = np.unique(np.array(pts), axis=0)
    for t in np.ndindex((n,) * cell.dim):
        x = (np.asarray(t)[None, :] + pts) / n
        dist = np.minimum(x, 1.0 - x).min()
        if dist > strip / n:
            admitted.append(tuple(t))
    return admitted


def test_translation_set_matches_enumeration_oracle():
    cell = mg.builtin_cell("block4")
    domain = mg.build_micro_domain(cell, 4, strip=0.5)
    oracle = _admitted_by_enumeration(cell, 4, 0.5)
    assert sorted(domain.translations) == sorted(oracle)
    assert len(domain.translations) == 4  # the 2x2 interior cells


def test_no_inclusions_when_strip_too_wide():
    cell = mg.builtin_cell("block4")
    with pytest.raises(mg.NoInclusions):
        mg.build_micro_domain(cell, 2, strip=2.0)


def test_soft_pixel_count_consistency():
    cell = mg.builtin_cell("block4")
    domain = mg.build_micro_domain(cell, 6, strip=0.5)
    count = int(domain.soft_field.sum())
    assert count == len(domain.translations) * cell.soft_pixel_count


def test_exact_soft_measure():
    cell = mg.builtin_cell("block4")
    for n in (4, 8, 16):
        domain = mg.build_micro_domain(cell, n, strip=0.5)
        # independent rational oracle from the global pixel count
        pixels = Fraction(int(domain.soft_field.sum()), domain.n_el**2)
        assert domain.measure_soft() == pixels
        assert domain.measure_soft() == len(domain.translations) * Fraction(1, n**2) * cell.vol_soft


def test_hat_cells_measure_order_eps():
    cell = mg.builtin_cell("block4")
    ratios = []
    for n in (4, 8, 16):
        domain = mg.build_micro_domain(cell, n, strip=0.5)
        ratios.append(float(domain.measure_outside_hat()) * n)
    # measure(Omega \ Omega_hat) <= C eps with C stable across the sweep
    assert max(ratios) <= 2.0 * min(ratios)


def test_phase_indicator_basics():
    cell = mg.builtin_cell("block4")
    domain = mg.build_micro_domain(cell, 4, strip=0.5)
    # within the boundary strip everything is stiff
    assert mg.phase_indicator(domain, 1, [0.01, 0.5]) == 1
    assert mg.phase_indicator(domain, 0, [0.01, 0.5]) == 0
    # center of an admitted inclusion pixel
    assert mg.phase_indicator(domain, 0, [0.375, 0.375]) == 1
    with pytest.raises(mg.OutOfDomain):
        mg.phase_indicator(domain, 0, [1.5, 0.5])
    with pytest.raises(mg.GeometryError):
        mg.phase_indicator(domain, 2, [0.5, 0.5])


@settings(max_examples=30, derandomize=True)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_indicators_partition(x0, x1):
    cell = mg.builtin_cell("block4")
    domain = mg.build_micro_domain(cell, 4, strip=0.5)
    p = [x0, x1]
    assert mg.phase_indicator(domain, 0, p) + mg.phase_indicator(domain, 1, p) == 1


@settings(max_examples=30, derandomize=True)
@given(st.floats(0.001, 0.999), st.floats(0.001, 0.999))
def test_periodicity_in_admitted_cells(x0, x1):
    """chi0 equals the unit-cell mask lookup of the rescaled coordinate."""
    cell = mg.builtin_cell("block4")
    domain = mg.build_micro_domain(cell, 4, strip=0.5)
    p = np.array([x0, x1])
    t = tuple(np.minimum((p * 4).astype(int), 3))
    if t not in domain.translations:
        return
    z = p * 4 - np.asarray(t)
    pix = tuple(np.minimum((z * cell.resolution).astype(int), cell.resolution - 1))
    assert mg.phase_indicator(domain, 0, p) == int(cell.soft_mask[pix])


def test_cell_integral_of_indicator():
    """Sum of chi0 times pixel volume over one admitted cell = eps^d vol_soft."""
    cell = mg.builtin_cell("block4")
    domain = mg.build_micro_domain(cell, 4, strip=0.5)
    t = domain.translations[0]
    m, n = cell.resolution, 4
    total = Fraction(0)
    for p in np.ndindex((m, m)):
        x = (np.asarray(t) + (np.asarray(p) + 0.5) / m) / n
        total += mg.phase_indicator(domain, 0, x) * Fraction(1, (n * m) ** 2)
    assert total == Fraction(1, n**2) * cell.vol_soft
