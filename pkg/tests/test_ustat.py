import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quasiu.ustat import (PairObservation, between_projection, kernel_matrix, kernel_phi,
                          projection_variance, u_between, u_within, within_projection)

from _builders import brute_between, brute_within, cell_members, make_dataset, random_dataset


def test_kernel_examples():
    assert kernel_phi(PairObservation(8.0, 7.0, 620, 580)) == -1
    assert kernel_phi(PairObservation(7.0, 7.0, 620, 580)) == 0
    assert kernel_phi(PairObservation(8.0, 7.0, 580, 620)) == 1
    assert kernel_phi(PairObservation(8.0, 7.0, 580, 620, took_j=False)) == 0


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 900), st.floats(0, 900))
def test_kernel_symmetric(yi, yj, ei, ej):
    assert kernel_phi(PairObservation(yi, yj, ei, ej)) == kernel_phi(PairObservation(yj, yi, ej, ei))


def test_kernel_matrix_symmetric_zero_diagonal():
    rng = np.random.default_rng(1)
    K = kernel_matrix(rng.integers(0, 5, 9), rng.integers(0, 5, 9))
    assert np.array_equal(K, K.T)
    assert not K.diagonal().any()


def _one_group(points, group="1"):
    rows = [(f"s{i}", 1, (group,), e) for i, (_, e) in enumerate(points)]
    grades = [(f"s{i}", "L", y) for i, (y, _) in enumerate(points)]
    return make_dataset(rows, grades)


def test_u_within_examples():
    assert u_within(_one_group([(8, 620), (7, 580)]), 1, 0, "L").u_value == -1
    assert u_within(_one_group([(8, 600), (7, 610), (6, 620)]), 1, 0, "L").u_value == 1
    assert u_within(_one_group([(5, 600), (5, 610), (5, 620)]), 1, 0, "L").u_value == 0


def test_u_within_degenerate_flagged():
    u = u_within(_one_group([(8, 620)]), 1, 0, "L")
    assert u.degenerate and u.u_value is None


def test_u_between_examples():
    ds = make_dataset([("a", 1, ("1",), 620), ("b", 1, ("2",), 580)], [("a", "L", 8), ("b", "L", 7)])
    assert u_between(ds, 1, 0, 1, "L").u_value == -1
    # 2x2 with one tie: kernels (a,c) tie, (a,d) -1, (b,c) +1, (b,d) -1
    rows = [("a", 1, ("1",), 600), ("b", 1, ("1",), 500), ("c", 1, ("2",), 550), ("d", 1, ("2",), 450)]
    grades = [("a", "L", 7), ("b", "L", 8), ("c", "L", 7), ("d", "L", 6)]
    ub = u_between(make_dataset(rows, grades), 1, 0, 1, "L")
    assert ub.kernel_sum == -1 and ub.pair_count == 4
    assert ub.u_value == (0 - 1 + 1 - 1) / 4


def test_u_between_copy_of_group():
    pts = [(8, 600), (7, 640), (5, 610)]
    rows = [(f"g{i}", 1, ("1",), e) for i, (_, e) in enumerate(pts)] + \
           [(f"h{i}", 1, ("2",), e) for i, (_, e) in enumerate(pts)]
    grades = [(f"g{i}", "L", y) for i, (y, _) in enumerate(pts)] + \
             [(f"h{i}", "L", y) for i, (y, _) in enumerate(pts)]
    ds = make_dataset(rows, grades)
    ub, uw = u_between(ds, 1, 0, 1, "L"), u_within(ds, 1, 0, "L")
    # cross pairs = each within pair twice plus three self-copies (kernel 0)
    assert ub.kernel_sum == 2 * uw.kernel_sum
    assert ub.pair_count == 9


def test_oracle_equivalence_small_cells():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 200:
        ds = random_dataset(rng, G=2, subjects=2, n_range=(0, 4), grade_levels=6, ees_levels=6,
                            take_prob=0.8)
        for c in ds.cells:
            m = cell_members(ds, c.year, c.subject)
            for g in range(2):
                u = u_within(ds, c.year, g, c.subject)
                assert (u.kernel_sum, u.pair_count) == brute_within(m.get(g, []))
            ub = u_between(ds, c.year, 0, 1, c.subject)
            assert (ub.kernel_sum, ub.pair_count) == brute_between(m.get(0, []), m.get(1, []))
            checked += 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_u_bounds_and_rank_invariance(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, G=2, subjects=1, grade_levels=5, ees_levels=7)
    c = ds.cells[0]
    before = [u_within(ds, c.year, g, c.subject) for g in (0, 1)] + [u_between(ds, c.year, 0, 1, c.subject)]
    for u in before:
        if u.u_value is not None:
            assert -1 <= u.u_value <= 1
    # strictly increasing map applied to all grades and EES
    rows = [(s.student_id, s.entry_year, s.group_labels, np.exp(s.ees_discrete / 3)) for s in ds.students]
    grades = [(g.student_id, g.subject_id, round(np.sqrt(g.grade_raw) * 3, 1)) for g in ds.grades]
    ds2 = make_dataset(rows, grades)
    after = [u_within(ds2, c.year, g, c.subject) for g in (0, 1)] + [u_between(ds2, c.year, 0, 1, c.subject)]
    assert [u.kernel_sum for u in before] == [u.kernel_sum for u in after]


def test_projection_all_ties_zero():
    pv = within_projection(np.array([5, 5, 5]), np.array([1, 2, 3]))
    assert pv.xi1 == 0
    pb = between_projection(np.array([5, 5]), np.array([1, 2]), np.array([5, 5]), np.array([3, 4]))
    assert pb.xi10 == 0 and pb.xi01 == 0 and pb.gamma_n == 0


def test_projection_three_students_by_hand():
    y, e = np.array([8, 7, 6]), np.array([600, 610, 605])
    # kernels: (0,1)=+1, (0,2)=+1, (1,2)=-1 ; per-student means over n-1 partners
    psi = np.array([(1 + 1) / 2, (1 - 1) / 2, (1 - 1) / 2])
    pv = within_projection(y, e)
    assert pv.xi1 == pytest.approx(np.mean((psi - psi.mean()) ** 2), abs=1e-15)


def test_projection_gamma_equal_sizes():
    rng = np.random.default_rng(5)
    yg, eg, yh, eh = (rng.integers(0, 10, 6) for _ in range(4))
    pb = between_projection(yg, eg, yh, eh)
    assert pb.gamma_n == pytest.approx((pb.xi10 + pb.xi01) / 6)


def test_projection_dispatch_and_degenerate():
    ds = _one_group([(8, 620)])
    assert projection_variance(ds, 1, "L", 0).degenerate
