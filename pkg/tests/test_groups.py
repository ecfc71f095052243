import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sovnet.groups import (ROT, FLIP, GroupElement, GroupGrid, GroupKindMismatch, act_on_point,
                           cayley_table, compose, from_matrix, identity, inverse, left_translate,
                           matrix_rep, parse_element, stabilizer)


def elements(kind):
    mirrors = st.integers(0, 1) if kind == "p4m" else st.just(0)
    return st.builds(lambda m, r, u, v: GroupElement(kind, m, r, (u, v)),
                     mirrors, st.integers(0, 3), st.integers(-6, 6), st.integers(-6, 6))


any_element = st.sampled_from(["p4", "p4m"]).flatmap(elements)


def test_quarter_turn_is_rot90():
    img = np.arange(25.0).reshape(5, 5)
    r1 = GroupElement("p4", 0, 1)
    assert np.array_equal(left_translate(img, r1, GroupGrid("p4", 5, 5), planar=True), np.rot90(img))


def test_mirror_flips_columns():
    img = np.arange(16.0).reshape(4, 4)
    m = GroupElement("p4m", 1, 0)
    assert np.array_equal(left_translate(img, m, GroupGrid("p4m", 4, 4), planar=True), img[:, ::-1])


def test_translation_shifts_with_zero_fill():
    img = np.arange(9.0).reshape(3, 3) + 1
    t = GroupElement("p4", 0, 0, (1, 0))
    out = left_translate(img, t, GroupGrid("p4", 3, 3), planar=True)
    assert np.array_equal(out[1:], img[:-1])
    assert np.all(out[0] == 0)


def test_identity_and_inverse_examples():
    e = identity("p4m")
    g = GroupElement("p4m", 1, 3, (2, -1))
    assert compose(g, e) == g and compose(e, g) == g
    assert compose(g, inverse(g)) == e
    r1 = GroupElement("p4", 0, 1)
    assert compose(r1, compose(r1, compose(r1, r1))) == identity("p4")


def test_kind_mismatch():
    with pytest.raises(GroupKindMismatch):
        compose(GroupElement("p4"), GroupElement("p4m"))
    with pytest.raises(ValueError):
        GroupElement("p4", 1, 0)


@pytest.mark.parametrize("kind", ["p4", "p4m"])
def test_cayley_table_matches_matrices(kind):
    els = stabilizer(kind)
    table = cayley_table(kind)
    for a, b in itertools.product(els, els):
        prod = matrix_rep(a)[:2, :2] @ matrix_rep(b)[:2, :2]
        assert np.array_equal(els[table[a.slot, b.slot]].linear, prod)
    # each row and column is a permutation (Latin square)
    for row in table:
        assert sorted(row) == list(range(len(els)))
    for col in table.T:
        assert sorted(col) == list(range(len(els)))


def test_reflection_relation():
    # F R F = R^-1
    assert np.array_equal(FLIP @ ROT @ FLIP, np.linalg.matrix_power(ROT, 3))


@settings(max_examples=300, deadline=None)
@given(any_element, st.data())
def test_homomorphism_and_inverse(a, data):
    b = data.draw(elements(a.kind))
    c = data.draw(elements(a.kind))
    assert np.array_equal(matrix_rep(compose(a, b)), matrix_rep(a) @ matrix_rep(b))
    assert compose(compose(a, b), c) == compose(a, compose(b, c))
    assert compose(a, inverse(a)) == identity(a.kind)
    assert compose(inverse(a), a) == identity(a.kind)
    assert from_matrix(matrix_rep(a), a.kind) == a


@settings(max_examples=200, deadline=None)
@given(any_element, st.tuples(st.integers(-9, 9), st.integers(-9, 9)))
def test_action_is_compatible(a, p):
    b = GroupElement(a.kind, 0, 1, (1, 2))
    assert act_on_point(compose(a, b), p) == act_on_point(a, act_on_point(b, p))


@pytest.mark.parametrize("kind,n", [("p4", 5), ("p4", 6), ("p4m", 5), ("p4m", 4)])
def test_left_translate_is_an_action(kind, n):
    rng = np.random.default_rng(0)
    grid = GroupGrid(kind, n, n)
    f = rng.normal(size=(2, grid.stabilizer_size, n, n))
    for a, b in itertools.product(stabilizer(kind), repeat=2):
        lhs = left_translate(f, compose(a, b), grid)
        rhs = left_translate(left_translate(f, b, grid), a, grid)
        assert np.array_equal(lhs, rhs)


def test_parse_element():
    assert parse_element("id") == identity("p4")
    assert parse_element("r3") == GroupElement("p4", 0, 3)
    assert parse_element("mr1", "p4m") == GroupElement("p4m", 1, 1)
    assert parse_element("m", "p4m") == GroupElement("p4m", 1, 0)
    assert parse_element("r1t2,-1") == GroupElement("p4", 0, 1, (2, -1))
    with pytest.raises(ValueError):
        parse_element("q2")
    with pytest.raises(ValueError):
        parse_element("m", "p4")
