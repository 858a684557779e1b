"""Weighted-difference merging and exact Shapley attribution."""

import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vtcomp.merge import (
    MergeShapeError,
    coalition_values,
    evaluate_merge_schemes,
    merge_eq4,
    shapley_from_values,
    shapley_weights,
    simple_average,
    task_arithmetic,
)
from vtcomp.persist import Checkpoint


def make_cp(values: dict[str, list[float]]) -> Checkpoint:
    return Checkpoint(
        manifest={"config_digest": "x"},
        tensors={k: torch.tensor(v, dtype=torch.float32) for k, v in values.items()},
    )


def random_cp(seed: int, shape=(5,), names=("w", "b")) -> Checkpoint:
    rng = np.random.default_rng(seed)
    return Checkpoint(
        manifest={},
        tensors={
            n: torch.from_numpy(rng.normal(scale=10.0 ** rng.integers(-3, 4),
                                           size=shape).astype(np.float32))
            for n in names
        },
    )


def test_all_zero_alpha_is_bitwise_base():
    base, cpts = random_cp(0), [random_cp(i) for i in (1, 2, 3)]
    out = merge_eq4(base, cpts, [0.0, 0.0, 0.0])
    for name in base.names():
        assert torch.equal(out.tensors[name], base.tensors[name])


@given(st.integers(0, 500))
@settings(max_examples=40, deadline=None)
def test_single_alpha_one_is_bitwise_checkpoint(seed):
    base, cpt = random_cp(seed), random_cp(seed + 10_000)
    out = merge_eq4(base, [cpt], [1.0])
    for name in base.names():
        assert torch.equal(out.tensors[name], cpt.tensors[name])


def test_merge_hand_case():
    base = make_cp({"t": [0.0, 0.0]})
    cpt1 = make_cp({"t": [1.0, 0.0]})
    cpt2 = make_cp({"t": [0.0, 2.0]})
    out = merge_eq4(base, [cpt1, cpt2], [0.5, 0.5])
    assert torch.allclose(out.tensors["t"], torch.tensor([0.5, 1.0]))


def test_merge_shape_mismatch_names_offender():
    base = make_cp({"t": [0.0, 0.0]})
    bad = make_cp({"t": [0.0, 0.0, 0.0]})
    with pytest.raises(MergeShapeError, match="t"):
        merge_eq4(base, [bad], [1.0])
    other = make_cp({"u": [0.0, 0.0]})
    with pytest.raises(MergeShapeError, match="t|u"):
        merge_eq4(base, [other], [1.0])


def test_simple_average_fixed_point_and_weights():
    base = make_cp({"t": [1.5]})
    cpts = [make_cp({"t": [1.5]}) for _ in range(5)]
    out = simple_average(base, cpts)
    assert torch.equal(out.tensors["t"], base.tensors["t"])
    assert out.manifest["merged_from"]["alpha"] == [0.2] * 5


def test_simple_average_hand_case():
    base = make_cp({"t": [0.0]})
    out = simple_average(base, [make_cp({"t": [2.0]}), make_cp({"t": [4.0]})])
    assert torch.allclose(out.tensors["t"], torch.tensor([3.0]))


def test_simple_average_rejects_empty():
    with pytest.raises(ValueError):
        simple_average(make_cp({"t": [0.0]}), [])


def test_task_arithmetic_identity_and_midpoint():
    base, cpt = make_cp({"t": [2.0]}), make_cp({"t": [6.0]})
    assert torch.equal(task_arithmetic(base, [cpt], 0.0).tensors["t"],
                       base.tensors["t"])
    assert torch.allclose(task_arithmetic(base, [cpt], 0.5).tensors["t"],
                          torch.tensor([4.0]))


@given(st.integers(0, 300), st.floats(0.0, 2.0))
@settings(max_examples=30, deadline=None)
def test_task_arithmetic_equals_merge_with_constant_alpha(seed, scale):
    base = random_cp(seed)
    cpts = [random_cp(seed + k + 1) for k in range(3)]
    a = task_arithmetic(base, cpts, scale)
    b = merge_eq4(base, cpts, [scale] * 3)
    for name in base.names():
        assert torch.equal(a.tensors[name], b.tensors[name])


@given(st.integers(0, 300), st.floats(-2.0, 2.0))
@settings(max_examples=30, deadline=None)
def test_merge_is_affine_in_the_difference(seed, scale):
    """Scaling a checkpoint's difference from base scales the output
    difference identically."""
    base, cpt = random_cp(seed, shape=(4,)), random_cp(seed + 99, shape=(4,))
    scaled = Checkpoint(manifest={}, tensors={
        n: (base.tensors[n].double()
            + scale * (cpt.tensors[n].double() - base.tensors[n].double())).float()
        for n in base.names()
    })
    direct = merge_eq4(base, [cpt], [0.5 * scale])
    via_scaled = merge_eq4(base, [scaled], [0.5])
    for name in base.names():
        assert torch.allclose(direct.tensors[name], via_scaled.tensors[name],
                              rtol=1e-5, atol=1e-6)


def test_shapley_from_values_worked_example():
    values = {
        frozenset(): 0.0,
        frozenset({0}): 1.0,
        frozenset({1}): 2.0,
        frozenset({0, 1}): 3.0,
    }
    phi = shapley_from_values(values, 2)
    assert phi == pytest.approx([1.0, 2.0])


def test_shapley_weights_worked_example_through_merging():
    """Additive game realized via merging: base 0, one-hot checkpoints, f
    reads per-coordinate contributions scaled back by coalition size."""
    base = make_cp({"t": [0.0, 0.0]})
    cpt1 = make_cp({"t": [1.0, 0.0]})
    cpt2 = make_cp({"t": [0.0, 1.0]})

    def f(cp):
        t = cp.tensors["t"]
        nonzero = [i for i in range(2) if float(t[i]) != 0.0]
        if not nonzero:
            return 0.0
        scale = 1.0 / len(nonzero)  # undo the equal-weight dilution
        per_player = {0: 1.0, 1: 2.0}
        return sum(per_player[i] * float(t[i]) / scale for i in nonzero)

    w = shapley_weights(base, [cpt1, cpt2], f)
    assert w.phi[0] == pytest.approx(1.0, abs=1e-9)
    assert w.phi[1] == pytest.approx(2.0, abs=1e-9)
    assert w.alpha[0] == pytest.approx(1 / 3, abs=1e-9)
    assert w.alpha[1] == pytest.approx(2 / 3, abs=1e-9)


def test_shapley_symmetry_for_duplicates():
    base = random_cp(0)
    dup = random_cp(1)
    clone = Checkpoint(manifest={}, tensors={n: t.clone() for n, t in dup.tensors.items()})

    def f(cp):
        return float(sum(t.sum() for t in cp.tensors.values()))

    w = shapley_weights(base, [dup, clone], f)
    assert w.phi[0] == pytest.approx(w.phi[1], abs=1e-6)


def test_shapley_efficiency():
    base = random_cp(5)
    cpts = [random_cp(6 + i) for i in range(3)]

    def f(cp):
        return float(sum((t ** 2).sum() for t in cp.tensors.values()))

    w = shapley_weights(base, cpts, f)
    v = w.coalition_values
    total = v[frozenset(range(3))] - v[frozenset()]
    assert sum(w.phi.values()) == pytest.approx(total, abs=1e-6 * max(1, abs(total)))


def test_shapley_dummy_axiom_scale_invariant_fixture():
    """A checkpoint bit-equal to base is a null player under any
    dilution-insensitive (scale-invariant) evaluation."""
    rng = np.random.default_rng(7)
    base = random_cp(20, shape=(6,), names=("t",))
    cpts = [random_cp(21, shape=(6,), names=("t",)),
            Checkpoint(manifest={}, tensors={"t": base.tensors["t"].clone()}),
            random_cp(22, shape=(6,), names=("t",))]
    u = torch.from_numpy(rng.normal(size=6).astype(np.float32))

    def f(cp):
        delta = cp.tensors["t"] - base.tensors["t"]
        norm = float(delta.norm())
        return 0.0 if norm < 1e-12 else float(u @ delta) / norm

    w = shapley_weights(base, cpts, f)
    assert w.phi[1] == pytest.approx(0.0, abs=1e-6)


def test_shapley_uniform_fallback_warns():
    base = make_cp({"t": [0.0]})
    cpts = [make_cp({"t": [1.0]}), make_cp({"t": [2.0]})]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        w = shapley_weights(base, cpts, lambda cp: -float(cp.tensors["t"].sum()))
        assert any("uniform" in str(c.message) for c in caught)
    assert w.alpha[0] == pytest.approx(0.5)
    assert w.alpha[1] == pytest.approx(0.5)


def test_coalition_enumeration_count():
    base = random_cp(0)
    cpts = [random_cp(i + 1) for i in range(5)]
    calls = {"n": 0}

    def f(cp):
        calls["n"] += 1
        return float(cp.tensors["w"].sum())

    values = coalition_values(base, cpts, f)
    assert calls["n"] == 32
    assert len(values) == 32
    # repeated call hits the cache only
    coalition_values(base, cpts, f, cache=values)
    assert calls["n"] == 32


def test_shapley_refuses_large_n():
    base = random_cp(0)
    cpts = [random_cp(i) for i in range(11)]
    with pytest.raises(ValueError, match="enumeration"):
        shapley_weights(base, cpts, lambda cp: 0.0)


def test_evaluate_merge_schemes_degenerate_identical():
    base = random_cp(3)
    cpts = [Checkpoint(manifest={}, tensors={n: t.clone() for n, t in base.tensors.items()})
            for _ in range(3)]

    def f(cp):
        return float(sum(t.sum() for t in cp.tensors.values()))

    result = evaluate_merge_schemes(base, cpts, f)
    scores = set(round(v, 6) for v in result["scores"].values())
    assert len(scores) == 1
