import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aimkp.masking import (
    KeepMask,
    MaskError,
    build_random_mask,
    build_stride_mask,
    compose_mask_plan,
    expected_ratio,
    retention_ratio,
    stride_cap,
    unmasked_plan,
)


def kept(mask):
    return {tuple(int(i) for i in ix) if len(ix) > 1 else int(ix[0]) for ix in zip(*np.nonzero(mask.bits))}


def test_formula_anchor_1d():
    assert kept(build_stride_mask((6,), 2, "formula-anchor")) == {0, 2, 4}


def test_last_in_stride_1d():
    assert kept(build_stride_mask((6,), 2, "last-in-stride")) == {1, 3, 5}


@pytest.mark.parametrize("convention", ["formula-anchor", "last-in-stride"])
def test_unit_stride_keeps_everything(convention):
    m = build_stride_mask((4, 4), 1, convention)
    assert m.popcount == 16


def test_formula_anchor_2d():
    assert kept(build_stride_mask((4, 4), 2, "formula-anchor")) == {(0, 0), (0, 2), (2, 0), (2, 2)}


@pytest.mark.parametrize("gamma,ratio", [(2, 0.25), (4, 0.0625)])
def test_retention_on_24x24(gamma, ratio):
    assert retention_ratio(build_stride_mask((24, 24), gamma)) == ratio


def test_retention_no_masking():
    assert retention_ratio(build_stride_mask((8,), 1)) == 1.0


def test_partial_tail_keeps_last_index():
    # windows [0..3] and [4,5]; the tail keeps its final element
    assert kept(build_stride_mask((6,), 4)) == {3, 5}


@pytest.mark.parametrize("shape", [(), (0,), (3, 0), (1, 2, 3)])
def test_bad_shapes(shape):
    with pytest.raises(MaskError):
        build_stride_mask(shape, 2)


def test_zero_gamma_rejected():
    with pytest.raises(MaskError):
        build_stride_mask((6,), 0)


def test_keepmask_is_readonly():
    m = build_stride_mask((4,), 2)
    with pytest.raises(ValueError):
        m.bits[0] = 1


def test_keepmask_rejects_non_binary():
    with pytest.raises(MaskError):
        KeepMask(np.array([0, 2]))


def test_stride_cap():
    assert [stride_cap(n) for n in (1, 2, 3, 6, 8, 12, 24)] == [1, 2, 2, 4, 8, 8, 16]


def test_plan_masks_only_target():
    plan = compose_mask_plan((6, 6), 12, gamma_visual=2, gamma_text=4, target="visual")
    assert plan.target_modality == "visual" and plan.stride_used == 2
    assert plan.text_mask.popcount == 12
    assert plan.visual_mask.popcount == 9
    plan = compose_mask_plan((6, 6), 12, gamma_visual=2, gamma_text=4, target="text")
    assert plan.visual_mask.popcount == 36 and plan.text_mask.popcount == 3
    assert plan.ratio_deviation == 0.0


def test_plan_none_is_all_ones():
    plan = compose_mask_plan((6, 6), 12, 2, 2, target="none")
    assert plan == unmasked_plan((6, 6), 12)


def test_plan_rejects_unit_stride_unless_allowed():
    with pytest.raises(MaskError):
        compose_mask_plan((6, 6), 12, 1, 1, target="text")
    plan = compose_mask_plan((6, 6), 12, 1, 1, target="text", allow_unit=True)
    assert plan.text_mask.popcount == 12


def test_plan_rejects_stride_beyond_axis():
    with pytest.raises(MaskError, match="exceeds"):
        compose_mask_plan((6, 6), 12, gamma_visual=8, target="visual")


def test_random_mask_retention():
    m = build_random_mask((6, 6), 2, np.random.default_rng(0))
    assert m.popcount == 9


def test_render():
    assert build_stride_mask((2, 2), 2).render() == "..\n.#"


@given(
    st.integers(1, 5).flatmap(
        lambda k: st.tuples(st.just(k), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
    )
)
def test_divisible_retention_is_exact(args):
    k, a, b, c = args
    gamma = 1 << k if k < 4 else 2
    assert retention_ratio(build_stride_mask((gamma * a,), gamma)) == 1 / gamma
    assert retention_ratio(build_stride_mask((gamma * b, gamma * c), gamma)) == 1 / gamma**2


@given(st.integers(1, 40), st.integers(1, 12), st.sampled_from(["formula-anchor", "last-in-stride"]))
def test_popcount_is_ceiling_and_never_empty(n, gamma, convention):
    m = build_stride_mask((n,), gamma, convention)
    assert m.popcount == -(-n // gamma)
    assert m.popcount >= 1


def test_formula_anchor_positionwise_exhaustive():
    for h, w in itertools.product(range(1, 17), repeat=2):
        for gamma in (1, 2, 3, 4, 8):
            bits = build_stride_mask((h, w), gamma, "formula-anchor").bits
            i, j = np.indices((h, w))
            assert np.array_equal(bits, ((i % gamma == 0) & (j % gamma == 0)).astype(np.uint8))


@settings(max_examples=50)
@given(st.integers(1, 16), st.integers(1, 16), st.sampled_from([1, 2, 4, 8]))
def test_last_in_stride_is_separable(h, w, gamma):
    m = build_stride_mask((h, w), gamma)
    rows = build_stride_mask((h,), gamma).bits
    cols = build_stride_mask((w,), gamma).bits
    assert np.array_equal(m.bits, np.outer(rows, cols))


def test_expected_ratio():
    assert expected_ratio(1, 4) == 0.25 and expected_ratio(2, 4) == 0.0625
