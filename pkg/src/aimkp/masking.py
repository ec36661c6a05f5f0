"""Structured stride masks over visual grids and text sequences.

A keep-mask marks which token positions stay visible to attention. Masks are
never applied to embeddings; the model turns them into key-visibility flags.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

Convention = Literal["last-in-stride", "formula-anchor"]
Modality = Literal["visual", "text", "none"]

CONVENTIONS = ("last-in-stride", "formula-anchor")


class MaskError(ValueError):
    """Raised for invalid stride or shape arguments."""


@dataclass(frozen=True, eq=False)
class KeepMask:
    """Binary keep-mask over a 1D or 2D token layout (1 = retained)."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        if bits.ndim not in (1, 2):
            raise MaskError(f"mask must be 1D or 2D, got ndim={bits.ndim}")
        if np.any(bits > 1):
            raise MaskError("mask bits must be 0/1")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    def __eq__(self, other):
        if not isinstance(other, KeepMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.bits.shape, self.bits.tobytes()))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.bits.shape

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    def flat(self) -> np.ndarray:
        """Row-major boolean view, matching how grids are flattened into tokens."""
        return self.bits.reshape(-1).astype(bool)

    def render(self, on: str = "#", off: str = ".") -> str:
        rows = self.bits if self.bits.ndim == 2 else self.bits[None, :]
        return "\n".join("".join(on if b else off for b in row) for row in rows)

    @classmethod
    def ones(cls, shape: Sequence[int] | int) -> "KeepMask":
        return cls(np.ones(_check_shape(shape), dtype=np.uint8))


def _check_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if len(shape) not in (1, 2):
        raise MaskError(f"shape must be 1D or 2D, got {shape}")
    if any(s < 1 for s in shape):
        raise MaskError(f"empty shape {shape}")
    return shape


def axis_keep(length: int, gamma: int, convention: Convention = "last-in-stride") -> np.ndarray:
    """Keep flags along one axis for a given stride."""
    if gamma < 1:
        raise MaskError(f"stride must be >= 1, got {gamma}")
    idx = np.arange(length)
    if convention == "formula-anchor":
        return idx % gamma == 0
    if convention == "last-in-stride":
        # final index of every window [k*gamma, (k+1)*gamma), partial tail included
        keep = (idx % gamma == gamma - 1) | (idx == length - 1)
        return keep
    raise MaskError(f"unknown convention {convention!r}")


def build_stride_mask(shape, gamma: int, convention: Convention = "last-in-stride") -> KeepMask:
    """Build the 1D or 2D stride mask.

    formula-anchor keeps index mod gamma == 0 on every axis; last-in-stride keeps
    the last index of each window of ``gamma`` consecutive positions per axis.
    """
    gamma = int(gamma)
    if gamma < 1:
        raise MaskError(f"stride must be >= 1, got {gamma}")
    shape = _check_shape(shape)
    axes = [axis_keep(n, gamma, convention) for n in shape]
    if len(axes) == 1:
        bits = axes[0]
    else:
        bits = np.logical_and.outer(axes[0], axes[1])
    return KeepMask(bits.astype(np.uint8))


def build_random_mask(shape, gamma: int, rng: np.random.Generator) -> KeepMask:
    """Random keep-mask with the same popcount as the structured stride mask."""
    shape = _check_shape(shape)
    count = build_stride_mask(shape, gamma).popcount
    total = int(np.prod(shape))
    bits = np.zeros(total, dtype=np.uint8)
    bits[rng.choice(total, size=count, replace=False)] = 1
    return KeepMask(bits.reshape(shape))


def retention_ratio(mask: KeepMask) -> float:
    return mask.popcount / mask.bits.size


def expected_ratio(ndim: int, gamma: int) -> float:
    return 1.0 / gamma**ndim


def stride_cap(length: int) -> int:
    """Largest power of two not exceeding ``length``."""
    if length < 1:
        raise MaskError("axis length must be >= 1")
    return 1 << (int(length).bit_length() - 1)


@dataclass(frozen=True)
class MaskPlan:
    """Masks for one forward pass; at most one modality is non-trivial."""

    target_modality: Modality
    visual_mask: KeepMask
    text_mask: KeepMask
    stride_used: int

    @property
    def ratio_deviation(self) -> float:
        """Retention of the targeted mask minus the ideal 1/gamma**ndim."""
        if self.target_modality == "none":
            return 0.0
        mask = self.visual_mask if self.target_modality == "visual" else self.text_mask
        return retention_ratio(mask) - expected_ratio(mask.bits.ndim, self.stride_used)


def unmasked_plan(grid_shape: tuple[int, int], text_len: int) -> MaskPlan:
    return MaskPlan("none", KeepMask.ones(grid_shape), KeepMask.ones(text_len), 1)


def compose_mask_plan(
    grid_shape: tuple[int, int],
    text_len: int,
    gamma_visual: int | None = None,
    gamma_text: int | None = None,
    target: Modality = "none",
    convention: Convention = "last-in-stride",
    pattern: str = "structured",
    rng: np.random.Generator | None = None,
    allow_unit: bool = False,
) -> MaskPlan:
    """Bind a stride mask to one modality of a sample.

    Only content-text positions are covered by ``text_mask``; prompt tokens sit
    outside it and are never masked. A stride longer than the masked axis is an
    error rather than a silent clamp. ``allow_unit`` admits gamma=1 (tests only).
    """
    if target == "none":
        return unmasked_plan(grid_shape, text_len)
    if target == "visual":
        gamma, dims = gamma_visual, tuple(grid_shape)
    elif target == "text":
        gamma, dims = gamma_text, (int(text_len),)
    else:
        raise MaskError(f"unknown target modality {target!r}")
    if gamma is None:
        raise MaskError(f"no stride given for {target}")
    gamma = int(gamma)
    floor = 1 if allow_unit else 2
    if gamma < floor:
        raise MaskError(f"{target} stride {gamma} below minimum {floor}")
    if gamma > min(dims):
        raise MaskError(f"{target} stride {gamma} exceeds axis length {min(dims)}")
    if pattern == "random":
        if rng is None:
            raise MaskError("random masks need an rng")
        mask = build_random_mask(dims, gamma, rng)
    elif pattern == "structured":
        mask = build_stride_mask(dims, gamma, convention)
    else:
        raise MaskError(f"unknown mask pattern {pattern!r}")
    if target == "visual":
        return MaskPlan("visual", mask, KeepMask.ones(text_len), gamma)
    return MaskPlan("text", KeepMask.ones(grid_shape), mask, gamma)
