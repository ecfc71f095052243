"""Group-equivariant correlations on p4 / p4m, subgroup pooling and residual blocks.

A group correlation is evaluated as one planar correlation per output slot
with a filter whose taps and input slots are permuted by the stabilizer
element of that slot. The permutations are integer index tables built once
per (group, kernel size).

Layouts: images are (..., c, H, W); fields on the group are
(..., c, S, H, W).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from typing import Optional

import numpy as np

from . import tensor as T
from .groups import GROUP_KINDS, GroupGrid, centered, compose, inverse, stabilizer, uncentered
from .tensor import ShapeMismatch, Tensor


class GroupKindMismatch(ShapeMismatch):
    pass


# ----------------------------------------------------------------------------- tables

@lru_cache(maxsize=None)
def _tap_tables(kind: str, k: int) -> np.ndarray:
    """tap[s, a, b] = flat tap index of M_s^-1 · (a, b) about the kernel centre."""
    S = GROUP_KINDS[kind]
    a, b = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    delta = np.stack([centered(a, k), centered(b, k)])
    out = np.empty((S, k, k), dtype=np.intp)
    for s, g in enumerate(stabilizer(kind)):
        src = np.einsum("ij,jab->iab", g.linear.T, delta)
        out[s] = uncentered(src[0], k) * k + uncentered(src[1], k)
    return out


@lru_cache(maxsize=None)
def _lift_table(kind: str, k: int) -> np.ndarray:
    return _tap_tables(kind, k).reshape(GROUP_KINDS[kind], k * k)


@lru_cache(maxsize=None)
def _group_table(kind: str, k: int) -> np.ndarray:
    """idx[s, s', a, b] = flat index into (S, k, k) of (σ_s^-1 σ_s', M_s^-1 δ_ab)."""
    S = GROUP_KINDS[kind]
    els = stabilizer(kind)
    taps = _tap_tables(kind, k)
    out = np.empty((S, S, k, k), dtype=np.intp)
    for s, g in enumerate(els):
        ginv = inverse(g)
        for s2, h in enumerate(els):
            out[s, s2] = compose(ginv, h).slot * k * k + taps[s]
    return out.reshape(S, S * k * k)


_corrupt = False


@contextlib.contextmanager
def corrupted_filter_tables():
    """Test hook: filters are no longer rotated per slot, breaking equivariance."""
    global _corrupt
    prev, _corrupt = _corrupt, True
    try:
        yield
    finally:
        _corrupt = prev


def lift_table(kind: str, k: int) -> np.ndarray:
    tab = _lift_table(kind, k)
    if _corrupt:
        tab = np.broadcast_to(tab[0], tab.shape)
    return tab


def group_table(kind: str, k: int) -> np.ndarray:
    tab = _group_table(kind, k)
    if _corrupt:
        S = GROUP_KINDS[kind]
        # slots still permute, spatial taps do not rotate
        slots = tab.reshape(S, S, k * k)[:, :, 0] // (k * k)
        tab = (slots[:, :, None] * k * k + np.arange(k * k)[None, None, :]).reshape(S, S * k * k)
    return tab


# ----------------------------------------------------------------------------- geometry

@dataclass(frozen=True)
class Geometry:
    """Planar correlation geometry: kernel size, stride, zero padding."""

    k: int
    stride: int = 1
    padding: int = 0

    def out_size(self, n: int) -> int:
        return (n + 2 * self.padding - self.k) // self.stride + 1

    def window(self, o: np.ndarray):
        """Inclusive input index range read by output index ``o`` (before clipping)."""
        lo = np.asarray(o) * self.stride - self.padding
        return lo, lo + self.k - 1


def same(k: int) -> Geometry:
    if k % 2 == 0:
        raise ValueError("same padding needs an odd kernel")
    return Geometry(k, 1, (k - 1) // 2)


def downsample(n: int) -> Geometry:
    """Stride-2 geometry that keeps output samples symmetric about the grid centre.

    Even grids use a 2x2 window, odd grids a padded 3x3 window.
    """
    return Geometry(2, 2, 0) if n % 2 == 0 else Geometry(3, 2, 1)


def geometry_for(k: int, stride: int) -> Geometry:
    if stride == 1:
        return same(k)
    if stride != 2:
        raise ValueError("only stride 1 and 2 are supported")
    return Geometry(k, 2, 0 if k % 2 == 0 else (k - 1) // 2)


def check_symmetric(geom: Geometry, n: int) -> bool:
    """True when the sampled window centres are symmetric about the input centre."""
    m = geom.out_size(n)
    if m <= 0:
        return False
    lo, hi = geom.window(np.arange(m))
    c = lo + hi  # doubled window centres
    return bool(np.all(c + c[::-1] == 2 * (n - 1)))


# ----------------------------------------------------------------------------- filters

@dataclass
class LiftingFilter:
    weight: Tensor  # (c_out, c_in, k, k)
    bias: Optional[Tensor] = None

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[-1] != self.weight.shape[-2]:
            raise ShapeMismatch(f"lifting filter must be (out, in, k, k), got {self.weight.shape}")

    @property
    def k(self) -> int:
        return self.weight.shape[-1]


@dataclass
class GroupFilter:
    weight: Tensor  # (c_out, c_in, S, k, k)
    bias: Optional[Tensor] = None

    def __post_init__(self):
        if self.weight.ndim != 5 or self.weight.shape[-1] != self.weight.shape[-2]:
            raise ShapeMismatch(f"group filter must be (out, in, S, k, k), got {self.weight.shape}")

    @property
    def k(self) -> int:
        return self.weight.shape[-1]

    @property
    def stabilizer_size(self) -> int:
        return self.weight.shape[2]


def expand_lifting(weight: Tensor, kind: str) -> Tensor:
    """(..., O, C, k, k) -> (..., O*S, C, k, k) with one rotated copy per slot."""
    k = weight.shape[-1]
    S = GROUP_KINDS[kind]
    lead = weight.shape[:-4]
    O, C = weight.shape[-4:-2]
    w = T.reshape(weight, lead + (O, C, k * k))
    w = T.take(w, lift_table(kind, k), axis=-1)  # (..., O, C, S, k*k)
    n = len(lead)
    w = T.transpose(w, tuple(range(n)) + (n, n + 2, n + 1, n + 3))
    return T.reshape(w, lead + (O * S, C, k, k))


def expand_group(weight: Tensor, kind: str) -> Tensor:
    """(..., O, C, S, k, k) -> (..., O*S, C*S, k, k)."""
    k = weight.shape[-1]
    S = GROUP_KINDS[kind]
    if weight.shape[-3] != S:
        raise GroupKindMismatch(f"filter slot extent {weight.shape[-3]} != {S} for {kind}")
    lead = weight.shape[:-5]
    O, C = weight.shape[-5:-3]
    w = T.reshape(weight, lead + (O, C, S * k * k))
    w = T.take(w, group_table(kind, k), axis=-1)  # (..., O, C, S, S*k*k)
    n = len(lead)
    w = T.transpose(w, tuple(range(n)) + (n, n + 2, n + 1, n + 3))
    return T.reshape(w, lead + (O * S, C * S, k, k))


# ----------------------------------------------------------------------------- correlations

def _as_batch(x: Tensor, core: int):
    lead = x.shape[:-core]
    return T.reshape(x, (int(np.prod(lead)) if lead else 1,) + x.shape[-core:]), lead


def _resolve_geometry(k: int, stride: int, padding: Optional[int]) -> Geometry:
    if padding is None:
        return geometry_for(k, stride)
    return Geometry(k, stride, padding)


def lift_correlate(image, filt: LiftingFilter, grid: GroupGrid, stride: int = 1,
                   padding: Optional[int] = None) -> Tensor:
    """Correlate a planar image (..., c, H, W) with every rotated (reflected) filter copy.

    Returns (..., c_out, S, Ho, Wo). Default padding keeps H x W at stride 1.
    """
    image = T.as_tensor(image, filt.weight)
    if image.ndim < 3 or image.shape[-3] != filt.weight.shape[1]:
        raise ShapeMismatch(f"image {image.shape} vs lifting filter {filt.weight.shape}")
    geom = _resolve_geometry(filt.k, stride, padding)
    S = grid.stabilizer_size
    x, lead = _as_batch(image, 3)
    B, C, H, W = x.shape
    w = expand_lifting(filt.weight, grid.kind)  # (O*S, C, k, k)
    out = T.correlate2d(T.reshape(x, (B, 1, C, H, W)), T.reshape(w, (1,) + w.shape), geom.stride, geom.padding)
    O = filt.weight.shape[0]
    out = T.reshape(out, lead + (O, S) + out.shape[-2:])
    if filt.bias is not None:
        out = out + T.reshape(filt.bias, (O, 1, 1, 1))
    return out


def group_correlate_grouped(x: Tensor, weight: Tensor, kind: str, geom: Geometry) -> Tensor:
    """Batched group correlation with a bank of filters.

    x: (B, Gx, C, S, H, W) with Gx in {1, G}; weight: (G, O, C, S, k, k).
    Returns (B, G, O, S, Ho, Wo). With Gx == 1 every filter group reads the
    same input.
    """
    B, Gx, C, S, H, W = x.shape
    G, O, Cw, Sw, k, _ = weight.shape
    if Cw != C:
        raise ShapeMismatch(f"field channels {C} vs filter in-channels {Cw}")
    if Sw != S or S != GROUP_KINDS[kind]:
        raise GroupKindMismatch(f"slot extents: field {S}, filter {Sw}, group {kind}")
    w = expand_group(weight, kind)  # (G, O*S, C*S, k, k)
    xr = T.reshape(x, (B, Gx, C * S, H, W))
    if Gx == 1 and G > 1:
        w = T.reshape(w, (1, G * O * S, C * S, k, k))
        out = T.correlate2d(xr, w, geom.stride, geom.padding)
    elif Gx == G:
        out = T.correlate2d(xr, w, geom.stride, geom.padding)
    else:
        raise ShapeMismatch(f"cannot pair {Gx} input groups with {G} filter groups")
    return T.reshape(out, (B, G, O, S) + out.shape[-2:])


def group_correlate(field, filt: GroupFilter, grid: GroupGrid, stride: int = 1,
                    padding: Optional[int] = None) -> Tensor:
    """Correlate a field on the group (..., c, S, H, W); returns (..., c_out, S, Ho, Wo)."""
    field = T.as_tensor(field, filt.weight)
    S = grid.stabilizer_size
    if filt.stabilizer_size != S:
        raise GroupKindMismatch(f"filter has {filt.stabilizer_size} slots, grid {grid.kind} has {S}")
    if field.ndim < 4 or field.shape[-3] != S or field.shape[-4] != filt.weight.shape[1]:
        raise ShapeMismatch(f"field {field.shape} vs group filter {filt.weight.shape}")
    geom = _resolve_geometry(filt.k, stride, padding)
    x, lead = _as_batch(field, 4)
    x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
    w = T.reshape(filt.weight, (1,) + filt.weight.shape)
    out = group_correlate_grouped(x, w, grid.kind, geom)
    O = filt.weight.shape[0]
    out = T.reshape(out, lead + (O, S) + out.shape[-2:])
    if filt.bias is not None:
        out = out + T.reshape(filt.bias, (O, 1, 1, 1))
    return out


def subgroup_pool(field) -> Tensor:
    """Max over the stabilizer slots: (..., c, S, H, W) -> (..., c, H, W)."""
    field = T.as_tensor(field)
    return T.max_along(field, axis=-3)


# ----------------------------------------------------------------------------- residual block

@dataclass
class ResidualParams:
    """Weights of one or more residual blocks sharing a geometry.

    Weights carry a leading filter-bank axis G (one block per bank entry):
    gc1 (G, O, C, S, k1, k1), gc2 (G, O, O, S, 3, 3), proj (G, O, C, S, kp, kp)
    or None for an identity skip.
    """

    gc1: Tensor
    gc2: Tensor
    proj: Optional[Tensor] = None
    stride: int = 1
    extra: dict = dc_field(default_factory=dict)

    def tensors(self) -> dict:
        out = {"gc1": self.gc1, "gc2": self.gc2}
        if self.proj is not None:
            out["proj"] = self.proj
        return out

    @property
    def banks(self) -> int:
        return self.gc1.shape[0]

    @property
    def in_channels(self) -> int:
        return self.gc1.shape[2]

    @property
    def out_channels(self) -> int:
        return self.gc1.shape[1]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors().values())


def block_parameter_count(c_in: int, c_out: int, S: int, k1: int, k2: int = 3,
                          stride: int = 1, kp: Optional[int] = None) -> int:
    """Closed-form parameter count of one residual block."""
    n = c_out * c_in * S * k1 * k1 + c_out * c_out * S * k2 * k2
    if c_in != c_out or stride != 1:
        kp = kp if kp is not None else (1 if stride == 1 else k1)
        n += c_out * c_in * S * kp * kp
    return n


def init_residual(rng: np.random.Generator, banks: int, c_in: int, c_out: int, S: int,
                  stride: int = 1, in_size: Optional[int] = None, dtype=np.float64,
                  gain: float = 1.0, k: int = 3) -> ResidualParams:
    """LeCun-normal initialisation for a bank of residual blocks."""
    if stride == 1:
        k1 = k
    else:
        if in_size is None:
            raise ValueError("strided blocks need the input size")
        k1 = downsample(in_size).k

    def w(o, c, kk, scale=1.0):
        std = scale * gain / np.sqrt(c * S * kk * kk)
        return Tensor(rng.normal(0.0, std, size=(banks, o, c, S, kk, kk)).astype(dtype), requires_grad=True)

    gc1 = w(c_out, c_in, k1)
    gc2 = w(c_out, c_out, k)
    proj = None
    if c_in != c_out or stride != 1:
        proj = w(c_out, c_in, 1 if stride == 1 else k1)
    return ResidualParams(gc1, gc2, proj, stride)


def residual_bank(x: Tensor, params: ResidualParams, kind: str) -> Tensor:
    """Apply a bank of residual blocks: x (B, Gx, C, S, H, W) -> (B, G, O, S, Ho, Wo).

    out = selu(gc2(selu(gc1(x)))) + project(x)
    """
    g1 = geometry_for(params.gc1.shape[-1], params.stride)
    h = T.selu(group_correlate_grouped(x, params.gc1, kind, g1))
    h = T.selu(group_correlate_grouped(h, params.gc2, kind, same(params.gc2.shape[-1])))
    if params.proj is None:
        skip = x
    else:
        gp = geometry_for(params.proj.shape[-1], params.stride)
        skip = group_correlate_grouped(x, params.proj, kind, gp)
    return h + skip


def residual_block(field, params: ResidualParams, grid: GroupGrid) -> Tensor:
    """Residual block on a field (..., c, S, H, W) with a single-bank ``params``."""
    field = T.as_tensor(field, params.gc1)
    if params.banks != 1:
        raise ShapeMismatch("residual_block expects a single block; use residual_bank for banks")
    if field.ndim < 4 or field.shape[-4] != params.in_channels:
        raise ShapeMismatch(f"field {field.shape} vs block in-channels {params.in_channels}")
    x, lead = _as_batch(field, 4)
    x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
    out = residual_bank(x, params, grid.kind)
    return T.reshape(out, lead + out.shape[2:])
