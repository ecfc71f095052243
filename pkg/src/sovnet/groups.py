"""Exact integer arithmetic for the wallpaper groups p4 and p4m.

An element is ``(mirror, rotation, translation)`` acting on integer points
by ``x -> F^mirror R^rotation x + t`` where ``R`` is the quarter turn
``[[0, -1], [1, 0]]`` and ``F = diag(1, -1)``. Points are ``(row, col)``
pairs, so ``R`` acting about the grid centre is ``np.rot90`` on an image.

Functions on the group are stored as arrays indexed ``(..., slot, y, x)``;
the slot enumerates the stabilizer (``4 * mirror + rotation``).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator, Tuple

import numpy as np

ROT = np.array([[0, -1], [1, 0]], dtype=np.int64)
FLIP = np.array([[1, 0], [0, -1]], dtype=np.int64)

GROUP_KINDS = {"p4": 4, "p4m": 8}


class GroupKindMismatch(ValueError):
    pass


@dataclass(frozen=True)
class GroupElement:
    kind: str = "p4"
    mirror: int = 0
    rotation: int = 0
    translation: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.kind not in GROUP_KINDS:
            raise ValueError(f"unknown group kind {self.kind!r}")
        if self.mirror not in (0, 1) or (self.kind == "p4" and self.mirror):
            raise ValueError(f"mirror={self.mirror} invalid for {self.kind}")
        object.__setattr__(self, "rotation", int(self.rotation) % 4)
        object.__setattr__(self, "translation", (int(self.translation[0]), int(self.translation[1])))

    @property
    def slot(self) -> int:
        return 4 * self.mirror + self.rotation

    @property
    def linear(self) -> np.ndarray:
        return linear_part(self.mirror, self.rotation)

    def __matmul__(self, other: "GroupElement") -> "GroupElement":
        return compose(self, other)

    def __str__(self) -> str:
        s = ("m" if self.mirror else "") + f"r{self.rotation}"
        if self.translation != (0, 0):
            s += f"t{self.translation[0]},{self.translation[1]}"
        return s


def linear_part(mirror: int, rotation: int) -> np.ndarray:
    return np.linalg.matrix_power(FLIP, mirror) @ np.linalg.matrix_power(ROT, rotation % 4)


def identity(kind: str = "p4") -> GroupElement:
    return GroupElement(kind)


def matrix_rep(g: GroupElement) -> np.ndarray:
    """3x3 homogeneous integer matrix of ``g``."""
    m = np.eye(3, dtype=np.int64)
    m[:2, :2] = g.linear
    m[:2, 2] = g.translation
    return m


def from_matrix(m: np.ndarray, kind: str) -> GroupElement:
    lin = np.asarray(m)[:2, :2]
    for mirror, rot in itertools.product((0, 1), range(4)):
        if np.array_equal(linear_part(mirror, rot), lin):
            return GroupElement(kind, mirror, rot, (int(m[0, 2]), int(m[1, 2])))
    raise ValueError("matrix is not in p4m")


def _same_kind(a: GroupElement, b: GroupElement) -> None:
    if a.kind != b.kind:
        raise GroupKindMismatch(f"{a.kind} vs {b.kind}")


def compose(a: GroupElement, b: GroupElement) -> GroupElement:
    """a∘b: x -> M_a (M_b x + t_b) + t_a."""
    _same_kind(a, b)
    # R^r F = F R^-r, so F^ma R^ra F^mb R^rb = F^(ma+mb) R^((-1)^mb ra + rb)
    mirror = a.mirror ^ b.mirror
    rotation = (b.rotation + (-a.rotation if b.mirror else a.rotation)) % 4
    t = a.linear @ np.array(b.translation, dtype=np.int64) + np.array(a.translation, dtype=np.int64)
    return GroupElement(a.kind, mirror, rotation, (int(t[0]), int(t[1])))


def inverse(g: GroupElement) -> GroupElement:
    lin_inv = g.linear.T  # orthogonal integer matrix
    mirror = g.mirror
    rotation = g.rotation if g.mirror else -g.rotation
    t = -(lin_inv @ np.array(g.translation, dtype=np.int64))
    return GroupElement(g.kind, mirror, rotation % 4, (int(t[0]), int(t[1])))


def act_on_point(g: GroupElement, p) -> Tuple[int, int]:
    q = g.linear @ np.asarray(p, dtype=np.int64) + np.asarray(g.translation, dtype=np.int64)
    return int(q[0]), int(q[1])


def stabilizer(kind: str) -> list:
    """Stabilizer elements in slot order."""
    return [GroupElement(kind, s // 4, s % 4) for s in range(GROUP_KINDS[kind])]


def slot_element(kind: str, slot: int) -> GroupElement:
    return GroupElement(kind, slot // 4, slot % 4)


def parse_element(text: str, kind: str = "p4") -> GroupElement:
    """Parse ``id``, ``r1``, ``m``, ``mr3``, optionally followed by ``t<u>,<v>``."""
    s = text.strip().lower()
    if s in ("id", "e", "identity"):
        return identity(kind)
    mirror = 0
    if s.startswith("m"):
        mirror, s = 1, s[1:]
    rotation = 0
    translation = (0, 0)
    if "t" in s:
        s, tpart = s.split("t", 1)
        u, v = tpart.split(",")
        translation = (int(u), int(v))
    if s.startswith("r"):
        rotation = int(s[1:])
    elif s:
        raise ValueError(f"cannot parse group element {text!r}")
    return GroupElement(kind, mirror, rotation, translation)


def cayley_table(kind: str) -> np.ndarray:
    els = stabilizer(kind)
    return np.array([[compose(a, b).slot for b in els] for a in els], dtype=np.int64)


@dataclass(frozen=True)
class GroupGrid:
    """Finite carrier for functions on p4 / p4m: stabilizer slots x an HxW grid."""

    kind: str = "p4"
    height: int = 9
    width: int = 9

    def __post_init__(self):
        if self.kind not in GROUP_KINDS:
            raise ValueError(f"unknown group kind {self.kind!r}")

    @property
    def stabilizer_size(self) -> int:
        return GROUP_KINDS[self.kind]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.stabilizer_size, self.height, self.width)

    def with_size(self, height: int, width: int) -> "GroupGrid":
        return GroupGrid(self.kind, height, width)

    def elements(self) -> Iterator[GroupElement]:
        for s in range(self.stabilizer_size):
            yield slot_element(self.kind, s)


def centered(idx: np.ndarray, n: int) -> np.ndarray:
    """Pixel index -> doubled coordinate relative to the grid centre (exact)."""
    return 2 * np.asarray(idx, dtype=np.int64) - (n - 1)


def uncentered(c: np.ndarray, n: int) -> np.ndarray:
    return (np.asarray(c, dtype=np.int64) + (n - 1)) // 2


def point_preimage(g: GroupElement, height: int, width: int):
    """For every pixel p, the pixel g^-1·p (rotation about the centre) and an in-grid mask."""
    if g.linear[0, 0] == 0 and height != width:
        raise ValueError("quarter turns need a square grid")
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    pts = np.stack([centered(ys, height), centered(xs, width)])  # doubled coords
    t = 2 * np.array(g.translation, dtype=np.int64).reshape(2, 1, 1)
    lin_inv = g.linear.T
    src = np.einsum("ij,jhw->ihw", lin_inv, pts - t)
    sy, sx = uncentered(src[0], height), uncentered(src[1], width)
    valid = (sy >= 0) & (sy < height) & (sx >= 0) & (sx < width)
    return np.where(valid, sy, 0), np.where(valid, sx, 0), valid


def slot_preimage(g: GroupElement) -> np.ndarray:
    """For every output slot h, the slot of g^-1∘h."""
    ginv = inverse(GroupElement(g.kind, g.mirror, g.rotation))
    return np.array([compose(ginv, h).slot for h in stabilizer(g.kind)], dtype=np.intp)


def left_translate(field: np.ndarray, g: GroupElement, grid: GroupGrid, planar: bool = False) -> np.ndarray:
    """[L_g f](h) = f(g^-1 ∘ h) on arrays indexed (..., slot, y, x).

    With ``planar=True`` the array is indexed (..., y, x) and only the point
    action applies. Samples that leave the grid are zero.
    """
    if g.kind != grid.kind:
        raise GroupKindMismatch(f"{g.kind} element on a {grid.kind} grid")
    field = np.asarray(field)
    H, W = field.shape[-2:]
    sy, sx, valid = point_preimage(g, H, W)
    out = field[..., sy, sx] * valid
    if planar:
        return out.astype(field.dtype, copy=False)
    S = grid.stabilizer_size
    if field.shape[-3] != S:
        raise GroupKindMismatch(f"slot extent {field.shape[-3]} != stabilizer size {S}")
    return out[..., slot_preimage(g), :, :].astype(field.dtype, copy=False)
