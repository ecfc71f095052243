"""Capsule-decomposition graphs of single forward passes and their isomorphism check.

A vertex is a capsule instance keyed ``(layer, type, slot, y, x)``; an edge
joins ``(l, i, g1)`` to ``(l + 1, j, g2)`` for every ``g1`` in ``Pool(g2)``
and carries the routing weight ``c_ij(g2)``. The same weight is repeated
over the whole pool, so edges are stored implicitly as the layer's weight
array plus its pool geometry.

``Pool(g2)`` is the receptive field of the group correlations producing
layer ``l + 1``: a spatial window, obtained by chaining the layers' kernel,
stride and padding backwards and clipping to the grid, times the input slots
``g2 ∘ r`` for every relative slot ``r`` the filters touch (all of them for a
full group correlation).
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .gconv import Geometry
from .groups import (GROUP_KINDS, GroupElement, GroupGrid, act_on_point, cayley_table, compose,
                     inverse, left_translate, point_preimage, slot_element, slot_preimage)

Key = Tuple[int, int, int, int, int]  # (layer, type, slot, y, x)


class IncompleteTrace(ValueError):
    pass


class ModelMismatch(ValueError):
    pass


# ----------------------------------------------------------------------------- traces

@dataclass
class LayerTrace:
    """One layer of a single-sample forward pass.

    poses: (N, d, S, H, W). Routed layers also carry weights (N, N_prev, S, H, W),
    the geometry chain by which they read the previous layer, and the relative
    slots their filters cover (None means every slot).
    """

    poses: np.ndarray
    weights: Optional[np.ndarray] = None
    pool: Sequence[Geometry] = ()
    slot_support: Optional[Sequence[int]] = None

    @property
    def activations(self) -> np.ndarray:
        return np.sqrt(np.sum(np.asarray(self.poses, dtype=np.float64) ** 2, axis=1))


@dataclass
class Trace:
    kind: str
    layers: List[LayerTrace]
    provenance: Dict[str, str] = field(default_factory=dict)


def trace_from_forward(result, kind: str, index: int = 0, provenance: Optional[dict] = None) -> Trace:
    """Pick sample ``index`` out of a batched network forward result."""
    layers = []
    for fld in result.layers:
        w = None if fld.weights is None else np.asarray(fld.weights.data[index], dtype=np.float64)
        layers.append(LayerTrace(np.asarray(fld.poses.data[index], dtype=np.float64), w, tuple(fld.pool)))
    return Trace(kind, layers, dict(provenance or {}))


def record_trace(model, image) -> Trace:
    """Forward one image (c, H, W) through ``model`` and keep everything the graph needs."""
    image = np.asarray(image)
    res = model.forward(image[None] if image.ndim == 3 else image[:1])
    prov = {"model": model.fingerprint(),
            "input": hashlib.sha256(np.ascontiguousarray(image, dtype=np.float64).tobytes()).hexdigest()[:16]}
    return trace_from_forward(res, model.config.group, 0, prov)


# ----------------------------------------------------------------------------- pools

def receptive_interval(out_idx: np.ndarray, chain: Sequence[Geometry], sizes: Sequence[int]):
    """Input index interval [lo, hi] feeding each output index through ``chain``.

    ``sizes[m]`` is the grid extent read by ``chain[m]``; intervals are
    clipped to every intermediate grid, since out-of-grid samples are padding.
    """
    lo = np.asarray(out_idx, dtype=np.int64)
    hi = lo.copy()
    for geom, n in zip(reversed(chain), reversed(sizes)):
        lo = np.clip(lo * geom.stride - geom.padding, 0, n - 1)
        hi = np.clip(hi * geom.stride - geom.padding + geom.k - 1, 0, n - 1)
    return lo, hi


def chain_sizes(chain: Sequence[Geometry], n_in: int) -> List[int]:
    sizes = [n_in]
    for g in chain[:-1]:
        sizes.append(g.out_size(sizes[-1]))
    return sizes


@dataclass(frozen=True)
class LayerPool:
    """Pool geometry of one routed layer: per output row/column an input interval."""

    y_lo: np.ndarray
    y_hi: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    slots: np.ndarray  # (S_out, R) input slots per output slot

    def size(self, y: int, x: int) -> int:
        return int((self.y_hi[y] - self.y_lo[y] + 1) * (self.x_hi[x] - self.x_lo[x] + 1) * self.slots.shape[1])

    def sizes(self) -> np.ndarray:
        """(H, W) pool sizes; identical for every output slot."""
        hy = self.y_hi - self.y_lo + 1
        hx = self.x_hi - self.x_lo + 1
        return np.outer(hy, hx) * self.slots.shape[1]

    def members(self, s: int, y: int, x: int) -> Iterator[Tuple[int, int, int]]:
        for s1 in self.slots[s]:
            for y1 in range(self.y_lo[y], self.y_hi[y] + 1):
                for x1 in range(self.x_lo[x], self.x_hi[x] + 1):
                    yield int(s1), y1, x1


def layer_pool(kind: str, chain: Sequence[Geometry], in_shape: Tuple[int, int], out_shape: Tuple[int, int],
               slot_support: Optional[Sequence[int]] = None) -> LayerPool:
    if not chain:
        raise IncompleteTrace("routed layer without pool geometry")
    S = GROUP_KINDS[kind]
    ys = chain_sizes(chain, in_shape[0])
    xs = chain_sizes(chain, in_shape[1])
    for sizes, n_out in ((ys, out_shape[0]), (xs, out_shape[1])):
        if chain[-1].out_size(sizes[-1]) != n_out:
            raise IncompleteTrace("pool geometry does not reproduce the layer's extent")
    y_lo, y_hi = receptive_interval(np.arange(out_shape[0]), chain, ys)
    x_lo, x_hi = receptive_interval(np.arange(out_shape[1]), chain, xs)
    support = np.arange(S) if slot_support is None else np.asarray(slot_support, dtype=np.int64)
    table = cayley_table(kind)
    slots = table[:, support]  # input slot s ∘ r
    return LayerPool(y_lo, y_hi, x_lo, x_hi, slots)


# ----------------------------------------------------------------------------- graph

@dataclass(frozen=True)
class CapsuleVertex:
    layer: int
    type: int
    slot: int
    y: int
    x: int
    pose: np.ndarray = field(compare=False, repr=False)
    activation: float = field(compare=False)
    flagged: bool = field(default=False, compare=False)

    @property
    def key(self) -> Key:
        return (self.layer, self.type, self.slot, self.y, self.x)


@dataclass(frozen=True)
class CapsuleEdge:
    source: Key
    target: Key
    weight: float


@dataclass
class CapsuleDecompositionGraph:
    kind: str
    poses: List[np.ndarray]  # per layer (N, d, S, H, W)
    weights: List[Optional[np.ndarray]]  # per layer (N, N_prev, S, H, W); None for layer 0
    pools: List[Optional[LayerPool]]
    threshold: float = 0.0
    provenance: Dict[str, str] = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return len(self.poses)

    def activations(self, layer: int) -> np.ndarray:
        return np.sqrt(np.sum(self.poses[layer] ** 2, axis=1))

    def flags(self, layer: int) -> np.ndarray:
        """True where a capsule's activation is below the threshold."""
        return self.activations(layer) < self.threshold

    def vertex_count(self) -> int:
        return sum(p.shape[0] * int(np.prod(p.shape[2:])) for p in self.poses)

    def edge_count(self) -> int:
        total = 0
        for l in range(1, self.depth):
            n_out, n_in, S = self.weights[l].shape[:3]
            total += n_out * n_in * S * int(self.pools[l].sizes().sum())
        return total

    def vertex(self, key: Key) -> CapsuleVertex:
        l, i, s, y, x = key
        pose = self.poses[l][i, :, s, y, x]
        act = float(np.sqrt(np.sum(pose ** 2)))
        return CapsuleVertex(l, i, s, y, x, pose.copy(), act, act < self.threshold)

    def has_vertex(self, key: Key) -> bool:
        l, i, s, y, x = key
        if not 0 <= l < self.depth:
            return False
        N, _, S, H, W = self.poses[l].shape
        return 0 <= i < N and 0 <= s < S and 0 <= y < H and 0 <= x < W

    def edge_weight(self, source: Key, target: Key) -> Optional[float]:
        """Weight of the edge source -> target, or None when no such edge exists."""
        l1, i, s1, y1, x1 = source
        l2, j, s2, y2, x2 = target
        if l2 != l1 + 1 or not (self.has_vertex(source) and self.has_vertex(target)):
            return None
        pool = self.pools[l2]
        if s1 not in pool.slots[s2] or not (pool.y_lo[y2] <= y1 <= pool.y_hi[y2]
                                            and pool.x_lo[x2] <= x1 <= pool.x_hi[x2]):
            return None
        return float(self.weights[l2][j, i, s2, y2, x2])

    def vertices(self) -> Iterator[CapsuleVertex]:
        for l, p in enumerate(self.poses):
            N, _, S, H, W = p.shape
            for i in range(N):
                for s in range(S):
                    for y in range(H):
                        for x in range(W):
                            yield self.vertex((l, i, s, y, x))

    def edges(self) -> Iterator[CapsuleEdge]:
        for l in range(1, self.depth):
            w = self.weights[l]
            pool = self.pools[l]
            n_out, n_in, S, H, W = w.shape
            for j in range(n_out):
                for s2 in range(S):
                    for y2 in range(H):
                        for x2 in range(W):
                            members = list(pool.members(s2, y2, x2))
                            for i in range(n_in):
                                c = float(w[j, i, s2, y2, x2])
                                for s1, y1, x1 in members:
                                    yield CapsuleEdge((l - 1, i, s1, y1, x1), (l, j, s2, y2, x2), c)

    # -- export -----------------------------------------------------------------
    def export_text(self, stream=None) -> Optional[str]:
        """``V l i s y x activation`` and ``E l i s1 y1 x1 j s2 y2 x2 weight`` lines.

        ``l`` on an edge is the source layer. Values use 17 significant digits.
        """
        own = stream is None
        out = io.StringIO() if own else stream
        for l, p in enumerate(self.poses):
            act = self.activations(l)
            N, S, H, W = act.shape
            for (i, s, y, x), a in np.ndenumerate(act):
                out.write(f"V {l} {i} {s} {y} {x} {a:.17g}\n")
        for l in range(1, self.depth):
            w = self.weights[l]
            pool = self.pools[l]
            n_out, n_in, S, H, W = w.shape
            for j in range(n_out):
                for s2 in range(S):
                    for y2 in range(H):
                        for x2 in range(W):
                            members = [f"{s1} {y1} {x1}" for s1, y1, x1 in pool.members(s2, y2, x2)]
                            tail = f"{j} {s2} {y2} {x2}"
                            for i in range(n_in):
                                c = f"{float(w[j, i, s2, y2, x2]):.17g}"
                                head = f"E {l - 1} {i} "
                                out.write("".join(f"{head}{m} {tail} {c}\n" for m in members))
        return out.getvalue() if own else None

    def to_bytes(self) -> bytes:
        return self.export_text().encode("ascii")

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.poses:
            h.update(np.ascontiguousarray(p).tobytes())
        for w in self.weights:
            if w is not None:
                h.update(np.ascontiguousarray(w).tobytes())
        return h.hexdigest()


def build_graph(trace: Trace, activation_threshold: float = 0.0) -> CapsuleDecompositionGraph:
    if activation_threshold < 0:
        raise ValueError("activation threshold must be nonnegative")
    if trace.kind not in GROUP_KINDS:
        raise IncompleteTrace(f"unknown group kind {trace.kind!r}")
    if len(trace.layers) < 2:
        raise IncompleteTrace("a trace needs at least two layers")
    S = GROUP_KINDS[trace.kind]
    poses, weights, pools = [], [], []
    for l, lt in enumerate(trace.layers):
        p = np.asarray(lt.poses, dtype=np.float64)
        if p.ndim != 5 or p.shape[2] != S:
            raise IncompleteTrace(f"layer {l}: poses must be (N, d, {S}, H, W), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise IncompleteTrace(f"layer {l}: non-finite poses")
        poses.append(p)
        if l == 0:
            weights.append(None)
            pools.append(None)
            continue
        if lt.weights is None:
            raise IncompleteTrace(f"layer {l}: routing weights missing")
        w = np.asarray(lt.weights, dtype=np.float64)
        prev = poses[l - 1]
        expect = (p.shape[0], prev.shape[0], S) + p.shape[3:]
        if w.shape != expect:
            raise IncompleteTrace(f"layer {l}: weights {w.shape}, expected {expect}")
        weights.append(w)
        pools.append(layer_pool(trace.kind, lt.pool, prev.shape[3:], p.shape[3:], lt.slot_support))
    return CapsuleDecompositionGraph(trace.kind, poses, weights, pools, activation_threshold,
                                     dict(trace.provenance))


# ----------------------------------------------------------------------------- isomorphism

def mapped_vertex(key: Key, h: GroupElement, grid_shape: Tuple[int, int]) -> Optional[Key]:
    """(l, i, g) -> (l, i, h⁻¹∘g), with pixels rotated about the grid centre.

    Returns None when a translation carries the position off the grid.
    """
    l, i, s, y, x = key
    H, W = grid_shape
    hinv = inverse(h)
    g = slot_element(h.kind, s)
    slot = compose(GroupElement(h.kind, hinv.mirror, hinv.rotation), g).slot
    # doubled centred coordinates keep the rotation about the centre exact
    p = (2 * y - (H - 1), 2 * x - (W - 1))
    q = act_on_point(GroupElement(h.kind, hinv.mirror, hinv.rotation), p)
    t = (2 * hinv.translation[0], 2 * hinv.translation[1])
    qy, qx = (q[0] + t[0] + (H - 1)) // 2, (q[1] + t[1] + (W - 1)) // 2
    if not (0 <= qy < H and 0 <= qx < W):
        return None
    return (l, i, slot, qy, qx)


@dataclass
class IsoReport:
    passed: bool
    element: str
    tol: float
    pose_error: float = 0.0
    activation_error: float = 0.0
    weight_error: float = 0.0
    multiset_error: float = 0.0
    pool_mismatches: int = 0
    flag_mismatches: int = 0
    worst_vertex: Optional[Key] = None
    worst_edge: Optional[Tuple[Key, Key]] = None

    def lines(self) -> List[str]:
        return [f"{'PASS' if self.passed else 'FAIL'} h={self.element} tol={self.tol:g}",
                f"pose_error {self.pose_error:.3e} at {self.worst_vertex}",
                f"activation_error {self.activation_error:.3e}",
                f"weight_error {self.weight_error:.3e} at {self.worst_edge}",
                f"multiset_error {self.multiset_error:.3e}",
                f"pool_mismatches {self.pool_mismatches}",
                f"flag_mismatches {self.flag_mismatches}"]


def _map_pixels(h: GroupElement, ys: np.ndarray, xs: np.ndarray, H: int, W: int):
    """Pixels h⁻¹·(y, x) about the grid centre plus an in-grid mask."""
    hinv = inverse(h)
    lin = hinv.linear
    py, px = 2 * ys - (H - 1), 2 * xs - (W - 1)
    qy = lin[0, 0] * py + lin[0, 1] * px + 2 * hinv.translation[0]
    qx = lin[1, 0] * py + lin[1, 1] * px + 2 * hinv.translation[1]
    qy, qx = (qy + (H - 1)) // 2, (qx + (W - 1)) // 2
    return qy, qx, (qy >= 0) & (qy < H) & (qx >= 0) & (qx < W)


def _pool_mismatches(pool: LayerPool, h: GroupElement, H: int, W: int, Hin: int, Win: int) -> int:
    """Count outputs g2 for which h⁻¹ Pool(g2) differs from Pool(h⁻¹ g2).

    Rotations and mirrors map axis-aligned windows onto axis-aligned windows,
    so comparing mapped corners compares the pixel sets.
    """
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    ty, tx, ok = _map_pixels(h, ys, xs, H, W)
    ay, ax, ok_a = _map_pixels(h, pool.y_lo[ys], pool.x_lo[xs], Hin, Win)
    by, bx, ok_b = _map_pixels(h, pool.y_hi[ys], pool.x_hi[xs], Hin, Win)
    ty, tx = np.where(ok, ty, 0), np.where(ok, tx, 0)
    same = (ok & ok_a & ok_b
            & (np.minimum(ay, by) == pool.y_lo[ty]) & (np.maximum(ay, by) == pool.y_hi[ty])
            & (np.minimum(ax, bx) == pool.x_lo[tx]) & (np.maximum(ax, bx) == pool.x_hi[tx]))
    pre = slot_preimage(h)  # slot of h⁻¹∘s for every s
    S = pool.slots.shape[0]
    slot_ok = sum(set(pre[pool.slots[s]].tolist()) == set(pool.slots[pre[s]].tolist()) for s in range(S))
    return S * H * W - slot_ok * int(np.sum(same))


def check_isomorphism(ga: CapsuleDecompositionGraph, gb: CapsuleDecompositionGraph, h: GroupElement,
                      tol: float) -> IsoReport:
    """Check that (l, i, g) in ``gb`` (the graph of L_h x) matches (l, i, h⁻¹∘g) in ``ga``.

    Vertex poses and activations, routing weights on the mapped edges, pool
    structure, below-threshold flags, and the per-layer multisets of routing
    coefficients are all compared.
    """
    if ga.kind != gb.kind or ga.kind != h.kind:
        raise ModelMismatch(f"group kinds {ga.kind}, {gb.kind}, {h.kind}")
    if ga.depth != gb.depth or ga.threshold != gb.threshold:
        raise ModelMismatch("graphs differ in depth or threshold")
    for l in range(ga.depth):
        if ga.poses[l].shape != gb.poses[l].shape:
            raise ModelMismatch(f"layer {l}: pose shapes {ga.poses[l].shape} vs {gb.poses[l].shape}")
    if ga.provenance.get("model") != gb.provenance.get("model"):
        raise ModelMismatch("graphs come from different models")
    rep = IsoReport(True, str(h), tol)
    for l in range(ga.depth):
        pa, pb = ga.poses[l], gb.poses[l]
        H, W = pa.shape[-2:]
        grid = GroupGrid(ga.kind, H, W)
        # [L_h f](g) = f(h⁻¹ g): compare gb with the translated ga
        ta = left_translate(pa, h, grid)
        _, _, valid = point_preimage(h, H, W)
        diff = np.abs(ta - pb) * valid
        err = float(diff.max()) if diff.size else 0.0
        if err > rep.pose_error:
            i, _, s, y, x = np.unravel_index(int(np.argmax(diff)), diff.shape)
            rep.pose_error = err
            rep.worst_vertex = (l, int(i), int(s), int(y), int(x))
        aa = left_translate(ga.activations(l), h, grid)
        ad = np.abs(aa - gb.activations(l)) * valid
        rep.activation_error = max(rep.activation_error, float(ad.max()))
        fa = left_translate(ga.flags(l).astype(np.int8), h, grid)
        rep.flag_mismatches += int(np.sum((fa != gb.flags(l).astype(np.int8)) & valid))
        if l == 0:
            continue
        wa, wb = ga.weights[l], gb.weights[l]
        wd = np.abs(left_translate(wa, h, grid) - wb) * valid
        werr = float(wd.max())
        if werr > rep.weight_error:
            j, i, s, y, x = (int(v) for v in np.unravel_index(int(np.argmax(wd)), wd.shape))
            pool = gb.pools[l]
            src = (l - 1, i) + next(iter(pool.members(s, y, x)))
            rep.weight_error = werr
            rep.worst_edge = (src, (l, j, s, y, x))
        # multisets: each coefficient repeated over its pool
        sa = np.sort(np.repeat(wa.reshape(-1), _pool_size_array(ga.pools[l], wa.shape).reshape(-1)))
        sb = np.sort(np.repeat(wb.reshape(-1), _pool_size_array(gb.pools[l], wb.shape).reshape(-1)))
        if sa.shape != sb.shape:
            rep.multiset_error = float("inf")
        else:
            rep.multiset_error = max(rep.multiset_error, float(np.max(np.abs(sa - sb), initial=0.0)))
        Hin, Win = ga.poses[l - 1].shape[-2:]
        rep.pool_mismatches += _pool_mismatches(gb.pools[l], h, H, W, Hin, Win)
    rep.passed = (max(rep.pose_error, rep.activation_error, rep.weight_error, rep.multiset_error) <= tol
                  and rep.pool_mismatches == 0 and rep.flag_mismatches == 0)
    return rep


def _pool_size_array(pool: LayerPool, wshape) -> np.ndarray:
    n_out, n_in, S, H, W = wshape
    return np.broadcast_to(pool.sizes(), (n_out, n_in, S, H, W)).astype(np.int64)
