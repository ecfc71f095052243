"""SOVNET assembly: primary capsules, degree-routed hidden blocks, class capsules.

Every capsule field is a tensor indexed (B, N, d, S, H, W): batch, capsule
type, pose component, stabilizer slot, row, column.
"""

from __future__ import annotations

import hashlib
import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .gconv import (
    Geometry,
    LiftingFilter,
    ResidualParams,
    block_parameter_count,
    check_symmetric,
    downsample,
    geometry_for,
    group_correlate_grouped,
    lift_correlate,
    residual_bank,
    same,
)
from .groups import GROUP_KINDS, GroupElement, GroupGrid, left_translate, stabilizer
from .routing import NORM_EPS, COSINE_EPS, RoutedLayer, route_predictions, squash, to_stack
from .tensor import ShapeMismatch, Tensor

MAGIC = b"SOVN1"


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def _parse_ints(text: str) -> List[int]:
    text = text.strip().strip("[]()")
    return [int(t) for t in text.replace(",", " ").split()] if text else []


@dataclass
class ModelConfig:
    group: str = "p4"
    in_channels: int = 1
    image_size: int = 15
    stem_channels: int = 8
    primary_types: int = 4
    hidden_types: List[int] = field(default_factory=lambda: [4, 4])
    strides: List[int] = field(default_factory=lambda: [2, 2])
    pose_dim: int = 4
    class_dim: int = 8
    classes: int = 10
    kernel: int = 3
    decoder_hidden: List[int] = field(default_factory=lambda: [64, 128])
    init_gain: float = 2.0
    norm_eps: float = NORM_EPS
    cosine_eps: float = COSINE_EPS

    def __post_init__(self):
        self.hidden_types = list(self.hidden_types)
        self.strides = list(self.strides)
        self.decoder_hidden = list(self.decoder_hidden)
        self.validate()

    # -- derived geometry ---------------------------------------------------
    @property
    def stabilizer_size(self) -> int:
        return GROUP_KINDS[self.group]

    @property
    def type_counts(self) -> List[int]:
        """N_l for every capsule layer, primary through class capsules."""
        return [self.primary_types] + self.hidden_types + [self.classes]

    def layer_sizes(self) -> List[int]:
        """Spatial extent of every capsule layer (the class layer is 1)."""
        sizes = [self.image_size]
        for s in self.strides:
            n = sizes[-1]
            sizes.append(n if s == 1 else downsample(n).out_size(n))
        return sizes + [1]

    def grid(self, size: Optional[int] = None) -> GroupGrid:
        n = self.image_size if size is None else size
        return GroupGrid(self.group, n, n)

    def validate(self) -> None:
        if self.group not in GROUP_KINDS:
            raise ConfigError(f"group must be one of {sorted(GROUP_KINDS)}")
        if len(self.strides) != len(self.hidden_types):
            raise ConfigError("strides must list one entry per hidden layer")
        if any(s not in (1, 2) for s in self.strides):
            raise ConfigError("strides must be 1 or 2")
        if self.kernel % 2 == 0:
            raise ConfigError("kernel must be odd")
        if min([self.in_channels, self.stem_channels, self.primary_types, self.pose_dim,
                self.class_dim, self.classes, self.image_size] + self.hidden_types) < 1:
            raise ConfigError("sizes must be positive")
        n = self.image_size
        for s in self.strides:
            if s == 2:
                g = downsample(n)
                if n < 2 or not check_symmetric(g, n):
                    raise ConfigError(f"cannot downsample a {n}x{n} grid symmetrically")
                n = g.out_size(n)
        if n < 1:
            raise ConfigError("image too small for the configured strides")

    # -- text form ----------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, kv: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        args = {}
        for key, raw in kv.items():
            if key not in known:
                raise ConfigError(f"unknown model key: {key}")
            default = getattr(cls(), key)
            try:
                if isinstance(default, list):
                    args[key] = _parse_ints(str(raw)) if not isinstance(raw, list) else list(raw)
                elif isinstance(default, bool):
                    args[key] = str(raw).lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    args[key] = int(raw)
                elif isinstance(default, float):
                    args[key] = float(raw)
                else:
                    args[key] = str(raw).strip()
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**args)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            if "=" not in line:
                raise ConfigError(f"malformed line: {line!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        return cls.from_mapping(kv)


def desk_config(**overrides) -> ModelConfig:
    """The default desk-scale configuration (p4, two strided hidden layers, 15x15 inputs)."""
    return ModelConfig(**overrides)


def micro_config(**overrides) -> ModelConfig:
    """A two-layer model small enough for exhaustive finite-difference checks."""
    base = dict(image_size=5, stem_channels=2, primary_types=2, hidden_types=[], strides=[],
                pose_dim=2, class_dim=2, classes=2, decoder_hidden=[3, 4])
    base.update(overrides)
    return ModelConfig(**base)


# ----------------------------------------------------------------------------- fields

@dataclass
class CapsuleField:
    """Capsule poses of one layer; routed layers also carry their routing weights.

    ``pool`` is the chain of planar geometries by which this layer reads the
    previous one; it determines Pool(g) in the decomposition graph.
    """

    poses: Tensor  # (B, N, d, S, H, W)
    layer: int
    weights: Optional[Tensor] = None  # (B, N, N_prev, S, H, W)
    pool: Sequence[Geometry] = ()

    @property
    def activations(self) -> np.ndarray:
        return np.sqrt(np.sum(self.poses.data ** 2, axis=2))

    @property
    def types(self) -> int:
        return self.poses.shape[1]


@dataclass
class ForwardResult:
    classes: CapsuleField
    layers: List[CapsuleField]

    @property
    def class_poses(self) -> Tensor:
        return self.classes.poses


# ----------------------------------------------------------------------------- model

class SOVNet:
    def __init__(self, config: ModelConfig, params: Optional[dict] = None, seed: int = 0,
                 dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        if params is None:
            self._init(np.random.default_rng(seed))
        else:
            for name, arr in params.items():
                self.params[name] = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True)
            self._check_params()

    # -- parameters -----------------------------------------------------------
    def _init(self, rng: np.random.Generator) -> None:
        c = self.config
        S = c.stabilizer_size
        dt = self.dtype
        gain = c.init_gain
        k = c.kernel
        p = self.params

        def normal(shape, fan_in, scale=1.0):
            return Tensor(rng.normal(0.0, scale * gain / np.sqrt(fan_in), size=shape).astype(dt),
                          requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

        C = c.stem_channels
        p["stem.lift.w"] = normal((C, c.in_channels, k, k), c.in_channels * k * k)
        p["stem.lift.b"] = zeros((C,))
        self._add_block("stem.res", rng, 1, C, C, 1, c.image_size)
        d = c.pose_dim
        p["primary.conv.w"] = normal((c.primary_types, d, C, S, k, k), C * S * k * k)
        p["primary.conv.b"] = zeros((c.primary_types, d))
        self._add_block("primary.res", rng, c.primary_types, d, d, 1, c.image_size)
        sizes = c.layer_sizes()
        for l, (n_out, stride) in enumerate(zip(c.hidden_types, c.strides), start=1):
            self._add_block(f"hidden{l}", rng, n_out, d, d, stride, sizes[l - 1])
        n = sizes[-2]
        p["out.w"] = normal((c.classes, c.class_dim, d, S, n, n), d * S * n * n)
        fan = c.classes * c.class_dim
        for i, h in enumerate(c.decoder_hidden + [c.in_channels * c.image_size ** 2], start=1):
            p[f"dec.w{i}"] = normal((fan, h), fan)
            p[f"dec.b{i}"] = zeros((h,))
            fan = h

    def _add_block(self, prefix, rng, banks, c_in, c_out, stride, in_size):
        from .gconv import init_residual

        blk = init_residual(rng, banks, c_in, c_out, self.config.stabilizer_size, stride, in_size,
                            self.dtype, self.config.init_gain, self.config.kernel)
        for name, t in blk.tensors().items():
            self.params[f"{prefix}.{name}"] = t

    def _check_params(self) -> None:
        fresh = SOVNet(self.config, seed=0, dtype=self.dtype)
        if list(fresh.params) != list(self.params):
            raise CheckpointError("parameter names do not match the configuration")
        for name, t in fresh.params.items():
            if self.params[name].shape != t.shape:
                raise CheckpointError(f"shape of {name}: {self.params[name].shape} != {t.shape}")

    def _block(self, prefix: str, stride: int) -> ResidualParams:
        p = self.params
        return ResidualParams(p[f"{prefix}.gc1"], p[f"{prefix}.gc2"], p.get(f"{prefix}.proj"), stride)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def hidden_parameter_count(self, layer: int) -> int:
        prefix = f"hidden{layer}."
        return sum(t.size for n, t in self.params.items() if n.startswith(prefix))

    def closed_form_hidden_count(self, layer: int) -> int:
        c = self.config
        stride = c.strides[layer - 1]
        n_in = c.layer_sizes()[layer - 1]
        k1 = c.kernel if stride == 1 else downsample(n_in).k
        return c.hidden_types[layer - 1] * block_parameter_count(
            c.pose_dim, c.pose_dim, c.stabilizer_size, k1, c.kernel, stride)

    def pairwise_hidden_count(self, layer: int) -> int:
        """Parameters if every (input type, output type) pair had its own prediction block."""
        c = self.config
        return c.type_counts[layer - 1] * self.closed_form_hidden_count(layer)

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.config.to_text().encode())
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]

    # -- forward ---------------------------------------------------------------
    def _input(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        c = self.config
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if x.shape[1:] != (c.in_channels, c.image_size, c.image_size):
            raise ShapeMismatch(f"expected images (B, {c.in_channels}, {c.image_size}, {c.image_size}), got {x.shape}")
        return x

    def primary_capsules(self, images) -> CapsuleField:
        c = self.config
        p = self.params
        x = self._input(images)
        grid = c.grid()
        stem = lift_correlate(x, LiftingFilter(p["stem.lift.w"], p["stem.lift.b"]), grid)
        stem = T.selu(stem)  # (B, C, S, H, W)
        B = stem.shape[0]
        h = T.reshape(stem, (B, 1) + stem.shape[1:])
        h = residual_bank(h, self._block("stem.res", 1), c.group)  # (B, 1, C, S, H, W)
        h = group_correlate_grouped(h, p["primary.conv.w"], c.group, same(c.kernel))
        h = h + T.reshape(p["primary.conv.b"], (c.primary_types, c.pose_dim, 1, 1, 1))
        h = residual_bank(h, self._block("primary.res", 1), c.group)  # (B, N0, d, S, H, W)
        return CapsuleField(squash(h, axis=2, eps=c.norm_eps), 0)

    def hidden_block(self, fld: CapsuleField, layer: int) -> CapsuleField:
        c = self.config
        stride = c.strides[layer - 1]
        poses = fld.poses
        B, Ni = poses.shape[:2]
        x = T.reshape(poses, (B * Ni, 1) + poses.shape[2:])
        blk = self._block(f"hidden{layer}", stride)
        s = to_stack(residual_bank(x, blk, c.group), B, Ni)
        routed = route_predictions(s, c.norm_eps, c.cosine_eps)
        g1 = geometry_for(blk.gc1.shape[-1], stride)
        return CapsuleField(routed.poses, layer, routed.weights, (g1, same(blk.gc2.shape[-1])))

    def output_layer(self, fld: CapsuleField) -> CapsuleField:
        c = self.config
        poses = fld.poses
        B, Ni = poses.shape[:2]
        n = poses.shape[-1]
        w = self.params["out.w"]
        if w.shape[-1] != n:
            raise ShapeMismatch(f"output filter covers {w.shape[-1]}, field is {n}")
        geom = Geometry(n, 1, 0)
        x = T.reshape(poses, (B * Ni, 1) + poses.shape[2:])
        s = to_stack(group_correlate_grouped(x, w, c.group, geom), B, Ni)
        routed = route_predictions(s, c.norm_eps, c.cosine_eps)
        return CapsuleField(routed.poses, fld.layer + 1, routed.weights, (geom,))

    def forward(self, images) -> ForwardResult:
        layers = [self.primary_capsules(images)]
        for l in range(1, len(self.config.hidden_types) + 1):
            layers.append(self.hidden_block(layers[-1], l))
        out = self.output_layer(layers[-1])
        layers.append(out)
        return ForwardResult(out, layers)

    __call__ = forward

    def scores(self, images) -> np.ndarray:
        return classify(self.forward(images).class_poses)[1]

    def predict_classes(self, images, batch_size: int = 64) -> np.ndarray:
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        out = []
        for s in range(0, len(images), batch_size):
            out.append(classify(self.forward(images[s:s + batch_size]).class_poses)[0])
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def reconstruct(self, class_poses: Tensor, true_class) -> Tensor:
        return reconstruct(class_poses, true_class, self.params, self.config)

    # -- checkpoints -------------------------------------------------------------
    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(checkpoint_bytes(self.config, self.params))

    @classmethod
    def load(cls, path, dtype=None) -> "SOVNet":
        with open(path, "rb") as fh:
            config, params = parse_checkpoint(fh.read())
        if dtype is None:
            dtype = next(iter(params.values())).dtype if params else np.float32
        return cls(config, params, dtype=dtype)

    def astype(self, dtype) -> "SOVNet":
        return SOVNet(self.config, {k: v.data for k, v in self.params.items()}, dtype=dtype)


# ----------------------------------------------------------------------------- heads

def class_scores(class_poses: Tensor, norm_eps: float = 0.0) -> Tensor:
    """score_k = max over group slots (and positions) of |pose_k|: (B, K, d, S, h, w) -> (B, K)."""
    n = T.two_norm(class_poses, axis=2, eps=norm_eps)  # (B, K, S, h, w)
    B, K = n.shape[:2]
    return T.max_along(T.reshape(n, (B, K, -1)), axis=2)


def classify(class_poses) -> tuple:
    """(predicted class per sample, per-class scores); ties go to the lowest index."""
    poses = class_poses.data if isinstance(class_poses, Tensor) else np.asarray(class_poses)
    if poses.ndim == 5:
        poses = poses[None]
    B, K = poses.shape[:2]
    scores = np.sqrt(np.sum(poses ** 2, axis=2)).reshape(B, K, -1).max(axis=2)
    return np.argmax(scores, axis=1), scores


def pooled_poses(class_poses: Tensor) -> Tensor:
    """Each class capsule's pose at its maximal-norm group position: (B, K, d)."""
    B, K, d = class_poses.shape[:3]
    flat = T.reshape(class_poses, (B, K, d, -1))
    norms = np.sum(flat.data ** 2, axis=2)  # (B, K, P)
    idx = np.argmax(norms, axis=2)[:, :, None, None]  # (B, K, 1, 1)
    idx = np.broadcast_to(idx, (B, K, d, 1))
    return T.reshape(T.take_along(flat, idx, axis=3), (B, K, d))


def reconstruct(class_poses: Tensor, true_class, params: dict, config: ModelConfig) -> Tensor:
    """Decode the true class capsule (others masked to zero) back to an image."""
    class_poses = T.as_tensor(class_poses)
    if class_poses.ndim == 5:
        class_poses = T.reshape(class_poses, (1,) + class_poses.shape)
    B, K, d = class_poses.shape[:3]
    labels = np.atleast_1d(np.asarray(true_class, dtype=np.int64))
    if labels.shape != (B,):
        raise ShapeMismatch(f"need one label per sample, got {labels.shape} for batch {B}")
    if np.any(labels < 0) or np.any(labels >= K):
        raise IndexError(f"class index out of range [0, {K})")
    mask = np.zeros((B, K) + (1,) * (class_poses.ndim - 2), dtype=class_poses.dtype)
    mask[np.arange(B), labels] = 1.0
    # multiply by the mask before pooling so masked capsules cannot leak
    v = pooled_poses(class_poses * mask)
    h = T.reshape(v, (B, K * d))
    n_layers = len(config.decoder_hidden) + 1
    for i in range(1, n_layers + 1):
        h = T.matmul(h, params[f"dec.w{i}"]) + params[f"dec.b{i}"]
        h = T.selu(h) if i < n_layers else T.sigmoid(h)
    c, n = config.in_channels, config.image_size
    return T.reshape(h, (B, c, n, n))


# ----------------------------------------------------------------------------- checkpoint format

_DTYPE_TAGS = {np.dtype(np.float32): b"f", np.dtype(np.float64): b"d"}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def checkpoint_bytes(config: ModelConfig, params: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    text = config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    for name, t in params.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t)
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(_DTYPE_TAGS[arr.dtype])
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return buf.getvalue()


def parse_checkpoint(data: bytes):
    if not data.startswith(MAGIC):
        raise CheckpointError("bad checkpoint magic")
    pos = len(MAGIC)

    def read(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (n,) = struct.unpack("<I", read(4))
    try:
        config = ModelConfig.from_text(read(n).decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointError(f"bad config block: {exc}") from exc
    params = OrderedDict()
    while pos < len(data):
        (ln,) = struct.unpack("<I", read(4))
        name = read(ln).decode("utf-8")
        tag = read(1)
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag!r}")
        dt = _TAG_DTYPES[tag].newbyteorder("<")
        (rank,) = struct.unpack("<I", read(4))
        shape = struct.unpack(f"<{rank}I", read(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(read(count * dt.itemsize), dtype=dt).reshape(shape)
        params[name] = arr.astype(_TAG_DTYPES[tag])
    return config, params


# ----------------------------------------------------------------------------- equivariance checks

@dataclass
class EquivarianceRow:
    layer: str
    element: str
    error: float
    compared: int  # number of output entries inside the comparison mask


def _window_inside(chain: Sequence[Geometry], n_in: int, n_out: int) -> np.ndarray:
    """Output indices whose unclipped receptive window lies inside [0, n_in)."""
    lo = np.arange(n_out)
    hi = lo.copy()
    for g in reversed(chain):
        lo = lo * g.stride - g.padding
        hi = hi * g.stride - g.padding + g.k - 1
    return (lo >= 0) & (hi <= n_in - 1)


def layer_maps(model: "SOVNet"):
    """(name, function on input arrays, pool chain, stride, translatable) per layer.

    Layer inputs are images for the primary layer and pose fields otherwise.
    The class layer reads its whole input at once, so only stabilizer
    elements apply to it.
    """
    c = model.config
    k = c.kernel
    maps = [("primary", lambda x: model.primary_capsules(x).poses.data, [same(k)] * 6, 1, True)]
    for l in range(1, len(c.hidden_types) + 1):
        stride = c.strides[l - 1]
        n_in = c.layer_sizes()[l - 1]
        k1 = downsample(n_in).k if stride == 2 else k
        chain = [geometry_for(k1, stride) if stride == 2 else same(k1), same(k)]

        def fn(x, l=l):
            return model.hidden_block(CapsuleField(Tensor(x), l - 1), l).poses.data

        maps.append((f"hidden{l}", fn, chain, stride, True))
    maps.append(("class", lambda x: model.output_layer(CapsuleField(Tensor(x), len(c.hidden_types))).poses.data,
                 [], 1, False))
    return maps


def _act(arr: np.ndarray, g: GroupElement, planar: bool) -> np.ndarray:
    n = arr.shape[-1]
    return left_translate(arr, g, GroupGrid(g.kind, n, n), planar=planar)


def equivariance_report(model: "SOVNet", images: np.ndarray, translations: Sequence = (),
                        elements: Optional[Sequence[GroupElement]] = None) -> List[EquivarianceRow]:
    """Max-abs error of Phi(L_g x) - L_g Phi(x) per (layer, element), plus the full pass.

    Stabilizer elements act about the grid centre and are compared on the
    whole field. Each translation ``(u, v)`` is applied at every translatable
    layer whose stride divides it, and compared on outputs whose receptive
    windows stay inside both grids.
    """
    c = model.config
    kind = c.group
    els = list(stabilizer(kind)) if elements is None else list(elements)
    x0 = np.asarray(images, dtype=model.dtype)
    if x0.ndim == 3:
        x0 = x0[None]
    rows: List[EquivarianceRow] = []
    inputs = [x0]
    for name, fn, chain, stride, translatable in layer_maps(model):
        x = inputs[-1]
        planar = name == "primary"
        y = fn(x)
        inputs.append(y)
        for g in els:
            err = np.abs(fn(_act(x, g, planar)) - _act(y, g, False))
            rows.append(EquivarianceRow(name, str(g), float(err.max()), int(err.size)))
        if not translatable:
            continue
        n_in, n_out = x.shape[-1], y.shape[-1]
        inside = _window_inside(chain, n_in, n_out)
        for u, v in translations:
            if u % stride or v % stride:
                continue
            t_in = GroupElement(kind, 0, 0, (u, v))
            t_out = GroupElement(kind, 0, 0, (u // stride, v // stride))
            lhs = fn(_act(x, t_in, planar))
            rhs = _act(y, t_out, False)
            # compare where the window of p and of p - t_out both lie inside
            rows_ok = inside & np.roll(inside, u // stride) & _in_range(n_out, u // stride)
            cols_ok = inside & np.roll(inside, v // stride) & _in_range(n_out, v // stride)
            mask = np.outer(rows_ok, cols_ok)
            err = np.abs(lhs - rhs) * mask
            rows.append(EquivarianceRow(name, str(t_in), float(err.max()) if mask.any() else 0.0,
                                        int(mask.sum()) * int(np.prod(err.shape[:-2]))))
    full_in = x0
    out = model.forward(full_in).class_poses.data
    for g in els:
        err = np.abs(model.forward(_act(full_in, g, True)).class_poses.data - _act(out, g, False))
        rows.append(EquivarianceRow("full", str(g), float(err.max()), int(err.size)))
    return rows


def _in_range(n: int, shift: int) -> np.ndarray:
    """Indices p with p - shift inside [0, n)."""
    p = np.arange(n)
    return (p - shift >= 0) & (p - shift < n)
