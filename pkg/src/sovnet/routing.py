"""Routing between capsule layers.

``route_general`` is the summation-based routing skeleton with pluggable
weight and agreement rules; ``route_degree`` is the degree-centrality
instantiation: cosine affinities between the predictions for one deeper
capsule, row-sum degrees, softmax over the shallower types.

Prediction stacks are tensors indexed (B, N_out, N_in, d, S, H, W); routing
weights are indexed (B, N_out, N_in, S, H, W) and sum to one over N_in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .gconv import GroupFilter, Geometry, geometry_for, group_correlate_grouped
from .groups import GroupGrid
from .tensor import ShapeMismatch, Tensor

NORM_EPS = 1e-12  # inside sqrt of two-norms during training
COSINE_EPS = 1e-8  # added to norms in cosine denominators

POSE_AXIS = 3  # of a prediction stack
TYPE_AXIS = 2  # shallower capsule types in a prediction stack


class RuleContractViolation(ValueError):
    pass


def squash(v, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """v * |v| / (1 + |v|^2); output norm |v|^2 / (1 + |v|^2) < 1."""
    v = T.as_tensor(v)
    n = T.two_norm(v, axis=axis, eps=eps, keep=True)
    return v * (n / (1.0 + T.square(n)))


def degree_score(predictions, axis: int = 0, pose_axis: int = -1, eps: float = COSINE_EPS,
                 norm_eps: float = NORM_EPS) -> Tensor:
    """Softmaxed degree centrality of the cosine-affinity graph over ``axis``.

    ``predictions`` holds the candidate vectors along ``axis`` with their
    components along ``pose_axis``. A_ik = <S_i, S_k> / ((|S_i|+eps)(|S_k|+eps)),
    self-affinity included, Degree_i = sum_k A_ik, weights = softmax(Degree).
    Returns the weights with ``pose_axis`` removed.
    """
    p = T.as_tensor(predictions)
    pose_axis = pose_axis % p.ndim
    axis = axis % p.ndim
    n = T.two_norm(p, axis=pose_axis, eps=norm_eps, keep=True)
    # a zero vector (possible only with eps == norm_eps == 0) gets unit vector 0
    guard = (n.data + eps == 0).astype(p.dtype)
    unit = p / (n + (eps + guard))
    # sum_k <u_i, u_k> = <u_i, sum_k u_k>
    total = T.reduce_sum(unit, axis, keep=True)
    degree = T.reduce_sum(unit * total, pose_axis)
    w_axis = axis if axis < pose_axis else axis - 1
    return T.softmax(degree, axis=w_axis)


def aggregate(predictions: Tensor, weights: Tensor) -> Tensor:
    """sum_i c_ij(g) S_ij(g): (B, No, Ni, d, S, H, W) x (B, No, Ni, S, H, W) -> (B, No, d, S, H, W)."""
    predictions = T.as_tensor(predictions)
    weights = T.as_tensor(weights, predictions)
    ws = weights.shape
    ps = predictions.shape
    if ws[:POSE_AXIS] != ps[:POSE_AXIS] or ws[POSE_AXIS:] != ps[POSE_AXIS + 1:]:
        raise ShapeMismatch(f"predictions {ps} vs weights {ws}")
    c = T.expand_dims(weights, POSE_AXIS)
    return T.reduce_sum(predictions * c, TYPE_AXIS)


# ----------------------------------------------------------------------------- rules

class WeightRule:
    """Maps a prediction stack to routing weights over the shallower types."""

    name = "weights"

    def __call__(self, predictions: Tensor) -> Tensor:
        raise NotImplementedError


class AgreementRule:
    """Maps (aggregated pose, prediction stack) to an activation in [0, 1]."""

    name = "agreement"

    def __call__(self, pose: Tensor, predictions: Tensor) -> Tensor:
        raise NotImplementedError


class DegreeWeights(WeightRule):
    name = "degree"

    def __init__(self, eps: float = COSINE_EPS, norm_eps: float = NORM_EPS):
        self.eps = eps
        self.norm_eps = norm_eps

    def __call__(self, predictions):
        return degree_score(predictions, axis=TYPE_AXIS, pose_axis=POSE_AXIS, eps=self.eps,
                            norm_eps=self.norm_eps)


class UniformWeights(WeightRule):
    name = "uniform"

    def __call__(self, predictions):
        shape = predictions.shape[:POSE_AXIS] + predictions.shape[POSE_AXIS + 1:]
        return Tensor(np.full(shape, 1.0 / predictions.shape[TYPE_AXIS], dtype=predictions.dtype))


class NormAgreement(AgreementRule):
    """Activation is the two-norm of the (squashed) pose."""

    name = "norm"

    def __init__(self, norm_eps: float = NORM_EPS):
        self.norm_eps = norm_eps

    def __call__(self, pose, predictions):
        return T.two_norm(pose, axis=2, eps=self.norm_eps)


class CosineMeanAgreement(AgreementRule):
    """Reference rule: mean cosine between the aggregate and each prediction, clipped to [0, 1].

    Not part of degree routing; shipped to exercise the pluggable seam.
    """

    name = "cosine-mean"

    def __init__(self, eps: float = COSINE_EPS, norm_eps: float = NORM_EPS):
        self.eps = eps
        self.norm_eps = norm_eps

    def __call__(self, pose, predictions):
        pu = predictions / (T.two_norm(predictions, POSE_AXIS, self.norm_eps, keep=True) + self.eps)
        fu = pose / (T.two_norm(pose, 2, self.norm_eps, keep=True) + self.eps)
        cos = T.reduce_sum(pu * T.expand_dims(fu, TYPE_AXIS), POSE_AXIS)
        m = T.mean(cos, TYPE_AXIS)
        return T.relu(m) - T.relu(m - 1.0)


def check_simplex(weights: Tensor, axis: int = TYPE_AXIS, tol: float = 1e-6) -> None:
    w = weights.data
    if np.any(w < -tol) or np.any(np.abs(w.sum(axis=axis) - 1.0) > tol):
        raise RuleContractViolation("routing weights leave the probability simplex")


# ----------------------------------------------------------------------------- pipeline

@dataclass
class RoutedLayer:
    """Output of one routing step plus what graph extraction needs."""

    poses: Tensor  # (B, N_out, d, S, H, W)
    weights: Tensor  # (B, N_out, N_in, S, H, W)
    activations: Optional[Tensor] = None  # (B, N_out, S, H, W)
    predictions: Optional[Tensor] = None


def predict(inputs, filters: Sequence[GroupFilter], grid: GroupGrid, stride: int = 1,
            geometry: Optional[Geometry] = None) -> Tensor:
    """S_ij = f_i ⋆ Ψ_j: every input type passes through each output type's filter.

    inputs: (B, N_in, d_in, S, H, W); filters: one GroupFilter per output type
    with weight (d_out, d_in, S, k, k). Returns (B, N_out, N_in, d_out, S, Ho, Wo).
    """
    inputs = T.as_tensor(inputs, filters[0].weight)
    if inputs.ndim != 6:
        raise ShapeMismatch(f"capsule field must be (B, N, d, S, H, W), got {inputs.shape}")
    B, Ni, d, S, H, W = inputs.shape
    for f in filters:
        if f.weight.shape[1] != d:
            raise ShapeMismatch(f"filter in-channels {f.weight.shape[1]} vs pose dim {d}")
    bank = T.stack([f.weight for f in filters], axis=0)  # (No, d_out, d, S, k, k)
    geom = geometry if geometry is not None else geometry_for(bank.shape[-1], stride)
    x = T.reshape(inputs, (B * Ni, 1, d, S, H, W))
    out = group_correlate_grouped(x, bank, grid.kind, geom)  # (B*Ni, No, d_out, S, Ho, Wo)
    return to_stack(out, B, Ni)


def to_stack(out: Tensor, B: int, Ni: int) -> Tensor:
    """(B*N_in, N_out, d, S, H, W) -> (B, N_out, N_in, d, S, H, W)."""
    No = out.shape[1]
    out = T.reshape(out, (B, Ni, No) + out.shape[2:])
    return T.transpose(out, (0, 2, 1, 3, 4, 5, 6))


def route_general(predictions: Tensor, weight_rule: WeightRule, agreement_rule: AgreementRule,
                  squash_output: bool = True, norm_eps: float = NORM_EPS,
                  tol: float = 1e-6) -> RoutedLayer:
    """Generic weighted-sum routing of a prediction stack."""
    c = weight_rule(predictions)
    if c.shape != predictions.shape[:POSE_AXIS] + predictions.shape[POSE_AXIS + 1:]:
        raise RuleContractViolation(f"weight rule returned shape {c.shape}")
    check_simplex(c, tol=tol)
    f = aggregate(predictions, c)
    if squash_output:
        f = squash(f, axis=2, eps=norm_eps)
    a = agreement_rule(f, predictions)
    return RoutedLayer(f, c, a, predictions)


def route_predictions(predictions: Tensor, norm_eps: float = NORM_EPS,
                      cosine_eps: float = COSINE_EPS) -> RoutedLayer:
    """Degree routing of an already-computed prediction stack."""
    return route_general(predictions, DegreeWeights(cosine_eps, norm_eps), NormAgreement(norm_eps),
                         squash_output=True, norm_eps=norm_eps)


def route_degree(inputs, filters: Sequence[GroupFilter], grid: GroupGrid, stride: int = 1,
                 norm_eps: float = NORM_EPS, cosine_eps: float = COSINE_EPS) -> RoutedLayer:
    """predict -> DegreeScore -> aggregate -> squash, without iterations."""
    s = predict(inputs, filters, grid, stride)
    return route_predictions(s, norm_eps, cosine_eps)
