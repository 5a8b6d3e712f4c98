"""Per-instance class signals and probabilities from an AB-MIL pass, Grad-CAM style.

The bag embedding is the average of the weighted instance features
``h_hat_k = a_k * K * h_k``, so the logit gradients w.r.t. ``h_hat`` averaged
over instances give per-channel weights ``beta``; an instance's signal for
class c is ``beta_c . h_hat_k`` and a softmax over classes turns signals into
probabilities.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .abmil import AbmilForward, AbmilParams, forward_bag

CSV_HEADER = ["bag_id", "instance_index", "a_raw", "a_norm", "L_neg", "L_pos", "p_pos"]


@dataclass
class InstanceAttribution:
    L: np.ndarray        # (K, C) signal strengths
    p: np.ndarray        # (K, C) per-instance class probabilities
    a_raw: np.ndarray    # (K,) attention scores
    a_norm: np.ndarray   # (K,) min-max normalized attention
    beta: np.ndarray     # (C, D) channel weights

    @property
    def K(self) -> int:
        return self.L.shape[0]

    def rank_by_probability(self, c: int = 1) -> np.ndarray:
        """Instance indices sorted by descending p[:, c]; ties keep the lower index first."""
        return np.argsort(-self.p[:, c], kind="stable")

    def rank_by_attention(self) -> np.ndarray:
        return np.argsort(-self.a_norm, kind="stable")


def channel_weights(forward: AbmilForward, c: int) -> np.ndarray:
    """beta_c[d] = mean over instances i of d s_c / d h_hat[i, d]."""
    if forward.released:
        raise dc.GraphError("forward graph already released")
    C = forward.s.shape[1]
    if not 0 <= c < C:
        raise ValueError(f"class {c} out of range for C={C}")
    (g,) = dc.grad(forward.s[0, c], [forward.h_hat])
    return g.mean(axis=0)


def all_channel_weights(forward: AbmilForward) -> np.ndarray:
    return np.stack([channel_weights(forward, c) for c in range(forward.s.shape[1])])


def instance_signals(forward_or_h_hat, beta: np.ndarray) -> np.ndarray:
    """L[k, c] = beta[c] . h_hat[k]."""
    h_hat = forward_or_h_hat.h_hat.data if isinstance(forward_or_h_hat, AbmilForward) else forward_or_h_hat
    h_hat = np.asarray(h_hat)
    beta = np.atleast_2d(beta)
    if beta.shape[1] != h_hat.shape[1]:
        raise dc.DimensionError(f"beta has dim {beta.shape[1]}, h_hat has dim {h_hat.shape[1]}")
    return h_hat @ beta.T


def instance_probs(L: np.ndarray) -> np.ndarray:
    """Row-wise softmax over classes."""
    L = np.atleast_2d(L)
    z = L - L.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def normalize_attention(a) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant vector maps to all zeros."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    lo, hi = a.min(), a.max()
    if hi - lo <= 1e-12:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def attribute_forward(forward: AbmilForward) -> InstanceAttribution:
    beta = all_channel_weights(forward)
    L = instance_signals(forward, beta)
    a = forward.scores.astype(np.float64)
    return InstanceAttribution(L=L, p=instance_probs(L), a_raw=a,
                               a_norm=normalize_attention(a), beta=beta)


def attribute_bag(H, params: AbmilParams) -> InstanceAttribution:
    fwd = forward_bag(H, params)
    return attribute_forward(fwd)


def write_attribution_csv(path, rows: list[tuple[str, InstanceAttribution]]) -> None:
    """One row per instance, columns as in ``CSV_HEADER``; two-class models only."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for bag_id, att in rows:
            if att.L.shape[1] != 2:
                raise ValueError("CSV export covers the two-class case")
            for k in range(att.K):
                w.writerow([bag_id, k, repr(float(att.a_raw[k])), repr(float(att.a_norm[k])),
                            repr(float(att.L[k, 0])), repr(float(att.L[k, 1])),
                            repr(float(att.p[k, 1]))])
