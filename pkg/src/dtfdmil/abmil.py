"""Gated-attention MIL (AB-MIL): attention scores, attention pooling, classifier head."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

FORMAT_VERSION = 1


class EmptyBagError(ValueError):
    pass


@dataclass
class AbmilParams:
    """Learnable tensors of one AB-MIL model.

    Shapes: ``V1``, ``V2`` are (D_att, D); ``w`` is (1, D_att); ``Wc`` is
    (C, D) and ``bc`` is (1, C). With ``head_hidden > 0`` the head becomes
    ``Wc @ tanh(Wh F + bh) + bc`` and ``Wc`` is (C, head_hidden).
    """

    V1: Tensor
    V2: Tensor
    w: Tensor
    Wc: Tensor
    bc: Tensor
    head_bias: bool = True
    Wh: Tensor | None = None
    bh: Tensor | None = None

    @property
    def D(self) -> int:
        return self.V1.shape[1]

    @property
    def D_att(self) -> int:
        return self.V1.shape[0]

    @property
    def C(self) -> int:
        return self.Wc.shape[0]

    @property
    def head_hidden(self) -> int:
        return 0 if self.Wh is None else self.Wh.shape[0]

    @property
    def linear_head(self) -> bool:
        return self.Wh is None

    def named(self) -> dict[str, Tensor]:
        out = {"V1": self.V1, "V2": self.V2, "w": self.w, "Wc": self.Wc, "bc": self.bc}
        if self.Wh is not None:
            out["Wh"] = self.Wh
            out["bh"] = self.bh
        return out

    def trainable(self) -> list[Tensor]:
        """Parameters the optimizer updates; a disabled bias is excluded."""
        return [t for name, t in self.named().items() if name != "bc" or self.head_bias]

    def copy(self) -> "AbmilParams":
        def cp(t):
            return None if t is None else Tensor(t.data.copy(), requires_grad=t.requires_grad)

        return AbmilParams(cp(self.V1), cp(self.V2), cp(self.w), cp(self.Wc), cp(self.bc),
                           self.head_bias, cp(self.Wh), cp(self.bh))

    def astype(self, dtype) -> "AbmilParams":
        out = self.copy()
        for t in out.named().values():
            t.data = t.data.astype(dtype)
        return out


def init_params(D: int, D_att: int = 128, C: int = 2, rng: np.random.Generator | None = None,
                head_bias: bool = True, head_hidden: int = 0, dtype=np.float32) -> AbmilParams:
    """Fan-in uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)). A disabled bias stays at zero."""
    if C < 2:
        raise ValueError(f"need at least 2 classes, got C={C}")
    if rng is None:
        rng = dc.make_rng(0)

    def uni(shape, fan_in):
        b = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-b, b, size=shape).astype(dtype), requires_grad=True)

    V1 = uni((D_att, D), D)
    V2 = uni((D_att, D), D)
    w = uni((1, D_att), D_att)
    Wh = bh = None
    head_in = D
    if head_hidden > 0:
        Wh = uni((head_hidden, D), D)
        bh = uni((1, head_hidden), D)
        head_in = head_hidden
    Wc = uni((C, head_in), head_in)
    if head_bias:
        bc = uni((1, C), head_in)
    else:
        bc = Tensor(np.zeros((1, C), dtype=dtype), requires_grad=False)
    return AbmilParams(V1, V2, w, Wc, bc, head_bias, Wh, bh)


@dataclass
class AbmilForward:
    """Output of one AB-MIL pass; keeps the graph so logits can be differentiated later."""

    H: Tensor
    a: Tensor          # (1, K) attention scores
    h_hat: Tensor      # (K, D) weighted instance features a_k * K * h_k
    F: Tensor          # (1, D) bag embedding
    s: Tensor          # (1, C) logits
    p_bag: Tensor      # (1, C) class probabilities
    released: bool = field(default=False)

    @property
    def K(self) -> int:
        return self.H.shape[0]

    def release(self) -> None:
        """Drop graph handles; later gradient requests raise :class:`GraphError`."""
        self.released = True
        for t in (self.a, self.h_hat, self.F, self.s, self.p_bag):
            t._parents = ()
            t._backward = None

    @property
    def scores(self) -> np.ndarray:
        return self.a.data[0]

    @property
    def positive_prob(self) -> float:
        return float(self.p_bag.data[0, 1])


def _as_tensor(H) -> Tensor:
    if isinstance(H, Tensor):
        return H
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] == 0:
        raise EmptyBagError(f"bag must be a non-empty K x D matrix, got shape {H.shape}")
    return Tensor(H)


def attention_scores(H: Tensor, params: AbmilParams) -> Tensor:
    """Gated attention: softmax_k of w . (tanh(V1 h_k) * sigm(V2 h_k)), as a (1, K) row."""
    if H.data.shape[0] == 0:
        raise EmptyBagError("bag has no instances")
    if H.shape[1] != params.D:
        raise dc.DimensionError(f"instance dim {H.shape[1]} does not match model dim {params.D}")
    gate = dc.mul(dc.tanh(H @ params.V1.T), dc.sigmoid(H @ params.V2.T))   # (K, D_att)
    logits = params.w @ gate.T                                               # (1, K)
    return dc.softmax_row(logits)


def bag_embed(H: Tensor, a: Tensor) -> tuple[Tensor, Tensor]:
    """Return (F, h_hat) with h_hat_k = a_k * K * h_k and F = mean_k h_hat_k = sum_k a_k h_k."""
    K = H.shape[0]
    if a.shape != (1, K):
        raise dc.DimensionError(f"attention shape {a.shape} does not match bag of {K} instances")
    total = float(a.data.sum())
    if abs(total - 1.0) > 1e-5:
        raise ValueError(f"attention scores sum to {total}, expected 1")
    weights = dc.broadcast_to(dc.scale(a.T, K), H.shape)
    h_hat = dc.mul(weights, H)
    if not h_hat.requires_grad:
        # constant inputs: keep h_hat differentiable as a leaf for attribution
        h_hat.requires_grad = True
    F = dc.mean(h_hat, axis=0)
    return F, h_hat


def classify(F: Tensor, params: AbmilParams) -> tuple[Tensor, Tensor]:
    z = F
    if params.Wh is not None:
        z = dc.tanh(dc.add(z @ params.Wh.T, params.bh))
    s = z @ params.Wc.T
    if params.head_bias:
        s = dc.add(s, params.bc)
    return s, dc.softmax_row(s)


def forward_with_attention(H, a, params: AbmilParams) -> AbmilForward:
    """Run pooling and the head on externally supplied attention (used to force a_k = 0)."""
    H = _as_tensor(H)
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=H.dtype).reshape(1, -1))
    F, h_hat = bag_embed(H, a)
    s, p = classify(F, params)
    return AbmilForward(H, a, h_hat, F, s, p)


def forward_bag(H, params: AbmilParams) -> AbmilForward:
    H = _as_tensor(H)
    a = attention_scores(H, params)
    return forward_with_attention(H, a, params)


# ---------------------------------------------------------------- serialization

def params_to_dict(params: AbmilParams) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "dims": {"D": params.D, "D_att": params.D_att, "C": params.C,
                 "head_hidden": params.head_hidden},
        "head_bias": params.head_bias,
        "tensors": {name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
                    for name, t in params.named().items()},
    }


def params_from_dict(doc: dict, dtype=np.float32) -> AbmilParams:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported parameter format_version {doc.get('format_version')!r}")
    tensors = {}
    for name, entry in doc["tensors"].items():
        arr = np.asarray(entry["values"], dtype=dtype).reshape(entry["shape"])
        tensors[name] = Tensor(arr, requires_grad=True)
    head_bias = bool(doc.get("head_bias", True))
    tensors["bc"].requires_grad = head_bias
    params = AbmilParams(tensors["V1"], tensors["V2"], tensors["w"], tensors["Wc"], tensors["bc"],
                         head_bias, tensors.get("Wh"), tensors.get("bh"))
    dims = doc["dims"]
    if (params.D, params.D_att, params.C) != (dims["D"], dims["D_att"], dims["C"]):
        raise ValueError("tensor shapes disagree with the recorded dims")
    return params


def save_params(params: AbmilParams, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params)), encoding="utf-8")


def load_params(path, dtype=np.float32) -> AbmilParams:
    return params_from_dict(json.loads(Path(path).read_text(encoding="utf-8")), dtype=dtype)
