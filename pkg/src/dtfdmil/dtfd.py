"""Double-tier feature distillation MIL.

Each slide is split at random into M pseudo-bags that inherit the slide label.
Tier-1 (an AB-MIL model) classifies pseudo-bags; one feature per pseudo-bag is
distilled from Tier-1 and the M distilled features form the bag that Tier-2
(a second AB-MIL model) classifies. The tiers are optimized separately:
distilled features reach Tier-2 as constants.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from pathlib import Path
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .abmil import (FORMAT_VERSION, AbmilForward, AbmilParams, forward_bag, init_params,
                    load_params, save_params)
from .attribution import InstanceAttribution, attribute_forward
from .diffcore import Adam, AdamConfig, Tensor, derive_seed, make_rng
from .metrics import UndefinedMetricError, auc

log = logging.getLogger(__name__)

STRATEGIES = ("maxs", "maxmins", "mas", "afs")


class ConfigError(ValueError):
    pass


class NumericError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


def normalize_strategy(name: str) -> str:
    key = name.lower()
    if key not in STRATEGIES:
        raise ConfigError(f"unknown distillation strategy {name!r}; choose from {STRATEGIES}")
    return key


# ---------------------------------------------------------------- partitions

@dataclass
class PseudoBagPartition:
    M: int
    groups: list[np.ndarray]
    bag_id: str | None = None
    seed: int | None = None

    def sizes(self) -> list[int]:
        return [len(g) for g in self.groups]


def split_pseudobags(K: int, M: int, rng: np.random.Generator | int,
                     bag_id: str | None = None) -> PseudoBagPartition:
    """Random permutation of range(K) dealt round-robin into M groups."""
    if M < 1:
        raise ConfigError(f"M must be >= 1, got {M}")
    if K < M:
        raise ConfigError(f"bag of {K} instances cannot fill {M} pseudo-bags")
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = make_rng(seed)
    perm = rng.permutation(K)
    return PseudoBagPartition(M=M, groups=[perm[m::M] for m in range(M)], bag_id=bag_id, seed=seed)


def effective_m(K: int, M: int, bag_id: str | None = None) -> int:
    """Fall back to one instance per pseudo-bag when a bag is smaller than M."""
    if K >= M:
        return M
    log.warning("bag %s has %d instances < M=%d; using M=%d", bag_id, K, M, K)
    return K


# ---------------------------------------------------------------- model

@dataclass
class DtfdModel:
    tier1: AbmilParams
    tier2: AbmilParams
    M: int = 5
    strategy: str = "afs"
    seed: int = 0
    best_epoch: int | None = None

    def __post_init__(self):
        self.strategy = normalize_strategy(self.strategy)
        want = tier2_input_dim(self.tier1.D, self.strategy)
        if self.tier2.D != want:
            raise ConfigError(f"tier-2 input dim {self.tier2.D} != {want} for strategy {self.strategy}")

    @property
    def dims(self) -> dict:
        return {"D": self.tier1.D, "D_att": self.tier1.D_att, "C": self.tier1.C,
                "D_tier2": self.tier2.D}

    def copy(self) -> "DtfdModel":
        return DtfdModel(self.tier1.copy(), self.tier2.copy(), self.M, self.strategy,
                         self.seed, self.best_epoch)


def tier2_input_dim(D: int, strategy: str) -> int:
    return 2 * D if normalize_strategy(strategy) == "maxmins" else D


def build_model(D: int, M: int = 5, strategy: str = "afs", D_att: int = 128, C: int = 2,
                seed: int = 0, head_bias: bool = True, head_hidden: int = 0) -> DtfdModel:
    strategy = normalize_strategy(strategy)
    if M < 1:
        raise ConfigError(f"M must be >= 1, got {M}")
    rng = make_rng(derive_seed(seed, "init"))
    t1 = init_params(D, D_att, C, rng, head_bias=head_bias, head_hidden=head_hidden)
    t2 = init_params(tier2_input_dim(D, strategy), D_att, C, rng,
                     head_bias=head_bias, head_hidden=head_hidden)
    return DtfdModel(t1, t2, M, strategy, seed)


# ---------------------------------------------------------------- tiers

@dataclass
class DistilledFeature:
    vector: np.ndarray
    pseudo_bag: int
    source: tuple[int, ...] | str   # parent-bag instance indices, or "aggregate"


def _needs_attribution(strategy: str) -> bool:
    return strategy in ("maxs", "maxmins")


def distill(forward: AbmilForward, attribution: InstanceAttribution | None, strategy: str,
            pseudo_bag: int = 0, indices: np.ndarray | None = None) -> DistilledFeature:
    """Pick the feature this pseudo-bag forwards to Tier-2.

    ``indices`` maps pseudo-bag rows back to parent-bag instance ids (identity
    if omitted). argmax/argmin ties go to the lowest row.
    """
    strategy = normalize_strategy(strategy)
    H = forward.H.data
    ids = np.arange(H.shape[0]) if indices is None else np.asarray(indices)
    if strategy == "afs":
        return DistilledFeature(forward.F.data[0].copy(), pseudo_bag, "aggregate")
    if strategy == "mas":
        k = int(np.argmax(forward.scores))
        return DistilledFeature(H[k].copy(), pseudo_bag, (int(ids[k]),))
    if attribution is None:
        attribution = attribute_forward(forward)
    p_pos = attribution.p[:, 1]
    k_max = int(np.argmax(p_pos))
    if strategy == "maxs":
        return DistilledFeature(H[k_max].copy(), pseudo_bag, (int(ids[k_max]),))
    k_min = int(np.argmin(p_pos))
    return DistilledFeature(np.concatenate([H[k_max], H[k_min]]), pseudo_bag,
                            (int(ids[k_max]), int(ids[k_min])))


def tier1_forwards(H: np.ndarray, partition: PseudoBagPartition, tier1: AbmilParams) -> list[AbmilForward]:
    return [forward_bag(Tensor(H[g]), tier1) for g in partition.groups]


def tier1_loss(forwards: list[AbmilForward], Y: int) -> Tensor:
    """Mean binary cross entropy of the pseudo-bags' positive probabilities against the slide label."""
    total = None
    for f in forwards:
        term = dc.bce_loss(f.p_bag[0, 1], Y)
        total = term if total is None else dc.add(total, term)
    return dc.scale(total, 1.0 / len(forwards))


def distill_all(forwards: list[AbmilForward], partition: PseudoBagPartition,
                strategy: str) -> list[DistilledFeature]:
    out = []
    for m, (f, g) in enumerate(zip(forwards, partition.groups)):
        att = attribute_forward(f) if _needs_attribution(strategy) else None
        out.append(distill(f, att, strategy, m, g))
    return out


def tier2_forward(distilled, tier2: AbmilParams) -> AbmilForward:
    """Treat the distilled features as the instances of one bag."""
    if isinstance(distilled, list) and distilled and isinstance(distilled[0], DistilledFeature):
        X = np.stack([d.vector for d in distilled])
    else:
        X = np.atleast_2d(np.asarray(distilled))
    if X.shape[1] != tier2.D:
        raise dc.DimensionError(f"distilled dim {X.shape[1]} does not match tier-2 dim {tier2.D}")
    return forward_bag(Tensor(X.astype(tier2.V1.dtype, copy=False)), tier2)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_tier1: float | None = None     # overrides lr for tier 1 only
    lr_tier2: float | None = None
    weight_decay_tier1: float | None = None
    weight_decay_tier2: float | None = None
    D_att: int = 128
    M: int = 5
    strategy: str = "afs"
    head_bias: bool = True
    seed: int = 0

    def adam(self, tier: int) -> AdamConfig:
        lr = {1: self.lr_tier1, 2: self.lr_tier2}[tier]
        wd = {1: self.weight_decay_tier1, 2: self.weight_decay_tier2}[tier]
        return AdamConfig(lr=self.lr if lr is None else lr,
                          weight_decay=self.weight_decay if wd is None else wd)


@dataclass
class EpochRecord:
    epoch: int
    L1: float
    L2: float
    val_auc_t1: float
    val_auc_t2: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    seed: int = 0
    config: dict = field(default_factory=dict)
    best_epoch: int | None = None

    def __len__(self) -> int:
        return len(self.records)


class Optimizers:
    def __init__(self, model: DtfdModel, cfg: TrainConfig):
        self.tier1 = Adam(model.tier1.trainable(), cfg.adam(1))
        self.tier2 = Adam(model.tier2.trainable(), cfg.adam(2))


def train_step(H: np.ndarray, Y: int, model: DtfdModel, opts: Optimizers,
               rng: np.random.Generator, bag_id: str | None = None) -> tuple[float, float]:
    """One slide: fresh partition, Tier-1 update, distillation, Tier-2 update."""
    M = effective_m(H.shape[0], model.M, bag_id)
    part = split_pseudobags(H.shape[0], M, rng, bag_id)

    forwards = tier1_forwards(H, part, model.tier1)
    loss1 = tier1_loss(forwards, Y)
    opts.tier1.zero_grad()
    dc.backward(loss1)
    # distill before the Tier-1 update so selections come from the same parameters as the loss
    distilled = distill_all(forwards, part, model.strategy)
    opts.tier1.step()

    fwd2 = tier2_forward(distilled, model.tier2)
    loss2 = dc.bce_loss(fwd2.p_bag[0, 1], Y)
    opts.tier2.zero_grad()
    dc.backward(loss2)
    opts.tier2.step()
    return loss1.item(), loss2.item()


def inference_partition(K: int, M: int, bag_id: str) -> PseudoBagPartition:
    seed = derive_seed("infer", bag_id)
    return split_pseudobags(K, effective_m(K, M, bag_id), seed, bag_id)


def infer(H: np.ndarray, model: DtfdModel, bag_id: str | None = None,
          partition: PseudoBagPartition | np.random.Generator | None = None) -> dict:
    """Slide scores: Tier-2 probability, per-pseudo-bag Tier-1 probabilities and their max."""
    H = np.asarray(H, dtype=np.float32)
    if isinstance(partition, PseudoBagPartition):
        part = partition
    elif isinstance(partition, np.random.Generator):
        part = split_pseudobags(H.shape[0], effective_m(H.shape[0], model.M, bag_id), partition, bag_id)
    elif bag_id is not None:
        part = inference_partition(H.shape[0], model.M, bag_id)
    else:
        raise ValueError("infer needs a bag_id, a partition or a generator")
    forwards = tier1_forwards(H, part, model.tier1)
    y_m = [f.positive_prob for f in forwards]
    fwd2 = tier2_forward(distill_all(forwards, part, model.strategy), model.tier2)
    return {"y_tier2": fwd2.positive_prob, "y_pseudo": y_m, "tier1_pooled": max(y_m),
            "partition": part}


def score_bags(bags, model: DtfdModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(tier2 scores, tier1 pooled scores, labels) over a list of BagRecord."""
    t2, t1, y = [], [], []
    for b in bags:
        r = infer(b.features, model, b.bag_id)
        t2.append(r["y_tier2"])
        t1.append(r["tier1_pooled"])
        y.append(b.label)
    return np.array(t2), np.array(t1), np.array(y)


def _safe_auc(scores, labels) -> float:
    try:
        return auc(scores, labels)
    except UndefinedMetricError:
        return float("nan")


def fit(train_bags, val_bags, cfg: TrainConfig,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[DtfdModel, TrainHistory]:
    """Train for ``cfg.epochs`` and return the model of the best validation Tier-2 AUC epoch.

    Ties go to the earliest epoch. Raises :class:`NumericError` on a non-finite loss.
    """
    if not train_bags or not val_bags:
        raise ConfigError("train and validation splits must be non-empty")
    if cfg.epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {cfg.epochs}")
    D = train_bags[0].features.shape[1]
    model = build_model(D, cfg.M, cfg.strategy, cfg.D_att, seed=cfg.seed, head_bias=cfg.head_bias)
    opts = Optimizers(model, cfg)
    rng = make_rng(derive_seed(cfg.seed, "train"))
    history = TrainHistory(seed=cfg.seed, config=asdict(cfg))
    best, best_auc = None, -math.inf
    for epoch in range(1, cfg.epochs + 1):
        l1s, l2s = [], []
        for i in rng.permutation(len(train_bags)):
            b = train_bags[i]
            l1, l2 = train_step(b.features, b.label, model, opts, rng, b.bag_id)
            if not (math.isfinite(l1) and math.isfinite(l2)):
                raise NumericError(epoch, f"non-finite loss on bag {b.bag_id} (L1={l1}, L2={l2})")
            l1s.append(l1)
            l2s.append(l2)
        s2, s1, y = score_bags(val_bags, model)
        rec = EpochRecord(epoch, float(np.mean(l1s)), float(np.mean(l2s)),
                          _safe_auc(s1, y), _safe_auc(s2, y))
        history.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        score = rec.val_auc_t2 if math.isfinite(rec.val_auc_t2) else -1.0
        if best is None or score > best_auc:
            best, best_auc = model.copy(), score
            best.best_epoch = epoch
    history.best_epoch = best.best_epoch
    return best, history


def select_best_epoch(val_aucs) -> int:
    """1-based index of the maximum validation AUC, earliest on ties."""
    best_i, best_v = 0, -math.inf
    for i, v in enumerate(val_aucs):
        v = v if math.isfinite(v) else -1.0
        if v > best_v:
            best_i, best_v = i, v
    return best_i + 1


def clone_config(cfg: TrainConfig, **changes) -> TrainConfig:
    c = copy.copy(cfg)
    for k, v in changes.items():
        setattr(c, k, v)
    return c


# ---------------------------------------------------------------- model directory

HISTORY_HEADER = ["epoch", "L1", "L2", "val_auc_t1", "val_auc_t2"]


def save_model(model: DtfdModel, out_dir, history: TrainHistory | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_params(model.tier1, out / "tier1.json")
    save_params(model.tier2, out / "tier2.json")
    meta = {"format_version": FORMAT_VERSION, "M": model.M, "strategy": model.strategy,
            "dims": model.dims, "seed": model.seed, "best_epoch": model.best_epoch}
    (out / "model.meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    if history is not None:
        write_history(history, out / "history.csv")


def write_history(history: TrainHistory, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in history.records:
            w.writerow([r.epoch, repr(r.L1), repr(r.L2), repr(r.val_auc_t1), repr(r.val_auc_t2)])


def load_model(model_dir) -> DtfdModel:
    d = Path(model_dir)
    meta_path = d / "model.meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{d} is not a model directory (no model.meta.json)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {meta.get('format_version')!r}")
    return DtfdModel(load_params(d / "tier1.json"), load_params(d / "tier2.json"),
                     int(meta["M"]), meta["strategy"], int(meta.get("seed", 0)), meta.get("best_epoch"))
