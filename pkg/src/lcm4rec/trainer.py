"""Minibatch gradient descent for LCM4Rec and the baselines."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .choice import NegConfig
from .data import ChoiceData, UtilityParams, as_choice_data
from .kernel import BETA_BOUNDS, LAMBDA_BOUNDS, KernelCdfParams, derive
from .mc import CORRECTIONS, draw_uniforms
from .models import MODEL_KINDS, batch_loss_grad, corpus_probs, mean_nll, set_probs
from .optim import make_optimizer

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "lcm4rec-checkpoint"
CHECKPOINT_VERSION = 1

LEARNING_RATE_GRID = (0.1, 0.03, 0.01, 0.003, 0.001)
OPTIMIZER_GRID = ("sgd", "adam")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model_kind: str = "LCM4Rec"
    optimizer: str = "adam"
    learning_rate: float = 0.01
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    K: int = 5
    S: int = 5
    m: int = 3
    frozen_draws: bool = False
    n_negatives: int = 3
    gbce_t: float = 1.0
    backend: str | None = None
    correction: str = "debiased"

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        for name in ("batch_size", "max_epochs", "patience", "K", "m", "n_negatives"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.correction not in CORRECTIONS:
            raise ValueError(f"unknown correction {self.correction!r}")
        if self.model_kind == "LCM4Rec" and self.S < 3:
            raise ValueError("LCM4Rec needs S >= 3 for the corrected likelihood")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FittedModel:
    model_kind: str
    utility: UtilityParams
    kernel: KernelCdfParams | None = None
    history: list[dict] = field(default_factory=list)
    config: TrainConfig | None = None

    def set_probs(self, V):
        return set_probs(self.model_kind, V, self.kernel)

    def corpus_probs(self, V):
        return corpus_probs(self.model_kind, V, self.kernel)

    def mean_nll(self, data) -> float:
        return mean_nll(self.model_kind, as_choice_data(data), self.utility, self.kernel)

    @property
    def best_val_nll(self) -> float:
        return min(h["val_nll"] for h in self.history) if self.history else float("nan")

    def to_dict(self) -> dict:
        d = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "package_version": __version__,
            "model_kind": self.model_kind,
            "config": self.config.to_dict() if self.config else None,
            "utility": self.utility.to_dict(),
            "kernel": None,
            "history": self.history,
        }
        if self.kernel is not None:
            d["kernel"] = {"raw": self.kernel.to_dict(), "derived": derive(self.kernel).to_dict()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a checkpoint file")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        kernel = KernelCdfParams.from_dict(d["kernel"]["raw"]) if d.get("kernel") else None
        cfg = TrainConfig(**d["config"]) if d.get("config") else None
        return cls(d["model_kind"], UtilityParams.from_dict(d["utility"]), kernel, d.get("history", []), cfg)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "FittedModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def project(up: UtilityParams, raw: KernelCdfParams | None, model_kind: str):
    """Identification step for LCM4Rec: min-max rescale the item constants
    onto [0, 1] and clamp the kernel's raw bandwidths and scale.  A no-op for
    every other model."""
    if model_kind != "LCM4Rec":
        return up, raw
    c = up.item_constants
    lo, hi = c.min(), c.max()
    if hi - lo > 0:
        up.item_constants = (c - lo) / (hi - lo)
    else:
        up.item_constants = np.full_like(c, 0.5)
    if raw is not None:
        raw.project()
    return up, raw


def init_params(cfg: TrainConfig, n_users: int, n_items: int):
    rng = np.random.default_rng([cfg.seed, 7919])
    up = UtilityParams(
        rng.uniform(-0.1, 0.1, (n_users, cfg.m)),
        rng.uniform(-0.1, 0.1, (n_items, cfg.m)),
        np.full(n_items, 0.5),
    )
    raw = KernelCdfParams.initial(cfg.K, 2.0) if cfg.model_kind == "LCM4Rec" else None
    return up, raw


def _zero_outward(value, grad, lo, hi):
    value = np.asarray(value)
    grad = np.array(grad, dtype=float)
    grad[(value <= lo) & (grad > 0)] = 0.0
    grad[(value >= hi) & (grad < 0)] = 0.0
    return grad


class _BatchView:
    """Cheap row subsets of a ChoiceData that reuse its grouped arrays."""

    def __init__(self, data: ChoiceData):
        self.data = data
        self.groups = data.groups()
        self.N = len(data)

    def take(self, idx: np.ndarray) -> ChoiceData:
        from .data import ChoiceGroup

        where = np.full(self.N, -1, dtype=np.int64)
        where[idx] = np.arange(idx.size)
        groups = []
        for g in self.groups:
            sel = where[g.order] >= 0
            if not np.any(sel):
                continue
            groups.append(ChoiceGroup(where[g.order[sel]], g.users[sel], g.items[sel], g.chosen_pos[sel],
                                      g.original_items[sel]))
        sub = ChoiceData([self.data.observations[i] for i in idx])
        sub._groups = groups
        return sub


def train(train_set, val_set, cfg: TrainConfig, n_users: int | None = None, n_items: int | None = None,
          pools=None) -> FittedModel:
    """Fit one model by minibatch descent with early stopping on validation NLL.

    ``pools`` (user id -> item ids) restricts corpus negatives for BCE/gBCE.
    Returns the parameters of the epoch with the lowest validation NLL.
    """
    train_set = as_choice_data(train_set)
    val_set = as_choice_data(val_set)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    if n_users is None:
        n_users = 1 + max(max(o.user for o in train_set), max(o.user for o in val_set))
    if n_items is None:
        n_items = 1 + max(max(max(o.choice_set) for o in train_set), max(max(o.choice_set) for o in val_set))
    kind = cfg.model_kind
    up, raw = init_params(cfg, n_users, n_items)
    up.check_ids(train_set.users, np.fromiter((j for o in train_set for j in o.choice_set), dtype=np.int64))
    up.check_ids(val_set.users, np.fromiter((j for o in val_set for j in o.choice_set), dtype=np.int64))
    project(up, raw, kind)

    params = {"user": up.user_embeddings, "item": up.item_embeddings, "const": up.item_constants}
    if raw is not None:
        params.update(alpha=raw.alphas, beta=raw.betas, lam=np.array(raw.lam))
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    neg_cfg = NegConfig(cfg.n_negatives, cfg.gbce_t)
    view = _BatchView(train_set)
    N = len(train_set)

    def sync():
        up.user_embeddings, up.item_embeddings, up.item_constants = params["user"], params["item"], params["const"]
        if raw is not None:
            raw.alphas, raw.betas, raw.lam = params["alpha"], params["beta"], float(params["lam"])

    history = []
    best = (np.inf, up.copy(), raw.copy() if raw is not None else None)
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(N)
        neg_rng = np.random.default_rng([cfg.seed, epoch, 1])
        uniforms = None
        if kind == "LCM4Rec":
            uniforms = draw_uniforms(cfg.seed, 0 if cfg.frozen_draws else epoch, N, cfg.K, cfg.S)
        losses = []
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = view.take(idx)
            try:
                loss, grads = batch_loss_grad(
                    kind, batch, up, raw,
                    uniforms=uniforms[idx] if uniforms is not None else None,
                    rng=neg_rng, pools=pools, neg_config=neg_cfg, backend=cfg.backend,
                    correction=cfg.correction,
                )
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{kind}: epoch {epoch}, batch at {start}: {exc}") from exc
            if not np.isfinite(loss):
                raise TrainingDiverged(f"{kind}: non-finite loss at epoch {epoch}, batch at {start}")
            if raw is not None:
                grads["beta"] = _zero_outward(params["beta"], grads["beta"], *BETA_BOUNDS)
                grads["lam"] = _zero_outward(params["lam"], grads["lam"], *LAMBDA_BOUNDS)
            opt.step(params, grads)
            sync()
            project(up, raw, kind)
            params["const"] = up.item_constants
            if raw is not None:
                params["lam"] = np.array(raw.lam)
            losses.append(loss * idx.size)
        if not up.is_finite():
            raise TrainingDiverged(f"{kind}: parameters became non-finite at epoch {epoch}")
        val_nll = mean_nll(kind, val_set, up, raw)
        if not np.isfinite(val_nll):
            raise TrainingDiverged(f"{kind}: validation NLL non-finite at epoch {epoch}")
        improved = val_nll < best[0]
        history.append({"epoch": epoch, "train_loss": float(sum(losses) / N), "val_nll": float(val_nll)})
        log.debug("%s epoch %d train %.5f val %.5f", kind, epoch, history[-1]["train_loss"], val_nll)
        if improved:
            best = (val_nll, up.copy(), raw.copy() if raw is not None else None)
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    return FittedModel(kind, best[1], best[2], history, cfg)


def grid_search(train_set, val_set, base: TrainConfig, learning_rates=LEARNING_RATE_GRID,
                optimizers=OPTIMIZER_GRID, **train_kwargs):
    """Pick optimizer and learning rate by best validation NLL.

    Returns ``(best_config, rows)`` with one row per grid point.
    """
    rows = []
    best_cfg, best_nll = None, np.inf
    for opt in optimizers:
        for lr in learning_rates:
            cfg = replace(base, optimizer=opt, learning_rate=lr)
            try:
                fitted = train(train_set, val_set, cfg, **train_kwargs)
                nll = fitted.best_val_nll
            except TrainingDiverged:
                nll = np.inf
            rows.append({"optimizer": opt, "learning_rate": lr, "val_nll": nll})
            if nll < best_nll:
                best_cfg, best_nll = cfg, nll
    return best_cfg, rows
