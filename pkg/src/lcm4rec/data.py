"""Choice observations, utility parameters and the JSON-lines dataset format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np


@dataclass(frozen=True)
class ChoiceObservation:
    """One logged choice: ``user`` picked ``chosen`` out of ``choice_set``."""

    user: int
    chosen: int
    choice_set: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "choice_set", tuple(int(j) for j in self.choice_set))
        if len(self.choice_set) < 2:
            raise ValueError("a choice set needs at least two items")
        if len(set(self.choice_set)) != len(self.choice_set):
            raise ValueError(f"duplicate items in choice set {self.choice_set}")
        if self.chosen not in self.choice_set:
            raise ValueError(f"chosen item {self.chosen} not in choice set {self.choice_set}")

    def to_record(self) -> dict:
        return {"user": int(self.user), "chosen": int(self.chosen), "choice_set": list(self.choice_set)}

    @classmethod
    def from_record(cls, rec: dict) -> "ChoiceObservation":
        return cls(int(rec["user"]), int(rec["chosen"]), tuple(rec["choice_set"]))


@dataclass
class UtilityParams:
    """Embedding utility model ``V_ij = u_i . v_j + c_j``."""

    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    item_constants: np.ndarray

    def __post_init__(self):
        self.user_embeddings = np.asarray(self.user_embeddings, dtype=float)
        self.item_embeddings = np.asarray(self.item_embeddings, dtype=float)
        self.item_constants = np.asarray(self.item_constants, dtype=float)
        if self.user_embeddings.ndim != 2 or self.item_embeddings.ndim != 2:
            raise ValueError("embeddings must be 2-d arrays")
        if self.user_embeddings.shape[1] != self.item_embeddings.shape[1]:
            raise ValueError("user and item embedding dimensions differ")
        if self.item_constants.shape != (self.item_embeddings.shape[0],):
            raise ValueError("need exactly one constant per item")

    @property
    def m(self) -> int:
        return self.user_embeddings.shape[1]

    @property
    def n_users(self) -> int:
        return self.user_embeddings.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_embeddings.shape[0]

    def copy(self) -> "UtilityParams":
        return UtilityParams(
            self.user_embeddings.copy(), self.item_embeddings.copy(), self.item_constants.copy()
        )

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.user_embeddings))
            and np.all(np.isfinite(self.item_embeddings))
            and np.all(np.isfinite(self.item_constants))
        )

    def check_ids(self, users=None, items=None):
        if users is not None:
            users = np.asarray(users)
            if users.size and (users.min() < 0 or users.max() >= self.n_users):
                raise KeyError(f"unknown user id(s) outside [0, {self.n_users})")
        if items is not None:
            items = np.asarray(items)
            if items.size and (items.min() < 0 or items.max() >= self.n_items):
                raise KeyError(f"unknown item id(s) outside [0, {self.n_items})")

    def utilities(self, users, items) -> np.ndarray:
        """Broadcasting utility lookup; ``users`` and ``items`` are id arrays."""
        users = np.asarray(users)
        items = np.asarray(items)
        self.check_ids(users, items)
        u = self.user_embeddings[users]
        v = self.item_embeddings[items]
        return np.einsum("...d,...d->...", u, v) + self.item_constants[items]

    def user_item_matrix(self, users=None, items=None) -> np.ndarray:
        """Dense utilities, shape ``(len(users), len(items))``."""
        users = np.arange(self.n_users) if users is None else np.asarray(users)
        items = np.arange(self.n_items) if items is None else np.asarray(items)
        self.check_ids(users, items)
        return (
            self.user_embeddings[users] @ self.item_embeddings[items].T
            + self.item_constants[items][None, :]
        )

    def to_dict(self) -> dict:
        return {
            "user_embeddings": self.user_embeddings.tolist(),
            "item_embeddings": self.item_embeddings.tolist(),
            "item_constants": self.item_constants.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UtilityParams":
        return cls(
            np.array(d["user_embeddings"], dtype=float).reshape(len(d["user_embeddings"]), -1),
            np.array(d["item_embeddings"], dtype=float).reshape(len(d["item_embeddings"]), -1),
            np.array(d["item_constants"], dtype=float),
        )


def utility(params: UtilityParams, user: int, item: int) -> float:
    """Deterministic utility of ``item`` for ``user``."""
    if not 0 <= user < params.n_users:
        raise KeyError(f"unknown user id {user}")
    if not 0 <= item < params.n_items:
        raise KeyError(f"unknown item id {item}")
    return float(params.user_embeddings[user] @ params.item_embeddings[item] + params.item_constants[item])


@dataclass
class ChoiceGroup:
    """Observations sharing one choice-set size, as dense arrays.

    ``items[:, 0]`` is always the chosen item; ``order`` maps rows back to
    positions in the parent :class:`ChoiceData`.
    """

    order: np.ndarray
    users: np.ndarray
    items: np.ndarray
    chosen_pos: np.ndarray
    original_items: np.ndarray

    @property
    def set_size(self) -> int:
        return self.items.shape[1]


@dataclass
class ChoiceData:
    """Columnar view over a list of :class:`ChoiceObservation`."""

    observations: list[ChoiceObservation]
    _groups: list[ChoiceGroup] | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.observations)

    def __iter__(self) -> Iterator[ChoiceObservation]:
        return iter(self.observations)

    def __getitem__(self, idx):
        if isinstance(idx, (slice, np.ndarray, list)):
            if isinstance(idx, slice):
                return ChoiceData(self.observations[idx])
            return ChoiceData([self.observations[int(i)] for i in idx])
        return self.observations[idx]

    @property
    def users(self) -> np.ndarray:
        return np.fromiter((o.user for o in self.observations), dtype=np.int64, count=len(self))

    def groups(self) -> list[ChoiceGroup]:
        if self._groups is None:
            by_size: dict[int, list[int]] = {}
            for n, obs in enumerate(self.observations):
                by_size.setdefault(len(obs.choice_set), []).append(n)
            groups = []
            for size in sorted(by_size):
                order = np.asarray(by_size[size], dtype=np.int64)
                obs = [self.observations[n] for n in order]
                original = np.array([o.choice_set for o in obs], dtype=np.int64).reshape(len(obs), size)
                chosen = np.array([o.chosen for o in obs], dtype=np.int64)
                pos = np.argmax(original == chosen[:, None], axis=1)
                items = original.copy()
                # swap the chosen item into column 0
                rows = np.arange(len(obs))
                items[rows, pos] = items[:, 0]
                items[:, 0] = chosen
                groups.append(
                    ChoiceGroup(
                        order=order,
                        users=np.array([o.user for o in obs], dtype=np.int64),
                        items=items,
                        chosen_pos=pos,
                        original_items=original,
                    )
                )
            self._groups = groups
        return self._groups

    def items_seen(self) -> set[int]:
        return {j for o in self.observations for j in o.choice_set}

    def exposure_pairs(self) -> set[tuple[int, int]]:
        return {(o.user, j) for o in self.observations for j in o.choice_set}


def write_dataset(path: str | Path, observations: Iterable[ChoiceObservation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obs in observations:
            fh.write(json.dumps(obs.to_record(), separators=(",", ":")))
            fh.write("\n")


def read_dataset(path: str | Path) -> ChoiceData:
    obs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obs.append(ChoiceObservation.from_record(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record: {exc}") from exc
    return ChoiceData(obs)


def as_choice_data(data: ChoiceData | Sequence[ChoiceObservation]) -> ChoiceData:
    return data if isinstance(data, ChoiceData) else ChoiceData(list(data))


def scatter_utility_grad(up: UtilityParams, users: np.ndarray, items: np.ndarray, gV: np.ndarray):
    """Push ``dL/dV`` for ``V[n, c] = u[users[n]] . v[items[n, c]] + c[items[n, c]]``
    back to dense parameter gradients.  Untouched ids get exact zeros."""
    d_user = np.zeros_like(up.user_embeddings)
    d_item = np.zeros_like(up.item_embeddings)
    U = up.user_embeddings[users]
    Vi = up.item_embeddings[items]
    flat_items = items.ravel()
    d_const = np.bincount(flat_items, weights=gV.ravel(), minlength=up.n_items)
    for d in range(up.m):
        d_item[:, d] = np.bincount(flat_items, weights=(gV * U[:, d:d + 1]).ravel(), minlength=up.n_items)
        d_user[:, d] = np.bincount(users, weights=np.einsum("nc,nc->n", gV, Vi[:, :, d]),
                                   minlength=up.n_users)
    return d_user, d_item, d_const
