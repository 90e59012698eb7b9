"""Synthetic choice data: ground truth, exposure protocols and leakage-free splits.

Every random quantity comes from ``numpy.random.default_rng`` (PCG64) keyed
by a tuple that starts with the user-visible seed, so outputs are identical
across platforms and independent of generation order:

* ground truth: ``(seed, 0)``
* split plan: ``(seed, 1)``
* treated items: ``(seed, 2)``
* choices of user ``i``: ``(seed, 3, i)``
* train/validation partition: ``(seed, 4)``
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ChoiceData, ChoiceObservation, UtilityParams
from .distributions import ErrorDistribution, error_law_from_dict

PROTOCOLS = ("Uniform", "Overexposure", "CompetitionPopular", "CompetitionUnpopular")
TRAIN_USER_FRACTION = 0.8
VALIDATION_FRACTION = 0.1
QUANTILE = 0.2


class LeakageError(RuntimeError):
    """A (user, item) exposure pair of the test set also occurs in training data."""


@dataclass
class GroundTruth:
    utility: UtilityParams
    law: ErrorDistribution

    @property
    def n_users(self) -> int:
        return self.utility.n_users

    @property
    def n_items(self) -> int:
        return self.utility.n_items

    def popularity(self) -> np.ndarray:
        """Mean true deterministic utility of every item over all users."""
        up = self.utility
        return up.item_constants + up.item_embeddings @ up.user_embeddings.mean(axis=0)

    def to_dict(self) -> dict:
        return {"utility": self.utility.to_dict(), "error_law": self.law.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(UtilityParams.from_dict(d["utility"]), error_law_from_dict(d["error_law"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ExposureProtocol:
    """How choice sets are composed.

    ``treated_items`` is the item subset whose exposure is manipulated; it is
    ignored by ``Uniform``.
    """

    kind: str = "Uniform"
    treated_items: tuple[int, ...] = ()
    set_size: int = 4

    def __post_init__(self):
        if self.kind not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.kind!r}; expected one of {PROTOCOLS}")
        if self.set_size < 2:
            raise ValueError("set_size must be at least 2")
        object.__setattr__(self, "treated_items", tuple(sorted(int(j) for j in self.treated_items)))
        if self.kind != "Uniform" and not self.treated_items:
            raise ValueError(f"{self.kind} needs treated items")


@dataclass(frozen=True)
class SplitPlan:
    train_users: np.ndarray
    eval_users: np.ndarray
    train_items: np.ndarray
    eval_items: np.ndarray
    is_eval_user: np.ndarray = field(repr=False)
    is_eval_item: np.ndarray = field(repr=False)


def gen_ground_truth(seed: int, n_users: int, n_items: int, m: int = 3,
                     law: ErrorDistribution | None = None) -> GroundTruth:
    """Embeddings uniform on the sphere of radius sqrt(2); constants U(0, 1)."""
    from .distributions import Gumbel

    if min(n_users, n_items, m) < 1:
        raise ValueError("sizes must be positive")
    rng = np.random.default_rng([seed, 0])

    def sphere(n):
        g = rng.standard_normal((n, m))
        norms = np.linalg.norm(g, axis=1)
        while np.any(norms == 0):
            bad = norms == 0
            g[bad] = rng.standard_normal((int(bad.sum()), m))
            norms = np.linalg.norm(g, axis=1)
        return np.sqrt(2.0) * g / norms[:, None]

    users = sphere(n_users)
    items = sphere(n_items)
    consts = rng.random(n_items)
    return GroundTruth(UtilityParams(users, items, consts), law if law is not None else Gumbel(0.0, 0.75))


def plan_split(n_users: int, n_items: int, seed: int, train_fraction: float = TRAIN_USER_FRACTION) -> SplitPlan:
    """Partition users into train/eval and items into two halves."""
    rng = np.random.default_rng([seed, 1])
    users = rng.permutation(n_users)
    n_train = int(round(train_fraction * n_users))
    if not 0 < n_train < n_users:
        raise ValueError("need at least one training and one evaluation user")
    items = rng.permutation(n_items)
    half = n_items // 2
    if half < 2:
        raise ValueError("need at least four items to split the corpus")
    is_eu = np.zeros(n_users, dtype=bool)
    is_eu[users[n_train:]] = True
    is_ei = np.zeros(n_items, dtype=bool)
    is_ei[items[half:]] = True
    return SplitPlan(np.sort(users[:n_train]), np.sort(users[n_train:]), np.sort(items[:half]),
                     np.sort(items[half:]), is_eu, is_ei)


def choose_treated(candidates, n_treated: int, seed: int) -> tuple[int, ...]:
    candidates = np.asarray(candidates)
    if n_treated > candidates.size:
        raise ValueError("more treated items than candidates")
    rng = np.random.default_rng([seed, 2])
    return tuple(int(j) for j in np.sort(rng.choice(candidates, n_treated, replace=False)))


def popularity_quantile(gt: GroundTruth, pool, mode: str, fraction: float = QUANTILE) -> np.ndarray:
    """The top (``mode="popular"``) or bottom fraction of ``pool`` by true popularity."""
    if mode not in ("popular", "unpopular"):
        raise ValueError(f"unknown competition mode {mode!r}")
    pool = np.asarray(pool)
    pop = gt.popularity()[pool]
    order = np.lexsort((pool, -pop)) if mode == "popular" else np.lexsort((pool, pop))
    n = max(1, int(round(fraction * pool.size)))
    return np.sort(pool[order[:n]])


def _uniform_sets(rng, pool: np.ndarray, n: int, k: int) -> np.ndarray:
    """``n`` subsets of ``pool`` of size ``k``, uniform without replacement."""
    if k > pool.size:
        raise ValueError(f"set size {k} exceeds the item pool ({pool.size})")
    keys = rng.random((n, pool.size))
    idx = np.argpartition(keys, k - 1, axis=1)[:, :k]
    return pool[idx]


def competition_sets(gt: GroundTruth, treated, mode: str, set_size: int, rng, n: int = 1, pool=None) -> np.ndarray:
    """``n`` sets, each one treated item plus companions from a popularity quintile.

    Companions come from ``pool`` (default: the whole corpus) minus the
    treated items.
    """
    treated = np.asarray(treated)
    pool = np.arange(gt.n_items) if pool is None else np.asarray(pool)
    companions = popularity_quantile(gt, np.setdiff1d(pool, treated), mode)
    if companions.size < set_size - 1:
        raise ValueError(f"popularity quintile has {companions.size} items; need {set_size - 1}")
    t = rng.choice(treated, size=n)
    rest = _uniform_sets(rng, companions, n, set_size - 1)
    return np.concatenate([t[:, None], rest], axis=1)


def _draw_sets(gt: GroundTruth, protocol: ExposureProtocol, pool: np.ndarray, n: int, rng) -> np.ndarray:
    k = protocol.set_size
    treated = np.intersect1d(np.asarray(protocol.treated_items, dtype=np.int64), pool)
    if protocol.kind == "Uniform" or treated.size == 0:
        return _uniform_sets(rng, pool, n, k)
    if protocol.kind == "Overexposure":
        sets = _uniform_sets(rng, pool, n, k)
        even = np.arange(0, n, 2)
        t = rng.choice(treated, size=even.size)
        for r, j in zip(even, t):
            others = pool[pool != j]
            sets[r, 0] = j
            sets[r, 1:] = _uniform_sets(rng, others, 1, k - 1)[0]
        return sets
    # competition: treated sets arrive at the rate that keeps each treated
    # item's expected exposure equal to that of a uniformly exposed item
    mode = "popular" if protocol.kind == "CompetitionPopular" else "unpopular"
    untreated = np.setdiff1d(pool, treated)
    rate = min(1.0, k * treated.size / pool.size)
    is_treated = rng.random(n) < rate
    sets = _uniform_sets(rng, untreated, n, k)
    n_t = int(is_treated.sum())
    if n_t:
        sets[is_treated] = competition_sets(gt, treated, mode, k, rng, n=n_t, pool=pool)
    return sets


def _choose(gt: GroundTruth, user: int, sets: np.ndarray, rng, zero_noise: bool) -> np.ndarray:
    V = gt.utility.utilities(np.full(sets.shape, user), sets)
    if not zero_noise:
        V = V + gt.law.sample(rng, sets.shape)
    return sets[np.arange(sets.shape[0]), np.argmax(V, axis=1)]


def gen_choices(gt: GroundTruth, protocol: ExposureProtocol, choices_per_user: int, seed: int,
                plan: SplitPlan | None = None, zero_noise: bool = False,
                random_counts: bool = False) -> list[ChoiceObservation]:
    """Simulate every user's choices, in user-id order.

    Without a ``plan`` every user draws sets from the whole corpus.  With a
    plan, training users still do; evaluation users make half their choices
    among training-half items and the other half among evaluation-half items
    (the latter become the test set).  ``random_counts`` draws each user's
    number of choices uniformly from ``[1, choices_per_user]``.
    """
    if choices_per_user < 1:
        raise ValueError("choices_per_user must be positive")
    all_items = np.arange(gt.n_items)
    out: list[ChoiceObservation] = []
    for user in range(gt.n_users):
        rng = np.random.default_rng([seed, 3, user])
        n = int(rng.integers(1, choices_per_user + 1)) if random_counts else choices_per_user
        if plan is not None and plan.is_eval_user[user]:
            n_tr = n // 2
            blocks = [(plan.train_items, n_tr), (plan.eval_items, n - n_tr)]
        else:
            blocks = [(all_items, n)]
        for pool, count in blocks:
            if count == 0:
                continue
            sets = _draw_sets(gt, protocol, pool, count, rng)
            chosen = _choose(gt, user, sets, rng, zero_noise)
            out.extend(ChoiceObservation(user, int(c), tuple(int(j) for j in s)) for c, s in zip(chosen, sets))
    return out


def exposure_counts(observations, n_items: int) -> np.ndarray:
    items = np.fromiter((j for o in observations for j in o.choice_set), dtype=np.int64)
    return np.bincount(items, minlength=n_items)


def audit_leakage(test, *others):
    test_pairs = ChoiceData(list(test)).exposure_pairs()
    for part in others:
        clash = test_pairs & ChoiceData(list(part)).exposure_pairs()
        if clash:
            raise LeakageError(f"{len(clash)} test exposure pairs also appear in training data, e.g. {min(clash)}")


def split(observations, gt: GroundTruth, seed: int, plan: SplitPlan | None = None,
          validation_fraction: float = VALIDATION_FRACTION):
    """``(train, val, test)`` with evaluation users' evaluation-half choices as test.

    Validation takes ``validation_fraction`` of each user's remaining
    observations.  Raises :class:`LeakageError` if any test exposure pair
    also appears in train or validation.
    """
    plan = plan if plan is not None else plan_split(gt.n_users, gt.n_items, seed)
    pool: dict[int, list[ChoiceObservation]] = {}
    test = []
    for obs in observations:
        eval_items = plan.is_eval_item[list(obs.choice_set)]
        if plan.is_eval_user[obs.user] and eval_items.all():
            test.append(obs)
        else:
            pool.setdefault(obs.user, []).append(obs)
    rng = np.random.default_rng([seed, 4])
    train, val = [], []
    for user in sorted(pool):
        rows = pool[user]
        n_val = int(round(validation_fraction * len(rows)))
        is_val = np.zeros(len(rows), dtype=bool)
        is_val[rng.choice(len(rows), n_val, replace=False)] = True
        for obs, v in zip(rows, is_val):
            (val if v else train).append(obs)
    audit_leakage(test, train, val)
    return train, val, test


def user_pools(plan: SplitPlan, n_items: int):
    """Items each user may be shown in training (negative-sampling pools)."""
    all_items = np.arange(n_items)

    def pools(user: int) -> np.ndarray:
        return plan.train_items if plan.is_eval_user[user] else all_items

    return pools
