"""Evaluation metrics: corpus KLD, test NLL/accuracy/nDCG, error-law KLD,
exposure rank shift and paired bootstrap comparisons."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import minimize_scalar
from scipy.signal import find_peaks

from .data import UtilityParams, as_choice_data
from .quadrature import choice_probs

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
KLD_GRID = (-6.0, 6.0, 2401)
KLD_SMOOTHING = 0.05


class CoverageError(ValueError):
    """The evaluation grid misses a noticeable part of a density's mass."""


@dataclass
class MetricReport:
    """Test-set metrics of one fitted model; ``per_repetition`` keeps raw values."""

    kld_corpus: float
    nll: float
    ndcg: float
    acc: float
    per_repetition: dict = field(default_factory=dict)
    floored: int = 0

    def __post_init__(self):
        if self.nll < 0:
            raise ValueError("nll must be non-negative")
        for name in ("ndcg", "acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0 + 1e-12:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def as_row(self) -> dict:
        return {"kld": self.kld_corpus, "nll": self.nll, "ndcg": self.ndcg, "acc": self.acc}


def _utility(model) -> UtilityParams:
    return model if isinstance(model, UtilityParams) else model.utility


def true_corpus_probs(gt, users, items) -> np.ndarray:
    """True choice distribution of every user over ``items`` as one big set."""
    V = gt.utility.user_item_matrix(users, items)
    return np.array([choice_probs(row, gt.law) for row in V])


def _kl_rows(p: np.ndarray, q: np.ndarray, floor: float = PROB_FLOOR):
    bad = (q < floor) & (p > 0)
    q = np.maximum(q, floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=1), int(bad.sum())


def kld_corpus(fitted, gt, eval_users, eval_items, truth: np.ndarray | None = None,
               return_flags: bool = False):
    """Mean over users of KL(true || model) on the evaluation corpus.

    ``truth`` may carry precomputed :func:`true_corpus_probs`.  Model
    probabilities below 1e-12 are floored and counted.
    """
    eval_users = np.asarray(eval_users)
    eval_items = np.asarray(eval_items)
    if eval_items.size < 2 or eval_users.size == 0:
        raise ValueError("evaluation corpus must have at least two items and one user")
    P = true_corpus_probs(gt, eval_users, eval_items) if truth is None else truth
    V = fitted.utility.user_item_matrix(eval_users, eval_items)
    Q = np.array([fitted.corpus_probs(row) for row in V])
    kl, bad = _kl_rows(P, Q)
    if bad:
        log.warning("kld_corpus: %d model probabilities floored at %g", bad, PROB_FLOOR)
    value = float(kl.mean())
    return (value, bad) if return_flags else value


def _dcg(rel_sorted: np.ndarray) -> np.ndarray:
    disc = 1.0 / np.log2(np.arange(2, rel_sorted.shape[-1] + 2))
    return rel_sorted @ disc


def ranks_desc(scores: np.ndarray, items: np.ndarray) -> np.ndarray:
    """1-based ranks by descending score per row, ties broken by smaller item id."""
    scores = np.atleast_2d(scores)
    order = np.lexsort((np.broadcast_to(items, scores.shape), -scores), axis=-1)
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(1, scores.shape[-1] + 1)[None, :].repeat(scores.shape[0], 0), axis=-1)
    return ranks


def ndcg_corpus(fitted, truth: np.ndarray, eval_users, eval_items) -> float:
    """Per-user nDCG of the predicted ranking of the evaluation corpus, graded
    by the true corpus choice probabilities."""
    eval_items = np.asarray(eval_items)
    V = _utility(fitted).user_item_matrix(eval_users, eval_items)
    order = np.argsort(ranks_desc(V, eval_items), axis=1)
    dcg = _dcg(np.take_along_axis(truth, order, axis=1))
    idcg = _dcg(-np.sort(-truth, axis=1))
    return float(np.mean(dcg / idcg))


def test_metrics(fitted, test_set, gt=None, eval_users=None, eval_items=None, truth=None,
                 ndcg_mode: str = "corpus") -> MetricReport:
    """NLL, accuracy and nDCG on ``test_set`` plus corpus KLD when ``gt`` is given.

    ``ndcg_mode="corpus"`` ranks the evaluation corpus with true choice
    probabilities as graded relevance; ``"per_set"`` ranks each test choice
    set with the chosen item as the only relevant one.
    """
    data = as_choice_data(test_set)
    if len(data) == 0:
        raise ValueError("empty test set")
    nll_sum, hits, per_set_ndcg, bad = 0.0, 0, [], 0
    for g in data.groups():
        V = fitted.utility.utilities(g.users[:, None], g.original_items)
        P = fitted.set_probs(V)
        rows = np.arange(len(g.order))
        p = P[rows, g.chosen_pos]
        bad += int(np.sum(p < PROB_FLOOR))
        nll_sum += -np.log(np.maximum(p, PROB_FLOOR)).sum()
        hits += int(np.sum(np.argmax(P, axis=1) == g.chosen_pos))
        r = ranks_desc(P, g.original_items)[rows, g.chosen_pos]
        per_set_ndcg.append(1.0 / np.log2(r + 1.0))
    nll = nll_sum / len(data)
    acc = hits / len(data)
    kld = float("nan")
    if ndcg_mode == "per_set":
        ndcg = float(np.mean(np.concatenate(per_set_ndcg)))
    elif ndcg_mode == "corpus":
        if gt is None:
            raise ValueError("corpus nDCG needs the ground truth")
        if truth is None:
            truth = true_corpus_probs(gt, eval_users, eval_items)
        ndcg = ndcg_corpus(fitted, truth, eval_users, eval_items)
    else:
        raise ValueError(f"unknown ndcg_mode {ndcg_mode!r}")
    if gt is not None:
        kld, kbad = kld_corpus(fitted, gt, eval_users, eval_items, truth=truth, return_flags=True)
        bad += kbad
    return MetricReport(kld, float(nll), ndcg, float(acc), floored=bad)


# -- error distribution recovery ---------------------------------------------


def _smoothed(pdf_values: np.ndarray, dx: float, width: float) -> np.ndarray:
    out = gaussian_filter1d(pdf_values, width / dx, mode="constant")
    return out / (out.sum() * dx)


def _grid(grid):
    lo, hi, n = grid
    x = np.linspace(lo, hi, int(n))
    return x, x[1] - x[0]


def _kl_grid(p, q, dx):
    q = np.maximum(q, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.sum(np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)) * dx)


def _min_over_shift(f, span: float, step: float = 0.25) -> tuple[float, float]:
    shifts = np.arange(-span, span + step / 2, step)
    vals = np.array([f(s) for s in shifts])
    i = int(np.argmin(vals))
    best = (float(vals[i]), float(shifts[i]))
    if not (0 < i < vals.size - 1 and vals[i] < vals[i - 1] and vals[i] < vals[i + 1]):
        return best  # flat or edge minimum: nothing to refine
    res = minimize_scalar(f, bracket=tuple(shifts[i - 1:i + 2]), method="golden", tol=1e-6)
    return (float(res.fun), float(res.x)) if res.fun <= best[0] else best


def error_dist_kld(estimated, true_law, grid=KLD_GRID, width: float = KLD_SMOOTHING,
                   return_shift: bool = False):
    """KL(true || estimate shifted by delta), minimised over delta.

    Both densities are rendered on ``grid`` (lo, hi, n points) and smoothed
    with a Gaussian of standard deviation ``width`` before comparison.
    """
    x, dx = _grid(grid)
    p_raw = true_law.pdf(x)
    if p_raw.sum() * dx < 1 - 1e-3:
        raise CoverageError("grid misses more than 0.1% of the true law's mass")
    p = _smoothed(p_raw, dx, width)
    span = (grid[1] - grid[0]) / 2

    def f(delta):
        return _kl_grid(p, _smoothed(estimated.pdf(x - delta), dx, width), dx)

    value, delta = _min_over_shift(f, span)
    return (value, delta) if return_shift else value


def parametric_error_kld(family, true_law, grid=KLD_GRID, width: float = KLD_SMOOTHING) -> float:
    """KL(true || best member of a location-scale ``family``), minimised over
    shift and scale; ``family(scale)`` must return a law at location 0."""
    x, dx = _grid(grid)
    p = _smoothed(true_law.pdf(x), dx, width)
    span = (grid[1] - grid[0]) / 2

    def at_scale(log_s):
        law = family(float(np.exp(log_s)))
        return _min_over_shift(lambda d: _kl_grid(p, _smoothed(law.pdf(x - d), dx, width), dx), span)[0]

    res = minimize_scalar(at_scale, bounds=(np.log(0.05), np.log(5.0)), method="bounded",
                          options={"xatol": 1e-4})
    return float(res.fun)


def count_modes(pdf_values: np.ndarray, prominence: float = 0.01) -> int:
    """Number of local maxima standing out by ``prominence`` times the peak."""
    pdf_values = np.asarray(pdf_values, dtype=float)
    peaks, _ = find_peaks(pdf_values, prominence=prominence * pdf_values.max())
    return int(peaks.size)


# -- exposure bias -------------------------------------------------------------


def rank_matrix(model, users, corpus) -> np.ndarray:
    corpus = np.asarray(corpus)
    return ranks_desc(_utility(model).user_item_matrix(users, corpus), corpus)


def rank_shift(model_a, model_b, treated_items, corpus, users=None) -> float:
    """Mean over users and treated items of rank under ``a`` minus rank under ``b``.

    Ranks come from descending predicted utility over ``corpus`` (1 = top),
    ties broken by item id.  Negative values mean ``a`` ranks the treated
    items higher than ``b`` does.
    """
    return float(rank_shift_records(model_a, model_b, treated_items, corpus, users)["shift"].mean())


def rank_shift_records(model_a, model_b, treated_items, corpus, users=None, gt=None) -> dict:
    """Per treated item: mean rank under each model (and the truth, if given)."""
    corpus = np.asarray(corpus)
    treated = np.asarray(treated_items)
    if users is None:
        users = np.arange(_utility(model_a).n_users)
    col = np.searchsorted(corpus, treated)
    if np.any(col >= corpus.size) or np.any(corpus[np.minimum(col, corpus.size - 1)] != treated):
        raise ValueError("treated items must belong to the (sorted) corpus")
    ra = rank_matrix(model_a, users, corpus)[:, col].mean(axis=0)
    rb = rank_matrix(model_b, users, corpus)[:, col].mean(axis=0)
    out = {"item": treated, "rank_a": ra, "rank_b": rb, "shift": ra - rb}
    if gt is not None:
        out["rank_true"] = rank_matrix(gt.utility, users, corpus)[:, col].mean(axis=0)
    return out


# -- comparisons -----------------------------------------------------------------


def bootstrap_compare(values_a, values_b, n_resamples: int = 10_000, seed: int = 0, level: float = 0.95):
    """Paired percentile bootstrap of ``mean(a - b)``.

    Returns ``(mean_diff, (lo, hi), p)`` where ``p`` is the one-sided
    bootstrap probability that the mean difference is not positive.
    """
    a = np.asarray(values_a, dtype=float)
    b = np.asarray(values_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("need two paired 1-d samples of equal length")
    if a.size < 2:
        raise ValueError("need at least two paired values")
    d = a - b
    rng = np.random.default_rng(seed)
    means = d[rng.integers(0, d.size, size=(n_resamples, d.size))].mean(axis=1)
    tail = (1 - level) / 2
    lo, hi = np.quantile(means, [tail, 1 - tail])
    p = (np.sum(means < 0) + 0.5 * np.sum(means == 0)) / n_resamples
    return float(d.mean()), (float(lo), float(hi)), float(p)


def mean_ci(values, level: float = 0.95) -> tuple[float, float]:
    """Mean and Student-t half-width of its confidence interval."""
    from scipy.stats import t

    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), float("nan")
    half = t.ppf(0.5 + level / 2, v.size - 1) * v.std(ddof=1) / np.sqrt(v.size)
    return float(v.mean()), float(half)
