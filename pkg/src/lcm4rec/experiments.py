"""Configured pipelines for the two simulation studies.

Experiment 1 fits every model on uniformly exposed data and reports
choice-distribution accuracy, test metrics and error-law recovery.
Experiment 2 fits the choice models on paired datasets that differ only in
how a treated item subset is exposed and reports the resulting rank shift.

Reports are tab-separated files whose leading ``#`` lines hold the package
version and the fully resolved configuration.  Per-repetition results are
cached as JSON under ``<out>/reps`` so ``resume=True`` skips finished work.
"""

from __future__ import annotations

import configparser
import functools
import json
import logging
import subprocess
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .distributions import EXPERIMENT_LAWS, Gumbel, SignedExponential, named_law
from .evalkit import (
    count_modes,
    error_dist_kld,
    mean_ci,
    parametric_error_kld,
    rank_shift_records,
    test_metrics,
    true_corpus_probs,
)
from .kernel import derive
from .models import CHOICE_KINDS, MODEL_KINDS
from .simulator import (
    ExposureProtocol,
    choose_treated,
    gen_choices,
    gen_ground_truth,
    plan_split,
    split,
    user_pools,
)
from .trainer import TrainConfig, TrainingDiverged, train

log = logging.getLogger(__name__)

EXPERIMENTS = ("exp1", "exp2")
EXP2_MODELS = ("MNL", "ENL", "LCM4Rec")
BIAS_KINDS = {
    "overexposure": ("Uniform", "Overexposure"),
    "competition": ("CompetitionPopular", "CompetitionUnpopular"),
}
PARAMETRIC_FAMILIES = {"MNL": Gumbel, "ENL": SignedExponential}
PDF_GRID = np.linspace(-6.0, 6.0, 2401)


@dataclass
class ExperimentConfig:
    experiment: str = "exp1"
    error_laws: tuple[str, ...] = tuple(EXPERIMENT_LAWS)
    models: tuple[str, ...] = MODEL_KINDS
    n_users: int = 100
    n_items: int = 100
    choices_per_user: int = 150
    random_counts: bool = False
    set_size: int = 4
    repetitions: int = 5
    seed: int = 0
    K: int = 5
    S: int = 5
    m: int = 3
    n_treated: int = 10
    n_negatives: int = 3
    gbce_t: float = 1.0
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    optimizers: dict = field(default_factory=lambda: {k: ("adam", 0.01) for k in MODEL_KINDS})
    exp2_optimizers: dict = field(default_factory=lambda: {"ENL": ("sgd", 0.1)})
    ndcg_mode: str = "corpus"
    control: bool = False
    workers: int = 1
    out: str = "runs"

    def __post_init__(self):
        self.error_laws = tuple(self.error_laws)
        self.models = tuple(self.models)
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"experiment must be one of {EXPERIMENTS}")
        for law in self.error_laws:
            if law not in EXPERIMENT_LAWS:
                raise ValueError(f"unknown error law {law!r}; expected one of {tuple(EXPERIMENT_LAWS)}")
        for kind in self.models:
            if kind not in MODEL_KINDS:
                raise ValueError(f"unknown model {kind!r}")
        if self.experiment == "exp2":
            bad = [k for k in self.models if k not in EXP2_MODELS]
            if bad:
                raise ValueError(f"experiment 2 only runs choice models, not {bad}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        for name in ("n_users", "n_items", "choices_per_user", "set_size", "K", "S", "m", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        self.optimizers = {k: (str(o), float(lr)) for k, (o, lr) in self.optimizers.items()}
        self.exp2_optimizers = {k: (str(o), float(lr)) for k, (o, lr) in self.exp2_optimizers.items()}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["error_laws"] = list(self.error_laws)
        d["models"] = list(self.models)
        d["optimizers"] = {k: list(v) for k, v in sorted(self.optimizers.items())}
        d["exp2_optimizers"] = {k: list(v) for k, v in sorted(self.exp2_optimizers.items())}
        return d

    def train_config(self, kind: str, seed: int) -> TrainConfig:
        table = dict(self.optimizers)
        if self.experiment == "exp2":
            table.update(self.exp2_optimizers)
        opt, lr = table.get(kind, ("adam", 0.01))
        return TrainConfig(
            model_kind=kind, optimizer=opt, learning_rate=lr, batch_size=self.batch_size,
            max_epochs=self.max_epochs, patience=self.patience, seed=seed, K=self.K, S=self.S,
            m=self.m, n_negatives=self.n_negatives, gbce_t=self.gbce_t,
        )


# -- configuration files ---------------------------------------------------------

_LIST_KEYS = {"error_laws", "models"}
_BOOL_KEYS = {"random_counts", "control"}
_STR_KEYS = {"experiment", "ndcg_mode", "out"}


def _parse_optimizers(section) -> dict:
    out = {}
    for kind, value in section.items():
        opt, lr = value.split()
        out[_canonical_model(kind)] = (opt, float(lr))
    return out


def _canonical_model(name: str) -> str:
    for kind in MODEL_KINDS:
        if kind.lower() == name.strip().lower():
            return kind
    raise ValueError(f"unknown model {name!r}")


def load_config(path=None, profile: str | None = None, **overrides) -> ExperimentConfig:
    """Build a config from a shipped profile, then a user file, then overrides.

    Files are INI: scalar settings in ``[experiment]``; per-model
    ``optimizer learning-rate`` pairs in ``[optimizers]`` and
    ``[exp2_optimizers]``.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if profile is not None:
        text = resources.files("lcm4rec").joinpath("profiles", f"{profile}.ini")
        if not text.is_file():
            raise ValueError(f"unknown profile {profile!r}")
        parser.read_string(text.read_text())
    if path is not None:
        if not Path(path).is_file():
            raise FileNotFoundError(path)
        parser.read(path)
    kwargs = {}
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key not in ExperimentConfig.__dataclass_fields__:
                raise ValueError(f"unknown setting {key!r}")
            if key in _LIST_KEYS:
                items = tuple(v.strip() for v in raw.split(",") if v.strip())
                kwargs[key] = tuple(_canonical_model(v) for v in items) if key == "models" else items
            elif key in _BOOL_KEYS:
                kwargs[key] = parser.getboolean("experiment", key)
            elif key in _STR_KEYS:
                kwargs[key] = raw.strip()
            elif key == "gbce_t":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = int(raw)
    for sect in ("optimizers", "exp2_optimizers"):
        if parser.has_section(sect):
            kwargs[sect] = _parse_optimizers(parser[sect])
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**kwargs)


# -- provenance and output ---------------------------------------------------------


@functools.lru_cache(maxsize=1)
def version_string() -> str:
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_tsv(path: Path, cfg: ExperimentConfig, columns, rows):
    # the output directory does not affect results; leaving it out keeps
    # reports of identical runs byte-identical wherever they are written
    settings = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    lines = [
        f"# lcm4rec {version_string()}",
        "# config " + json.dumps(settings, sort_keys=True),
        "\t".join(columns),
    ]
    lines += ["\t".join(_fmt(r.get(c, "")) for c in columns) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def rep_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, rep]).generate_state(1)[0] % (2**31))


@dataclass
class RunResult:
    files: list[Path]
    failures: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures


def _run_reps(cfg: ExperimentConfig, tasks, fn, resume: bool):
    """Run ``fn(cfg, *task)`` for each task, caching JSON results."""
    rep_dir = Path(cfg.out) / "reps"
    rep_dir.mkdir(parents=True, exist_ok=True)
    results, pending = {}, []
    for task in tasks:
        path = rep_dir / ("_".join(str(t) for t in (cfg.experiment,) + task) + ".json")
        if resume and path.is_file():
            results[task] = json.loads(path.read_text())
        else:
            pending.append((task, path))

    def store(task, path, res):
        path.write_text(json.dumps(res, sort_keys=True))
        results[task] = res

    if cfg.workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            futures = [(t, p, ex.submit(_safe_call, fn, cfg, t)) for t, p in pending]
            for task, path, fut in futures:
                store(task, path, fut.result())
    else:
        for task, path in pending:
            store(task, path, _safe_call(fn, cfg, task))
    return [results[t] for t in tasks]


def _safe_call(fn, cfg, task):
    try:
        return fn(cfg, *task)
    except (TrainingDiverged, ValueError, RuntimeError, FloatingPointError) as exc:
        log.error("%s %s failed: %s", cfg.experiment, task, exc)
        return {"error": f"{type(exc).__name__}: {exc}", "trace": traceback.format_exc(limit=3)}


def _simulate(cfg: ExperimentConfig, law: str, seed: int, protocol=None, plan=None):
    gt = gen_ground_truth(seed, cfg.n_users, cfg.n_items, cfg.m, named_law(law))
    plan = plan if plan is not None else plan_split(cfg.n_users, cfg.n_items, seed)
    protocol = protocol if protocol is not None else ExposureProtocol("Uniform", set_size=cfg.set_size)
    obs = gen_choices(gt, protocol, cfg.choices_per_user, seed, plan, random_counts=cfg.random_counts)
    return gt, plan, split(obs, gt, seed, plan)


# -- experiment 1 ------------------------------------------------------------------


def _exp1_rep(cfg: ExperimentConfig, law: str, rep: int) -> dict:
    seed = rep_seed(cfg.seed, rep)
    gt, plan, (train_set, val_set, test_set) = _simulate(cfg, law, seed)
    truth = true_corpus_probs(gt, plan.eval_users, plan.eval_items)
    pools = user_pools(plan, cfg.n_items)
    out = {"law": law, "rep": rep, "models": {}}
    for kind in cfg.models:
        fitted = train(train_set, val_set, cfg.train_config(kind, seed), cfg.n_users, cfg.n_items, pools)
        report = test_metrics(fitted, test_set, gt, plan.eval_users, plan.eval_items, truth, cfg.ndcg_mode)
        row = report.as_row()
        row["epochs"] = len(fitted.history)
        row["val_nll"] = fitted.best_val_nll
        if kind == "LCM4Rec":
            dk = derive(fitted.kernel)
            row["error_kld"], row["error_shift"] = error_dist_kld(dk, gt.law, return_shift=True)
            row["pdf_modes"] = count_modes(dk.pdf(PDF_GRID))
            row["kernel"] = {"raw": fitted.kernel.to_dict(), "derived": dk.to_dict()}
        out["models"][kind] = row
    return out


def run_experiment1(cfg: ExperimentConfig, resume: bool = False) -> RunResult:
    cfg = replace(cfg, experiment="exp1")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(law, rep) for law in cfg.error_laws for rep in range(cfg.repetitions)]
    results = _run_reps(cfg, tasks, _exp1_rep, resume)
    failures = [f"{t}: {r['error']}" for t, r in zip(tasks, results) if "error" in r]

    run_cols = ["law", "rep", "model", "kld", "nll", "ndcg", "acc", "val_nll", "epochs", "error_kld",
                "error_shift", "pdf_modes"]
    run_rows = []
    for r in results:
        if "error" in r:
            continue
        for kind in cfg.models:
            run_rows.append({"law": r["law"], "rep": r["rep"], "model": kind, **r["models"][kind]})
    files = [write_tsv(out / "exp1_runs.tsv", cfg, run_cols, run_rows)]

    t2_cols = ["law", "model", "n"] + [f"{m}_{s}" for m in ("kld", "nll", "ndcg", "acc") for s in ("mean", "sd")]
    t2_rows = []
    for law in cfg.error_laws:
        for kind in cfg.models:
            rows = [r for r in run_rows if r["law"] == law and r["model"] == kind]
            row = {"law": law, "model": kind, "n": len(rows)}
            for m in ("kld", "nll", "ndcg", "acc"):
                v = np.array([r[m] for r in rows], dtype=float)
                row[f"{m}_mean"] = float(v.mean()) if v.size else float("nan")
                row[f"{m}_sd"] = float(v.std(ddof=1)) if v.size > 1 else float("nan")
            t2_rows.append(row)
    files.append(write_tsv(out / "table2.tsv", cfg, t2_cols, t2_rows))

    t3_cols = ["model"] + [f"{law}_{s}" for law in cfg.error_laws for s in ("mean", "sd")]
    t3_rows = []
    for kind in ("MNL", "ENL", "LCM4Rec"):
        if kind not in cfg.models:
            continue
        row = {"model": kind}
        for law in cfg.error_laws:
            if kind in PARAMETRIC_FAMILIES:
                fam = PARAMETRIC_FAMILIES[kind]
                row[f"{law}_mean"] = parametric_error_kld(lambda s, fam=fam: fam(0.0, s), named_law(law))
                row[f"{law}_sd"] = 0.0
            else:
                v = np.array([r["error_kld"] for r in run_rows if r["law"] == law and r["model"] == kind])
                row[f"{law}_mean"] = float(v.mean()) if v.size else float("nan")
                row[f"{law}_sd"] = float(v.std(ddof=1)) if v.size > 1 else float("nan")
        t3_rows.append(row)
    if t3_rows:
        files.append(write_tsv(out / "table3.tsv", cfg, t3_cols, t3_rows))
    return RunResult(files, failures)


# -- experiment 2 ------------------------------------------------------------------


def _exp2_rep(cfg: ExperimentConfig, law: str, rep: int) -> dict:
    seed = rep_seed(cfg.seed, rep)
    gt = gen_ground_truth(seed, cfg.n_users, cfg.n_items, cfg.m, named_law(law))
    plan = plan_split(cfg.n_users, cfg.n_items, seed)
    treated = choose_treated(plan.eval_items, cfg.n_treated, seed)
    pools = user_pools(plan, cfg.n_items)
    out = {"law": law, "rep": rep, "treated": list(treated), "shifts": {}, "records": []}
    for bias, (kind_a, kind_b) in BIAS_KINDS.items():
        fitted = {}
        for tag, pkind in (("O1", kind_a), ("O2", kind_a if cfg.control else kind_b)):
            protocol = ExposureProtocol(pkind, treated, cfg.set_size)
            _, _, (train_set, val_set, _) = _simulate(cfg, law, seed, protocol, plan)
            for kind in cfg.models:
                fitted[tag, kind] = train(train_set, val_set, cfg.train_config(kind, seed), cfg.n_users,
                                          cfg.n_items, pools)
        for kind in cfg.models:
            rec = rank_shift_records(fitted["O2", kind], fitted["O1", kind], treated, plan.eval_items,
                                     plan.eval_users, gt)
            out["shifts"][f"{bias}/{kind}"] = float(rec["shift"].mean())
            for i, item in enumerate(rec["item"]):
                out["records"].append({
                    "bias": bias, "model": kind, "item": int(item), "rank_O1": float(rec["rank_b"][i]),
                    "rank_O2": float(rec["rank_a"][i]), "rank_true": float(rec["rank_true"][i]),
                })
    return out


def run_experiment2(cfg: ExperimentConfig, resume: bool = False) -> RunResult:
    cfg = replace(cfg, experiment="exp2")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(law, rep) for law in cfg.error_laws for rep in range(cfg.repetitions)]
    results = _run_reps(cfg, tasks, _exp2_rep, resume)
    failures = [f"{t}: {r['error']}" for t, r in zip(tasks, results) if "error" in r]
    ok = [r for r in results if "error" not in r]

    run_rows = [
        {"law": r["law"], "rep": r["rep"], "bias": key.split("/")[0], "model": key.split("/")[1], "shift": v}
        for r in ok for key, v in r["shifts"].items()
    ]
    files = [write_tsv(out / "exp2_runs.tsv", cfg, ["law", "rep", "bias", "model", "shift"], run_rows)]

    t4_cols = ["law", "model", "bias", "n", "mean", "ci95"]
    t4_rows = []
    for law in cfg.error_laws:
        for kind in cfg.models:
            for bias in BIAS_KINDS:
                v = [r["shift"] for r in run_rows if r["law"] == law and r["model"] == kind and r["bias"] == bias]
                mean, half = mean_ci(v) if v else (float("nan"), float("nan"))
                t4_rows.append({"law": law, "model": kind, "bias": bias, "n": len(v), "mean": mean, "ci95": half})
    files.append(write_tsv(out / "table4.tsv", cfg, t4_cols, t4_rows))

    rank_cols = ["law", "rep", "bias", "model", "item", "rank_O1", "rank_O2", "rank_true"]
    rank_rows = [{"law": r["law"], "rep": r["rep"], **rec} for r in ok for rec in r["records"]]
    files.append(write_tsv(out / "exp2_item_ranks.tsv", cfg, rank_cols, rank_rows))
    return RunResult(files, failures)


def run(cfg: ExperimentConfig, resume: bool = False) -> RunResult:
    return (run_experiment1 if cfg.experiment == "exp1" else run_experiment2)(cfg, resume)


def read_tsv(path) -> list[dict]:
    """Rows of a report file, numbers parsed where possible."""
    rows, header = [], None
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            continue
        cells = line.split("\t")
        if header is None:
            header = cells
            continue
        row = {}
        for k, v in zip(header, cells):
            try:
                row[k] = float(v) if v not in ("",) else None
            except ValueError:
                row[k] = v
        rows.append(row)
    return rows


__all__ = [
    "CHOICE_KINDS",
    "ExperimentConfig",
    "RunResult",
    "load_config",
    "read_tsv",
    "run",
    "run_experiment1",
    "run_experiment2",
    "write_tsv",
]
