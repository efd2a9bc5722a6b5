"""Experiment orchestration: seed-recurrence analysis, error shares, Case A/B/C runs.

Everything here is batch-only and writes tidy CSV for external plotting.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .classifiers.knn import KnnModel, knn_predict, knn_sweep, neighbors, predict_from_neighbors
from .classifiers.mln import (
    DEFAULT_LAYOUT,
    TrainConfig,
    mln_init,
    mln_predict,
    mln_train,
    save_mln,
)
from .dataset import (
    SplitSpec,
    binarize,
    dataset_paths,
    normalize,
    read_dataset,
    split_indices,
    write_dataset,
)
from .errors import InsufficientData, LengthMismatch, StageError
from .mixture import EMConfig, e_step, load_model, save_model, select_k
from .sublabels import (
    StrongRule,
    export_centroid,
    hard_assign,
    purity_report,
    strong_sublabels,
)
from .synthesis import assemble_case, bootstrap_synthesize, empty_batch

log = logging.getLogger(__name__)

N_CLASSES = 10


# -- bias / variance -------------------------------------------------------


@dataclass
class RecurrenceHistogram:
    algorithm: str
    seeds: list
    miss_counts: np.ndarray  # per validation digit: seeds in which it was misclassified

    @property
    def buckets(self) -> dict:
        """r -> number of digits misclassified in exactly r seeds, r = 1..S."""
        counts = np.bincount(self.miss_counts, minlength=len(self.seeds) + 1)
        return {r: int(counts[r]) for r in range(1, len(self.seeds) + 1)}

    @property
    def ever_misclassified(self) -> int:
        return int(np.count_nonzero(self.miss_counts))


def recurrence_from_predictions(algorithm: str, seeds, predictions, truth) -> RecurrenceHistogram:
    truth = np.asarray(getattr(truth, "values", truth))
    miss = np.zeros(truth.shape[0], dtype=np.int64)
    for pred in predictions:
        miss += np.asarray(pred) != truth
    return RecurrenceHistogram(algorithm, list(seeds), miss)


def _knn_runner(k):
    def run(train, validation, seed):
        model = KnnModel(normalize(train[0]), train[1], k=k)
        return knn_predict(model, normalize(validation[0]), seed)
    return run


def _mln_runner(config: TrainConfig, layout=DEFAULT_LAYOUT):
    def run(train, validation, seed):
        cfg = dataclasses.replace(config, seed=seed)
        result = mln_train(mln_init(layout, seed), (normalize(train[0]), train[1]), None, cfg)
        return mln_predict(result.final, normalize(validation[0]))
    return run


def bias_variance_run(algorithm, train, validation, seeds, *, k: int = 3,
                      mln_config: TrainConfig | None = None) -> RecurrenceHistogram:
    """Train and evaluate once per seed and count recurring misclassifications.

    ``algorithm`` is ``"knn"``, ``"mln"`` or a callable
    ``(train, validation, seed) -> predictions``.
    """
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("recurrence analysis needs at least two seeds")
    if callable(algorithm):
        name, runner = getattr(algorithm, "__name__", "custom"), algorithm
    elif algorithm == "knn":
        name, runner = "knn", _knn_runner(k)
    elif algorithm == "mln":
        name, runner = "mln", _mln_runner(mln_config or TrainConfig())
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    predictions = []
    for seed in seeds:
        try:
            predictions.append(runner(train, validation, seed))
        except Exception as exc:
            raise RuntimeError(f"{name} failed for seed {seed}: {exc}") from exc
    return recurrence_from_predictions(name, seeds, predictions, validation[1])


# -- misclassification shares ---------------------------------------------


@dataclass
class MisclassShareTable:
    shares: dict  # label -> share of all misclassifications, None when there are none
    errors: dict  # label -> misclassification count
    total_errors: int

    @property
    def is_null(self) -> bool:
        return self.total_errors == 0

    def top(self, n: int) -> list:
        if self.is_null:
            return []
        return sorted(self.shares, key=lambda c: (-self.shares[c], c))[:n]


def misclass_share(predictions, truth) -> MisclassShareTable:
    """Share of misclassifications by true label.

    ``predictions`` may be one run or a stack of runs (seeds x digits), in
    which case errors are pooled over runs.
    """
    truth = np.asarray(getattr(truth, "values", truth))
    predictions = np.asarray(predictions)
    if predictions.shape[-1] != truth.shape[0]:
        raise LengthMismatch(f"{predictions.shape[-1]} predictions for {truth.shape[0]} digits")
    wrong = (predictions != truth).reshape(-1, truth.shape[0])
    per_label = np.array([wrong[:, truth == c].sum() for c in range(N_CLASSES)], dtype=np.int64)
    total = int(per_label.sum())
    errors = {c: int(per_label[c]) for c in range(N_CLASSES)}
    if total == 0:
        return MisclassShareTable({c: None for c in range(N_CLASSES)}, errors, 0)
    return MisclassShareTable({c: per_label[c] / total for c in range(N_CLASSES)}, errors, total)


# -- Case A/B/C ------------------------------------------------------------


@dataclass(frozen=True)
class CaseCell:
    case_id: str
    algorithm: str
    seed: int
    total_errors: int
    label_errors: tuple  # errors among evaluation digits of each true label


@dataclass
class CaseComparisonReport:
    cells: list = field(default_factory=list)

    def cell(self, case_id, algorithm, seed) -> CaseCell:
        for c in self.cells:
            if (c.case_id, c.algorithm, c.seed) == (case_id, algorithm, seed):
                return c
        raise KeyError((case_id, algorithm, seed))

    def label_errors(self, case_id, algorithm, label) -> list:
        return [c.label_errors[label] for c in self.cells
                if c.case_id == case_id and c.algorithm == algorithm]

    def mean_label_errors(self, case_id, algorithm, label) -> float:
        return float(np.mean(self.label_errors(case_id, algorithm, label)))

    def mean_total_errors(self, case_id, algorithm) -> float:
        return float(np.mean([c.total_errors for c in self.cells
                              if c.case_id == case_id and c.algorithm == algorithm]))


def _label_errors(pred, truth) -> tuple:
    wrong = pred != truth
    return tuple(int(wrong[truth == c].sum()) for c in range(N_CLASSES))


def case_comparison(cases, evaluation, algorithms=("knn", "mln"), seeds=(0,), *, k: int = 3,
                    mln_config: TrainConfig | None = None,
                    layout=DEFAULT_LAYOUT) -> CaseComparisonReport:
    """Train every (case, algorithm, seed) cell and count evaluation errors.

    ``cases`` maps case ids to :class:`CaseDataset`; ``evaluation`` is an
    ``(ImageSet, LabelSet)`` pair disjoint from every case.  The MLN is
    trained for ``mln_config.epochs`` epochs and its final weights are used.
    """
    mln_config = mln_config or TrainConfig()
    eval_x = normalize(evaluation[0])
    truth = np.asarray(evaluation[1].values, dtype=np.intp)
    report = CaseComparisonReport()
    for case_id in sorted(cases):
        case = cases[case_id]
        train_x = normalize(case.images)
        for algorithm in algorithms:
            if algorithm == "knn":
                # neighbour ranking is seed independent; only vote ties use the seed
                model = KnnModel(train_x, case.labels, k=k)
                idx = neighbors(model, eval_x)
                for seed in seeds:
                    pred = predict_from_neighbors(model.train_labels, idx, k, seed)
                    report.cells.append(CaseCell(case_id, "knn", seed, int((pred != truth).sum()),
                                                 _label_errors(pred, truth)))
            elif algorithm == "mln":
                for seed in seeds:
                    cfg = dataclasses.replace(mln_config, seed=seed)
                    result = mln_train(mln_init(layout, seed), (train_x, case.labels), None, cfg)
                    pred = mln_predict(result.final, eval_x)
                    report.cells.append(CaseCell(case_id, "mln", seed, int((pred != truth).sum()),
                                                 _label_errors(pred, truth)))
            else:
                raise ValueError(f"unknown algorithm {algorithm!r}")
            log.info("case %s %s done", case_id, algorithm)
    return report


# -- CSV writers -----------------------------------------------------------


def _write_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_selection_csv(path, report):
    return _write_csv(path, ["k", "seed", "loglik", "eta", "aic_score"],
                      [[e.k, e.seed, _fmt(e.loglik), e.eta, _fmt(e.aic_score)]
                       for e in report.entries])


def write_purity_csv(path, reports):
    header = ["component_id", "size", "purity", "majority_label"] + [f"count_{c}" for c in range(10)]
    return _write_csv(path, header, [[r.component_id, r.size, _fmt(r.purity),
                                      _fmt(r.majority_label), *r.class_counts] for r in reports])


def write_strong_csv(path, strong):
    return _write_csv(path, ["component_id", "majority_label", "size", "purity"],
                      [[e.component_id, e.majority_label, e.size, _fmt(e.purity)] for e in strong])


def write_provenance_csv(path, batch):
    return _write_csv(path, ["row", "sub_label_id", "parent_a", "parent_b"],
                      [[i, p.sub_label_id, p.parent_a, p.parent_b]
                       for i, p in enumerate(batch.provenance)])


def write_knn_sweep_csv(path, sweep):
    return _write_csv(path, ["k", "seed", "val_error"],
                      [[k, s, _fmt(sweep.errors[i, j])] for i, k in enumerate(sweep.k_grid)
                       for j, s in enumerate(sweep.seeds)])


def write_history_csv(path, history, seed=None):
    rows = []
    for e, loss in enumerate(history.train_loss, start=1):
        err = history.validation_error[e - 1] if history.validation_error else None
        rows.append(([seed] if seed is not None else []) + [e, _fmt(loss), _fmt(err)])
    header = (["seed"] if seed is not None else []) + ["epoch", "train_loss", "val_error"]
    return _write_csv(path, header, rows)


def write_recurrence_csv(path, histograms):
    rows = [[h.algorithm, r, n] for h in histograms for r, n in h.buckets.items()]
    return _write_csv(path, ["algorithm", "seeds_misclassified", "digits"], rows)


def write_share_csv(path, tables: dict):
    names = list(tables)
    rows = [[c] + [_fmt(tables[n].shares[c]) for n in names] for c in range(N_CLASSES)]
    return _write_csv(path, ["label"] + names, rows)


def write_case_csv(path, report):
    header = ["case", "algorithm", "seed", "total_errors"] + [f"errors_{c}" for c in range(10)]
    return _write_csv(path, header, [[c.case_id, c.algorithm, c.seed, c.total_errors,
                                      *c.label_errors] for c in report.cells])


# -- configuration ---------------------------------------------------------


def parse_int_list(text) -> list:
    """``"1,2,5"`` or inclusive ranges ``"10:160:15"`` / ``"1:10"``, mixed freely."""
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    out = []
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        if ":" in part:
            bits = [int(b) for b in part.split(":")]
            start, stop = bits[0], bits[1]
            step = bits[2] if len(bits) > 2 else 1
            out.extend(range(start, stop + 1, step))
        else:
            out.append(int(part))
    return out


@dataclass
class PipelineConfig:
    """Keys of the flat config file; names mirror the CLI flags (dashes or underscores)."""

    train_data: str = ""  # IDX prefix, e.g. /data/mnist/train
    test_data: str = ""  # optional IDX prefix for Case A/B/C evaluation
    eval_size: int = 0  # 0 = every evaluation digit available
    total: int = 10000
    train: int = 8000
    validation: int = 2000
    split_policy: str = "head"
    seed: int = 0
    threshold: int = 100
    k_grid: list = field(default_factory=lambda: list(range(10, 161, 15)))
    em_seeds: list = field(default_factory=lambda: [0])
    max_iter: int = 200
    rel_tol: float = 1e-6
    selection: str = "best"
    log_base: str = "10"
    model: str = ""  # pre-fitted mixture; skips the K sweep
    min_purity: float = 0.85
    min_size: int = 30
    target_label: int = 8
    n_per_sublabel: int = 100
    knn_k_grid: list = field(default_factory=lambda: list(range(1, 11)))
    classifier_seeds: list = field(default_factory=lambda: list(range(10)))
    epochs: int = 40
    lr: float = 0.07
    momentum: float = 0.9
    batch_size: int = 100
    loss: str = "squared"
    algorithms: list = field(default_factory=lambda: ["knn", "mln"])

    _LISTS = ("k_grid", "em_seeds", "knn_k_grid", "classifier_seeds")

    @classmethod
    def from_mapping(cls, mapping) -> "PipelineConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for raw_key, value in mapping.items():
            key = raw_key.strip().replace("-", "_")
            if key not in known:
                raise ValueError(f"unknown config key {raw_key!r}")
            default = known[key].default
            if key in cls._LISTS:
                kwargs[key] = parse_int_list(value)
            elif key == "algorithms":
                kwargs[key] = [a.strip() for a in str(value).split(",") if a.strip()]
            elif isinstance(default, bool):
                kwargs[key] = str(value).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[key] = int(value)
            elif isinstance(default, float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = str(value).strip()
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        return cls.from_mapping(read_flat_config(text))

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls.from_text(Path(path).read_text())

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()

    @property
    def log_base_value(self):
        return None if self.log_base in ("e", "ln", "natural") else float(self.log_base)


def read_flat_config(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[config]\n" + text)
    return dict(parser["config"])


# -- pipeline --------------------------------------------------------------


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class _Manifest:
    def __init__(self, out_dir: Path, config: PipelineConfig):
        self.out_dir = out_dir
        self.data = {
            "config": config.as_dict(),
            "config_sha256": config.digest(),
            "seeds": {"split": config.seed, "em": config.em_seeds,
                      "synthesis": config.seed, "classifiers": config.classifier_seeds},
            "versions": {"bmm_augment": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
            "inputs": {},
            "stages": [],
            "status": "running",
        }

    def add_input(self, path):
        self.data["inputs"][str(path)] = file_digest(path)

    def stage(self, name, outputs, summary=None):
        entry = {"stage": name, "status": "ok",
                 "outputs": {str(Path(p).relative_to(self.out_dir)): file_digest(p)
                             for p in outputs}}
        if summary:
            entry["summary"] = summary
        self.data["stages"].append(entry)
        self.write()

    def fail(self, name, exc):
        self.data["stages"].append({"stage": name, "status": "failed", "error": str(exc)})
        self.data["status"] = "failed"
        self.write()

    def write(self):
        path = self.out_dir / "manifest.json"
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        return path


GNUPLOT_SCRIPT = """\
# gnuplot -p plots.gp
set datafile separator ','
set key autotitle columnhead
set terminal pngcairo size 800,500
set output 'aic_selection.png'
set xlabel 'K'; set ylabel 'AIC score'
plot 'aic_selection.csv' using 1:5 with linespoints
set output 'knn_sweep.png'
set xlabel 'neighbours'; set ylabel 'validation error'
plot 'knn_sweep.csv' using 1:3 with points
set output 'mln_sweep.png'
set xlabel 'epoch'; set ylabel 'validation error'
plot 'mln_sweep.csv' using 2:4 with points
set output 'bias_variance.png'
set style data histograms
set xlabel 'seeds misclassified'; set ylabel 'digits'
plot 'bias_variance.csv' using 3:xtic(2)
"""


@dataclass
class PipelineResult:
    out_dir: Path
    manifest: dict
    summary: dict
    state: dict = field(default_factory=dict, repr=False)  # in-memory intermediates
    timings: dict = field(default_factory=dict)


def _eval_set(cfg, images, labels, used: int, subset_idx):
    """Evaluation digits for the case comparison, disjoint from every case."""
    if cfg.test_data:
        test_images, test_labels = read_dataset(cfg.test_data)
        n = cfg.eval_size or test_images.n
        if n > test_images.n:
            raise InsufficientData(f"eval_size {n} exceeds {test_images.n} test digits")
        return test_images.take(range(n)), test_labels.take(range(n)), cfg.test_data
    rest = np.setdiff1d(np.arange(images.n), subset_idx)[used:]
    n = cfg.eval_size or rest.size
    if n == 0 or n > rest.size:
        raise InsufficientData("no training-file digits left for evaluation")
    return images.take(rest[:n]), labels.take(rest[:n]), "train_data remainder"


def pipeline_run(config, out_dir) -> PipelineResult:
    """Run every stage from ingestion to the case comparison.

    Every artifact goes under ``out_dir`` together with ``manifest.json``
    (config echo, input digests, per-stage output digests). A failing stage is
    recorded in the manifest before :class:`StageError` is raised.
    """
    cfg = config if isinstance(config, PipelineConfig) else PipelineConfig.from_file(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest(out, cfg)
    summary = {}
    state = {}
    timings = {}  # wall-clock seconds per stage; kept out of the manifest so reruns hash equal

    def run(name, fn):
        t0 = time.perf_counter()
        try:
            outputs, info = fn()
        except Exception as exc:
            manifest.fail(name, exc)
            raise StageError(name, exc) from exc
        if info:
            summary[name] = info
        manifest.stage(name, outputs, info)
        timings[name] = time.perf_counter() - t0
        log.info("stage %s finished in %.1fs", name, timings[name])

    def ingest():
        images, labels = read_dataset(cfg.train_data)
        for p in dataset_paths(cfg.train_data):
            manifest.add_input(p)
        if cfg.test_data:
            for p in dataset_paths(cfg.test_data):
                manifest.add_input(p)
        if cfg.model:
            manifest.add_input(cfg.model)
        state["images"], state["labels"] = images, labels
        return [], {"digits": images.n}

    def split():
        spec = SplitSpec(cfg.total, cfg.train, cfg.validation, cfg.seed, cfg.split_policy)
        train_idx, val_idx = split_indices(state["images"].n, spec)
        subset_idx = np.concatenate([train_idx, val_idx])
        state["subset_idx"] = subset_idx
        state["subset"] = (state["images"].take(subset_idx), state["labels"].take(subset_idx))
        state["train"] = (state["images"].take(train_idx), state["labels"].take(train_idx))
        state["val"] = (state["images"].take(val_idx), state["labels"].take(val_idx))
        return [], {"train": int(train_idx.size), "validation": int(val_idx.size)}

    def fit_mixture():
        X = binarize(state["subset"][0], cfg.threshold)
        state["binary"] = X
        outputs = []
        if cfg.model:
            model = load_model(cfg.model)
            info = {"source": cfg.model, "K": model.K}
        else:
            report = select_k(X, cfg.k_grid, cfg.em_seeds,
                              EMConfig(cfg.max_iter, cfg.rel_tol), cfg.selection,
                              cfg.log_base_value)
            model = report.best_fit().model
            scores = report.scores_by_k()
            outputs.append(write_selection_csv(out / "aic_selection.csv", report))
            info = {"best_k": report.best_k,
                    "best_score": float(max(np.mean(v) for v in scores.values())
                                        if cfg.selection == "mean"
                                        else max(max(v) for v in scores.values()))}
        save_model(out / "model.bmm", model)
        outputs.append(out / "model.bmm")
        state["model"] = model
        return outputs, info

    def purity():
        assignment = hard_assign(e_step(state["binary"], state["model"]))
        reports = purity_report(assignment, state["subset"][1], state["model"].K)
        target = cfg.target_label if cfg.target_label >= 0 else None  # negative: any label
        strong = strong_sublabels(reports, StrongRule(cfg.min_purity, cfg.min_size, target))
        state["assignment"], state["strong"] = assignment, strong
        cdir = out / "centroids"
        cdir.mkdir(exist_ok=True)
        outputs = [write_purity_csv(out / "purity.csv", reports),
                   write_strong_csv(out / "strong_sublabels.csv", strong)]
        for e in strong:
            outputs.append(export_centroid(state["model"], e.component_id,
                                           cdir / f"component_{e.component_id:03d}.pgm",
                                           state["images"].width, state["images"].height))
        return outputs, {"strong_sublabels": len(strong),
                         "purities": [round(e.purity, 4) for e in strong]}

    def synthesize():
        images, labels = state["subset"]
        if len(state["strong"]):
            batch = bootstrap_synthesize(images, labels, state["assignment"], state["strong"],
                                         cfg.n_per_sublabel, cfg.seed)
        else:
            batch = empty_batch(images.width, images.height)
        state["batch"] = batch
        outputs = list(write_dataset(out / "synthetic", batch.rounded(), batch.label_set()))
        outputs.append(write_provenance_csv(out / "synthetic_provenance.csv", batch))
        return outputs, {"synthetic": len(batch)}

    def assemble():
        batch = state["batch"]
        used = len(batch)
        rest = np.setdiff1d(np.arange(state["images"].n), state["subset_idx"])
        if rest.size < used:
            raise InsufficientData(f"need {used} extra real digits for case C, have {rest.size}")
        extra = (state["images"].take(rest[:used]), state["labels"].take(rest[:used]))
        cases = {
            "A": assemble_case("A", state["subset"]),
            "B": assemble_case("B", state["subset"], batch),
            "C": assemble_case("C", state["subset"], batch, extra),
        }
        state["cases"] = cases
        cdir = out / "cases"
        cdir.mkdir(exist_ok=True)
        outputs = []
        for cid, case in cases.items():
            outputs.extend(write_dataset(cdir / cid, case.images, case.labels))
        return outputs, {cid: case.note for cid, case in cases.items()}

    def classifier_sweeps():
        train_x, train_y = normalize(state["train"][0]), state["train"][1]
        val_x, val_y = normalize(state["val"][0]), state["val"][1]
        outputs, info = [], {}
        if "knn" in cfg.algorithms:
            sweep = knn_sweep((train_x, train_y), (val_x, val_y), cfg.knn_k_grid,
                              cfg.classifier_seeds)
            state["knn_sweep"] = sweep
            outputs.append(write_knn_sweep_csv(out / "knn_sweep.csv", sweep))
            info["knn_best_k"] = sweep.best_k
            info["knn_best_error"] = float(sweep.mean_errors.min())
        if "mln" in cfg.algorithms:
            histories = []
            rows = []
            for seed in cfg.classifier_seeds:
                tc = TrainConfig(cfg.lr, cfg.momentum, cfg.epochs, cfg.batch_size, seed, cfg.loss)
                result = mln_train(mln_init(DEFAULT_LAYOUT, seed), (train_x, train_y),
                                   (val_x, val_y), tc, record_predictions=True)
                histories.append(result.history)
                if seed == cfg.classifier_seeds[0]:
                    save_mln(out / "mln_best.mlnw", result.best)
                    outputs.append(out / "mln_best.mlnw")
                for e, (loss, err) in enumerate(zip(result.history.train_loss,
                                                    result.history.validation_error), start=1):
                    rows.append([seed, e, _fmt(loss), _fmt(err)])
                log.info("mln seed %s best epoch %d", seed, result.history.best_epoch)
            outputs.append(_write_csv(out / "mln_sweep.csv",
                                      ["seed", "epoch", "train_loss", "val_error"], rows))
            mean_err = np.mean([h.validation_error for h in histories], axis=0)
            best_epoch = int(np.argmin(mean_err)) + 1
            state["mln_histories"], state["mln_best_epoch"] = histories, best_epoch
            info["mln_best_epoch"] = best_epoch
            info["mln_best_error"] = float(mean_err[best_epoch - 1])
            info["mln_per_seed_best_epoch"] = [h.best_epoch for h in histories]
        return outputs, info

    def bias_variance():
        truth = state["val"][1]
        hists, tables = [], {}
        seeds = cfg.classifier_seeds
        if "knn" in cfg.algorithms:
            sweep = state["knn_sweep"]
            preds = [sweep.predictions[(sweep.best_k, s)] for s in seeds]
            hists.append(recurrence_from_predictions("knn", seeds, preds, truth))
            tables["knn"] = misclass_share(np.stack(preds), truth)
        if "mln" in cfg.algorithms:
            e = state["mln_best_epoch"]
            preds = [h.val_predictions[e - 1] for h in state["mln_histories"]]
            hists.append(recurrence_from_predictions("mln", seeds, preds, truth))
            tables["mln"] = misclass_share(np.stack(preds), truth)
        outputs = [write_recurrence_csv(out / "bias_variance.csv", hists)]
        if tables:
            outputs.append(write_share_csv(out / "misclass_share.csv", tables))
        info = {h.algorithm: h.buckets for h in hists}
        info.update({f"{name}_top_labels": t.top(3) for name, t in tables.items()})
        return outputs, info

    def compare_cases():
        eval_images, eval_labels, source = _eval_set(
            cfg, state["images"], state["labels"], len(state["batch"]), state["subset_idx"])
        k = state["knn_sweep"].best_k if "knn_sweep" in state else 3
        epochs = state.get("mln_best_epoch", cfg.epochs)
        tc = TrainConfig(cfg.lr, cfg.momentum, epochs, cfg.batch_size, 0, cfg.loss)
        report = case_comparison(state["cases"], (eval_images, eval_labels), cfg.algorithms,
                                 cfg.classifier_seeds, k=k, mln_config=tc)
        state["case_report"] = report
        info = {"evaluation": source, "evaluation_digits": eval_images.n, "knn_k": k,
                "mln_epochs": epochs}
        for alg in cfg.algorithms:
            for cid in sorted(state["cases"]):
                info[f"{alg}_{cid}_mean_label{cfg.target_label}_errors"] = \
                    report.mean_label_errors(cid, alg, cfg.target_label)
                info[f"{alg}_{cid}_mean_total_errors"] = report.mean_total_errors(cid, alg)
        return [write_case_csv(out / "case_comparison.csv", report)], info

    def plots():
        path = out / "plots.gp"
        path.write_text(GNUPLOT_SCRIPT)
        summary_path = out / "summary.json"
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return [path, summary_path], None

    for name, fn in [("ingest", ingest), ("split", split), ("fit_mixture", fit_mixture),
                     ("purity", purity), ("synthesize", synthesize), ("assemble_cases", assemble),
                     ("classifier_sweeps", classifier_sweeps), ("bias_variance", bias_variance),
                     ("compare_cases", compare_cases), ("export", plots)]:
        run(name, fn)

    manifest.data["status"] = "ok"
    manifest.write()
    return PipelineResult(out, manifest.data, summary, state, timings)
