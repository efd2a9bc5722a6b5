"""Command-line entry point: ``bmm-augment <subcommand>``.

Datasets are passed as IDX prefixes: ``--data /mnist/train`` reads
``/mnist/train-images-idx3-ubyte`` and ``/mnist/train-labels-idx1-ubyte``
(``.gz`` accepted).
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import click
import numpy as np
from threadpoolctl import threadpool_limits

from . import harness
from .classifiers.knn import KnnModel, knn_predict, knn_sweep
from .classifiers.mln import DEFAULT_LAYOUT, TrainConfig, mln_init, mln_train, save_mln
from .dataset import (
    ImageSet,
    LabelSet,
    SplitSpec,
    binarize,
    normalize,
    read_dataset,
    subset_split,
    write_dataset,
)
from .errors import BmmAugmentError
from .mixture import EMConfig, e_step, fit_em, load_model, save_model, select_k
from .sublabels import StrongRule, hard_assign, purity_report, strong_sublabels
from .synthesis import CaseDataset, assemble_case, bootstrap_synthesize, empty_batch


def _out_dir(ctx) -> Path:
    path = Path(ctx.obj["out_dir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _seed(ctx, seed):
    return ctx.obj["seed"] if seed is None else seed


def _log_base(text):
    return None if text in ("e", "ln", "natural") else float(text)


def _echo_json(payload):
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


# Config files use pipeline key names; ``k_grid`` and ``seeds`` mean different
# things per command, so each command pulls them from its own key.
_CONFIG_ALIASES = {
    "sweep-k": {"k_grid": "k_grid", "seeds": "em_seeds"},
    "train-knn": {"k_grid": "knn_k_grid", "seeds": "classifier_seeds"},
    "bias-variance": {"seeds": "classifier_seeds"},
    "compare-cases": {"seeds": "classifier_seeds"},
}


def _command_defaults(name, flat):
    defaults = {k: v for k, v in flat.items() if k not in ("k_grid", "seeds")}
    for option, key in _CONFIG_ALIASES.get(name, {}).items():
        if key in flat:
            defaults[option] = flat[key]
    return defaults


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except BmmAugmentError as exc:
            raise click.ClickException(str(exc)) from exc


@click.group(cls=_Group)
@click.option("--seed", type=int, default=0, show_default=True, help="Default seed for every stage.")
@click.option("--threads", type=int, default=None, help="BLAS thread count.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=".", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Flat key = value file; keys mirror option names.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, seed, threads, out_dir, config_path, verbose):
    """Bernoulli-mixture sub-labels and bootstrap digit synthesis for MNIST."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(asctime)s %(name)s: %(message)s")
    ctx.obj = {"seed": seed, "out_dir": out_dir, "config": config_path}
    if threads:
        ctx.obj["limits"] = threadpool_limits(limits=threads)
    if config_path:
        flat = {k.replace("-", "_"): v
                for k, v in harness.read_flat_config(Path(config_path).read_text()).items()}
        ctx.default_map = {name: _command_defaults(name, flat) for name in main.commands}


@main.command()
@click.option("--data", required=True, help="Source IDX prefix.")
@click.option("--total", type=int, default=10000, show_default=True)
@click.option("--train", "n_train", type=int, default=8000, show_default=True)
@click.option("--validation", type=int, default=2000, show_default=True)
@click.option("--policy", type=click.Choice(["head", "random"]), default="head", show_default=True)
@click.option("--seed", type=int, default=None)
@click.pass_context
def split(ctx, data, total, n_train, validation, policy, seed):
    """Write train/validation IDX pairs under --out-dir."""
    images, labels = read_dataset(data)
    spec = SplitSpec(total, n_train, validation, _seed(ctx, seed), policy)
    (tr, trl), (va, val) = subset_split(images, labels, spec)
    out = _out_dir(ctx)
    write_dataset(out / "train", tr, trl)
    write_dataset(out / "val", va, val)
    click.echo(f"train: {tr.n} digits, validation: {va.n} digits -> {out}")


@main.command()
@click.option("--data", required=True)
@click.option("--k", "n_components", type=int, required=True, help="Number of components.")
@click.option("--threshold", type=int, default=100, show_default=True)
@click.option("--max-iter", type=int, default=200, show_default=True)
@click.option("--rel-tol", type=float, default=1e-6, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--output", type=click.Path(dir_okay=False), default=None,
              help="Model file (default: OUT_DIR/model.bmm).")
@click.pass_context
def fit(ctx, data, n_components, threshold, max_iter, rel_tol, seed, output):
    """Fit one Bernoulli mixture with EM."""
    images, _ = read_dataset(data)
    result = fit_em(binarize(images, threshold), n_components, _seed(ctx, seed),
                    EMConfig(max_iter, rel_tol))
    path = Path(output) if output else _out_dir(ctx) / "model.bmm"
    save_model(path, result.model)
    _echo_json({"K": n_components, "loglik": result.loglik, "iterations": result.iterations,
                "converged": result.converged, "model": str(path)})


@main.command("sweep-k")
@click.option("--data", required=True)
@click.option("--k-grid", default="10:160:15", show_default=True,
              help="Comma list and/or inclusive start:stop:step ranges.")
@click.option("--seeds", default=None, help="EM seeds (default: the global seed).")
@click.option("--threshold", type=int, default=100, show_default=True)
@click.option("--max-iter", type=int, default=200, show_default=True)
@click.option("--rel-tol", type=float, default=1e-6, show_default=True)
@click.option("--selection", type=click.Choice(["best", "mean"]), default="best", show_default=True)
@click.option("--log-base", default="10", show_default=True, help="Log base for AIC ('e' for natural).")
@click.option("--output", type=click.Path(dir_okay=False), default=None)
@click.option("--model-out", type=click.Path(dir_okay=False), default=None,
              help="Also save the best fitted model.")
@click.pass_context
def sweep_k(ctx, data, k_grid, seeds, threshold, max_iter, rel_tol, selection, log_base, output,
            model_out):
    """AIC model selection over K; emits k,seed,loglik,eta,aic_score CSV."""
    images, _ = read_dataset(data)
    seeds = harness.parse_int_list(seeds) if seeds else [ctx.obj["seed"]]
    report = select_k(binarize(images, threshold), harness.parse_int_list(k_grid), seeds,
                      EMConfig(max_iter, rel_tol), selection, _log_base(log_base),
                      keep_fits=model_out is not None)
    path = Path(output) if output else _out_dir(ctx) / "aic_selection.csv"
    harness.write_selection_csv(path, report)
    if model_out:
        save_model(model_out, report.best_fit().model)
    click.echo(f"best K = {report.best_k} ({path})")


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--data", required=True)
@click.option("--threshold", type=int, default=100, show_default=True)
@click.option("--output", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def purity(ctx, model_path, data, threshold, output):
    """Per-component purity CSV for a fitted model."""
    model = load_model(model_path)
    images, labels = read_dataset(data)
    assignment = hard_assign(e_step(binarize(images, threshold), model))
    reports = purity_report(assignment, labels, model.K)
    path = Path(output) if output else _out_dir(ctx) / "purity.csv"
    harness.write_purity_csv(path, reports)
    click.echo(str(path))


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, help="Digits the model was fitted on.")
@click.option("--threshold", type=int, default=100, show_default=True)
@click.option("--n-per-sublabel", type=int, default=100, show_default=True)
@click.option("--min-purity", type=float, default=0.85, show_default=True)
@click.option("--min-size", type=int, default=30, show_default=True)
@click.option("--target-label", type=int, default=8, show_default=True,
              help="Negative value: any label.")
@click.option("--seed", type=int, default=None)
@click.pass_context
def synthesize(ctx, model_path, data, threshold, n_per_sublabel, min_purity, min_size,
               target_label, seed):
    """Bootstrap synthetic digits from strong sub-labels."""
    model = load_model(model_path)
    images, labels = read_dataset(data)
    assignment = hard_assign(e_step(binarize(images, threshold), model))
    rule = StrongRule(min_purity, min_size, target_label if target_label >= 0 else None)
    strong = strong_sublabels(purity_report(assignment, labels, model.K), rule)
    if len(strong):
        batch = bootstrap_synthesize(images, labels, assignment, strong, n_per_sublabel,
                                     _seed(ctx, seed))
    else:
        batch = empty_batch(images.width, images.height)
    out = _out_dir(ctx)
    write_dataset(out / "synthetic", batch.rounded(), batch.label_set())
    harness.write_provenance_csv(out / "synthetic_provenance.csv", batch)
    harness.write_strong_csv(out / "strong_sublabels.csv", strong)
    click.echo(f"{len(strong)} strong sub-labels, {len(batch)} synthetic digits -> {out}")


@main.command("assemble-cases")
@click.option("--real", required=True, help="Real training digits (case A).")
@click.option("--synthetic", required=True, help="Synthetic batch prefix.")
@click.option("--source", required=True, help="File the extra real digits of case C come from.")
@click.option("--offset", type=int, default=None,
              help="First source index for case C extras (default: size of --real).")
@click.pass_context
def assemble_cases(ctx, real, synthetic, source, offset):
    """Write the A/B/C case training sets as IDX pairs."""
    real_images, real_labels = read_dataset(real)
    synth_images, synth_labels = read_dataset(synthetic)
    src_images, src_labels = read_dataset(source)
    offset = real_images.n if offset is None else offset
    extra_idx = range(offset, offset + synth_images.n)
    if extra_idx.stop > src_images.n:
        raise click.ClickException("source file too short for case C extras")
    out = _out_dir(ctx)
    cases = {
        "A": assemble_case("A", (real_images, real_labels)),
        "B": CaseDataset("B", _stack(real_images, synth_images),
                         LabelSet(np.concatenate([real_labels.values, synth_labels.values])),
                         real_images.n, synth_images.n),
        "C": assemble_case("C", (real_images, real_labels), None,
                           (src_images.take(extra_idx), src_labels.take(extra_idx))),
    }
    for cid, case in cases.items():
        write_dataset(out / cid, case.images, case.labels)
        click.echo(f"case {cid}: {case.note}")


def _stack(a, b):
    return ImageSet(np.vstack([a.rows, b.rows]), a.width, a.height)


@main.command("train-knn")
@click.option("--train", "train_prefix", required=True)
@click.option("--val", "val_prefix", required=True)
@click.option("--k", "k", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--k-grid", default=None, help="Sweep these k values instead of a single run.")
@click.option("--seeds", default=None, help="Seeds for the sweep.")
@click.pass_context
def train_knn(ctx, train_prefix, val_prefix, k, seed, k_grid, seeds):
    """Validation error of KNN, or a k sweep with --k-grid."""
    tr, trl = read_dataset(train_prefix)
    va, val = read_dataset(val_prefix)
    if k_grid:
        seeds = harness.parse_int_list(seeds) if seeds else [_seed(ctx, seed)]
        sweep = knn_sweep((normalize(tr), trl), (normalize(va), val),
                          harness.parse_int_list(k_grid), seeds)
        path = harness.write_knn_sweep_csv(_out_dir(ctx) / "knn_sweep.csv", sweep)
        click.echo(f"best k = {sweep.best_k}, mean error {sweep.mean_errors.min():.4f} ({path})")
        return
    pred = knn_predict(KnnModel(normalize(tr), trl, k=k), normalize(va), _seed(ctx, seed))
    click.echo(f"k={k} validation error {np.mean(pred != val.values):.4f}")


@main.command("train-mln")
@click.option("--train", "train_prefix", required=True)
@click.option("--val", "val_prefix", default=None)
@click.option("--lr", type=float, default=0.07, show_default=True)
@click.option("--momentum", type=float, default=0.9, show_default=True)
@click.option("--epochs", type=int, default=40, show_default=True)
@click.option("--batch-size", type=int, default=100, show_default=True)
@click.option("--loss", type=click.Choice(["squared", "cross_entropy"]), default="squared",
              show_default=True)
@click.option("--seed", type=int, default=None)
@click.pass_context
def train_mln(ctx, train_prefix, val_prefix, lr, momentum, epochs, batch_size, loss, seed):
    """Train the 784-128-164-10 network; writes mln_history.csv and mln_best.mlnw."""
    seed = _seed(ctx, seed)
    tr, trl = read_dataset(train_prefix)
    validation = None
    if val_prefix:
        va, val = read_dataset(val_prefix)
        validation = (normalize(va), val)
    config = TrainConfig(lr, momentum, epochs, batch_size, seed, loss)
    result = mln_train(mln_init(DEFAULT_LAYOUT, seed), (normalize(tr), trl), validation, config)
    out = _out_dir(ctx)
    harness.write_history_csv(out / "mln_history.csv", result.history)
    save_mln(out / "mln_best.mlnw", result.best)
    click.echo(f"best epoch {result.history.best_epoch} -> {out}")


@main.command("bias-variance")
@click.option("--algorithm", type=click.Choice(["knn", "mln"]), required=True)
@click.option("--train", "train_prefix", required=True)
@click.option("--val", "val_prefix", required=True)
@click.option("--seeds", default="0:9", show_default=True)
@click.option("--k", "k", type=int, default=3, show_default=True)
@click.option("--epochs", type=int, default=22, show_default=True)
@click.option("--lr", type=float, default=0.07, show_default=True)
@click.option("--momentum", type=float, default=0.9, show_default=True)
@click.option("--batch-size", type=int, default=100, show_default=True)
@click.pass_context
def bias_variance(ctx, algorithm, train_prefix, val_prefix, seeds, k, epochs, lr, momentum,
                  batch_size):
    """Count how many seeds misclassify each validation digit."""
    train = read_dataset(train_prefix)
    validation = read_dataset(val_prefix)
    hist = harness.bias_variance_run(algorithm, train, validation, harness.parse_int_list(seeds),
                                     k=k, mln_config=TrainConfig(lr, momentum, epochs, batch_size))
    path = harness.write_recurrence_csv(_out_dir(ctx) / "bias_variance.csv", [hist])
    _echo_json({"algorithm": algorithm, "buckets": hist.buckets, "csv": str(path)})


@main.command("compare-cases")
@click.option("--cases-dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="Directory holding A/B/C IDX pairs from assemble-cases.")
@click.option("--eval", "eval_prefix", required=True, help="Evaluation digits.")
@click.option("--algorithms", default="knn,mln", show_default=True)
@click.option("--seeds", default="0:9", show_default=True)
@click.option("--k", "k", type=int, default=3, show_default=True)
@click.option("--epochs", type=int, default=22, show_default=True)
@click.option("--lr", type=float, default=0.07, show_default=True)
@click.option("--momentum", type=float, default=0.9, show_default=True)
@click.option("--batch-size", type=int, default=100, show_default=True)
@click.pass_context
def compare_cases(ctx, cases_dir, eval_prefix, algorithms, seeds, k, epochs, lr, momentum,
                  batch_size):
    """Per-label errors for every case x algorithm x seed."""
    cases = {}
    for cid in "ABC":
        images, labels = read_dataset(Path(cases_dir) / cid)
        cases[cid] = CaseDataset(cid, images, labels, images.n, 0)
    report = harness.case_comparison(
        cases, read_dataset(eval_prefix), [a.strip() for a in algorithms.split(",")],
        harness.parse_int_list(seeds), k=k,
        mln_config=TrainConfig(lr, momentum, epochs, batch_size))
    path = harness.write_case_csv(_out_dir(ctx) / "case_comparison.csv", report)
    click.echo(str(path))


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Pipeline config (default: the global --config).")
@click.pass_context
def pipeline(ctx, config_path):
    """Run the full reproduction and write a manifest."""
    config_path = config_path or ctx.obj["config"]
    if not config_path:
        raise click.UsageError("pipeline needs --config")
    cfg = harness.PipelineConfig.from_file(config_path)
    if ctx.parent.get_parameter_source("seed") is click.core.ParameterSource.COMMANDLINE:
        cfg.seed = ctx.obj["seed"]
    result = harness.pipeline_run(cfg, _out_dir(ctx))
    _echo_json(result.summary)


if __name__ == "__main__":
    main()
