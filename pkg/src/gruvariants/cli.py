"""Command-line entry point: ``gruvariants {params,train,eval,gradcheck}``."""
import argparse
import csv
import datetime
import io
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cells import CellDims, CellKind, GateVariant, param_count
from .data import (
    MAXLEN,
    PAD_ID,
    VOCAB,
    IdxFormatError,
    ReviewFormatError,
    load_mnist_arrays,
    load_token_reviews,
    stack_reviews,
)
from .gradcheck import check_cell_gradients
from .linalg import Activation
from .modelio import ModelFormatError, load_model, save_model
from .train import (
    RMSPROP_EPS,
    RMSPROP_RHO,
    Dataset,
    LossKind,
    TrainConfig,
    build_model,
    evaluate,
    fit,
)

log = logging.getLogger("gruvariants")

EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MODEL = 4

VARIANTS = {
    "gru0": (CellKind.GRU, GateVariant.FULL),
    "gru1": (CellKind.GRU, GateVariant.STATE_BIAS),
    "gru2": (CellKind.GRU, GateVariant.STATE_ONLY),
    "gru3": (CellKind.GRU, GateVariant.BIAS_ONLY),
    "lstm": (CellKind.LSTM, None),
    "rnn": (CellKind.RNN, None),
}

TASKS = ("mnist-pixel", "mnist-row", "reviews")
EMBED_DIM = 128
TASK_DEFAULTS = {
    "mnist-pixel": {"hidden": 100, "epochs": 100, "data_dir": "data/mnist5k"},
    "mnist-row": {"hidden": 100, "epochs": 50, "data_dir": "data/mnist5k"},
    "reviews": {"hidden": 128, "epochs": 100, "data_dir": "data/reviews"},
}
RUN_DEFAULTS = {
    "task": "mnist-row",
    "variant": "gru0",
    "lr": 1e-3,
    "batch": 32,
    "dropout": 0.2,
    "seed": 0,
    "activation": "relu",
    "clip_norm": 5.0,
    "train_limit": None,
    "test_limit": None,
    "out": "run",
    "wall_clock": False,
    "train_images": None,
    "train_labels": None,
    "test_images": None,
    "test_labels": None,
    "train_reviews": None,
    "test_reviews": None,
}
CONFIG_KEYS = set(RUN_DEFAULTS) | {"hidden", "epochs", "data_dir"}
CSV_HEADER = ["epoch", "split", "loss", "accuracy", "lr", "wall_seconds"]


class CliError(Exception):
    def __init__(self, code, message):
        self.code = code
        super().__init__(message)


def _fmt(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# configuration


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` comments and ``meta.*`` keys are skipped."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read config file {path}: {exc}") from None
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(EXIT_CONFIG, f"{path}:{line_no}: expected key=value")
        key = key.strip().replace("-", "_")
        if key.startswith("meta."):
            continue
        if key not in CONFIG_KEYS:
            raise CliError(EXIT_CONFIG, f"unknown config key '{key}' in {path}")
        values[key] = value.strip()
    return values


def _coerce(key, value):
    if value is None or not isinstance(value, str):
        return value
    if value.lower() == "none":
        return None
    try:
        if key in ("hidden", "epochs", "batch", "seed", "train_limit", "test_limit"):
            return int(value)
        if key in ("lr", "dropout", "clip_norm"):
            return float(value)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"config key '{key}' has invalid value {value!r}") from None
    if key == "wall_clock":
        return value.lower() in ("1", "true", "yes")
    return value


def resolve_run(args):
    """Merge defaults < config file < flags into one settings dict."""
    file_values = read_config_file(args.config) if args.config else {}
    flags = {k: getattr(args, k) for k in CONFIG_KEYS if getattr(args, k, None) is not None}
    if getattr(args, "no_clip", False):
        flags["clip_norm"] = None
    merged = dict(RUN_DEFAULTS)
    merged.update({k: _coerce(k, v) for k, v in file_values.items()})
    merged.update(flags)
    if merged["task"] not in TASKS:
        raise CliError(EXIT_CONFIG, f"unknown task '{merged['task']}'")
    if merged["variant"] not in VARIANTS:
        raise CliError(EXIT_CONFIG, f"unknown variant '{merged['variant']}'")
    for key, value in TASK_DEFAULTS[merged["task"]].items():
        if merged.get(key) is None:
            merged[key] = value
    return merged


def config_from_settings(s):
    kind, variant = VARIANTS[s["variant"]]
    try:
        return TrainConfig(
            cell_kind=kind,
            variant=variant,
            hidden=s["hidden"],
            base_lr=s["lr"],
            epochs=s["epochs"],
            batch_size=s["batch"],
            dropout_rate=s["dropout"],
            loss_kind=LossKind.BINARY_CE if s["task"] == "reviews" else LossKind.CATEGORICAL_CE,
            activation=Activation(s["activation"]),
            seed=s["seed"],
            clip_norm=s["clip_norm"],
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"invalid configuration: {exc}") from None


# ---------------------------------------------------------------------------
# data


def _find(data_dir, stem):
    for name in (stem, stem + ".gz"):
        path = Path(data_dir) / name
        if path.exists():
            return path
    return Path(data_dir) / stem


REPO_ROOT = Path(__file__).resolve().parents[2]


def _data_dir(d):
    # Relative defaults also resolve against a source checkout.
    path = Path(d)
    if not path.exists() and not path.is_absolute() and (REPO_ROOT / path).exists():
        return REPO_ROOT / path
    return path


def data_paths(s):
    d = _data_dir(s["data_dir"])
    if s["task"] == "reviews":
        return {
            "train_reviews": Path(s["train_reviews"] or Path(d) / "train.tsv"),
            "test_reviews": Path(s["test_reviews"] or Path(d) / "test.tsv"),
        }
    return {
        "train_images": Path(s["train_images"] or _find(d, "train-images-idx3-ubyte")),
        "train_labels": Path(s["train_labels"] or _find(d, "train-labels-idx1-ubyte")),
        "test_images": Path(s["test_images"] or _find(d, "t10k-images-idx3-ubyte")),
        "test_labels": Path(s["test_labels"] or _find(d, "t10k-labels-idx1-ubyte")),
    }


def _check_present(paths):
    for key, path in paths.items():
        if not path.is_file():
            raise CliError(EXIT_DATA, f"data file for {key} not found: {path}")


def _mnist_dataset(task, images, labels, limit):
    pixels, targets = load_mnist_arrays(images, labels)
    if limit is not None:
        pixels, targets = pixels[:limit], targets[:limit]
    steps = pixels.reshape(len(pixels), 784, 1) if task == "mnist-pixel" else pixels.reshape(len(pixels), 28, 28)
    return Dataset(steps, targets)


def load_split(s, split, paths=None):
    paths = paths or data_paths(s)
    wanted = {k: v for k, v in paths.items() if k.startswith(split)}
    _check_present(wanted)
    limit = s[f"{split}_limit"]
    try:
        if s["task"] == "reviews":
            ids, labels = stack_reviews(load_token_reviews(wanted[f"{split}_reviews"]))
            ds = Dataset(ids, labels).subset(limit)
        else:
            ds = _mnist_dataset(s["task"], wanted[f"{split}_images"], wanted[f"{split}_labels"], limit)
    except (IdxFormatError, ReviewFormatError) as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    if len(ds) == 0:
        raise CliError(EXIT_DATA, f"{split} split is empty")
    return ds


def task_input_dim(task):
    return {"mnist-pixel": 1, "mnist-row": 28, "reviews": EMBED_DIM}[task]


# ---------------------------------------------------------------------------
# commands


def cmd_params(args, out):
    try:
        dims = CellDims(args.hidden, args.input)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    out.write(f"# n={dims.n} m={dims.m}\n")
    out.write("variant,params\n")
    for name, (kind, variant) in VARIANTS.items():
        out.write(f"{name},{param_count(kind, variant, dims)}\n")
    return 0


def write_manifest(path, s, config, paths, model, train_size, test_size, started):
    cell = model.cell
    lines = [
        "# run manifest; replay with: gruvariants train --config <this file>",
        f"task={s['task']}",
        f"variant={s['variant']}",
        f"hidden={config.hidden}",
        f"lr={_fmt(config.base_lr)}",
        f"epochs={config.epochs}",
        f"batch={config.batch_size}",
        f"dropout={_fmt(config.dropout_rate)}",
        f"seed={config.seed}",
        f"activation={config.activation.value}",
        f"clip_norm={_fmt(config.clip_norm)}",
        f"train_limit={_fmt(s['train_limit'])}",
        f"test_limit={_fmt(s['test_limit'])}",
        f"wall_clock={_fmt(s['wall_clock'])}",
        f"data_dir={s['data_dir']}",
    ]
    lines += [f"{k}={v.resolve()}" for k, v in paths.items()]
    meta = {
        "version": __version__,
        "started": started,
        "cell_kind": cell.kind.value,
        "gate_variant": _fmt(cell.variant.value if cell.variant else None),
        "input_dim": cell.dims.m,
        "loss": config.loss_kind.value,
        "trainable_params": cell.size(),
        "head_params": model.head.W_out.size + model.head.b_out.size,
        "embedding_params": model.embedding.rows.size if model.embedding is not None else 0,
        "total_params": model.size(),
        "train_samples": train_size,
        "test_samples": test_size,
        "init.W": "glorot_uniform",
        "init.U": "orthogonal",
        "init.b": "zeros",
        "init.head": "glorot_uniform, zero bias",
        "init.state": "h0=c0=zeros",
        "embedding": f"trainable, uniform(-0.05,0.05), vocab={VOCAB}, maxlen={MAXLEN}, pad_id={PAD_ID}, left-padded"
        if model.embedding is not None else "none",
        "optimizer": f"rmsprop rho={RMSPROP_RHO!r} eps={RMSPROP_EPS!r} momentum=0",
        "lr_schedule": "lr_1=lr; lr_e=lr*exp(-mean train loss of epoch e-1)",
        "clipping": "global norm" if config.clip_norm is not None else "disabled",
        "dropout_placement": "inverted, on h_T before the head, training only",
        "relu_subgradient_at_zero": "0",
        "pixel_scaling": "byte/255",
        "rng": "numpy PCG64 default_rng(seed): init, then per-epoch shuffle and dropout masks",
    }
    lines += [f"meta.{k}={v}" for k, v in meta.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train(args, out):
    s = resolve_run(args)
    config = config_from_settings(s)
    paths = data_paths(s)
    _check_present(paths)
    train_set = load_split(s, "train", paths)
    test_set = load_split(s, "test", paths)

    rng = np.random.default_rng(config.seed)
    vocab = VOCAB if s["task"] == "reviews" else None
    model = build_model(config, task_input_dim(s["task"]), 1 if vocab else 10, rng, vocab=vocab, pad_id=PAD_ID)

    out_dir = Path(s["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    started = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    write_manifest(out_dir / "manifest", s, config, paths, model, len(train_set), len(test_set), started)

    with open(out_dir / "metrics.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)

        def on_record(rec):
            wall = rec.wall_seconds if s["wall_clock"] else 0.0
            writer.writerow([rec.epoch, rec.split.value, repr(rec.loss), repr(rec.accuracy), repr(rec.lr), repr(wall)])
            f.flush()
            log.info("epoch %d %s loss=%.4f acc=%.4f lr=%.3g (%.1fs)", rec.epoch, rec.split.value, rec.loss,
                     rec.accuracy, rec.lr, rec.wall_seconds)

        fit(config, model, train_set, test_set, rng, on_record)
    save_model(model, out_dir / "model.bin")
    out.write(f"wrote {out_dir / 'metrics.csv'}, {out_dir / 'model.bin'}, {out_dir / 'manifest'}\n")
    return 0


def _manifest_settings(model_path):
    path = Path(model_path).parent / "manifest"
    if not path.is_file():
        return {}
    values = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        key, sep, value = line.partition("=")
        if sep and not key.startswith(("#", "meta.")) and key in CONFIG_KEYS:
            values[key] = _coerce(key, value)
    return values


def cmd_eval(args, out):
    try:
        model = load_model(args.model)
    except FileNotFoundError:
        raise CliError(EXIT_MODEL, f"model file not found: {args.model}") from None
    except ModelFormatError as exc:
        raise CliError(EXIT_MODEL, f"invalid model file {args.model}: {exc}") from None

    s = dict(RUN_DEFAULTS)
    s.update(_manifest_settings(args.model))
    s.update({k: getattr(args, k) for k in CONFIG_KEYS if getattr(args, k, None) is not None})
    if s["task"] not in TASKS:
        raise CliError(EXIT_CONFIG, f"unknown task '{s['task']}'")
    s["data_dir"] = s.get("data_dir") or TASK_DEFAULTS[s["task"]]["data_dir"]

    expected_m = task_input_dim(s["task"])
    is_reviews = s["task"] == "reviews"
    classes = model.head.W_out.shape[0]
    if (model.cell.dims.m != expected_m or (model.embedding is not None) != is_reviews
            or classes != (1 if is_reviews else 10)):
        raise CliError(EXIT_MODEL, f"model (input {model.cell.dims.m}, {classes} outputs) does not match "
                                   f"task {s['task']} (input {expected_m})")
    test_set = load_split(s, "test")
    rec = evaluate(model, test_set)
    out.write(f"loss={rec.loss!r} accuracy={rec.accuracy!r} samples={len(test_set)}\n")
    return 0


def gradcheck_suite(selected, activations, seeds, tol, corrupt=None):
    """Yield ``(label, report)`` over cells, activations and seeds.

    Dimensions for each seed are drawn from n in 1..8, m in 1..5, T in 1..6; each
    cell/activation pair also gets one embedding-input instance.
    """
    for name in selected:
        kind, variant = VARIANTS[name]
        for act in activations:
            for seed in range(seeds):
                rng = np.random.default_rng([seed, 7919])
                dims = CellDims(int(rng.integers(1, 9)), int(rng.integers(1, 6)))
                T = int(rng.integers(1, 7))
                yield name, check_cell_gradients(kind, variant, dims, T, seed, tol, act,
                                                 corrupt=corrupt if seed == 0 else None)
            yield name, check_cell_gradients(kind, variant, CellDims(4, 3), 5, seeds, tol, act, vocab=6)


def cmd_gradcheck(args, out):
    if args.only and not args.variant:
        raise CliError(EXIT_CONFIG, "--only needs at least one --variant")
    selected = args.variant if args.only else list(VARIANTS)
    activations = [Activation(a) for a in (args.activation or ["tanh", "relu"])]
    start = time.perf_counter()
    failed = []
    worst = {}
    count = 0
    for name, report in gradcheck_suite(selected, activations, args.seeds, args.tol, args.corrupt):
        count += 1
        err = max((t.max_rel_error for t in report.tensors.values()), default=0.0)
        worst[name] = max(worst.get(name, 0.0), err)
        if not report.passed:
            failed.append(report)
            bad = ", ".join(f"{k} (rel {report.tensors[k].max_rel_error:.2e} at {report.tensors[k].worst_index})"
                            for k in report.failures())
            out.write(f"FAIL {report.label}: {bad}\n")
    for name in selected:
        out.write(f"{name}: worst relative error {worst[name]:.3e} (tol {args.tol:g})\n")
    out.write(f"{count} checks, {len(failed)} failed, {time.perf_counter() - start:.1f}s\n")
    return EXIT_FAILURE if failed else 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_run_flags(p, for_eval=False):
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--data-dir", dest="data_dir")
    for key in ("train_images", "train_labels", "test_images", "test_labels", "train_reviews", "test_reviews"):
        p.add_argument("--" + key.replace("_", "-"), dest=key)
    p.add_argument("--test-limit", dest="test_limit", type=int)
    if for_eval:
        return
    p.add_argument("--config", help="key=value file; flags override its entries")
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--hidden", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--activation", choices=["relu", "tanh"])
    clip = p.add_mutually_exclusive_group()
    clip.add_argument("--clip-norm", dest="clip_norm", type=float)
    clip.add_argument("--no-clip", dest="no_clip", action="store_true")
    p.add_argument("--train-limit", dest="train_limit", type=int)
    p.add_argument("--out")
    p.add_argument("--wall-clock", dest="wall_clock", action="store_const", const=True,
                   help="record measured seconds in metrics.csv (otherwise 0, keeping the file reproducible)")


def build_parser():
    parser = argparse.ArgumentParser(prog="gruvariants", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", help="parameter counts per cell at given dimensions")
    p.add_argument("--hidden", "--n", dest="hidden", type=int, required=True)
    p.add_argument("--input", "--m", dest="input", type=int, required=True)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("train", help="train a model and write metrics.csv, model.bin and manifest")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model on the test split")
    p.add_argument("--model", required=True)
    _add_run_flags(p, for_eval=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference certification of every backward pass")
    p.add_argument("--variant", action="append", choices=sorted(VARIANTS))
    p.add_argument("--only", action="store_true", help="restrict the suite to the given --variant values")
    p.add_argument("--activation", action="append", choices=["relu", "tanh"])
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None, out=None):
    out = sys.stdout if out is None else out
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args, out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


def run(argv):
    """Run the CLI in-process, returning ``(exit_code, stdout_text)``."""
    buf = io.StringIO()
    try:
        code = main(argv, buf)
    except SystemExit as exc:
        code = exc.code
    return code, buf.getvalue()


if __name__ == "__main__":
    sys.exit(main())
