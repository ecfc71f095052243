"""Command line: ``sovnet <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data or input error,
4 verification failure.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import csv
import io
import shutil
import sys
import tempfile
import zipfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import capsgraph, data, gconv, training
from .groups import parse_element
from .network import (CheckpointError, ConfigError, ModelConfig, SOVNet, equivariance_report, micro_config)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 2, 3, 4

DTYPES = {"float32": np.float32, "float64": np.float64}


class DataProblem(Exception):
    pass


# ----------------------------------------------------------------------------- run configuration

@dataclass
class TrainingSection:
    epochs: int = 20
    seed: int = 0
    batch_size: int = training.BATCH_SIZE
    lr0: float = training.LR0
    dtype: str = "float32"


@dataclass
class DataSection:
    dataset: str = "shapes"  # shapes | idx
    root: str = ""  # IDX directory; empty means $SOVNET_DATA_DIR/mnist
    train_size: int = 2000
    test_size: int = 500
    train_translation: int = 0
    train_rotation: float = 0.0
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    data: DataSection = field(default_factory=DataSection)


def _coerce(section: str, cls, kv: dict):
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, raw in kv.items():
        if key not in known:
            raise ConfigError(f"unknown key in [{section}]: {key}")
        default = getattr(cls(), key)
        try:
            out[key] = type(default)(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc
    return cls(**out)


def parse_run_config(text: str) -> RunConfig:
    """``[model]``, ``[training]`` and ``[data]`` sections of ``key = value`` lines."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for name in cp.sections():
        if name not in ("model", "training", "data"):
            raise ConfigError(f"unknown section: [{name}]")
    model = ModelConfig.from_mapping(dict(cp["model"])) if cp.has_section("model") else ModelConfig()
    tr = _coerce("training", TrainingSection, dict(cp["training"])) if cp.has_section("training") else TrainingSection()
    ds = _coerce("data", DataSection, dict(cp["data"])) if cp.has_section("data") else DataSection()
    if tr.dtype not in DTYPES:
        raise ConfigError(f"unknown key value for [training] dtype: {tr.dtype}")
    if ds.dataset not in ("shapes", "idx"):
        raise ConfigError(f"bad value for [data] dataset: {ds.dataset}")
    return RunConfig(model, tr, ds)


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_run_config(text)


def run_config_text(rc: RunConfig) -> str:
    lines = ["[model]", rc.model.to_text().rstrip(), "", "[training]"]
    lines += [f"{f.name} = {getattr(rc.training, f.name)}" for f in fields(rc.training)]
    lines += ["", "[data]"]
    lines += [f"{f.name} = {getattr(rc.data, f.name)}" for f in fields(rc.data)]
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------- helpers

def prepare_out(path: str, overwrite: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{out} is not empty; pass --overwrite to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def idx_root(ds: DataSection, override: Optional[str]) -> Path:
    if override:
        return Path(override)
    if ds.root:
        return Path(ds.root)
    return data.data_dir() / "mnist"


def load_datasets(rc: RunConfig, root_override: Optional[str] = None):
    """(train, test) per the [data] section, sized and padded for the model."""
    ds = rc.data
    if ds.dataset == "shapes":
        names = data.SHAPE_CLASSES[:rc.model.classes] if rc.model.classes <= 4 else None
        if names is None:
            raise ConfigError("shapes data has at most 4 classes")
        train = data.synthetic_shapes(ds.train_size, names, rc.model.image_size, seed=ds.seed)
        test = data.synthetic_shapes(ds.test_size, names, rc.model.image_size, seed=ds.seed + 1)
    else:
        root = idx_root(ds, root_override)
        try:
            train = data.load_split(root, "train", rc.model.classes).head(ds.train_size)
            test = data.load_split(root, "test", rc.model.classes).head(ds.test_size)
        except FileNotFoundError as exc:
            raise DataProblem(str(exc)) from exc
        if train.images.shape[-1] != rc.model.image_size:
            train = train.pad_to(rc.model.image_size)
            test = test.pad_to(rc.model.image_size)
    if len(train) == 0:
        raise DataProblem("training set is empty")
    spec = data.AffineSpec(ds.train_translation, ds.train_rotation)
    if spec != data.AffineSpec():
        train = data.affine_perturb(train, spec, ds.seed)
    return train, test


def _write_metrics(path: Path, rows) -> None:
    path.write_text(training.metrics_csv(rows))


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ----------------------------------------------------------------------------- commands

def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    if args.epochs is not None:
        rc.training.epochs = args.epochs
    if args.seed is not None:
        rc.training.seed = args.seed
    train_ds, test_ds = load_datasets(rc, args.data_root)
    out = prepare_out(args.out, args.overwrite)
    model = SOVNet(rc.model, seed=rc.training.seed, dtype=DTYPES[rc.training.dtype])
    res = training.train(model, train_ds, rc.training.epochs, seed=rc.training.seed, val=test_ds,
                         batch_size=rc.training.batch_size, lr0=rc.training.lr0,
                         log=None if args.quiet else _log)
    res.model.save(out / "checkpoint.sovn")
    _write_metrics(out / "metrics.csv", res.metrics)
    (out / "run.cfg").write_text(run_config_text(rc))
    print(f"wrote {out / 'checkpoint.sovn'} and {out / 'metrics.csv'}")
    return EXIT_OK


def _load_checkpoint(path: str) -> SOVNet:
    try:
        return SOVNet.load(path)
    except (OSError, CheckpointError) as exc:
        raise DataProblem(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_eval(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    rc = load_run_config(args.config)
    rc.model = model.config
    _, test = load_datasets(rc, args.data_root)
    spec = data.AffineSpec(args.translation, args.rotation)
    if spec != data.AffineSpec():
        test = data.affine_perturb(test, spec, args.seed)
    res = training.evaluate(model, test)
    print(f"accuracy {res.accuracy:.6f} on {res.total} samples, test spec {spec.label}")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["true\\pred"] + list(range(model.config.classes)))
    for k, row in enumerate(res.confusion):
        w.writerow([k] + row.tolist())
    return EXIT_OK


def eval_matrix(rc: RunConfig, train: data.Dataset, test: data.Dataset, seed: int,
                checkpoints: Optional[Path] = None, save_dir: Optional[Path] = None, log=None) -> np.ndarray:
    """Accuracy of one model per train spec (rows) on every test spec (columns)."""
    trains, tests = data.split_matrix(train, test, seed)
    mat = np.zeros((len(trains), len(tests)))
    for r, tr in enumerate(trains):
        ck = None if checkpoints is None else checkpoints / f"row{r}.sovn"
        if ck is not None and ck.exists():
            model = SOVNet.load(ck)
        else:
            model = SOVNet(rc.model, seed=rc.training.seed, dtype=DTYPES[rc.training.dtype])
            training.train(model, tr, rc.training.epochs, seed=rc.training.seed,
                           batch_size=rc.training.batch_size, lr0=rc.training.lr0, log=log)
            if save_dir is not None:
                model.save(save_dir / f"row{r}.sovn")
        for c, te in enumerate(tests):
            mat[r, c] = training.evaluate(model, te).accuracy
        if log is not None:
            log(f"row {data.PERTURBATION_SPECS[r].label}: " + " ".join(f"{v:.4f}" for v in mat[r]))
    return mat


def _csv_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def matrix_csv(mat: np.ndarray) -> str:
    """Spec labels such as ``(2,30)`` contain commas, so cells are CSV-quoted."""
    labels = [s.label for s in data.PERTURBATION_SPECS]
    rows = [["train\\test"] + labels]
    rows += [[lab] + [f"{v:.6f}" for v in row] for lab, row in zip(labels, mat)]
    return _csv_text(rows)


def cmd_eval_matrix(args) -> int:
    rc = load_run_config(args.config)
    if args.epochs is not None:
        rc.training.epochs = args.epochs
    rc.data.train_translation, rc.data.train_rotation = 0, 0.0
    train, test = load_datasets(rc, args.data_root)
    out = prepare_out(args.out, args.overwrite)
    ck = Path(args.checkpoints) if args.checkpoints else None
    mat = eval_matrix(rc, train, test, args.seed, ck, out, None if args.quiet else _log)
    (out / "matrix.csv").write_text(matrix_csv(mat))
    sys.stdout.write(matrix_csv(mat))
    return EXIT_OK


def cmd_check_equivariance(args) -> int:
    rc = load_run_config(args.config)
    cfg = rc.model
    if args.group:
        cfg = ModelConfig.from_mapping({**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, "group": args.group})
    dtype = DTYPES[args.dtype]
    tol = args.tol if args.tol is not None else (1e-10 if dtype == np.float64 else 1e-4)
    rng = np.random.default_rng(args.seed)
    model = SOVNet(cfg, seed=args.seed, dtype=dtype)
    x = rng.random((args.batch, cfg.in_channels, cfg.image_size, cfg.image_size))
    shifts = []
    while len(shifts) < args.translations:
        u, v = (int(t) for t in rng.integers(-2, 3, size=2))
        if (u, v) != (0, 0):
            shifts.append((u, v))
    ctx = gconv.corrupted_filter_tables() if args.corrupt_filter_table else contextlib.nullcontext()
    with ctx:
        rows = equivariance_report(model, x, shifts)
    table = [["layer", "element", "max_abs_error", "compared"]]
    table += [[r.layer, r.element, f"{r.error:.3e}", r.compared] for r in rows]
    worst = max(r.error for r in rows)
    ok = worst <= tol
    text = _csv_text(table)
    text += f"# {'PASS' if ok else 'FAIL'} worst={worst:.3e} tol={tol:g} group={cfg.group} dtype={args.dtype}\n"
    if args.report:
        Path(args.report).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_VERIFY


def _input_image(args, model: SOVNet) -> np.ndarray:
    c = model.config
    if args.input:
        try:
            img = np.load(args.input)
        except (OSError, ValueError) as exc:
            raise DataProblem(f"cannot read input {args.input}: {exc}") from exc
    else:
        names = data.SHAPE_CLASSES[: min(4, c.classes)]
        img = data.synthetic_shapes(args.sample + 1, names, c.image_size, seed=args.seed).images[args.sample]
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.shape != (c.in_channels, c.image_size, c.image_size) or not np.all(np.isfinite(img)):
        raise DataProblem(f"input must be ({c.in_channels}, {c.image_size}, {c.image_size}) and finite, got {img.shape}")
    return img


def cmd_graph(args) -> int:
    model = _load_checkpoint(args.checkpoint).astype(np.float64)
    try:
        h = parse_element(args.transform, model.config.group)
    except ValueError as exc:
        raise DataProblem(str(exc)) from exc
    img = _input_image(args, model)
    n = model.config.image_size
    from .groups import GroupGrid, left_translate

    img_h = left_translate(img, h, GroupGrid(h.kind, n, n), planar=True)
    ga = capsgraph.build_graph(capsgraph.record_trace(model, img), args.threshold)
    gb = capsgraph.build_graph(capsgraph.record_trace(model, img_h), args.threshold)
    rep = capsgraph.check_isomorphism(ga, gb, h, args.tol)
    out = prepare_out(args.out, args.overwrite)
    with open(out / "graph_x.txt", "w") as fh:
        ga.export_text(fh)
    with open(out / "graph_hx.txt", "w") as fh:
        gb.export_text(fh)
    text = "\n".join(rep.lines()) + "\n"
    (out / "report.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if rep.passed else EXIT_VERIFY


def cmd_gradcheck(args) -> int:
    rc = load_run_config(args.config) if args.config else None
    cfg = rc.model if rc is not None else micro_config()
    if args.norm_eps is not None:
        cfg = ModelConfig.from_mapping({**{f.name: getattr(cfg, f.name) for f in fields(cfg)},
                                        "norm_eps": args.norm_eps})
    model = SOVNet(cfg, seed=args.seed, dtype=np.float64)
    rng = np.random.default_rng(args.seed)
    x = rng.random((2, cfg.in_channels, cfg.image_size, cfg.image_size))
    if args.norm_eps is not None:
        x[0] = 0.0  # a blank image gives zero poses wherever the biases are zero
    y = rng.integers(0, cfg.classes, size=2)
    rep = training.gradcheck(model, x, y, max_per_param=args.max_per_param, seed=args.seed)
    text = "\n".join(rep.lines()) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if rep.passed else EXIT_VERIFY


def _csv_from_source(src: Path, tmp: Path) -> Path:
    if src.suffix == ".whl" or zipfile.is_zipfile(src):
        with zipfile.ZipFile(src) as z:
            names = [n for n in z.namelist() if n.endswith("mnist_5k.csv.gz")]
            if not names:
                raise DataProblem(f"{src} holds no mnist_5k.csv.gz")
            dst = tmp / "mnist.csv.gz"
            dst.write_bytes(z.read(names[0]))
            return dst
    return src


def cmd_data_prepare(args) -> int:
    src = Path(args.source)
    if not src.exists():
        raise DataProblem(f"no such file: {src}")
    out = Path(args.out) if args.out else data.data_dir() / "mnist"
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise FileExistsError(f"{out} is not empty; pass --overwrite to replace it")
    with tempfile.TemporaryDirectory() as tmp:
        csv_path = _csv_from_source(src, Path(tmp))
        try:
            paths = data.prepare_from_csv(csv_path, out, args.test_fraction, args.seed)
        except (OSError, ValueError) as exc:
            raise DataProblem(f"cannot convert {src}: {exc}") from exc
    for split, (ip, lp) in paths.items():
        print(f"{split}: {ip} {lp}")
    return EXIT_OK


# ----------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sovnet", description="Group-equivariant capsule networks with degree routing.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoint.sovn, metrics.csv, run.cfg")
    t.add_argument("--config", help="run configuration file ([model], [training], [data] sections)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--epochs", type=int, help="override [training] epochs")
    t.add_argument("--seed", type=int, help="override [training] seed")
    t.add_argument("--data-root", help="directory with IDX files (overrides [data] root)")
    t.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")
    t.add_argument("--quiet", action="store_true", help="no per-epoch log on stderr")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--config", help="run configuration supplying the [data] section")
    e.add_argument("--data-root", help="directory with IDX files")
    e.add_argument("--translation", type=int, default=0, help="max test translation in pixels")
    e.add_argument("--rotation", type=float, default=0.0, help="max test rotation in degrees")
    e.add_argument("--seed", type=int, default=0, help="seed of the test perturbation")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("eval-matrix", help="5x5 train-spec by test-spec accuracy matrix")
    m.add_argument("--config", help="run configuration file")
    m.add_argument("--out", required=True, help="output directory (matrix.csv, row checkpoints)")
    m.add_argument("--data-root", help="directory with IDX files")
    m.add_argument("--checkpoints", help="directory with existing rowN.sovn checkpoints to reuse")
    m.add_argument("--epochs", type=int, help="override [training] epochs")
    m.add_argument("--seed", type=int, default=0, help="seed of the perturbation matrix")
    m.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")
    m.add_argument("--quiet", action="store_true", help="no progress log on stderr")
    m.set_defaults(func=cmd_eval_matrix)

    c = sub.add_parser("check-equivariance", help="layer-wise equivariance report on a random-weight model")
    c.add_argument("--config", help="run configuration supplying the [model] section")
    c.add_argument("--group", choices=["p4", "p4m"], help="override the model group")
    c.add_argument("--seed", type=int, default=0, help="weight and input seed")
    c.add_argument("--dtype", choices=sorted(DTYPES), default="float64", help="arithmetic precision")
    c.add_argument("--tol", type=float, help="max-abs tolerance (default 1e-10 float64, 1e-4 float32)")
    c.add_argument("--translations", type=int, default=8, help="number of random interior translations")
    c.add_argument("--batch", type=int, default=2, help="number of random inputs")
    c.add_argument("--report", help="also write the report to this file")
    c.add_argument("--corrupt-filter-table", action="store_true",
                   help="test hook: stop filters from rotating with the group (must fail)")
    c.set_defaults(func=cmd_check_equivariance)

    g = sub.add_parser("graph", help="capsule-decomposition graphs of x and L_h x plus the isomorphism report")
    g.add_argument("--checkpoint", required=True, help="checkpoint file")
    g.add_argument("--input", help=".npy image (c, H, W) or (H, W); default is a synthetic glyph")
    g.add_argument("--sample", type=int, default=0, help="index of the synthetic glyph when --input is absent")
    g.add_argument("--seed", type=int, default=0, help="seed of the synthetic glyph")
    g.add_argument("--transform", default="r1", help="group element h: id, r1, m, mr3, optional t<u>,<v>")
    g.add_argument("--threshold", type=float, default=0.0, help="activation threshold for flagging vertices")
    g.add_argument("--tol", type=float, default=1e-10, help="isomorphism tolerance")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")
    g.set_defaults(func=cmd_graph)

    d = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient (float64)")
    d.add_argument("--config", help="run configuration supplying the [model] section; default micro model")
    d.add_argument("--seed", type=int, default=0, help="weight and input seed")
    d.add_argument("--norm-eps", type=float,
                   help="test hook: override the norm eps; 0 with a blank input must fail")
    d.add_argument("--max-per-param", type=int, help="probe at most this many entries per tensor")
    d.add_argument("--report", help="also write the report to this file")
    d.set_defaults(func=cmd_gradcheck)

    dp = sub.add_parser("data", help="dataset utilities")
    dsub = dp.add_subparsers(dest="data_command", required=True)
    pr = dsub.add_parser("prepare", help="convert a MNIST CSV (or a wheel holding mnist_5k.csv.gz) to IDX")
    pr.add_argument("--source", required=True, help=".csv, .csv.gz, or a zip/wheel containing mnist_5k.csv.gz")
    pr.add_argument("--out", help="output directory (default $SOVNET_DATA_DIR/mnist)")
    pr.add_argument("--test-fraction", type=float, default=0.2, help="fraction of rows held out as test")
    pr.add_argument("--seed", type=int, default=0, help="split seed")
    pr.add_argument("--overwrite", action="store_true", help="replace existing files")
    pr.set_defaults(func=cmd_data_prepare)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataProblem, data.DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
