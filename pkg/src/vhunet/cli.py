"""Command-line entry point.

Subcommands: simulate (phantom datasets), train, correct, evaluate, fwht
(standalone transforms). Settings resolve in three layers: built-in defaults,
then a `key = value` config file (--config, '#' comments), then command-line
flags. Unknown config keys are rejected, and every run echoes its fully
resolved settings to `<command>_config.txt` beside its outputs so the run can
be reproduced from the echo alone.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from .biasfield import BiasFieldSpec, make_phantom
from .container import read_vhut, write_pgm, write_vhut
from .errors import ConfigError, DataError, NumericalError, VhuNetError
from .hadamard import fwht, ifwht
from .losses import LossConfig
from .metrics import (
    MetricsReport, aggregate, cnr, coco, cv, masks_from_image, masks_from_labels,
    psnr, region_cv, snr, ssim,
)
from .model import VhuNet, VhuNetConfig
from .training import Sample, TrainConfig, normalize, train_model

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class Key:
    def __init__(self, name: str, kind, default, help: str, required: bool = False):
        self.name = name
        self.kind = kind
        self.default = default
        self.help = help
        self.required = required


def _coerce(key: Key, raw):
    if not isinstance(raw, str):
        return raw
    if key.kind is bool:
        low = raw.strip().lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"key '{key.name}' expects a boolean, got {raw!r}")
    try:
        return key.kind(raw)
    except ValueError as e:
        raise ConfigError(f"key '{key.name}' expects {key.kind.__name__}, got {raw!r}") from e


def parse_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    out = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def resolve_config(keys, args, command: str) -> dict:
    table = {k.name: k for k in keys}
    values = {k.name: k.default for k in keys}
    if getattr(args, "config", None):
        for name, raw in parse_config_file(args.config).items():
            if name not in table:
                raise ConfigError(f"unknown {command} config key '{name}'")
            values[name] = _coerce(table[name], raw)
    for k in keys:
        flag = getattr(args, k.name, None)
        if flag is not None:
            values[k.name] = _coerce(k, flag)
    for k in keys:
        if k.required and values[k.name] is None:
            raise ConfigError(f"{command} requires '{k.name}'")
    return values


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def echo_config(out_dir: Path, command: str, values: dict) -> None:
    lines = [f"{name} = {_fmt_value(v)}" for name, v in values.items() if v is not None]
    (out_dir / f"{command}_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _ensure_out_dir(path_str: str) -> Path:
    out = Path(path_str)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


# -- simulate -------------------------------------------------------------------

_SIMULATE_KEYS = [
    Key("out", str, None, "output directory", required=True),
    Key("n", int, 200, "number of phantoms"),
    Key("height", int, 32, "image height (power of two)"),
    Key("width", int, 32, "image width (power of two)"),
    Key("regions", int, 4, "tissue regions per phantom"),
    Key("basis", str, "random_polynomial", "field basis: random_polynomial or legendre"),
    Key("order", int, 4, "polynomial total degree"),
    Key("range_lo", float, 0.1, "field minimum"),
    Key("range_hi", float, 1.9, "field maximum"),
    Key("noise_sigma", float, 0.0, "additive gaussian noise level"),
    Key("seed", int, 0, "base seed"),
    Key("pgm", bool, False, "also write 16-bit PGM previews"),
]


def cmd_simulate(args) -> int:
    cfg = resolve_config(_SIMULATE_KEYS, args, "simulate")
    out = _ensure_out_dir(cfg["out"])
    rows = []
    for i in range(cfg["n"]):
        seed = cfg["seed"] + i
        spec = BiasFieldSpec(basis=cfg["basis"], order=cfg["order"],
                             intensity_range=(cfg["range_lo"], cfg["range_hi"]),
                             seed=seed + 1_000_003)
        phantom = make_phantom(cfg["height"], cfg["width"], cfg["regions"], seed,
                               field_spec=spec, noise_sigma=cfg["noise_sigma"])
        name = f"phantom_{i:04d}"
        write_vhut(out / f"{name}.vhut", {
            "clean": phantom.clean,
            "bias": phantom.bias,
            "corrupted": phantom.corrupted,
            "labels": phantom.labels.astype(np.float64),
            "noise_sigma": np.float64(phantom.noise_sigma),
        })
        if cfg["pgm"]:
            write_pgm(out / f"{name}_clean.pgm", phantom.clean)
            write_pgm(out / f"{name}_corrupted.pgm", phantom.corrupted)
            write_pgm(out / f"{name}_bias.pgm", phantom.bias)
        rows.append((name, f"{name}.vhut", seed))
    with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "file", "seed"])
        writer.writerows(rows)
    echo_config(out, "simulate", cfg)
    print(f"wrote {cfg['n']} phantoms to {out}")
    return 0


def load_manifest(path) -> list:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.csv"
    if not p.exists():
        raise ConfigError(f"manifest not found: {p}")
    base = p.parent
    samples = []
    with open(p, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"name", "file"} <= set(reader.fieldnames):
            raise DataError(f"manifest {p} must have 'name' and 'file' columns")
        for row in reader:
            tensors = read_vhut(base / row["file"])
            for want in ("clean", "bias", "corrupted"):
                if want not in tensors:
                    raise DataError(f"{row['file']} is missing tensor '{want}'")
            labels = tensors.get("labels")
            samples.append(Sample(
                name=row["name"],
                clean=tensors["clean"],
                bias=tensors["bias"],
                corrupted=tensors["corrupted"],
                labels=None if labels is None else labels.astype(np.int64),
            ))
    return samples


# -- train ----------------------------------------------------------------------

_TRAIN_KEYS = [
    Key("data", str, None, "manifest of training phantoms", required=True),
    Key("out", str, None, "output directory", required=True),
    Key("preset", str, "desk", "model preset: desk or full"),
    Key("epochs", int, 60, "training epochs"),
    Key("batch_size", int, 5, "images per optimizer step"),
    Key("lr", float, 1e-3, "learning rate"),
    Key("weight_decay", float, 0.01, "decoupled weight decay"),
    Key("delta", float, 1e-5, "prior scale of the latent coefficients"),
    Key("kl_weight", float, 0.01, "weight of the KL term"),
    Key("smooth_weight", float, 0.1, "weight of the field smoothness term"),
    Key("reverse_kl", str, "auto", "KL direction: auto, true or false"),
    Key("xi", float, 0.1, "hypernetwork control scalar"),
    Key("seed", int, 0, "initialization and shuffling seed"),
    Key("augment", bool, False, "random flips/rotations of the training pairs"),
]

_LOG_COLUMNS = ("epoch", "mse", "kl", "smooth", "total", "wall_seconds")


def cmd_train(args) -> int:
    cfg = resolve_config(_TRAIN_KEYS, args, "train")
    if cfg["reverse_kl"] not in ("auto", "true", "false"):
        raise ConfigError(f"reverse_kl must be auto, true or false, got {cfg['reverse_kl']!r}")
    samples = load_manifest(cfg["data"])
    if not samples:
        raise DataError(f"manifest {cfg['data']} lists no samples")
    shape = samples[0].corrupted.shape
    for s in samples:
        if s.corrupted.shape != shape:
            raise DataError(f"sample '{s.name}' shape {s.corrupted.shape} != {shape}")
    out = _ensure_out_dir(cfg["out"])

    model_cfg = VhuNetConfig.preset(cfg["preset"])
    model_cfg.height, model_cfg.width = int(shape[1]), int(shape[2])
    model_cfg.xi = cfg["xi"]
    model_cfg.validate()
    model = VhuNet(model_cfg, seed=cfg["seed"])

    train_cfg = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                            lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                            seed=cfg["seed"], augment=cfg["augment"])
    loss_cfg = LossConfig(delta=cfg["delta"], kl_weight=cfg["kl_weight"],
                          smooth_weight=cfg["smooth_weight"],
                          reverse_kl=None if cfg["reverse_kl"] == "auto"
                          else cfg["reverse_kl"] == "true")

    def on_epoch(row):
        msg = (f"epoch {row['epoch']:4d}  mse {row['mse']:.6f}  kl {row['kl']:.6f}  "
               f"smooth {row['smooth']:.6f}  total {row['total']:.6f}")
        if "val_coco" in row:
            msg += f"  val_coco {row['val_coco']:.4f}"
        print(msg)

    result = train_model(model, samples, train_cfg, loss_cfg, on_epoch=on_epoch)

    with open(out / "training_log.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_LOG_COLUMNS)
        for row in result.rows:
            writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in _LOG_COLUMNS[1:]])

    model.save(out / "checkpoint.vhut")
    echo_config(out, "train", cfg)
    print(f"trained on {result.n_train} images ({result.n_val} validation), "
          f"{model.n_parameters()} parameters")
    if result.rows:
        print(f"best epoch {result.best_epoch} (validation field correlation "
              f"{result.best_val_coco:.4f})")
    print(f"checkpoint: {out / 'checkpoint.vhut'}")
    return 0


# -- correct --------------------------------------------------------------------

_CORRECT_KEYS = [
    Key("checkpoint", str, None, "trained checkpoint", required=True),
    Key("data", str, None, "manifest whose corrupted images are corrected"),
    Key("inputs", str, None, "comma-separated tensor container paths"),
    Key("out", str, None, "output directory", required=True),
    Key("pgm", bool, False, "also write PGM previews"),
]


def _load_correct_inputs(cfg) -> list:
    jobs = []
    if cfg["data"]:
        for s in load_manifest(cfg["data"]):
            jobs.append((s.name, s.corrupted))
    if cfg["inputs"]:
        for part in cfg["inputs"].split(","):
            path = Path(part.strip())
            if not path.exists():
                raise ConfigError(f"input container not found: {path}")
            tensors = read_vhut(path)
            if "corrupted" in tensors:
                img = tensors["corrupted"]
            elif "image" in tensors:
                img = tensors["image"]
            elif len(tensors) == 1:
                img = next(iter(tensors.values()))
            else:
                raise DataError(f"{path}: cannot pick an image entry "
                                f"(expected 'corrupted', 'image', or a single tensor)")
            jobs.append((path.stem, img))
    if not jobs:
        raise ConfigError("correct requires 'data' or 'inputs'")
    return jobs


def cmd_correct(args) -> int:
    cfg = resolve_config(_CORRECT_KEYS, args, "correct")
    ck = Path(cfg["checkpoint"])
    if not ck.exists():
        raise ConfigError(f"checkpoint not found: {ck}")
    model = VhuNet.load(ck)
    jobs = _load_correct_inputs(cfg)
    out = _ensure_out_dir(cfg["out"])

    failures = 0
    timings = []
    for name, image in jobs:
        try:
            img = np.asarray(image, dtype=np.float64)
            if img.ndim == 2:
                img = img[None, :, :]
            started = time.perf_counter()
            corrected, field = model.correct(img)
            timings.append((time.perf_counter() - started) * 1e3)
            write_vhut(out / f"{name}_corrected.vhut",
                       {"corrected": corrected.data, "field": field.data})
            if cfg["pgm"]:
                write_pgm(out / f"{name}_corrected.pgm", corrected.data)
                write_pgm(out / f"{name}_field.pgm", field.data)
        except VhuNetError as e:
            failures += 1
            print(f"error: {name}: {e}", file=sys.stderr)
    echo_config(out, "correct", cfg)
    if timings:
        print(f"corrected {len(timings)} images, {np.mean(timings):.2f} ms/image")
    if failures:
        print(f"{failures} of {len(jobs)} inputs failed", file=sys.stderr)
        return 3
    return 0


# -- evaluate --------------------------------------------------------------------

_EVALUATE_KEYS = [
    Key("data", str, None, "manifest with clean/bias references", required=True),
    Key("predictions", str, None, "directory of <name>_corrected.vhut files", required=True),
    Key("out", str, None, "output directory", required=True),
]


def _phantom_region_masks(sample: Sample):
    """Order the labeled regions by clean-image brightness: background is the
    dimmest, the signal/contrast pair are the two brightest."""
    masks = masks_from_labels(sample.labels)
    ordered = sorted(masks.values(), key=lambda m: float(sample.clean[0][m].mean()))
    background = ordered[0]
    bright = ordered[-1]
    second = ordered[-2] if len(ordered) >= 3 else ordered[0]
    return background, bright, second


def _evaluate_one(sample: Sample, corrected: np.ndarray, field: np.ndarray) -> MetricsReport:
    report = MetricsReport(
        ssim=ssim(corrected, sample.clean),
        psnr=psnr(corrected, sample.clean),
        coco=coco(1.0 / field, sample.bias),
    )
    if sample.labels is not None:
        background, bright, second = _phantom_region_masks(sample)
        report.cv = region_cv(corrected, sample.labels)
        report.snr = snr(corrected, bright, background)
        report.cnr = cnr(corrected, bright, second, background)
    else:
        masks = masks_from_image(corrected)
        report.cv = cv(corrected, masks["foreground"])
        report.snr = snr(corrected, masks["foreground"], masks["background"])
    return report


def cmd_evaluate(args) -> int:
    cfg = resolve_config(_EVALUATE_KEYS, args, "evaluate")
    pred_dir = Path(cfg["predictions"])
    if not pred_dir.exists():
        raise ConfigError(f"predictions directory not found: {pred_dir}")
    samples = load_manifest(cfg["data"])
    out = _ensure_out_dir(cfg["out"])

    reports = []
    rows = []
    for sample in samples:
        pred_path = pred_dir / f"{sample.name}_corrected.vhut"
        if not pred_path.exists():
            raise DataError(f"no prediction for '{sample.name}' (expected {pred_path})")
        tensors = read_vhut(pred_path)
        if "corrected" not in tensors or "field" not in tensors:
            raise DataError(f"{pred_path} must hold 'corrected' and 'field' tensors")
        report = _evaluate_one(sample, tensors["corrected"], tensors["field"])
        reports.append(report)
        rows.append([sample.name] + [_fmt_cell(v) for v in report.as_row()])

    agg = aggregate(reports)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name"] + list(MetricsReport.FIELDS))
        writer.writerows(rows)
        if reports:
            writer.writerow(["mean"] + [_fmt_cell(agg[f][0]) if f in agg else ""
                                        for f in MetricsReport.FIELDS])
            writer.writerow(["std"] + [_fmt_cell(agg[f][1]) if f in agg else ""
                                       for f in MetricsReport.FIELDS])
    echo_config(out, "evaluate", cfg)
    print(f"evaluated {len(rows)} images -> {out / 'metrics.csv'}")
    return 0


# -- fwht -------------------------------------------------------------------------

_FWHT_KEYS = [
    Key("input", str, None, "input tensor container", required=True),
    Key("out", str, None, "output container path", required=True),
    Key("inverse", bool, False, "apply the inverse transform"),
    Key("mode", str, "auto", "auto, 1d (last axis) or 2d (last two axes)"),
]


def cmd_fwht(args) -> int:
    cfg = resolve_config(_FWHT_KEYS, args, "fwht")
    if cfg["mode"] not in ("auto", "1d", "2d"):
        raise ConfigError(f"mode must be auto, 1d or 2d, got {cfg['mode']!r}")
    src = Path(cfg["input"])
    if not src.exists():
        raise ConfigError(f"input container not found: {src}")
    tensors = read_vhut(src)
    fn = ifwht if cfg["inverse"] else fwht
    out_entries = {}
    for name, arr in tensors.items():
        mode = cfg["mode"]
        if mode == "auto":
            mode = "2d" if arr.ndim >= 2 else "1d"
        if mode == "2d" and arr.ndim < 2:
            raise DataError(f"tensor '{name}' is {arr.ndim}D, cannot transform two axes")
        started = time.perf_counter()
        y = fn(arr, axis=-1)
        if mode == "2d":
            y = fn(y, axis=-2)
        elapsed = (time.perf_counter() - started) * 1e3
        out_entries[name] = y
        print(f"{name}: {mode} {'inverse ' if cfg['inverse'] else ''}transform "
              f"of shape {arr.shape} in {elapsed:.3f} ms")
    out_path = Path(cfg["out"])
    if out_path.parent != Path("."):
        out_path.parent.mkdir(parents=True, exist_ok=True)
    write_vhut(out_path, out_entries)
    return 0


# -- parser ------------------------------------------------------------------------


def _add_keys(sub: argparse.ArgumentParser, keys) -> None:
    sub.add_argument("--config", help="key = value settings file")
    for k in keys:
        flag = "--" + k.name.replace("_", "-")
        if k.kind is bool:
            sub.add_argument(flag, dest=k.name, action="store_const", const="true",
                             default=None, help=k.help)
        else:
            sub.add_argument(flag, dest=k.name, default=None, help=k.help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vhunet",
        description="Bias-field correction: simulate phantoms, train the "
                    "network, correct images, evaluate metrics.",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    for name, keys, fn in (
        ("simulate", _SIMULATE_KEYS, cmd_simulate),
        ("train", _TRAIN_KEYS, cmd_train),
        ("correct", _CORRECT_KEYS, cmd_correct),
        ("evaluate", _EVALUATE_KEYS, cmd_evaluate),
        ("fwht", _FWHT_KEYS, cmd_fwht),
    ):
        sub = subs.add_parser(name)
        _add_keys(sub, keys)
        sub.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
