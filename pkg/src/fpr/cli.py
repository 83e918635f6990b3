"""``fpr`` command-line front end.

Subcommands: synth, train, match, eval, sweep, gradcheck, fpm.  Settings come from
an INI-style config file (sections ``train``, ``pyramid``, ``extractor``, ``paths``,
``flags``) and are overridden by flags.  Every command writes the fully resolved
config next to its outputs.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .features import PyramidSpec, extract, pyramid_pool
from .foreground import foreground_probs, pyramid_layout
from .reconstruction import RidgeParams, fpr_match
from .retrieval_eval import SCHEMA_VERSION, evaluate, worker_count
from .tensor_io import SynthConfig, atomic_write_text, generate_synthetic, load_manifest, read_tensor, write_tensor
from .training import TrainConfig, TrainingDiverged, TrainState, grad_check, load_checkpoint, save_checkpoint, toy_batch, train_toy

log = logging.getLogger("fpr")

# desk-scale defaults: 10 synthetic identities cannot fill a 16-subject batch
CLI_TRAIN_DEFAULTS = dict(P=5, K=4, epochs=30, learning_rate=1e-3, seed=42)


@dataclass
class ExtractorGeometry:
    patch_height: int = 8
    patch_width: int = 8
    stride: int = 4
    out_channels: int = 32


@dataclass
class Paths:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"


@dataclass
class Flags:
    normalize_weights: bool = False
    squared_errors: bool = False


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**CLI_TRAIN_DEFAULTS))
    pyramid: PyramidSpec = field(default_factory=PyramidSpec)
    extractor: ExtractorGeometry = field(default_factory=ExtractorGeometry)
    paths: Paths = field(default_factory=Paths)
    flags: Flags = field(default_factory=Flags)

    def validate(self, training: bool = True) -> None:
        if training:
            self.train.validate()
        elif self.train.beta < 0:
            raise ValueError("beta must be >= 0")
        e = self.extractor
        if min(e.patch_height, e.patch_width, e.stride, e.out_channels) < 1:
            raise ValueError("extractor sizes must be positive")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section in ("train", "extractor", "paths", "flags"):
            obj = getattr(self, section)
            cp[section] = {f.name: _format_value(getattr(obj, f.name)) for f in fields(obj)}
        cp["pyramid"] = {"levels": self.pyramid.to_string()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def initial_state(self, in_channels: int = 1) -> TrainState:
        e = self.extractor
        return TrainState.initial(
            self.train.seed, e.patch_height, e.patch_width, e.stride, e.out_channels, in_channels
        )


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(text: str, like, key: str):
    text = text.strip().strip('"').strip("'")
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("true", "1", "yes", "on")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {text!r}") from None
    return text


def load_config(path: Optional[str]) -> RunConfig:
    """Parse a config file, rejecting unknown sections and keys."""
    cfg = RunConfig()
    if path is None:
        return cfg
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ValueError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ValueError(f"malformed config {path}: {exc}") from None
    known = {"train", "pyramid", "extractor", "paths", "flags"}
    for section in cp.sections():
        if section not in known:
            raise ValueError(f"unknown config section [{section}]")
        items = dict(cp.items(section))
        if section == "pyramid":
            extra = set(items) - {"levels"}
            if extra:
                raise ValueError(f"unknown key(s) in [pyramid]: {', '.join(sorted(extra))}")
            if "levels" in items:
                cfg.pyramid = PyramidSpec.parse(items["levels"].strip().strip('"'))
            continue
        obj = getattr(cfg, section)
        names = {f.name.lower(): f.name for f in fields(obj)}
        for key, value in items.items():
            if key not in names:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            name = names[key]
            setattr(obj, name, _coerce(value, getattr(obj, name), f"{section}.{key}"))
    return cfg


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    for name in ("P", "K", "margin", "alpha", "tau", "beta", "learning_rate", "epochs", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg.train, name, v)
    for name in ("patch_height", "patch_width", "stride", "out_channels"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg.extractor, name, v)
    for name in ("data_dir", "checkpoint_dir", "report_dir"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg.paths, name, v)
    if getattr(args, "levels", None):
        cfg.pyramid = PyramidSpec.parse(args.levels)
    if getattr(args, "normalize", False):
        cfg.flags.normalize_weights = True
    if getattr(args, "squared", False):
        cfg.flags.squared_errors = True
    return cfg


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (stop inclusive) or a comma-separated list."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"grid {text!r} must be start:stop:step")
        start, stop, step = map(float, parts)
        if step <= 0 or stop < start:
            raise ValueError(f"grid {text!r} needs step > 0 and stop >= start")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(n)]
    values = [float(v) for v in text.split(",") if v.strip()]
    if not values:
        raise ValueError(f"empty grid {text!r}")
    return values


def _write_json(path: Path, obj: dict) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _report_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ridge(beta: float) -> RidgeParams:
    return RidgeParams(beta, allow_min_norm=beta == 0)


def _manifest(path: Path, what: str):
    if not path.exists():
        raise ValueError(f"{what} manifest not found: {path}")
    return load_manifest(path)


# -- commands -----------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    cfg = SynthConfig(
        num_identities=args.ids,
        images_per_identity=args.per_id,
        image_height=args.height,
        image_width=args.width,
        channels=args.channels,
        occlusion_fraction=args.occlusion,
        seed=args.seed,
    )
    cfg.validate()
    out = Path(args.out)
    generate_synthetic(cfg, out)
    cp = configparser.ConfigParser()
    cp["synth"] = {f.name: _format_value(getattr(cfg, f.name)) for f in fields(cfg)}
    buf = io.StringIO()
    cp.write(buf)
    atomic_write_text(out / "synth_config.ini", buf.getvalue())
    for split in ("train", "gallery", "probe"):
        print(out / f"{split}.txt")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    cfg.validate()
    train_path = Path(args.train) if args.train else Path(cfg.paths.data_dir) / "train.txt"
    manifest = _manifest(train_path, "train")
    if not manifest.entries:
        raise ValueError(f"train manifest is empty: {train_path}")
    first = read_tensor(manifest.entries[0].tensor_path)
    state = cfg.initial_state(1 if first.ndim == 2 else first.shape[2])
    state = train_toy(manifest, cfg.train, cfg.pyramid, state)
    ckpt = Path(cfg.paths.checkpoint_dir)
    config_text = cfg.to_ini()
    save_checkpoint(ckpt, state, config_text)
    atomic_write_text(ckpt / "resolved_config.ini", config_text)
    if state.history:
        first_loss, last_loss = state.history[0][2], state.history[-1][2]
        print(f"trained {state.epoch} epochs: L_total {first_loss:.6g} -> {last_loss:.6g}")
    print(ckpt)
    return 0


def cmd_match(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    cfg.validate(training=False)
    probe = read_tensor(args.probe)
    gallery = read_tensor(args.gallery)
    ridge = _ridge(cfg.train.beta)
    state = load_checkpoint(args.checkpoint) if args.checkpoint else None
    if args.maps:
        # inputs are precomputed feature maps (h x w x d)
        pset = pyramid_pool(_as_map(probe), cfg.pyramid)
        gset = pyramid_pool(_as_map(gallery), cfg.pyramid)
    else:
        if state is None:
            raise ValueError("image inputs need --checkpoint (or pass --maps for feature maps)")
        pset = extract(probe, state.extractor, cfg.pyramid)
        gset = extract(gallery, state.extractor, cfg.pyramid)
    clf = None if args.unweighted or state is None else state.classifier
    res = fpr_match(
        pset, gset, cfg.pyramid, ridge, clf, cfg.flags.normalize_weights, cfg.flags.squared_errors
    )
    out = {"schema_version": SCHEMA_VERSION, "weighted": clf is not None, **res.to_dict()}
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    report = _report_dir(cfg)
    atomic_write_text(report / "match.json", text)
    atomic_write_text(report / "match_config.ini", cfg.to_ini())
    sys.stdout.write(text)
    return 0


def _as_map(t: np.ndarray) -> np.ndarray:
    if t.ndim == 2:
        return t[:, :, None].astype(np.float64)
    if t.ndim != 3:
        raise ValueError(f"feature map must be h x w x d, got shape {t.shape}")
    return t.astype(np.float64)


def _evaluate_checkpoint(cfg: RunConfig, state, probe, gallery, weighted: bool, max_rank: int, workers: int):
    return evaluate(
        probe, gallery, state, cfg.pyramid, _ridge(cfg.train.beta), weighted,
        cfg.flags.normalize_weights, cfg.flags.squared_errors, max_rank, workers,
    )


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    cfg.validate(training=False)
    data = Path(cfg.paths.data_dir)
    probe = _manifest(Path(args.probe) if args.probe else data / "probe.txt", "probe")
    gallery = _manifest(Path(args.gallery) if args.gallery else data / "gallery.txt", "gallery")
    state = load_checkpoint(args.checkpoint or cfg.paths.checkpoint_dir)
    report = _evaluate_checkpoint(
        cfg, state, probe, gallery, not args.unweighted, args.max_rank, worker_count(args.workers)
    )
    report.extra["weighted"] = not args.unweighted
    out = _report_dir(cfg)
    atomic_write_text(out / "eval.json", report.to_json())
    atomic_write_text(out / "eval_cmc.csv", report.to_csv())
    atomic_write_text(out / "eval_config.ini", cfg.to_ini())
    print(f"rank1={report.rank1:.4f} map={report.map:.4f}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    cfg.validate()
    alphas = parse_grid(args.alpha_grid) if args.alpha_grid else [cfg.train.alpha]
    taus = parse_grid(args.tau_grid) if args.tau_grid else [cfg.train.tau]
    betas = parse_grid(args.beta_grid) if args.beta_grid else [cfg.train.beta]
    data = Path(cfg.paths.data_dir)
    train = _manifest(Path(args.train) if args.train else data / "train.txt", "train")
    probe = _manifest(Path(args.probe) if args.probe else data / "probe.txt", "probe")
    gallery = _manifest(Path(args.gallery) if args.gallery else data / "gallery.txt", "gallery")
    if not train.entries:
        raise ValueError("train manifest is empty")
    first = read_tensor(train.entries[0].tensor_path)
    channels = 1 if first.ndim == 2 else first.shape[2]
    out = _report_dir(cfg)
    points = [(a, t, b) for a in alphas for t in taus for b in betas]

    def run(i: int):
        a, t, b = points[i]
        pcfg = RunConfig(
            TrainConfig(**{**vars(cfg.train), "alpha": a, "tau": t, "beta": b}),
            cfg.pyramid, cfg.extractor, cfg.paths, cfg.flags,
        )
        pcfg.validate()
        state = train_toy(train, pcfg.train, pcfg.pyramid, pcfg.initial_state(channels))
        # evaluate the stored checkpoint so each row matches a standalone eval run
        ckpt = out / "sweep" / f"point_{i:03d}"
        save_checkpoint(ckpt, state, pcfg.to_ini())
        atomic_write_text(ckpt / "resolved_config.ini", pcfg.to_ini())
        rep = _evaluate_checkpoint(pcfg, load_checkpoint(ckpt), probe, gallery, True, args.max_rank, 1)
        return a, t, b, rep.rank1, rep.map

    workers = worker_count(args.workers)
    if workers > 1 and len(points) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, range(len(points))))
    else:
        rows = [run(i) for i in range(len(points))]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "tau", "beta", "rank1", "map"])
    for row in rows:
        w.writerow([repr(float(v)) for v in row])
    atomic_write_text(out / "sweep.csv", buf.getvalue())
    atomic_write_text(out / "sweep_config.ini", cfg.to_ini())
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    samples, state = toy_batch(args.seed)
    tcfg = TrainConfig(**{**vars(cfg.train), "P": 2, "K": 2})
    tcfg.validate()
    rep = grad_check(
        samples, state, tcfg, cfg.pyramid, args.probes, args.eps, args.seed, args.freeze_h
    )
    tol = args.tol if args.tol is not None else (1e-6 if args.freeze_h else 1e-3)
    ok = rep.max_rel_error < tol
    out = {"schema_version": SCHEMA_VERSION, "tolerance": tol, "passed": ok,
           "freeze_h": args.freeze_h, "eps": args.eps, "seed": args.seed, **rep.to_dict()}
    report = _report_dir(cfg)
    _write_json(report / "gradcheck.json", out)
    atomic_write_text(report / "gradcheck_config.ini", cfg.to_ini())
    print(
        f"max_rel_error={rep.max_rel_error:.3e} mean_rel_error={rep.mean_rel_error:.3e} "
        f"checked={rep.n_checked} kinks={rep.n_kinks} tol={tol:g} {'PASS' if ok else 'FAIL'}"
    )
    return 0 if ok else 1


def cmd_fpm(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    state = load_checkpoint(args.checkpoint or cfg.paths.checkpoint_dir)
    fset = extract(read_tensor(args.image), state.extractor, cfg.pyramid)
    h = foreground_probs(fset, state.classifier)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, grid in enumerate(pyramid_layout(h, fset)):
        write_tensor(out / f"fpm_level{k}.fprt", grid)
        print(out / f"fpm_level{k}.fprt")
    atomic_write_text(out / "fpm_config.ini", cfg.to_ini())
    return 0


# -- argument parsing -----------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; flags override its values")
    p.add_argument("--report-dir", dest="report_dir")
    p.add_argument("--levels", help="pyramid levels, e.g. 1/1,2/2,4/4")
    p.add_argument("--beta", type=float)
    p.add_argument("--normalize", action="store_true", help="divide the weighted sum by sum(H)")
    p.add_argument("--squared", action="store_true", help="use squared residual norms")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--P", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--patch-height", dest="patch_height", type=int)
    p.add_argument("--patch-width", dest="patch_width", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--out-channels", dest="out_channels", type=int)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fpr", description="Foreground-weighted pyramid reconstruction matching")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic occluded dataset")
    p.add_argument("--ids", type=int, default=10)
    p.add_argument("--per-id", dest="per_id", type=int, default=4)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--occlusion", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the toy extractor and foreground classifier")
    _common(p)
    _training_flags(p)
    p.add_argument("--train", help="train manifest (default: <data_dir>/train.txt)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="distance between one probe and one gallery tensor")
    _common(p)
    p.add_argument("probe")
    p.add_argument("gallery")
    p.add_argument("--checkpoint")
    p.add_argument("--maps", action="store_true", help="inputs are feature maps, not images")
    p.add_argument("--unweighted", action="store_true", help="plain average error, no foreground weights")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="rank probes against the gallery and report CMC/mAP")
    _common(p)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--checkpoint")
    p.add_argument("--probe")
    p.add_argument("--gallery")
    p.add_argument("--max-rank", dest="max_rank", type=int, default=20)
    p.add_argument("--unweighted", action="store_true")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate over an alpha/tau/beta grid")
    _common(p)
    _training_flags(p)
    p.add_argument("--alpha-grid", dest="alpha_grid", help="start:stop:step or comma list")
    p.add_argument("--tau-grid", dest="tau_grid", help="start:stop:step or comma list")
    p.add_argument("--beta-grid", dest="beta_grid", help="start:stop:step or comma list")
    p.add_argument("--train")
    p.add_argument("--probe")
    p.add_argument("--gallery")
    p.add_argument("--max-rank", dest="max_rank", type=int, default=20)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="audit analytic gradients against finite differences")
    _common(p)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float)
    p.add_argument("--freeze-h", dest="freeze_h", action="store_true", help="hold foreground weights fixed")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("fpm", help="write per-level foreground probability maps for one image")
    _common(p)
    p.add_argument("image")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fpm)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, np.linalg.LinAlgError, KeyError, TrainingDiverged) as exc:
        print(f"fpr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
