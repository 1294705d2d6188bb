"""
Command-line entry point: ``unfold-rpca <command> [options]``.

Settings come from, in increasing priority: built-in defaults, a flat
``key = value`` file passed with ``--config``, the ``UNFOLD_RPCA_SEED``
environment variable (``seed`` only), and command-line flags. Every command
writes into ``--out`` and finishes by listing what it wrote in
``manifest.txt``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import UnfoldRpcaError, no_grad
from .core.tensor import Tensor
from .data import SynthSceneSpec, load_dataset, synth_dataset, write_dataset
from .metrics import evaluate, write_metrics_csv, write_roc_csv
from .model import ModelConfig, RPCANet
from .rpca import PatchConfig, PcpSettings, ipi_detect, minmax_normalize, pcp_decompose, tophat_detect
from .train import (
    TrainConfig,
    load_checkpoint,
    read_history,
    save_checkpoint,
    train,
    write_history,
)

log = logging.getLogger("unfold_rpca")

SEED_ENV = "UNFOLD_RPCA_SEED"
BASELINES = ("pcp", "tophat", "ipi")


class ConfigError(ValueError):
    pass


def _targets(text: str) -> tuple[int, int]:
    lo, sep, hi = str(text).partition("..")
    try:
        pair = (int(lo), int(hi)) if sep else (int(lo), int(lo))
    except ValueError:
        raise ConfigError(f"targets must look like 'LO..HI' or 'N', got {text!r}") from None
    if not 0 <= pair[0] <= pair[1]:
        raise ConfigError(f"targets range must satisfy 0 <= LO <= HI, got {text!r}")
    return pair


@dataclass(frozen=True)
class Key:
    name: str
    kind: type | object
    default: object
    group: str
    help: str
    published: bool = False
    choices: tuple | None = None

    def parse(self, text):
        try:
            value = self.kind(text)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{self.name}: cannot parse {text!r} ({exc})") from None
        if self.choices and value not in self.choices:
            raise ConfigError(f"{self.name}: {value!r} not in {self.choices}")
        return value

    def describe(self) -> str:
        origin = "published setting" if self.published else "artifact default"
        return f"{self.help} [default: {self.default}; {origin}]"


KEYS = [
    # model
    Key("stages", int, 6, "model", "unfolded stages K", True),
    Key("channels", int, 32, "model", "feature channels C", True),
    Key("bem_mid_layers", int, 3, "model", "middle conv blocks in background estimation", True),
    Key("tem_mid_layers", int, 6, "model", "middle conv blocks in target extraction", True),
    Key("irm_mid_layers", int, 3, "model", "middle conv blocks in image reconstruction", True),
    # training
    Key("epochs", int, 400, "train", "training epochs", True),
    Key("batch_size", int, 8, "train", "images per mini-batch", True),
    Key("base_lr", float, 1e-4, "train", "initial Adam learning rate (poly decay, power 0.9)", True),
    Key("tau", float, 0.01, "train", "weight of the reconstruction term in the loss", True),
    Key("checkpoint_every", int, 0, "train", "write a checkpoint every N epochs; 0 disables"),
    Key("max_steps", int, 0, "train", "stop after N optimizer steps in this run; 0 means no cap"),
    Key("seed", int, 0, "common", f"random seed; {SEED_ENV} overrides the config file"),
    # data
    Key("data_root", str, "", "data", "dataset root holding <split>/images and <split>/masks"),
    Key("image_size", int, 256, "data", "square resize on load; 0 keeps stored size", True),
    Key("split", str, "test", "data", "split to evaluate", choices=("train", "test")),
    # evaluation
    Key("threshold", float, 0.5, "eval", "probability threshold for binarization"),
    Key("dist_thresh", float, 3.0, "eval", "max centroid distance (px) for a detected target"),
    Key("n_thresh", int, 20, "eval", "thresholds in the ROC sweep; 0 skips it"),
    # classical baselines
    Key("method", str, "pcp", "baseline", "classical method", choices=BASELINES),
    Key("pcp_rho", float, 1.5, "baseline", "ALM penalty growth factor"),
    Key("pcp_tol", float, 1e-7, "baseline", "relative residual stopping tolerance"),
    Key("pcp_max_iters", int, 500, "baseline", "ALM iteration cap"),
    Key("patch_size", int, 50, "baseline", "IPI patch side", True),
    Key("slide_step", int, 10, "baseline", "IPI sliding step", True),
    Key("tophat_radius", int, 1, "baseline", "top-hat structuring element radius"),
    # synthetic data
    Key("count", int, 8, "synth", "number of scenes"),
    Key("size", int, 64, "synth", "scene height and width"),
    Key("targets", _targets, (1, 3), "synth", "targets per scene as LO..HI"),
    Key("background_rank", int, 3, "synth", "rank of the background"),
    Key("noise_std", float, 0.01, "synth", "pixel noise standard deviation"),
]
KEY_MAP = {k.name: k for k in KEYS}

COMMAND_GROUPS = {
    "synth": ("synth", "common"),
    "train": ("model", "train", "common", "data"),
    "eval": ("eval", "data"),
    "decompose": ("baseline",),
    "baseline": ("baseline", "eval", "data"),
}


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        if key not in KEY_MAP:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = KEY_MAP[key].parse(value)
    return values


def resolve(args: argparse.Namespace) -> dict:
    settings = {k.name: k.default for k in KEYS}
    if args.config:
        settings.update(read_config_file(args.config))
    if os.environ.get(SEED_ENV, "").strip():
        settings["seed"] = KEY_MAP["seed"].parse(os.environ[SEED_ENV].strip())
    for k in KEYS:
        flag = getattr(args, k.name, None)
        if flag is not None:
            settings[k.name] = flag
    return settings


def model_config(s: dict) -> ModelConfig:
    return ModelConfig(s["stages"], s["channels"], s["bem_mid_layers"], s["tem_mid_layers"], s["irm_mid_layers"])


def pcp_settings(s: dict) -> PcpSettings:
    return PcpSettings(rho=s["pcp_rho"], tol=s["pcp_tol"], max_iters=s["pcp_max_iters"])


class Outputs:
    """Tracks files written under ``--out`` for the manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def add(self, p: Path) -> None:
        self.files.append(Path(p))

    def finish(self) -> None:
        names = sorted({str(p.relative_to(self.root)) for p in self.files})
        (self.root / "manifest.txt").write_text("".join(f"{n}\n" for n in names))


def save_gray(path: Path, arr01: np.ndarray) -> None:
    pixels = np.round(np.clip(arr01, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def read_gray(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input image not found: {path}")
    img = Image.open(path)
    if img.mode != "L":
        log.warning("%s: mode %s converted to 8-bit grayscale", path.name, img.mode)
        img = img.convert("L")
    return np.asarray(img, dtype=np.float64) / 255.0


def _load_split(s: dict, split: str):
    root = s["data_root"]
    if not root:
        raise ConfigError("data_root is not set (use --data-root or the config file)")
    if not Path(root).is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    samples = load_dataset(root, split, s["image_size"] or None)
    if not samples:
        raise ConfigError(f"no images in {Path(root) / split / 'images'}")
    return samples


def predict(model: RPCANet, image: np.ndarray, want_trace: bool = False):
    """Eval-mode forward on one (H, W) image, no graph."""
    model.eval()
    with no_grad():
        return model(Tensor(image[None, None]), want_trace=want_trace)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def run_baseline(method: str, image: np.ndarray, s: dict) -> tuple[np.ndarray, np.ndarray]:
    """(background, target) for one (H, W) image."""
    if method == "pcp":
        r = pcp_decompose(image, pcp_settings(s))
        return r.background, r.target
    if method == "ipi":
        return ipi_detect(image, PatchConfig(s["patch_size"], s["slide_step"]), pcp_settings(s))
    target = tophat_detect(image, s["tophat_radius"])
    return image - target, target


# -- commands ----------------------------------------------------------------


def cmd_synth(s: dict, args) -> None:
    out = Outputs(args.out)
    spec = SynthSceneSpec(
        height=s["size"],
        width=s["size"],
        background_rank=s["background_rank"],
        noise_std=s["noise_std"],
        seed=s["seed"],
    )
    samples = synth_dataset(s["count"], spec, targets=s["targets"])
    for p in write_dataset(samples, out.root, args.split):
        out.add(p)
    out.finish()
    log.info("wrote %d scenes to %s", len(samples), out.root / args.split)


def cmd_train(s: dict, args) -> None:
    config = model_config(s)
    cfg = TrainConfig(
        epochs=s["epochs"],
        batch_size=s["batch_size"],
        base_lr=s["base_lr"],
        tau=s["tau"],
        seed=s["seed"],
        checkpoint_every=s["checkpoint_every"],
        checkpoint_dir=str(Path(args.out) / "checkpoints"),
    )
    data = _load_split(s, "train")
    out = Outputs(args.out)
    history_path = out.root / "history.csv"
    previous = []
    state = None
    if args.resume:
        model, state, _ = load_checkpoint(args.resume, expected_config=config)
        if history_path.is_file():
            previous = [r for r in read_history(history_path) if r.iter <= state.step]
        log.info("resuming from %s at step %d", args.resume, state.step)
    else:
        model = RPCANet(config, seed=s["seed"])

    def progress(row):
        if row.iter % 10 == 0 or row.iter == 1:
            log.info("epoch %d iter %d lr %.3e loss %.5f", row.epoch, row.iter, row.lr, row.loss_total)

    model, history, state = train(model, data, cfg, progress, state, s["max_steps"] or None)
    save_checkpoint(out.path("model.ckpt"), model, state, cfg)
    write_history(previous + history, out.path("history.csv"))
    ckpt_dir = Path(cfg.checkpoint_dir)
    if ckpt_dir.is_dir():
        for p in sorted(ckpt_dir.glob("epoch_*.ckpt")):
            out.add(p)
    out.finish()


def cmd_eval(s: dict, args) -> None:
    model, _, _ = load_checkpoint(args.checkpoint)
    samples = _load_split(s, s["split"])
    scores = [_sigmoid(predict(model, x.image[0])[0].data[0, 0]) for x in samples]
    report = evaluate(scores, [x.mask[0] for x in samples], s["threshold"], s["dist_thresh"], s["n_thresh"] or None)
    out = Outputs(args.out)
    write_metrics_csv(report, out.path("metrics.csv"))
    if s["n_thresh"]:
        write_roc_csv(report, out.path("roc.csv"))
    out.finish()
    log.info("mIoU %.4f  Pd %.4f  Fa %.3e  AUC %.4f", report.miou, report.pd, report.fa, report.auc)


def cmd_decompose(s: dict, args) -> None:
    image = read_gray(args.input)
    if (args.checkpoint is None) == (args.baseline is None):
        raise ConfigError("give exactly one of --checkpoint or --baseline")
    if args.trace and args.checkpoint is None:
        raise ConfigError("--trace needs a --checkpoint")
    out = Outputs(args.out)
    if args.checkpoint is not None:
        model, _, _ = load_checkpoint(args.checkpoint)
        t, d, trace = predict(model, image, want_trace=True)
        target = _sigmoid(t.data[0, 0])
        background = trace.background[-1][0, 0]
        recon = d.data[0, 0]
        if args.trace:
            for k, (b_k, t_k) in enumerate(zip(trace.background, trace.target), start=1):
                save_gray(out.path(f"B_k{k}.png"), minmax_normalize(b_k[0, 0]))
                save_gray(out.path(f"T_k{k}.png"), minmax_normalize(t_k[0, 0]))
    else:
        background, raw_target = run_baseline(args.baseline, image, s)
        target = minmax_normalize(np.maximum(raw_target, 0.0))
        recon = background + raw_target
    save_gray(out.path("target.png"), target)
    save_gray(out.path("background.png"), minmax_normalize(background))
    save_gray(out.path("reconstruction.png"), minmax_normalize(recon))
    out.finish()


def cmd_baseline(s: dict, args) -> None:
    samples = _load_split(s, s["split"])
    scores = []
    for x in samples:
        _, target = run_baseline(s["method"], x.image[0], s)
        scores.append(minmax_normalize(np.maximum(target, 0.0)))
    report = evaluate(scores, [x.mask[0] for x in samples], s["threshold"], s["dist_thresh"], s["n_thresh"] or None)
    out = Outputs(args.out)
    write_metrics_csv(report, out.path("metrics.csv"))
    if s["n_thresh"]:
        write_roc_csv(report, out.path("roc.csv"))
    out.finish()
    log.info("%s: mIoU %.4f  Pd %.4f  Fa %.3e", s["method"], report.miou, report.pd, report.fa)


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic image/mask dataset"),
    "train": (cmd_train, "train a model; writes model.ckpt and history.csv"),
    "eval": (cmd_eval, "score a checkpoint; writes metrics.csv and roc.csv"),
    "decompose": (cmd_decompose, "split one image into target/background/reconstruction PNGs"),
    "baseline": (cmd_baseline, "score a classical method on a dataset"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unfold-rpca",
        description="Deep-unfolded RPCA for infrared small target detection.",
        epilog=f"Config files hold 'key = value' lines using the option names below "
        f"with underscores. Flags override the file; {SEED_ENV} overrides the file's seed.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, summary) in COMMANDS.items():
        p = sub.add_parser(name, help=summary, description=summary)
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--out", required=True, help="output directory")
        for group in COMMAND_GROUPS[name]:
            for k in KEYS:
                if k.group == group:
                    p.add_argument(f"--{k.name.replace('_', '-')}", dest=k.name, type=k.parse, help=k.describe())
        if name == "synth":
            p.add_argument("--split", default="train", choices=("train", "test"), help="split to write [default: train]")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")
        if name == "eval":
            p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
        if name == "decompose":
            p.add_argument("--input", required=True, help="grayscale PNG to decompose")
            p.add_argument("--checkpoint", help="trained model checkpoint")
            p.add_argument("--baseline", choices=BASELINES, help="classical method instead of a checkpoint")
            p.add_argument("--trace", action="store_true", help="also write per-stage B_k*/T_k* heatmaps")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    handler, _ = COMMANDS[args.command]
    try:
        handler(resolve(args), args)
    except (UnfoldRpcaError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
