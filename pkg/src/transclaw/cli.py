"""Command-line surface: dataset generation, training, evaluation,
prediction, the gradient-check suite, and the ablation harness.

Exit codes: 0 success, 1 internal error, 2 usage/input error. Commands never
mutate their inputs; all artifacts land under --out.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import data as data_mod
from . import gradcheck as gradcheck_mod
from . import metrics as metrics_mod
from .errors import CheckpointError, ConfigError, DataError, TransclawError
from .model import ModelConfig, TransClawUNet
from .tensor import set_default_dtype
from .train import (TrainSettings, history_to_csv, load_checkpoint, load_state,
                    save_checkpoint, train_loop, write_checkpoint)

_PALETTE = np.array([
    [0, 0, 0], [230, 80, 60], [70, 160, 230], [90, 200, 120], [240, 200, 80],
    [180, 100, 220], [250, 140, 40], [100, 220, 220], [240, 120, 180],
    [140, 140, 140],
], dtype=np.uint8)


def _cli_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, DataError, CheckpointError, FileNotFoundError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(2)
        except TransclawError as e:
            click.echo(f"internal error: {e}", err=True)
            sys.exit(1)
    return wrapper


def _parse_resolution(text: str) -> tuple[int, int]:
    try:
        if "x" in text:
            h, w = text.lower().split("x", 1)
            return int(h), int(w)
        side = int(text)
        return side, side
    except ValueError:
        raise ConfigError(f"bad resolution {text!r}; expected e.g. 64 or 64x64")


def _load_config(config_path, manifest=None, skips=None, patch=None,
                 resolution=None) -> ModelConfig:
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"no config file at {path}")
        cfg = ModelConfig.from_dict(json.loads(path.read_text()))
    elif manifest is not None:
        cfg = ModelConfig(height=manifest.height, width=manifest.width,
                          in_channels=manifest.channels,
                          num_classes=manifest.num_classes)
    else:
        cfg = ModelConfig()
    if skips is not None:
        cfg.skip_budget = skips
    if patch is not None:
        cfg.patch_size = patch
    if resolution is not None:
        cfg.height, cfg.width = _parse_resolution(resolution)
    return cfg.validate()


def _check_config_matches_data(cfg: ModelConfig, manifest) -> None:
    expect = (manifest.height, manifest.width, manifest.channels, manifest.num_classes)
    got = (cfg.height, cfg.width, cfg.in_channels, cfg.num_classes)
    if expect != got:
        raise ConfigError(
            f"config (H, W, C, K)={got} does not match dataset "
            f"(H, W, C, K)={expect} from {manifest.root / data_mod.MANIFEST_NAME}")


def _write_ppm(mask: np.ndarray, path) -> None:
    H, W = mask.shape
    rgb = _PALETTE[mask.astype(np.intp) % len(_PALETTE)]
    with open(path, "wb") as fp:
        fp.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fp.write(rgb.tobytes())


precision_option = click.option(
    "--precision", type=click.Choice(["f32", "f64"]), default="f32",
    show_default=True, help="Numeric mode (training f32, verification f64).")


@click.group()
def main():
    """Claw-skip segmentation network: data, training, evaluation, ablations."""


@main.command()
@click.option("--out", required=True, type=click.Path(), help="Dataset directory.")
@click.option("--n", default=32, show_default=True, help="Total sample count.")
@click.option("--classes", default=4, show_default=True)
@click.option("--height", default=64, show_default=True)
@click.option("--width", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--noise", default=0.05, show_default=True)
@click.option("--channels", default=1, show_default=True)
@click.option("--val-fraction", default=0.2, show_default=True)
@click.option("--test-fraction", default=0.0, show_default=True)
@_cli_errors
def gen(out, n, classes, height, width, seed, noise, channels, val_fraction,
        test_fraction):
    """Generate a synthetic phantom dataset."""
    manifest = data_mod.generate_phantoms(
        out, n, classes, height, width, seed, noise, channels,
        val_fraction, test_fraction)
    counts = {s: len(v) for s, v in manifest.splits.items()}
    click.echo(f"wrote {n} samples to {out} (splits: {counts})")


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Model config JSON; defaults follow the dataset.")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
@click.option("--epochs", default=30, show_default=True)
@click.option("--batch-size", default=4, show_default=True)
@click.option("--lr", default=1e-2, show_default=True)
@click.option("--momentum", default=0.9, show_default=True)
@click.option("--weight-decay", default=1e-4, show_default=True)
@click.option("--decay-all-params", is_flag=True,
              help="Apply weight decay to norm affines and position embeddings too.")
@click.option("--eval-every", default=1, show_default=True,
              help="Validation cadence in epochs.")
@click.option("--skips", type=int, default=None, help="Override skip budget.")
@click.option("--patch", type=int, default=None, help="Override feature patch size.")
@click.option("--resolution", default=None, help="Override input extent, e.g. 64x64.")
@precision_option
@_cli_errors
def train(config_path, data_dir, out_dir, seed, epochs, batch_size, lr, momentum,
          weight_decay, decay_all_params, eval_every, skips, patch, resolution,
          precision):
    """Train a model on a generated dataset."""
    set_default_dtype(precision)
    manifest = data_mod.load_manifest(data_dir)
    cfg = _load_config(config_path, manifest, skips, patch, resolution)
    _check_config_matches_data(cfg, manifest)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = TransClawUNet(cfg, seed=seed)
    settings = TrainSettings(epochs=epochs, batch_size=batch_size, seed=seed,
                             lr=lr, momentum=momentum, weight_decay=weight_decay,
                             decay_all_params=decay_all_params,
                             eval_every=eval_every)
    result = train_loop(model, manifest, settings)

    (out / "history.csv").write_text(history_to_csv(result.history))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    save_checkpoint(model, out / "last.ckpt", epoch=epochs, seed=seed)
    write_checkpoint(out / "best.ckpt", cfg, result.best_state,
                     epoch=result.best_epoch, seed=seed)
    click.echo(f"trained {result.steps} steps; best val dice "
               f"{result.best_val_dice:.4f} at epoch {result.best_epoch}; "
               f"artifacts in {out}")


@main.command(name="eval")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--split", default="test", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@precision_option
@_cli_errors
def eval_cmd(checkpoint, data_dir, split, out_dir, precision):
    """Evaluate a checkpoint on one dataset split."""
    set_default_dtype(precision)
    model, _ = load_checkpoint(checkpoint)
    manifest = data_mod.load_manifest(data_dir)
    _check_config_matches_data(model.config, manifest)
    samples = manifest.load_split(split)
    report = metrics_mod.evaluate(model, samples)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_text())
    click.echo(report.to_text(), nl=False)


@main.command()
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--color/--no-color", default=True, show_default=True,
              help="Also write a color-mapped PPM for inspection.")
@click.argument("images", nargs=-1, required=True, type=click.Path())
@precision_option
@_cli_errors
def predict(checkpoint, out_dir, color, images, precision):
    """Predict class masks for image tensor files."""
    set_default_dtype(precision)
    model, _ = load_checkpoint(checkpoint)
    cfg = model.config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for image_path in images:
        image = data_mod.load_image(image_path)
        if image.shape != (cfg.in_channels, cfg.height, cfg.width):
            raise ConfigError(f"image {image_path} has extents {image.shape}, "
                              f"checkpoint expects "
                              f"({cfg.in_channels}, {cfg.height}, {cfg.width})")
        mask = metrics_mod.predict_mask(model, image)
        stem = Path(image_path).stem
        data_mod.save_mask(mask, out / f"{stem}.mask")
        if color:
            _write_ppm(mask, out / f"{stem}.ppm")
    click.echo(f"wrote {len(images)} mask(s) to {out}")


@main.command()
@click.option("--op-seeds", default=3, show_default=True,
              help="Seeds per operator check.")
@click.option("--model-seed", default=0, show_default=True)
@_cli_errors
def gradcheck(op_seeds, model_seed):
    """Finite-difference checks for every operator and a tiny model.

    Always runs in 64-bit mode regardless of --precision elsewhere.
    """
    rows = gradcheck_mod.run_op_suite(range(op_seeds)) \
        + gradcheck_mod.run_model_suite(model_seed)
    failures = 0
    for name, err in rows:
        status = "ok" if err < gradcheck_mod.TOLERANCE else "FAIL"
        if status == "FAIL":
            failures += 1
        click.echo(f"{name:<45} {err:12.3e}  {status}")
    click.echo(f"{len(rows)} checks, {failures} failure(s), "
               f"tolerance {gradcheck_mod.TOLERANCE:g}")
    if failures:
        sys.exit(1)


@main.command()
@click.option("--axis", type=click.Choice(["skips", "patch", "resolution"]),
              required=True)
@click.option("--values", required=True,
              help="Comma list: skips 0,1,2,3; patch 1,2; resolution 32x32,64x64.")
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--samples", default=32, show_default=True,
              help="Synthetic samples per cell dataset.")
@click.option("--epochs", default=6, show_default=True)
@click.option("--batch-size", default=8, show_default=True)
@click.option("--lr", default=1e-2, show_default=True)
@click.option("--data-seed", default=1234, show_default=True)
@click.option("--noise", default=0.05, show_default=True)
@precision_option
@_cli_errors
def ablate(axis, values, seeds, out_dir, config_path, samples, epochs,
           batch_size, lr, data_seed, noise, precision):
    """Sweep one architecture axis over fresh desk-scale training runs."""
    set_default_dtype(precision)
    base = _load_config(config_path)
    seed_list = [int(s) for s in seeds.split(",") if s != ""]
    if not seed_list:
        raise ConfigError("need at least one seed")

    cells = []
    for raw in values.split(","):
        raw = raw.strip()
        cfg = ModelConfig.from_dict(base.to_dict())
        if axis == "skips":
            cfg.skip_budget = int(raw)
        elif axis == "patch":
            cfg.patch_size = int(raw)
        else:
            cfg.height, cfg.width = _parse_resolution(raw)
        try:
            cfg.validate()
        except ConfigError as e:
            raise ConfigError(f"ablation value {raw!r} rejected: {e}")
        cells.append((raw, cfg))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    K = base.num_classes
    header = ["axis", "value", "seed", "mean_dice", "mean_ahd"] \
        + [f"dice_{k}" for k in range(1, K)]
    rows = [",".join(header)]

    manifests = {}
    for raw, cfg in cells:
        key = (cfg.height, cfg.width)
        if key not in manifests:
            ds_dir = out / f"data_{cfg.height}x{cfg.width}"
            manifests[key] = data_mod.generate_phantoms(
                ds_dir, samples, K, cfg.height, cfg.width, data_seed,
                noise=noise, channels=cfg.in_channels, val_fraction=0.25)
        manifest = manifests[key]
        for seed in seed_list:
            model = TransClawUNet(cfg, seed=seed)
            settings = TrainSettings(epochs=epochs, batch_size=batch_size,
                                     seed=seed, lr=lr, eval_every=max(epochs, 1))
            result = train_loop(model, manifest, settings)
            best = TransClawUNet(cfg, seed=seed)
            load_state(best, result.best_state)
            report = metrics_mod.evaluate(best, manifest.load_split("val"))
            cells_txt = [axis, raw, str(seed), f"{report.mean_dice:.6f}",
                         f"{report.mean_ahd:.6f}"] \
                + [("n/a" if np.isnan(d) else f"{d:.6f}") for d in report.dice]
            rows.append(",".join(cells_txt))
            click.echo(f"{axis}={raw} seed={seed}: "
                       f"val dice {report.mean_dice:.4f}, ahd {report.mean_ahd:.4f}")

    (out / "ablation.csv").write_text("\n".join(rows) + "\n")
    click.echo(f"wrote {out / 'ablation.csv'}")


if __name__ == "__main__":
    main()
