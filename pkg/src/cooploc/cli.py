"""Command-line entry points: gen, train, eval, sweep-n, sweep-range."""
from __future__ import annotations

import os
import sys

import click

from . import harness
from .tensorcore import NumericHealthError

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _load_cfg(config, seed):
    try:
        return harness.load_config(config, seed=seed)
    except harness.ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)


def _checkpoint_paths(ckpt_dir, schemes):
    paths = {}
    for scheme in schemes:
        if scheme in ("mlcl", "nc", "gcn"):
            path = os.path.join(ckpt_dir, f"{scheme}.npz")
            if not os.path.exists(path):
                click.echo(f"config error: missing checkpoint {path}", err=True)
                sys.exit(EXIT_CONFIG)
            paths[scheme] = path
    return paths


def _run(fn):
    try:
        fn()
    except harness.ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except (NumericHealthError, FloatingPointError) as e:
        click.echo(f"numeric failure: {e}", err=True)
        sys.exit(EXIT_NUMERIC)


@click.group()
def main():
    """Cooperative localization experiments."""


@main.command()
@click.option("--config", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
def gen(config, seed, out):
    """Generate traces and train/test episode datasets."""
    cfg = _load_cfg(config, seed)

    def go():
        manifest = harness.cmd_gen(cfg, out)
        click.echo(f"wrote {len(manifest['episodes']['train'])} train / "
                   f"{len(manifest['episodes']['test'])} test episodes to {out}")

    _run(go)


@main.command()
@click.option("--config", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--dataset", type=click.Path(), required=True)
@click.option("--scheme", type=click.Choice(["mlcl", "nc", "gcn"]), default="mlcl")
@click.option("--out", type=click.Path(), required=True)
def train(config, seed, dataset, scheme, out):
    """Train a learned scheme and write checkpoint + learning curve."""
    cfg = _load_cfg(config, seed)

    def go():
        info = harness.cmd_train(cfg, dataset, scheme, out)
        click.echo(f"checkpoint: {info['checkpoint']} "
                   f"final eval MAE {info['final_eval_mae']:.3f} m")

    _run(go)


@main.command("eval")
@click.option("--config", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--dataset", type=click.Path(), required=True)
@click.option("--checkpoints", type=click.Path(), required=True,
              help="directory holding <scheme>.npz files")
@click.option("--out", type=click.Path(), required=True)
def eval_cmd(config, seed, dataset, checkpoints, out):
    """Per-timestep MAE table over the test episodes."""
    cfg = _load_cfg(config, seed)
    paths = _checkpoint_paths(checkpoints, cfg.schemes)
    _run(lambda: harness.cmd_eval(cfg, dataset, paths, out))


@main.command("sweep-n")
@click.option("--config", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--dataset", type=click.Path(), required=True)
@click.option("--checkpoints", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), required=True)
def sweep_n(config, seed, dataset, checkpoints, out):
    """MAE versus group size, reusing one trained checkpoint."""
    cfg = _load_cfg(config, seed)
    paths = _checkpoint_paths(checkpoints, cfg.schemes)
    _run(lambda: harness.cmd_sweep_n(cfg, dataset, paths, out))


@main.command("sweep-range")
@click.option("--config", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--dataset", type=click.Path(), required=True)
@click.option("--checkpoints", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), required=True)
def sweep_range(config, seed, dataset, checkpoints, out):
    """MAE versus communication radius with fixed measurement radius."""
    cfg = _load_cfg(config, seed)
    paths = _checkpoint_paths(checkpoints, cfg.schemes)
    _run(lambda: harness.cmd_sweep_range(cfg, dataset, paths, out))


if __name__ == "__main__":
    main()
