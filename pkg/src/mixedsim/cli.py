"""``mixedsim`` command-line entry point."""
from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from . import __version__
from .config import KINDS, ConfigError, ExperimentConfig, load_config
from .io import atomic_write_text, json_text

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
MANIFEST = "manifest.json"


def _manifest(cfg: ExperimentConfig, status: str, files: dict, wall: float, error: str | None = None) -> dict:
    return {
        "tool": "mixedsim",
        "tool_version": __version__,
        "kind": cfg.kind,
        "config_sha256": cfg.digest(),
        "config": cfg.canonical(),
        "seeds": list(cfg.seeds),
        "status": status,
        "error": error,
        "wall_clock_s": round(wall, 3),
        "files": [{"path": p, "sha256": files[p]} for p in sorted(files)],
    }


def output_dir(cfg: ExperimentConfig, out=None) -> Path:
    if out is not None:
        return Path(out)
    if cfg.output is not None:
        return Path(cfg.output)
    return Path("mixedsim-out") / cfg.kind


def run_experiment(cfg: ExperimentConfig, out=None, base_dir=".") -> tuple[int, dict]:
    """Run ``cfg`` and write its outputs plus ``manifest.json`` under the output directory.

    Outputs are computed in memory first, then written one file at a time via
    temp-file renames.  On any failure the files written so far are removed
    and the manifest records the error.
    """
    from .experiments import run

    dest = output_dir(cfg, out)
    start = time.perf_counter()
    written: dict[str, str] = {}
    try:
        outputs = run(cfg, base_dir)
        for rel in sorted(outputs):
            written[rel] = atomic_write_text(dest / rel, outputs[rel])
    except Exception as exc:  # noqa: BLE001 - every failure is reported through the manifest
        for rel in written:
            try:
                os.unlink(dest / rel)
            except FileNotFoundError:
                pass
        manifest = _manifest(cfg, "failed", {}, time.perf_counter() - start, f"{type(exc).__name__}: {exc}")
        atomic_write_text(dest / MANIFEST, json_text(manifest))
        return EXIT_RUNTIME, manifest
    manifest = _manifest(cfg, "ok", written, time.perf_counter() - start)
    atomic_write_text(dest / MANIFEST, json_text(manifest))
    return EXIT_OK, manifest


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixedsim", description="Mixed-signal neural network hardware simulations.")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed-offset", type=int, default=0, help="added to every seed in the config")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("--version", action="version", version=f"mixedsim {__version__}")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if cfg.kind != args.kind:
            raise ConfigError([("kind", f"config is for {cfg.kind!r}, command asked for {args.kind!r}")])
        if args.seed_offset:
            cfg = cfg.model_copy(update={"seeds": [s + args.seed_offset for s in cfg.seeds]})
        from .experiments import worker_count

        worker_count()
    except ConfigError as exc:
        for path, msg in exc.errors:
            print(f"config error: {path}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    status, manifest = run_experiment(cfg, args.out, base_dir=Path(args.config).resolve().parent)
    if status != EXIT_OK:
        print(f"run failed: {manifest['error']}", file=sys.stderr)
    else:
        print(f"wrote {len(manifest['files'])} files to {output_dir(cfg, args.out)}")
    return status


if __name__ == "__main__":
    sys.exit(main())
