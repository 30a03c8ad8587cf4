"""Command-line pipeline: bench-lat -> search -> derive -> retrain -> eval.

Every command works inside a run directory (--out) that holds the run's
artifacts and a manifest tying them to one config hash.  Config values are
resolved as defaults < YAML config file < environment (SEGNAS_* variables)
< command-line flags.  Exit codes are one per error class so shell
pipelines can branch on them:

    0 success                 5 refused to overwrite (--force missing)
    1 unexpected error        6 numeric divergence during optimization
    2 invalid configuration   7 benchmark timer failure
    3 missing upstream file   8 bad weights file
    4 bad artifact (schema/hash mismatch)   9 run directory locked
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import engine
from .arch import DerivedArchitecture, DiscreteNetwork, derive
from .config import ConfigError, SearchConfig
from .latency import LatencyError, LatencyModel, LatencyTable, bench_table, network_plan, plan_keys
from .engine import SearchDiverged, TrajectoryLog, load_checkpoint, network_from_checkpoint
from .tensor import TensorError

ENV_PREFIX = "SEGNAS_"

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_ARTIFACT = 4
EXIT_OVERWRITE = 5
EXIT_DIVERGED = 6
EXIT_TIMER = 7
EXIT_WEIGHTS = 8
EXIT_LOCKED = 9


class MissingArtifact(FileNotFoundError):
    pass


class ArtifactError(ValueError):
    pass


class BadWeights(ValueError):
    pass


class RunLocked(RuntimeError):
    pass


class Overwrite(FileExistsError):
    pass


# --------------------------------------------------------------------------
# Run directory plumbing

MANIFEST_VERSION = 1


class RunDir:
    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.path / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            doc = json.loads(self.manifest_path.read_text())
            if doc.get("version") != MANIFEST_VERSION:
                raise ArtifactError(f"unsupported manifest version {doc.get('version')!r}")
            return doc
        return {"version": MANIFEST_VERSION, "config_hash": None, "artifacts": {}, "status": {}}

    def update(self, config: SearchConfig, stage: str, artifacts: dict) -> None:
        doc = self.manifest()
        if doc["config_hash"] not in (None, config.config_hash()):
            raise ArtifactError(
                f"run directory belongs to config {doc['config_hash']}, current config is {config.config_hash()}"
            )
        doc["config_hash"] = config.config_hash()
        self._write(doc, stage, artifacts)

    def update_stage(self, stage: str, artifacts: dict) -> None:
        """Record a stage that only consumes existing artifacts."""
        self._write(self.manifest(), stage, artifacts)

    def _write(self, doc: dict, stage: str, artifacts: dict) -> None:
        doc["artifacts"].update({k: str(v) for k, v in artifacts.items()})
        doc["status"][stage] = "done"
        self.manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True))

    def file(self, name: str) -> Path:
        return self.path / name


class RunLock:
    def __init__(self, run_dir: Path):
        self.lock_path = Path(run_dir) / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLocked(
                f"run directory is locked by another process ({self.lock_path}); remove the lock if stale"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            self.lock_path.unlink()
        except FileNotFoundError:
            pass
        return False


# --------------------------------------------------------------------------
# Config resolution


def _env(name: str) -> str | None:
    return os.environ.get(ENV_PREFIX + name)


def load_config(args) -> SearchConfig:
    raw = {}
    config_path = args.config or _env("CONFIG")
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise MissingArtifact(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config file is not valid YAML: {e}") from e
    seed = args.seed if args.seed is not None else _env("SEED")
    if seed is not None:
        try:
            raw["seed"] = int(seed)
        except ValueError:
            raise ConfigError(f"invalid config field 'seed': {seed!r}") from None
    return SearchConfig.from_dict(raw)


def _resolve_out(args) -> Path:
    return Path(args.out or _env("OUT") or "run")


def _resolve_table_path(args, run: RunDir) -> Path:
    return Path(args.table or _env("TABLE") or run.file("latency.json"))


def _force(args) -> bool:
    return bool(args.force or (_env("FORCE") or "").lower() in ("1", "true", "yes"))


def _load_table(path: Path) -> LatencyTable:
    if not path.exists():
        raise MissingArtifact(f"latency table not found: {path} (run `segnas bench-lat` first)")
    try:
        return LatencyTable.load(path)
    except LatencyError as e:
        raise ArtifactError(str(e)) from e


def _load_arch(path: Path) -> DerivedArchitecture:
    if not path.exists():
        raise MissingArtifact(f"architecture file not found: {path} (run `segnas derive` first)")
    try:
        return DerivedArchitecture.load(path)
    except TensorError as e:
        raise ArtifactError(f"bad architecture file {path}: {e}") from e


def _arch_sha(arch: DerivedArchitecture) -> str:
    import hashlib

    payload = json.dumps(arch.to_json_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def save_weights(path: Path, dnet: DiscreteNetwork, config: SearchConfig, arch: DerivedArchitecture) -> Path:
    meta = {"version": 1, "config_hash": config.config_hash(), "arch_sha": _arch_sha(arch)}
    arrays = {f"p/{n}": a for n, a in dnet.store.state_arrays().items()}
    with open(path, "wb") as fh:
        np.savez(fh, _meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    return path


def load_weights(path: Path, dnet: DiscreteNetwork, config: SearchConfig, arch: DerivedArchitecture) -> None:
    if not path.exists():
        raise MissingArtifact(f"weights file not found: {path} (run `segnas retrain` first)")
    try:
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(bytes(arrays.pop("_meta")).decode())
    except Exception as e:
        raise BadWeights(f"cannot read weights file {path}: {e}") from e
    if meta.get("version") != 1:
        raise BadWeights(f"unsupported weights version {meta.get('version')!r}")
    if meta.get("arch_sha") != _arch_sha(arch):
        raise BadWeights(f"weights were trained for architecture {meta.get('arch_sha')}, not {_arch_sha(arch)}")
    if meta.get("config_hash") != config.config_hash():
        raise BadWeights(
            f"weights config hash {meta.get('config_hash')} does not match current {config.config_hash()}"
        )
    try:
        dnet.store.load_state({k[2:]: v for k, v in arrays.items() if k.startswith("p/")})
    except TensorError as e:
        raise BadWeights(f"weights do not fit the architecture: {e}") from e


# --------------------------------------------------------------------------
# Commands


def cmd_bench_lat(args) -> int:
    config = load_config(args)
    run = RunDir(_resolve_out(args))
    table_path = _resolve_table_path(args, run)
    if table_path.exists() and not _force(args):
        raise Overwrite(f"refusing to overwrite {table_path} (pass --force)")
    with RunLock(run.path):
        table = bench_table(config)
        table.save(table_path)
        run.update(config, "bench", {"latency_table": table_path})
    keys = plan_keys(network_plan(config))
    ops = sorted({k[0] for k in keys})
    shapes = sorted({k[1:] for k in keys})
    print(f"measured {len(keys)} entries: {len(ops)} ops x {len(shapes)} shape classes -> {table_path}")
    return EXIT_OK


def cmd_search(args) -> int:
    config = load_config(args)
    run = RunDir(_resolve_out(args))
    table = _load_table(_resolve_table_path(args, run))
    checkpoint_path = run.file("checkpoint.npz")
    if checkpoint_path.exists() and not _force(args) and not args.resume:
        raise Overwrite(f"refusing to overwrite {checkpoint_path} (pass --force or --resume)")
    if args.resume and not Path(args.resume).exists():
        raise MissingArtifact(f"resume checkpoint not found: {args.resume}")
    with RunLock(run.path):
        try:
            result = engine.search(config, table, out_dir=run.path,
                                   resume_from=args.resume if args.resume else None)
        except LatencyError as e:
            raise ArtifactError(f"latency table does not cover the configured network: {e}") from e
        metrics_path = run.file("metrics.csv")
        metrics_path.write_text(result.trajectory.metrics_csv())
        trajectory_path = result.trajectory.save(run.file("trajectory.json"))
        run.update(config, "search", {
            "checkpoint": result.checkpoint_path,
            "metrics_csv": metrics_path,
            "trajectory": trajectory_path,
        })
    final = result.trajectory.records[-1]
    print(f"search done: {config.epochs} epochs, final depths {final['depths']}, "
          f"expected latency {final['expected_latency_us']:.1f} us -> {result.checkpoint_path}")
    return EXIT_OK


def cmd_derive(args) -> int:
    config = load_config(args)
    run = RunDir(_resolve_out(args))
    checkpoint_path = Path(args.checkpoint) if args.checkpoint else run.file("checkpoint.npz")
    if not checkpoint_path.exists():
        raise MissingArtifact(f"checkpoint not found: {checkpoint_path} (run `segnas search` first)")
    try:
        ck_config, network, _ = network_from_checkpoint(checkpoint_path)
    except TensorError as e:
        raise ArtifactError(f"bad checkpoint {checkpoint_path}: {e}") from e
    if ck_config.config_hash() != config.config_hash():
        raise ArtifactError(
            f"checkpoint config hash {ck_config.config_hash()} does not match current {config.config_hash()}"
        )
    arch_path = run.file("architecture.json")
    if arch_path.exists() and not _force(args):
        raise Overwrite(f"refusing to overwrite {arch_path} (pass --force)")
    with RunLock(run.path):
        arch = derive(network)
        arch.save(arch_path)
        run.update(config, "derive", {"architecture": arch_path})
    print(f"derived depths {list(arch.depths())} -> {arch_path}")
    return EXIT_OK


def cmd_retrain(args) -> int:
    config = load_config(args)
    run = RunDir(_resolve_out(args))
    arch = _load_arch(Path(args.arch) if args.arch else run.file("architecture.json"))
    weights_path = run.file("weights.npz")
    if weights_path.exists() and not _force(args):
        raise Overwrite(f"refusing to overwrite {weights_path} (pass --force)")
    with RunLock(run.path):
        result = engine.retrain(arch, config, epochs=args.epochs)
        save_weights(weights_path, result["network"], config, arch)
        history_path = run.file("retrain.json")
        history_path.write_text(json.dumps(
            {"best_val_miou": result["best_val_miou"], "history": result["history"]},
            indent=2, sort_keys=True))
        run.update(config, "retrain", {"weights": weights_path, "retrain_history": history_path})
    print(f"retrained {args.epochs or config.retrain_epochs} epochs, "
          f"best val mIoU {result['best_val_miou']:.4f} -> {weights_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_config(args)
    run = RunDir(_resolve_out(args))
    arch = _load_arch(Path(args.arch) if args.arch else run.file("architecture.json"))
    dnet = DiscreteNetwork(arch, rng=config.seed)
    load_weights(Path(args.weights) if args.weights else run.file("weights.npz"), dnet, config, arch)
    table_path = _resolve_table_path(args, run)
    table = _load_table(table_path) if table_path.exists() else None
    try:
        metrics = engine.evaluate_architecture(arch, dnet, config, args.split, table)
    except LatencyError as e:
        raise ArtifactError(f"latency table does not cover this architecture: {e}") from e
    eval_path = run.file(f"eval_{args.split}.json")
    with RunLock(run.path):
        eval_path.write_text(json.dumps(metrics, indent=2, sort_keys=True))
        run.update(config, f"eval_{args.split}", {f"eval_{args.split}": eval_path})
    lat = f", cell latency {metrics['latency_cells_us']:.1f} us" if "latency_cells_us" in metrics else ""
    print(f"{args.split}: mIoU {metrics['miou']:.4f}, CE {metrics['ce']:.4f}{lat} -> {eval_path}")
    return EXIT_OK


def cmd_random_search(args) -> int:
    config = load_config(args)
    run = RunDir(_resolve_out(args))
    table = _load_table(_resolve_table_path(args, run))
    out_path = run.file("random_search.json")
    if out_path.exists() and not _force(args):
        raise Overwrite(f"refusing to overwrite {out_path} (pass --force)")
    with RunLock(run.path):
        try:
            result = engine.random_search_baseline(config, table, num_samples=args.samples,
                                                   retrain_epochs=args.epochs)
        except LatencyError as e:
            raise ArtifactError(f"latency table does not cover the configured network: {e}") from e
        doc = {
            "mean_miou": result["mean_miou"],
            "std_miou": result["std_miou"],
            "best_index": result["best_index"],
            "samples": [{
                "index": s["index"], "depths": s["depths"], "miou": s["miou"],
                "latency_cells_us": s["latency_cells_us"], "latency_agg_us": s["latency_agg_us"],
                "architecture": s["arch"].to_json_dict(),
            } for s in result["samples"]],
        }
        out_path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        best = result["samples"][result["best_index"]]
        best_path = run.file("random_best_architecture.json")
        best["arch"].save(best_path)
        run.update(config, "random-search", {"random_search": out_path, "random_best": best_path})
    print(f"random search: mIoU {result['mean_miou']:.4f} +/- {result['std_miou']:.4f} "
          f"over {args.samples} samples -> {out_path}")
    return EXIT_OK


def cmd_export_plots(args) -> int:
    run = RunDir(_resolve_out(args))
    trajectory_path = run.file("trajectory.json")
    if not trajectory_path.exists():
        raise MissingArtifact(f"trajectory not found: {trajectory_path} (run `segnas search` first)")
    try:
        trajectory = TrajectoryLog.load(trajectory_path)
    except TensorError as e:
        raise ArtifactError(f"bad trajectory file: {e}") from e
    plots = run.file("plots")
    plots.mkdir(exist_ok=True)
    with RunLock(run.path):
        for s in range(3):
            lines = ["epoch,actual_depth,expected_depth"]
            for r in trajectory.records:
                lines.append(f"{r['epoch']},{r['depths'][s]},{repr(r['expected_depths'][s])}")
            (plots / f"depth_hc{s + 1}.csv").write_text("\n".join(lines) + "\n")
        sweep_rows = []
        for run_dir in [run.path] + [Path(p) for p in (args.runs or [])]:
            row = _sweep_row(RunDir(run_dir))
            if row is not None:
                sweep_rows.append(row)
        sweep_path = plots / "gamma_sweep.csv"
        lines = ["gamma,latency_cells_us,miou,run"]
        for gamma, lat, miou_v, name in sorted(sweep_rows):
            lines.append(f"{repr(gamma)},{repr(lat)},{repr(miou_v)},{name}")
        sweep_path.write_text("\n".join(lines) + "\n")
        run.update_stage("export-plots", {"plots": plots})
    print(f"exported {len(trajectory.records)}-epoch depth series and {len(sweep_rows)}-row sweep -> {plots}")
    return EXIT_OK


def _sweep_row(run: RunDir):
    eval_path = run.file("eval_val.json")
    ck_path = run.file("checkpoint.npz")
    if not eval_path.exists() or not ck_path.exists():
        return None
    metrics = json.loads(eval_path.read_text())
    ck_config, _ = load_checkpoint(ck_path)
    return (ck_config.gamma, metrics.get("latency_cells_us", float("nan")),
            metrics["miou"], run.path.name)


def cmd_print_config(args) -> int:
    config = load_config(args)
    print(yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=False), end="")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segnas",
        description="Joint cell/depth/aggregation architecture search on the ShapesWorld task.",
        epilog=f"Flags can also be set via environment variables with the {ENV_PREFIX} prefix "
               f"({ENV_PREFIX}CONFIG, {ENV_PREFIX}SEED, {ENV_PREFIX}OUT, {ENV_PREFIX}TABLE, {ENV_PREFIX}FORCE).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="run directory (default: ./run)")
        p.add_argument("--table", help="latency table path (default: <out>/latency.json)")
        p.add_argument("--force", action="store_true", help="overwrite existing artifacts")

    p = sub.add_parser("bench-lat", help="measure the op latency table on this host")
    common(p)
    p.set_defaults(fn=cmd_bench_lat)

    p = sub.add_parser("search", help="run the joint weight/architecture search")
    common(p)
    p.add_argument("--resume", help="resume from a checkpoint file")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("derive", help="discretize a search checkpoint into an architecture")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.npz)")
    p.set_defaults(fn=cmd_derive)

    p = sub.add_parser("retrain", help="train a derived architecture from scratch")
    common(p)
    p.add_argument("--arch", help="architecture JSON (default: <out>/architecture.json)")
    p.add_argument("--epochs", type=int, help="override the retrain epoch budget")
    p.set_defaults(fn=cmd_retrain)

    p = sub.add_parser("eval", help="evaluate retrained weights on a split")
    common(p)
    p.add_argument("--arch", help="architecture JSON (default: <out>/architecture.json)")
    p.add_argument("--weights", help="weights file (default: <out>/weights.npz)")
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("random-search", help="retrain uniformly sampled architectures")
    common(p)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--epochs", type=int, help="retrain budget per sample")
    p.set_defaults(fn=cmd_random_search)

    p = sub.add_parser("export-plots", help="emit depth-trajectory and gamma-sweep CSVs")
    common(p)
    p.add_argument("--runs", nargs="*", help="additional run dirs for the gamma sweep table")
    p.set_defaults(fn=cmd_export_plots)

    p = sub.add_parser("print-config", help="print the resolved configuration")
    common(p)
    p.set_defaults(fn=cmd_print_config)
    return parser


_ERROR_CODES = (
    (ConfigError, EXIT_CONFIG),
    (MissingArtifact, EXIT_MISSING),
    (BadWeights, EXIT_WEIGHTS),
    (ArtifactError, EXIT_ARTIFACT),
    (Overwrite, EXIT_OVERWRITE),
    (SearchDiverged, EXIT_DIVERGED),
    (LatencyError, EXIT_TIMER),
    (RunLocked, EXIT_LOCKED),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except tuple(e for e, _ in _ERROR_CODES) as err:
        for etype, code in _ERROR_CODES:
            if isinstance(err, etype):
                print(f"error: {err}", file=sys.stderr)
                return code
        raise AssertionError("unreachable")
    except Exception as err:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"unexpected error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
