"""Command-line entry point.

Subcommands:
  gen-synthetic   render a synthetic onset/apex dataset + manifest
  extract-flow    manifest -> one .flow feature-map file per sample
  train           train one model on the full manifest, save a checkpoint
  loso            leave-one-subject-out evaluation -> metrics.json + figures
  report          re-render summary/figure from an existing metrics.json

Configuration is a flat JSON file of dotted keys ("model.heads": 3) merged
with command-line overrides; every resolved value is echoed into
metrics.json so a run can be reproduced from its own output.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import CLASS_NAMES, DatasetManifest, gen_synthetic, load_manifest
from .errors import AhmsaError, ConfigError, ValidationError
from .model import ModelConfig, save_checkpoint
from .optflow import (
    TVL1Params,
    extract_feature_map,
    read_flow_map,
    read_pgm,
    write_flow_map,
)
from .train import TrainConfig, run_loso, train_fold

THREAD_ENV_VAR = "AHMSA_THREADS"


@dataclass(frozen=True)
class FlowOptions:
    """Feature-extraction knobs that sit outside the TV-L1 solver."""

    region_px: int = 28
    include_nose: bool = False
    norm: str = "standardize"

    def validate(self) -> None:
        problems = []
        if self.region_px < 1:
            problems.append(f"flow.region_px must be positive, got {self.region_px}")
        if self.norm not in ("standardize", "none"):
            problems.append(f"flow.norm must be 'standardize' or 'none', got {self.norm!r}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration for one command invocation."""

    model: ModelConfig
    train: TrainConfig
    tvl1: TVL1Params
    flow: FlowOptions

    def validate(self) -> None:
        problems = []
        for section in (self.model, self.train, self.flow):
            try:
                section.validate()
            except ConfigError as exc:
                problems.append(str(exc))
        if problems:
            raise ConfigError("; ".join(problems))

    def flat_dict(self) -> dict:
        out = {}
        for section_name, section in (("model", self.model), ("train", self.train),
                                      ("tvl1", self.tvl1), ("flow", self.flow)):
            for f in fields(section):
                value = getattr(section, f.name)
                if isinstance(value, tuple):
                    value = list(value)
                out[f"{section_name}.{f.name}"] = value
        return dict(sorted(out.items()))


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "tvl1": TVL1Params,
    "flow": FlowOptions,
}


def build_run_config(config_path: str | None,
                     overrides: dict[str, object]) -> RunConfig:
    """File values first, then CLI overrides; unknown keys are all reported."""
    values: dict[str, object] = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object of dotted keys")
        values.update(loaded)
    values.update(overrides)

    known = {
        f"{section}.{f.name}"
        for section, cls in _SECTIONS.items()
        for f in fields(cls)
    }
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    per_section: dict[str, dict] = {name: {} for name in _SECTIONS}
    for key, value in values.items():
        section, field_name = key.split(".", 1)
        if field_name == "blocks_per_layer" and isinstance(value, list):
            value = tuple(value)
        per_section[section][field_name] = value

    try:
        run = RunConfig(
            model=ModelConfig(**per_section["model"]),
            train=TrainConfig(**per_section["train"]),
            tvl1=TVL1Params(**per_section["tvl1"]),
            flow=FlowOptions(**per_section["flow"]),
        )
    except (ValidationError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    run.validate()
    return run


# -- flow-map plumbing -----------------------------------------------------------


def flow_file_name(sample) -> str:
    return f"{sample.database_id}_{sample.subject_id}_{sample.sample_id}.flow"


def _extract_one(sample, run: RunConfig) -> np.ndarray:
    onset = read_pgm(sample.onset_path)
    apex = read_pgm(sample.apex_path)
    return extract_feature_map(
        onset, apex, sample.landmarks,
        tvl1_params=run.tvl1,
        region_px=run.flow.region_px,
        out_size=run.model.h_flow,
        include_nose=run.flow.include_nose,
        norm=run.flow.norm,
    )


def load_feature_maps(manifest: DatasetManifest, flow_dir: Path | None,
                      extract: bool, run: RunConfig) -> np.ndarray:
    """Feature maps aligned with manifest order, from files or computed inline."""
    maps = []
    for sample in manifest.samples:
        if extract:
            maps.append(_extract_one(sample, run))
        else:
            if flow_dir is None:
                raise ValidationError(
                    "either --flow-dir or --extract is required to obtain feature maps"
                )
            path = flow_dir / flow_file_name(sample)
            if not path.is_file():
                raise ValidationError(
                    f"flow file missing for sample {sample.sample_id!r}: {path} "
                    "(run extract-flow first, or pass --extract)"
                )
            maps.append(read_flow_map(path))
    return np.stack(maps).astype(np.float32)


# -- report artifacts ---------------------------------------------------------------


def confusion_to_csv(counts, class_names=CLASS_NAMES) -> str:
    lines = ["true\\pred," + ",".join(class_names)]
    for name, row in zip(class_names, counts):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def confusion_to_svg(counts, class_names=CLASS_NAMES) -> str:
    """Hand-emitted heatmap: count + row-normalized percentage per cell."""
    counts = np.asarray(counts)
    n = len(class_names)
    cell, margin_left, margin_top = 90, 110, 60
    width = margin_left + n * cell + 20
    height = margin_top + n * cell + 40
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" font-family="sans-serif" font-size="13">',
        f'<text x="{margin_left + n * cell / 2:.0f}" y="24" '
        'text-anchor="middle" font-size="15">Pooled confusion matrix</text>',
    ]
    row_sums = counts.sum(axis=1)
    for i, true_name in enumerate(class_names):
        y = margin_top + i * cell
        parts.append(
            f'<text x="{margin_left - 8}" y="{y + cell / 2 + 4:.0f}" '
            f'text-anchor="end">{true_name}</text>'
        )
        for j in range(n):
            x = margin_left + j * cell
            frac = counts[i, j] / row_sums[i] if row_sums[i] else 0.0
            # white -> blue ramp on the row-normalized fraction
            r = int(round(255 - 160 * frac))
            g = int(round(255 - 120 * frac))
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="rgb({r},{g},255)" stroke="#666"/>'
            )
            parts.append(
                f'<text x="{x + cell / 2}" y="{y + cell / 2 - 4}" '
                f'text-anchor="middle">{int(counts[i, j])}</text>'
            )
            parts.append(
                f'<text x="{x + cell / 2}" y="{y + cell / 2 + 16}" '
                f'text-anchor="middle" font-size="11">{100 * frac:.1f}%</text>'
            )
    for j, pred_name in enumerate(class_names):
        x = margin_left + j * cell
        parts.append(
            f'<text x="{x + cell / 2}" y="{margin_top - 10}" '
            f'text-anchor="middle">{pred_name}</text>'
        )
    parts.append(
        f'<text x="{margin_left + n * cell / 2:.0f}" y="{height - 10}" '
        'text-anchor="middle" font-size="12">columns: predicted / rows: true</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _write_report_files(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    counts = payload["pooled"]["confusion"]
    (out_dir / "confusion_pooled.csv").write_text(confusion_to_csv(counts),
                                                  encoding="utf-8")
    (out_dir / "confusion_pooled.svg").write_text(confusion_to_svg(counts),
                                                  encoding="utf-8")
    print(f"wrote {metrics_path}")


# -- subcommands ------------------------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    try:
        _, manifest_path = gen_synthetic(
            args.out_dir, seed=args.seed, n_subjects=args.subjects,
            samples_per_subject=args.samples_per_subject,
            image_size=args.image_size,
        )
    except ValidationError as exc:
        # argument validation, not a runtime failure
        raise ConfigError(str(exc)) from exc
    print(manifest_path)
    return 0


def cmd_extract_flow(args) -> int:
    run = build_run_config(args.config, _collect_overrides(args))
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for i, sample in enumerate(manifest.samples, start=1):
        try:
            fmap = _extract_one(sample, run)
            write_flow_map(out_dir / flow_file_name(sample), fmap)
            print(f"[{i}/{len(manifest)}] {sample.sample_id}", file=sys.stderr)
        except (AhmsaError, OSError) as exc:
            failures += 1
            print(f"[{i}/{len(manifest)}] {sample.sample_id} FAILED: {exc}",
                  file=sys.stderr)
    if failures:
        print(f"{failures}/{len(manifest)} samples failed", file=sys.stderr)
        return 1
    return 0


def _parallel_folds(args) -> int:
    requested = args.parallel_folds
    env_cap = os.environ.get(THREAD_ENV_VAR)
    if env_cap is not None:
        try:
            requested = min(requested, max(1, int(env_cap)))
        except ValueError:
            raise ConfigError(
                f"{THREAD_ENV_VAR} must be an integer, got {env_cap!r}"
            ) from None
    return max(1, requested)


def cmd_loso(args) -> int:
    run = build_run_config(args.config, _collect_overrides(args))
    manifest = load_manifest(args.manifest)
    flow_dir = Path(args.flow_dir) if args.flow_dir else None
    maps = load_feature_maps(manifest, flow_dir, args.extract, run)
    report = run_loso(manifest, maps, run.model, run.train,
                      parallel_folds=_parallel_folds(args))
    payload = report.to_json_dict()
    payload["config"] = run.flat_dict()
    _write_report_files(Path(args.out_dir), payload)
    print(f"pooled UF1 {payload['pooled']['uf1']:.4f} "
          f"UAR {payload['pooled']['uar']:.4f}")
    return 0


def cmd_train(args) -> int:
    run = build_run_config(args.config, _collect_overrides(args))
    manifest = load_manifest(args.manifest)
    flow_dir = Path(args.flow_dir) if args.flow_dir else None
    maps = load_feature_maps(manifest, flow_dir, args.extract, run)
    params, history = train_fold(maps, manifest.labels(), run.model, run.train)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_path, params)
    print(f"final mean loss {history[-1]:.6f}")
    print(out_path)
    return 0


def cmd_report(args) -> int:
    path = Path(args.metrics)
    if not path.is_file():
        raise ValidationError(f"metrics file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        pooled = payload["pooled"]
        pooled["uf1"], pooled["uar"], pooled["confusion"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: not a metrics report: {exc}") from exc
    print(f"pooled: UF1 {pooled['uf1']:.4f}  UAR {pooled['uar']:.4f}")
    for db, block in sorted(payload.get("per_database", {}).items()):
        print(f"{db}: UF1 {block['uf1']:.4f}  UAR {block['uar']:.4f}")
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "confusion_pooled.csv").write_text(
            confusion_to_csv(pooled["confusion"]), encoding="utf-8")
        (out_dir / "confusion_pooled.svg").write_text(
            confusion_to_svg(pooled["confusion"]), encoding="utf-8")
        print(f"wrote figures to {out_dir}")
    return 0


# -- argument wiring ---------------------------------------------------------------------


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat JSON config of dotted keys")
    group = parser.add_argument_group("config overrides")
    group.add_argument("--epochs", type=int)
    group.add_argument("--batch-size", type=int)
    group.add_argument("--lr", type=float)
    group.add_argument("--seed", type=int)
    group.add_argument("--blocks", help="comma list, e.g. 1,1,8")
    group.add_argument("--layers", type=int)
    group.add_argument("--scale-factor", type=int)
    group.add_argument("--heads", type=int)
    group.add_argument("--embed-channels", type=int)
    group.add_argument("--include-nose", action="store_true", default=None)


_OVERRIDE_KEYS = {
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.learning_rate",
    "seed": "train.seed",
    "layers": "model.n_layers",
    "scale_factor": "model.downsample_factor",
    "heads": "model.heads",
    "embed_channels": "model.embed_channels",
    "include_nose": "flow.include_nose",
}


def _collect_overrides(args) -> dict[str, object]:
    overrides: dict[str, object] = {}
    for attr, key in _OVERRIDE_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    blocks = getattr(args, "blocks", None)
    if blocks is not None:
        try:
            overrides["model.blocks_per_layer"] = tuple(
                int(part) for part in blocks.split(","))
        except ValueError:
            raise ConfigError(
                f"--blocks must be a comma list of integers, got {blocks!r}"
            ) from None
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ahmsa",
        description="Micro-expression recognition from onset/apex optical flow",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="render a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--subjects", type=int, default=6)
    p.add_argument("--samples-per-subject", type=int, default=9)
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("extract-flow", help="manifest -> .flow files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    _add_config_arguments(p)
    p.set_defaults(func=cmd_extract_flow)

    p = sub.add_parser("loso", help="leave-one-subject-out evaluation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--flow-dir", help="directory of precomputed .flow files")
    p.add_argument("--extract", action="store_true",
                   help="compute feature maps inline instead of reading files")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--parallel-folds", type=int, default=1)
    _add_config_arguments(p)
    p.set_defaults(func=cmd_loso)

    p = sub.add_parser("train", help="train on the full manifest, save checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--flow-dir")
    p.add_argument("--extract", action="store_true")
    p.add_argument("--out", default="model.ckpt")
    _add_config_arguments(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="summarize an existing metrics.json")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_report)

    for action in sub.choices.values():
        action.add_argument("--version", action="version", version=__version__)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (AhmsaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
