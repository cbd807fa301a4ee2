"""Runs configured experiments and persists metrics, manifests and partition summaries."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from .. import __version__
from .. import data as data_mod
from .. import federation as fed
from ..numerics import RngStream
from .config import ConfigError, ExperimentConfig, dump_config

logger = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "run_seed",
    "round",
    "strategy",
    "ce",
    "l_v",
    "l_u",
    "prox",
    "total",
    "test_accuracy",
    "sv_mean",
    "sv_values",
    "wall_seconds",
)
METRICS_FILE = "metrics.csv"
MANIFEST_FILE = "manifest.json"
RESOLVED_CONFIG_FILE = "config.resolved.yaml"

# Stream labels for data preparation; federation uses its own labels under the same seed.
_GEN, _SHIFT, _SPLIT, _PARTITION = 100, 101, 102, 103


class RunError(RuntimeError):
    pass


@dataclass
class PreparedData:
    train: data_mod.Dataset
    test: data_mod.Dataset
    plan: data_mod.PartitionPlan


def prepare_data(cfg: ExperimentConfig, seed: int) -> PreparedData:
    root = RngStream(seed)
    d = cfg.data
    if d.source == "synthetic":
        s = d.synthetic
        spec = data_mod.SyntheticSpec(
            s.num_classes, s.input_dim, s.samples_per_class, s.cluster_spread, s.class_mean_scale
        )
        ds = data_mod.gen_blobs(spec, root.child(_GEN))
    else:
        c = d.csv
        ds = data_mod.load_csv_dataset(c.path, c.label_column, c.feature_columns, c.header)
    if d.domain_shift:
        ds = data_mod.apply_domain_shift(ds, [t.build() for t in d.domain_shift], root.child(_SHIFT))
    train, test = data_mod.split_train_test(ds, d.test_fraction, root.child(_SPLIT))
    k = cfg.federation.num_clients
    part = d.partition
    if part.kind == "dirichlet":
        plan = data_mod.dirichlet_partition(train.labels, k, part.alpha, root.child(_PARTITION))
    elif part.kind == "iid":
        plan = data_mod.iid_partition(len(train), k, root.child(_PARTITION))
    else:
        plan = data_mod.by_domain_partition(train, k)
    return PreparedData(train, test, plan)


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_rows(run_seed: int, strategy: str, reports: list[fed.RoundReport]) -> list[list[str]]:
    rows = []
    for rep in reports:
        m = rep.mean_loss
        sv = rep.singular_values
        rows.append(
            [
                str(run_seed),
                str(rep.round),
                strategy,
                _fmt(m.ce),
                _fmt(m.l_v),
                _fmt(m.l_u),
                _fmt(m.prox),
                _fmt(m.total),
                _fmt(rep.test_accuracy),
                _fmt(np.mean(sv)),
                ";".join(_fmt(v) for v in sv),
                f"{rep.wall_seconds:.6f}",
            ]
        )
    return rows


def write_metrics(path: Path, rows: list[list[str]]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV, checking the header and every row's shape."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise RunError(f"cannot read {path}: {exc}") from None
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise RunError(f"{path}: empty metrics file")
    if tuple(header) != METRICS_COLUMNS:
        raise RunError(f"{path}:1: unexpected header {header}")
    rows = []
    for lineno, raw in enumerate(reader, start=2):
        if len(raw) != len(METRICS_COLUMNS):
            raise RunError(f"{path}:{lineno}: expected {len(METRICS_COLUMNS)} fields, got {len(raw)}")
        rec = dict(zip(METRICS_COLUMNS, raw))
        try:
            row = {
                "run_seed": int(rec["run_seed"]),
                "round": int(rec["round"]),
                "strategy": rec["strategy"],
                **{k: float(rec[k]) for k in ("ce", "l_v", "l_u", "prox", "total", "test_accuracy", "sv_mean")},
                "sv_values": [float(v) for v in rec["sv_values"].split(";")],
                "wall_seconds": float(rec["wall_seconds"]),
            }
        except ValueError as exc:
            raise RunError(f"{path}:{lineno}: {exc}") from None
        rows.append(row)
    if not rows:
        raise RunError(f"{path}: no data rows")
    return rows


def run_seeds(cfg: ExperimentConfig) -> list[int]:
    return [cfg.seed + r for r in range(cfg.repeats)]


def run_command(cfg: ExperimentConfig, out_dir=None, workers: int = 1, progress=None) -> Path:
    """Run every repeat of ``cfg`` and write metrics, manifest and resolved config."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"), timeout=0)
    try:
        lock.acquire()
    except Timeout:
        raise RunError(f"output directory {out} is in use by another run") from None
    try:
        rows, seeds_info = [], []
        for seed in run_seeds(cfg):
            prepared = prepare_data(cfg, seed)
            d = prepared.train.num_classes
            rcfg = cfg.round_config(d, seed)
            mcfg = cfg.mlp_config(prepared.train.input_dim, d)
            result = fed.run_experiment(rcfg, prepared.train, prepared.test, prepared.plan, mcfg, workers, progress)
            rows.extend(metrics_rows(seed, rcfg.strategy.name, result.reports))
            seeds_info.append(
                {
                    "seed": seed,
                    "train_samples": len(prepared.train),
                    "test_samples": len(prepared.test),
                    "client_sizes": [int(a.size) for a in prepared.plan.assignments],
                    "partition_notes": prepared.plan.notes,
                    "final_test_accuracy": result.reports[-1].test_accuracy,
                }
            )
        metrics_path = write_metrics(out / METRICS_FILE, rows)
        dump_config(cfg, out / RESOLVED_CONFIG_FILE)
        manifest = {
            "package_version": __version__,
            "config": cfg.to_dict(),
            "lambda": cfg.objectives.lam,
            "num_classes": d,
            "workers": workers,
            "runs": seeds_info,
            "metrics_file": METRICS_FILE,
            "metrics_columns": list(METRICS_COLUMNS),
        }
        (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        return metrics_path
    finally:
        lock.release()


def gini(values) -> float:
    """Gini coefficient of a non-negative vector (0 = perfectly even)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = v.size
    if n == 0 or v.sum() == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    return float((2 * np.sum(ranks * v) / (n * v.sum())) - (n + 1) / n)


def partition_inspect(cfg: ExperimentConfig, out_dir=None) -> tuple[str, str]:
    """Per-client class histograms for the first seed. Returns (text, csv)."""
    seed = cfg.seed
    prepared = prepare_data(cfg, seed)
    d = prepared.train.num_classes
    hist = prepared.plan.histograms(prepared.train.labels, d)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["client", "n_k", "max_class_share", "gini"] + [f"class_{j}" for j in range(d)])
    lines = [
        f"partition kind={prepared.plan.kind} alpha={prepared.plan.alpha} clients={prepared.plan.num_clients} "
        f"train_samples={len(prepared.train)} seed={seed}"
    ]
    for k, h in enumerate(hist):
        n_k = int(h.sum())
        share = float(h.max() / n_k)
        g = gini(h)
        w.writerow([k, n_k, f"{share:.4f}", f"{g:.4f}"] + [int(v) for v in h])
        lines.append(f"client {k:3d}  n_k={n_k:6d}  max_share={share:.3f}  gini={g:.3f}  hist={h.tolist()}")
    shares = hist.max(axis=1) / hist.sum(axis=1)
    lines.append(
        f"median max_class_share={np.median(shares):.3f}  client-size gini={gini(hist.sum(axis=1)):.3f}"
    )
    for note in prepared.plan.notes:
        lines.append(f"note: {note}")
    text, table = "\n".join(lines), buf.getvalue()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "partition_summary.csv").write_text(table, encoding="utf-8")
    return text, table


__all__ = [
    "ConfigError",
    "METRICS_COLUMNS",
    "RunError",
    "partition_inspect",
    "prepare_data",
    "read_metrics",
    "run_command",
    "write_metrics",
]
