"""CSV and JSON report writers, and merging of metrics files."""

import csv
import json
import math
from dataclasses import asdict, is_dataclass

import numpy as np


def _plain(value):
    if is_dataclass(value) and not isinstance(value, type):
        return _plain(asdict(value))
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return _plain(value.item())
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json_report(path, config, metrics):
    """Summary document: ``{"config": {...}, "metrics": {...}}``."""
    with open(path, "w") as fh:
        json.dump({"config": _plain(config), "metrics": _plain(metrics)}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_rows_csv(path, rows, fieldnames=None):
    rows = list(rows)
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def read_rows_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


COMPARE_FIELDS = [
    "algo", "ega", "compression", "source", "rounds", "final_accuracy", "best_accuracy",
    "final_loss", "uplink_bytes",
]


def summarize_metrics(rows, source="", compression=1.0):
    """One comparison row from a metrics stream (dict rows as read from CSV)."""
    acc = [float(r["accuracy"]) for r in rows]
    finite = [a for a in acc if math.isfinite(a)]
    return {
        "algo": rows[0]["algo"] if rows else "",
        "ega": int(rows[0]["ega"]) if rows else 0,
        "compression": compression,
        "source": source,
        "rounds": len(rows),
        "final_accuracy": acc[-1] if acc else float("nan"),
        "best_accuracy": max(finite) if finite else float("nan"),
        "final_loss": float(rows[-1]["loss"]) if rows else float("nan"),
        "uplink_bytes": sum(int(r["uplink_bytes"]) for r in rows),
    }


def merge_metrics(paths, compressions=None):
    """Comparison table keyed by ``(algo, ega, compression)``, sorted by key."""
    compressions = compressions or [1.0] * len(paths)
    table = [
        summarize_metrics(read_rows_csv(p), str(p), c) for p, c in zip(paths, compressions)
    ]
    return sorted(table, key=lambda r: (r["algo"], r["ega"], r["compression"], r["source"]))
