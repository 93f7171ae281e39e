"""Dataset CSV format: header ``x0,...,x{d-1},<cond1>,...``.

Floats are written with 17 significant digits so a round trip is lossless;
condition columns hold non-negative integers.
"""

from __future__ import annotations

import csv
import re
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError
from .flow_model import ConditionSpec, LabeledDataset

_STATE_COL = re.compile(r"^x(\d+)$")


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_dataset(path, points, labels=None, condition_names: Sequence[str] = ()) -> None:
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    labels = np.zeros((n, 0), dtype=np.int64) if labels is None else np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    if labels.shape != (n, len(condition_names)):
        raise ConfigurationError("one label column per condition name is required")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(d)] + list(condition_names))
        for row, lab in zip(points, labels):
            w.writerow([fmt(v) for v in row] + [str(int(v)) for v in lab])


def write_labeled(path, ds: LabeledDataset) -> None:
    write_dataset(path, ds.points, ds.labels, ds.condition_spec.names)


def read_dataset(path):
    """Returns ``(points, labels, condition_names)``."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read dataset {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigurationError(f"{path}: empty file") from None
        d = 0
        while d < len(header) and _STATE_COL.match(header[d]) and header[d] == f"x{d}":
            d += 1
        if d == 0:
            raise ConfigurationError(f"{path}: header must start with x0")
        names = header[d:]
        pts, labs = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ConfigurationError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                pts.append([float(v) for v in row[:d]])
                labs.append([int(v) for v in row[d:]])
            except ValueError as exc:
                raise ConfigurationError(f"{path}:{lineno}: {exc}") from exc
    points = np.array(pts, dtype=np.float64).reshape(-1, d)
    labels = np.array(labs, dtype=np.int64).reshape(len(pts), len(names))
    if labels.size and labels.min() < 0:
        raise ConfigurationError(f"{path}: condition labels must be non-negative")
    if not np.all(np.isfinite(points)):
        raise ConfigurationError(f"{path}: non-finite coordinates")
    return points, labels, names


def read_labeled(path, condition_spec: Optional[ConditionSpec] = None) -> LabeledDataset:
    points, labels, names = read_dataset(path)
    if condition_spec is None:
        if not names:
            raise ConfigurationError(f"{path}: no condition columns to train on")
        condition_spec = ConditionSpec.infer(names, labels)
    elif list(names) != condition_spec.names:
        raise ConfigurationError(
            f"{path}: condition columns {names} do not match {condition_spec.names}")
    return LabeledDataset(points, labels, condition_spec)
