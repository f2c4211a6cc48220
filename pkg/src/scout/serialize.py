"""File formats: dataset CSV, truth sidecar, checkpoints, metrics JSON.

Floats are printed with 17 significant digits so every artifact
round-trips bit-exactly and reruns with equal seeds are byte-identical.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from .graphs import DirectedGraph
from .simulator import Dataset, InterventionSpec

__all__ = [
    "fmt17",
    "dumps_json",
    "dataset_to_csv",
    "dataset_from_csv",
    "truth_to_obj",
    "truth_from_obj",
    "save_checkpoint",
    "load_checkpoint",
]


def fmt17(x: float) -> str:
    x = float(x)
    if not np.isfinite(x):
        raise ValueError(f"refusing to serialize non-finite float {x}")
    return format(x, ".17g")


def _write_value(out: list[str], v) -> None:
    if v is None:
        out.append("null")
    elif isinstance(v, (bool, np.bool_)):
        out.append("true" if v else "false")
    elif isinstance(v, (int, np.integer)):
        out.append(str(int(v)))
    elif isinstance(v, (float, np.floating)):
        out.append(fmt17(v))
    elif isinstance(v, str):
        out.append(json.dumps(v))
    elif isinstance(v, np.ndarray):
        _write_value(out, v.tolist())
    elif isinstance(v, dict):
        out.append("{")
        for i, (k, vv) in enumerate(v.items()):
            if i:
                out.append(", ")
            out.append(json.dumps(str(k)))
            out.append(": ")
            _write_value(out, vv)
        out.append("}")
    elif isinstance(v, (list, tuple)):
        out.append("[")
        for i, vv in enumerate(v):
            if i:
                out.append(", ")
            _write_value(out, vv)
        out.append("]")
    else:
        raise TypeError(f"cannot serialize {type(v)!r}")


def dumps_json(obj) -> str:
    """Deterministic JSON with 17-significant-digit floats."""
    out: list[str] = []
    _write_value(out, obj)
    return "".join(out) + "\n"


# --- dataset CSV --------------------------------------------------------------


def dataset_to_csv(dataset: Dataset) -> str:
    d = dataset.d
    buf = io.StringIO()
    buf.write(",".join(f"x{i}" for i in range(d)) + ",experiment\n")
    for row, k in zip(dataset.x, dataset.experiment):
        buf.write(",".join(fmt17(v) for v in row))
        buf.write(f",{int(k)}\n")
    return buf.getvalue()


def dataset_from_csv(text: str, n_experiments: int | None = None) -> Dataset:
    lines = text.strip().splitlines()
    header = lines[0].split(",")
    if header[-1] != "experiment" or not header[0].startswith("x"):
        raise ValueError("not a dataset CSV (expected x0..x{d-1},experiment header)")
    d = len(header) - 1
    data = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", ndmin=2)
    x = data[:, :d]
    k = data[:, d].astype(np.int64)
    if n_experiments is None:
        n_experiments = int(k.max()) + 1 if len(k) else 1
    return Dataset(x=x, experiment=k, n_experiments=n_experiments)


# --- truth sidecar --------------------------------------------------------------


def truth_to_obj(graph: DirectedGraph, spec: InterventionSpec, seed: int) -> dict:
    """Target polarity on disk is human-friendly: 1 = intervened."""
    return {
        "graph": graph.adjacency.tolist(),
        "targets": spec.target_matrix(graph.d).tolist(),
        "spec": {
            "kind": spec.kind.value,
            "shift": spec.shift,
            "scale": spec.scale,
            "alpha": spec.alpha,
            "hard_shift": spec.hard_shift,
            "targets": [list(t) for t in spec.targets],
        },
        "seed": int(seed),
    }


def truth_from_obj(obj: dict) -> tuple[DirectedGraph, np.ndarray]:
    graph = DirectedGraph(np.asarray(obj["graph"]))
    targets = np.asarray(obj["targets"], dtype=np.int8)
    return graph, targets


# --- checkpoints -------------------------------------------------------------------


def save_checkpoint(path: str | Path, arrays: dict, config: dict, epoch: int) -> None:
    obj = {
        "theta": arrays["theta"],
        "theta_tilde": arrays["theta_tilde"],
        "spline_obs": arrays["spline_obs"],
        "spline_int": arrays["spline_int"],
        "phi": arrays["phi"],
        "psi": arrays["psi"],
        "lambda_diag": arrays["lambda_diag"],
        "config": config,
        "epoch": int(epoch),
    }
    Path(path).write_text(dumps_json(obj))


def load_checkpoint(path: str | Path) -> dict:
    obj = json.loads(Path(path).read_text())
    for key in ("theta", "theta_tilde", "spline_obs", "spline_int", "phi", "psi"):
        obj[key] = np.asarray(obj[key], dtype=np.float64)
    if obj.get("lambda_diag") is not None:
        obj["lambda_diag"] = np.asarray(obj["lambda_diag"], dtype=np.float64)
    return obj
