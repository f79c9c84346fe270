"""Checkpoint container and coefficient-file loading.

Checkpoints are versioned JSON. ``kind == "mlp"`` holds the six MLP
weight arrays plus normalization stats and the time transform used in
training; ``kind == "crnn"`` holds the natural-log rate coefficients and
the frozen mask. Floats are serialized with Python repr semantics, which
round-trips float64 exactly.

Coefficient files (for ``--init file:``) are plain text: one
``<reaction-id> <value>`` pair per line, ``-`` for reactions left at
their known (frozen) values, ``#`` comments allowed.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .kinetics import CrnnParams
from .models import MlpParams, NormStats
from .scheme import ReactionScheme

CHECKPOINT_VERSION = 1


def save_mlp_checkpoint(path, params: MlpParams, stats: NormStats,
                        seed: int, time_transform: str):
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": "mlp",
        "arrays": [a.tolist() for a in params.arrays],
        "y_min": stats.y_min.tolist(),
        "y_max": stats.y_max.tolist(),
        "t_scale": stats.t_scale,
        "seed": seed,
        "time_transform": time_transform,
    }
    Path(path).write_text(json.dumps(payload))


def save_crnn_checkpoint(path, params: CrnnParams, seed: int):
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": "crnn",
        "log_k": params.log_k.tolist(),
        "frozen_mask": params.frozen_mask.tolist(),
        "seed": seed,
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> dict:
    payload = json.loads(Path(path).read_text())
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    kind = payload.get("kind")
    if kind == "mlp":
        payload["params"] = MlpParams([np.asarray(a) for a in payload["arrays"]])
        payload["stats"] = NormStats(
            np.asarray(payload["y_min"]),
            np.asarray(payload["y_max"]),
            payload["t_scale"],
        )
    elif kind == "crnn":
        payload["params"] = CrnnParams(
            np.asarray(payload["log_k"]),
            np.asarray(payload["frozen_mask"], dtype=bool),
        )
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    return payload


def load_coefficient_file(path, scheme: ReactionScheme) -> CrnnParams:
    """Parse an `id value` table into parameters; `-` keeps the scheme value."""
    k = scheme.rate_coefficients().astype(float)
    seen = set()
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"bad coefficient line {raw!r}")
        rid = int(parts[0])
        if rid < 1 or rid > scheme.n_reactions:
            raise ValueError(f"reaction id {rid} out of range")
        if rid in seen:
            raise ValueError(f"duplicate coefficient for reaction {rid}")
        seen.add(rid)
        if parts[1] != "-":
            value = float(parts[1])
            if value <= 0:
                raise ValueError(f"nonpositive coefficient for reaction {rid}")
            k[rid - 1] = value
    return CrnnParams(np.log(k), scheme.frozen_mask())
