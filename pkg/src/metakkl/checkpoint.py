"""JSON checkpoints for trained maps.

Weights are stored as nested row-major lists with full-precision decimal
floats (Python's shortest round-trip repr), so load(save(p)) reproduces the
parameters bit for bit and files stay diff-able.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .nn import MapParams, MlpSpec

__all__ = ["FORMAT_VERSION", "CheckpointError", "save_checkpoint", "load_checkpoint"]

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(params: MapParams, path: str | Path, alpha: float | None = None,
                    config_hash: str = "", seed: int = 0) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "spec": {
            "in_dim": params.spec.in_dim,
            "out_dim": params.spec.out_dim,
            "hidden": list(params.spec.hidden),
            "activation": params.spec.activation,
        },
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "norm_in": {"mean": params.norm_in[0].tolist(), "std": params.norm_in[1].tolist()},
        "norm_out": {"mean": params.norm_out[0].tolist(), "std": params.norm_out[1].tolist()},
        "alpha": alpha,
        "config_hash": config_hash,
        "seed": seed,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path: str | Path) -> tuple[MapParams, float | None, dict]:
    """Returns (params, alpha or None, metadata with config_hash and seed)."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    version = doc.get("format_version")
    if not isinstance(version, int) or version > FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version!r} "
            f"(this build supports <= {FORMAT_VERSION})"
        )
    try:
        spec = MlpSpec(in_dim=doc["spec"]["in_dim"], out_dim=doc["spec"]["out_dim"],
                       hidden=tuple(doc["spec"]["hidden"]),
                       activation=doc["spec"]["activation"])
        params = MapParams(
            spec=spec,
            weights=[np.asarray(w, dtype=np.float64) for w in doc["weights"]],
            biases=[np.asarray(b, dtype=np.float64) for b in doc["biases"]],
            norm_in=(np.asarray(doc["norm_in"]["mean"], dtype=np.float64),
                     np.asarray(doc["norm_in"]["std"], dtype=np.float64)),
            norm_out=(np.asarray(doc["norm_out"]["mean"], dtype=np.float64),
                      np.asarray(doc["norm_out"]["std"], dtype=np.float64)),
        )
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint: missing {exc}") from None
    expected = [(o, i) for o, i in spec.layer_dims()]
    actual = [w.shape for w in params.weights]
    if actual != expected:
        raise CheckpointError(f"weight shapes {actual} do not match spec {expected}")
    meta = {"config_hash": doc.get("config_hash", ""), "seed": doc.get("seed", 0)}
    alpha = doc.get("alpha")
    return params, (None if alpha is None else float(alpha)), meta
