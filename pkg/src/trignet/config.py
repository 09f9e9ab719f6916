"""JSON system configuration files and CSV trace files."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gainalg import GainExpr, PowerGain
from .omega import OmegaPath, PathProvenance, PhiMap
from .plant import LinearPlant, NonlinearPlant
from .sim import SimTrace

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class ConfigOverrides:
    """Optional analysis inputs carried alongside the plant."""

    sigma: OmegaPath | None = None
    phi: PhiMap | None = None
    x0: tuple | None = None
    practical_c: tuple | None = None
    sigma_bar_sq: "float | str" = "auto"


def _matrix_to_json(M) -> dict:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return {"shape": list(M.shape), "data": [float(v) for v in M.ravel()]}


def _matrix_from_json(obj, name: str) -> np.ndarray:
    if not isinstance(obj, dict) or "shape" not in obj or "data" not in obj:
        raise ConfigError(f"{name}: expected an object with 'shape' and 'data'")
    shape = obj["shape"]
    if (not isinstance(shape, list) or len(shape) != 2
            or not all(isinstance(s, int) and s >= 0 for s in shape)):
        raise ConfigError(f"{name}: 'shape' must be two nonnegative integers")
    data = obj["data"]
    if not isinstance(data, list) or len(data) != shape[0] * shape[1]:
        raise ConfigError(f"{name}: 'data' must hold {shape[0] * shape[1]} numbers")
    try:
        M = np.array(data, dtype=float).reshape(shape)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: 'data' must be numeric") from None
    if not np.all(np.isfinite(M)):
        raise ConfigError(f"{name}: entries must be finite")
    return M


def _gain_pair(item, name: str) -> PowerGain:
    if not (isinstance(item, list) and len(item) == 2):
        raise ConfigError(f"{name}: expected [coeff, exponent]")
    try:
        return PowerGain(float(item[0]), float(item[1]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def plant_to_dict(plant, overrides: ConfigOverrides | None = None) -> dict:
    """Serialise a plant (and optional overrides) to the JSON document layout."""
    if isinstance(plant, NonlinearPlant):
        doc = {"version": CONFIG_VERSION, "type": "nonlinear_example", "k": plant.k,
               "sigma_bar_sq": overrides.sigma_bar_sq if overrides else "auto"}
    elif isinstance(plant, LinearPlant):
        doc = {
            "version": CONFIG_VERSION,
            "type": "linear",
            "n": plant.n,
            "dims": list(plant.dims),
            "A": _matrix_to_json(plant.A),
            "B": [_matrix_to_json(b) for b in plant.B],
            "K": _matrix_to_json(plant.K),
            "Q": [_matrix_to_json(q) for q in plant.Q],
            "c_tilde": [float(c) for c in plant.c_tilde],
        }
        if plant.meta:
            doc["meta"] = plant.meta
    else:
        raise TypeError(f"cannot serialise {type(plant).__name__}")
    if overrides is not None:
        if overrides.x0 is not None:
            doc["x0"] = [float(v) for v in overrides.x0]
        if overrides.practical_c is not None:
            doc["practical_c"] = [float(v) for v in overrides.practical_c]
        if overrides.sigma is not None:
            doc["omega_path"] = {"sigma": [[s.coeff, s.exponent] for s in overrides.sigma.sigma]}
        if overrides.phi is not None:
            doc["phi"] = [[[g.single().coeff, g.single().exponent] if not g.is_zero else None for g in row]
                          for row in overrides.phi.phi]
    return doc


def write_config(path, plant, overrides: ConfigOverrides | None = None) -> None:
    Path(path).write_text(json.dumps(plant_to_dict(plant, overrides), indent=1) + "\n")


def plant_from_dict(doc) -> tuple:
    """Validate a configuration document; returns ``(plant, overrides)``."""
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    if "version" not in doc:
        raise ConfigError("version: field is required")
    if doc["version"] != CONFIG_VERSION:
        raise ConfigError(f"version: unsupported value {doc['version']!r}")
    kind = doc.get("type")
    sigma_bar_sq = "auto"
    if kind == "nonlinear_example":
        k = doc.get("k", 64.0)
        sigma_bar_sq = doc.get("sigma_bar_sq", "auto")
        if not isinstance(k, (int, float)) or isinstance(k, bool) or not k > 0:
            raise ConfigError("k: must be a positive number")
        if sigma_bar_sq != "auto" and (not isinstance(sigma_bar_sq, (int, float)) or not sigma_bar_sq > 0):
            raise ConfigError("sigma_bar_sq: must be a positive number or 'auto'")
        plant = NonlinearPlant(float(k))
    elif kind == "linear":
        for name in ("A", "B", "K"):
            if name not in doc:
                raise ConfigError(f"{name}: field is required")
        A = _matrix_from_json(doc["A"], "A")
        if not isinstance(doc["B"], list) or not doc["B"]:
            raise ConfigError("B: expected a non-empty list of matrices")
        B = [_matrix_from_json(b, f"B[{i}]") for i, b in enumerate(doc["B"])]
        K = _matrix_from_json(doc["K"], "K")
        Q = None
        if "Q" in doc:
            if not isinstance(doc["Q"], list):
                raise ConfigError("Q: expected a list of matrices")
            Q = [_matrix_from_json(q, f"Q[{i}]") for i, q in enumerate(doc["Q"])]
        c_tilde = doc.get("c_tilde")
        dims = [b.shape[0] for b in B]
        if "n" in doc and doc["n"] != len(B):
            raise ConfigError(f"n: says {doc['n']} but B has {len(B)} blocks")
        if "dims" in doc and list(doc["dims"]) != dims:
            raise ConfigError(f"dims: {doc['dims']} does not match B block heights {dims}")
        try:
            plant = LinearPlant(A, tuple(B), K, Q, c_tilde, dict(doc.get("meta", {})))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    else:
        raise ConfigError(f"type: expected 'linear' or 'nonlinear_example', got {kind!r}")

    n = plant.n
    x0 = doc.get("x0")
    if x0 is not None:
        if not isinstance(x0, list) or len(x0) != plant.n_state:
            raise ConfigError(f"x0: expected {plant.n_state} numbers")
        x0 = tuple(float(v) for v in x0)
    pc = doc.get("practical_c")
    if pc is not None:
        pc = [pc] * n if isinstance(pc, (int, float)) else pc
        if not isinstance(pc, list) or len(pc) != n:
            raise ConfigError(f"practical_c: expected {n} numbers")
        pc = tuple(float(v) for v in pc)
    sigma = None
    if "omega_path" in doc:
        items = doc["omega_path"].get("sigma") if isinstance(doc["omega_path"], dict) else None
        if not isinstance(items, list) or len(items) != n:
            raise ConfigError(f"omega_path.sigma: expected {n} [coeff, exponent] pairs")
        try:
            sigma = OmegaPath(tuple(_gain_pair(s, f"omega_path.sigma[{i}]") for i, s in enumerate(items)),
                              PathProvenance.USER)
        except ValueError as exc:
            raise ConfigError(f"omega_path: {exc}") from None
    phi = None
    if "phi" in doc:
        rows = doc["phi"]
        if not isinstance(rows, list) or len(rows) != n or any(not isinstance(r, list) or len(r) != n for r in rows):
            raise ConfigError(f"phi: expected an {n}x{n} array of [coeff, exponent] or null")
        phi = PhiMap(tuple(tuple(GainExpr.zero() if g is None else GainExpr.of(_gain_pair(g, f"phi[{i}][{j}]"))
                                 for j, g in enumerate(row)) for i, row in enumerate(rows)))
    return plant, ConfigOverrides(sigma, phi, x0, pc, sigma_bar_sq)


def parse_config(path) -> tuple:
    """Load and validate a configuration file; returns ``(plant, overrides)``."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: malformed JSON ({exc})") from None
    return plant_from_dict(doc)


def trace_header(trace: SimTrace) -> list[str]:
    N = trace.x.shape[1]
    n = trace.n
    return (["t"] + [f"x{a}" for a in range(N)] + [f"xhat{a}" for a in range(N)]
            + [f"V_{i + 1}" for i in range(n)] + ["V"]
            + [f"event_{i + 1}" for i in range(n)] + [f"suppressed_{i + 1}" for i in range(n)])


def write_trace_csv(path, trace: SimTrace) -> None:
    fmt = lambda v: repr(float(v))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trace_header(trace))
        for k in range(len(trace.t)):
            w.writerow([fmt(trace.t[k])] + [fmt(v) for v in trace.x[k]] + [fmt(v) for v in trace.xhat[k]]
                       + [fmt(v) for v in trace.V_i[k]] + [fmt(trace.V[k])]
                       + [int(v) for v in trace.event_flags[k]] + [int(v) for v in trace.suppressed_flags[k]])


def read_trace_csv(path) -> dict:
    """Columns of a trace CSV as arrays keyed by header name."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in r] for r in body]) if body else np.zeros((0, len(header)))
    return {name: data[:, j] for j, name in enumerate(header)}
