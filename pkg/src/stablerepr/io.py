"""File formats: MDP and policy JSON, trajectory CSV, representation CSV with a
JSON sidecar, weight vectors and result tables."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .mdp import Mdp, Trajectory, validate_policy
from .representations import Method, Representation

FIXTURES = Path(__file__).resolve().parent / "fixtures"


class ParseError(ValidationError):
    """A file could not be parsed; ``line`` is 1-based when known."""

    def __init__(self, msg, path=None, line=None):
        where = "" if path is None else f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {msg}" if where else msg)
        self.path, self.line = path, line


def _load_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read file ({exc.strerror})", path) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, exc.lineno) from exc


def _array(value, name, path, ndim):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"'{name}' is not a numeric array", path) from exc
    if arr.ndim != ndim:
        raise ParseError(f"'{name}' must be {ndim}-dimensional, got shape {arr.shape}", path)
    return arr


# ---------------------------------------------------------------- MDP and policy

def mdp_to_json(mdp: Mdp) -> dict:
    return {"n_states": mdp.n_states, "n_actions": mdp.n_actions,
            "transitions": mdp.transition.tolist(), "rewards": mdp.reward.tolist(),
            "initial_dist": mdp.initial_dist.tolist(), "discount": mdp.discount}


def save_mdp(path, mdp: Mdp) -> None:
    Path(path).write_text(json.dumps(mdp_to_json(mdp)))


def load_mdp(path) -> Mdp:
    data = _load_json(path)
    if not isinstance(data, dict):
        raise ParseError("MDP file must hold a JSON object", path)
    missing = [k for k in ("transitions", "rewards", "initial_dist", "discount") if k not in data]
    if missing:
        raise ParseError(f"missing keys {missing}", path)
    p = _array(data["transitions"], "transitions", path, 3)
    n_s = int(data.get("n_states", p.shape[0]))
    n_a = int(data.get("n_actions", p.shape[1]))
    if p.shape != (n_s, n_a, n_s):
        raise ParseError(f"transitions shape {p.shape} disagrees with n_states={n_s}, "
                         f"n_actions={n_a}", path)
    try:
        return Mdp(p, _array(data["rewards"], "rewards", path, 1),
                   _array(data["initial_dist"], "initial_dist", path, 1),
                   float(data["discount"]), name=Path(path).stem)
    except ValidationError as exc:
        raise ParseError(str(exc), path) from exc


def save_policy(path, policy) -> None:
    Path(path).write_text(json.dumps({"policy": np.asarray(policy, dtype=float).tolist()}))


def load_policy(path, n_states: int, n_actions: int) -> np.ndarray:
    data = _load_json(path)
    if isinstance(data, dict):
        if "policy" not in data:
            raise ParseError("missing key 'policy'", path)
        data = data["policy"]
    try:
        return validate_policy(_array(data, "policy", path, 2), n_states, n_actions)
    except ParseError:
        raise
    except ValidationError as exc:
        raise ParseError(str(exc), path) from exc


# ---------------------------------------------------------------- vectors

def load_vector(path, n: int | None = None) -> np.ndarray:
    """A vector from JSON (list or ``{"xi": [...]}``) or a one-column CSV."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        data = _load_json(path)
        if isinstance(data, dict):
            data = data.get("xi", data.get("values"))
        vec = _array(data, "vector", path, 1)
    else:
        rows = _read_csv_matrix(path, header=None)
        if rows.shape[1] != 1:
            raise ParseError(f"expected one column, got {rows.shape[1]}", path)
        vec = rows[:, 0]
    if n is not None and vec.size != n:
        raise ParseError(f"vector has {vec.size} entries, expected {n}", path)
    return vec


def save_vector(path, vec) -> None:
    Path(path).write_text(json.dumps([float(v) for v in np.asarray(vec).reshape(-1)]))


# ---------------------------------------------------------------- trajectories

TRAJECTORY_COLUMNS = ("step", "s", "a", "r", "s_next", "episode_id")


def save_trajectories(path, trajectories: Sequence[Trajectory]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for traj in trajectories:
            for t, (s, a, r, s2) in enumerate(traj):
                w.writerow([t, int(s), int(a), repr(float(r)), int(s2), traj.episode_id])


def load_trajectories(path) -> list[Trajectory]:
    episodes: dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRAJECTORY_COLUMNS:
            raise ParseError(f"header must be {','.join(TRAJECTORY_COLUMNS)}", path, 1)
        for line, row in enumerate(reader, start=2):
            if len(row) != len(TRAJECTORY_COLUMNS):
                raise ParseError(f"expected {len(TRAJECTORY_COLUMNS)} fields, got {len(row)}",
                                 path, line)
            try:
                _, s, a, r, s2, ep = int(row[0]), int(row[1]), int(row[2]), float(row[3]), \
                    int(row[4]), int(row[5])
            except ValueError as exc:
                raise ParseError(f"bad field ({exc})", path, line) from exc
            episodes.setdefault(ep, []).append((s, a, r, s2))
    out = []
    for ep, rows in episodes.items():
        arr = np.array(rows, dtype=float)
        out.append(Trajectory(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64),
                              arr[:, 2], arr[:, 3].astype(np.int64), None, ep))
    return out


# ---------------------------------------------------------------- representations

def _read_csv_matrix(path, header: str | None = "auto") -> np.ndarray:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read file ({exc.strerror})", path) from exc
    rows, width = [], None
    for line, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            vals = [float(c) for c in row]
        except ValueError:
            if line == 1 and header == "auto":
                continue
            raise ParseError(f"non-numeric field in {row}", path, line)
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise ParseError(f"expected {width} fields, got {len(vals)}", path, line)
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite value", path, line)
        rows.append(vals)
    if not rows or not width:
        raise ParseError("no data rows (empty matrix or d=0)", path)
    return np.array(rows)


def save_representation(path, rep: Representation) -> Path:
    """Write ``phi`` as CSV and metadata to ``<path>.json``; returns the sidecar path."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"phi_{j}" for j in range(rep.effective_d)])
        for row in rep.phi:
            w.writerow([repr(float(v)) for v in row])
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = {"method": rep.method.value, "is_orthogonal": rep.is_orthogonal,
            "requested_d": rep.requested_d, "provenance": _jsonable(rep.provenance)}
    sidecar.write_text(json.dumps(meta, sort_keys=True))
    return sidecar


def load_representation(path, n: int | None = None) -> Representation:
    path = Path(path)
    phi = _read_csv_matrix(path)
    if n is not None and phi.shape[0] != n:
        raise ParseError(f"representation has {phi.shape[0]} rows, expected {n}", path)
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = _load_json(sidecar) if sidecar.exists() else {}
    method = Method.parse(meta.get("method", "Custom"))
    prov = dict(meta.get("provenance", {}), source=str(path))
    return Representation(phi, method, bool(meta.get("is_orthogonal", False)),
                          int(meta.get("requested_d", phi.shape[1])), prov)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (complex, np.complexfloating)):
        return {"re": float(obj.real), "im": float(obj.imag)}
    return obj


def dump_json(obj, path=None) -> str:
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text


# ---------------------------------------------------------------- tables

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def write_table(path_or_fh, columns: Sequence[str], rows: Iterable[dict]) -> None:
    """CSV with a fixed column order; booleans as true/false, NaN and None empty."""
    own = isinstance(path_or_fh, (str, Path))
    fh = open(path_or_fh, "w", newline="") if own else path_or_fh
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c)) for c in columns])
    finally:
        if own:
            fh.close()


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def fixture_path(name: str) -> Path:
    path = FIXTURES / name
    if not path.exists():
        raise ValidationError(f"no bundled fixture named {name!r}")
    return path
