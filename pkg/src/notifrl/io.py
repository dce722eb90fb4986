"""Versioned on-disk formats: datasets, checkpoints, reward models, reports.

Every file carries ``format_version``. Output files contain no timestamps, so
identical inputs give byte-identical files; wall-clock provenance goes into a
``<path>.manifest.json`` sidecar instead.

Datasets are newline-delimited JSON: one header object, then one array per
transition in the column order listed in the header.
"""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import PipelineConfig, digest
from .dataset import Dataset
from .errors import DataError
from .mdp import Action, RewardVector, Trajectory, Transition
from .nn import Activation, MlpParams
from .rewards import ClickModel, RewardSpec, SessionModel
from .trainer import QPolicy, TrainReport

FORMAT_VERSION = 1


def dataset_columns(schema: Sequence[str]) -> List[str]:
    return (
        ["episode_id", "t_k", "t_next"]
        + [f"s.{name}" for name in schema]
        + ["action", "m_s", "m_c", "m_v", "propensity", "terminal"]
        + [f"next.{name}" for name in schema]
    )


def atomic_write(path, data: str) -> None:
    """Write via a temp file and rename, so failures leave no partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _read_text(path, what: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as err:
        raise DataError(f"cannot read {what} {path}: {err}") from None


def _check_header(obj, kind: str, path) -> None:
    if not isinstance(obj, dict) or obj.get("kind") != kind:
        raise DataError(f"{path} is not a {kind} file")
    if obj.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format_version {obj.get('format_version')!r}")


# datasets

def dumps_dataset(ds: Dataset) -> str:
    header = {
        "kind": "dataset",
        "format_version": FORMAT_VERSION,
        "schema": list(ds.schema),
        "columns": dataset_columns(ds.schema),
        "provenance": ds.provenance,
        # episodes without decisions have no rows but still count in averages
        "episodes": [[t.episode_id, t.user_id] for t in ds.trajectories],
    }
    lines = [_dumps(header)]
    for traj in ds.trajectories:
        for s in traj.steps:
            row = [s.episode_id, float(s.t_k), float(s.t_next)]
            row += [float(v) for v in s.state]
            row += [int(s.action), s.reward.m_s, s.reward.m_c, s.reward.m_v,
                    float(s.behavior_propensity), bool(s.terminal)]
            row += [float(v) for v in s.next_state]
            lines.append(json.dumps(row, separators=(",", ":"), allow_nan=False))
    return "\n".join(lines) + "\n"


def write_dataset(ds: Dataset, path) -> None:
    atomic_write(path, dumps_dataset(ds))


def loads_dataset(text: str, source: str = "<dataset>") -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise DataError(f"{source}: empty file, expected a header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise DataError(f"{source}: bad header: {err}") from None
    _check_header(header, "dataset", source)
    schema = tuple(header["schema"])
    d = len(schema)
    if header.get("columns") != dataset_columns(schema):
        raise DataError(f"{source}: column list does not match the feature schema")
    order = [tuple(e) for e in header["episodes"]]
    steps: Dict[str, List[Transition]] = {eid: [] for eid, _ in order}
    width = 3 + 2 * d + 6
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as err:
            raise DataError(f"{source}:{lineno}: {err}") from None
        if not isinstance(row, list) or len(row) != width:
            raise DataError(f"{source}:{lineno}: expected {width} fields")
        eid = row[0]
        if eid not in steps:
            raise DataError(f"{source}:{lineno}: unknown episode {eid!r}")
        tail = row[3 + d:]
        steps[eid].append(Transition(
            state=np.array(row[3:3 + d], dtype=np.float64),
            action=Action(tail[0]),
            t_k=float(row[1]),
            t_next=float(row[2]),
            reward=RewardVector(float(tail[1]), float(tail[2]), float(tail[3])),
            next_state=np.array(tail[6:], dtype=np.float64),
            behavior_propensity=float(tail[4]),
            episode_id=eid,
            terminal=bool(tail[5]),
        ))
    trajs = [Trajectory(eid, uid, steps[eid]) for eid, uid in order]
    return Dataset(trajs, schema, header.get("provenance", {}))


def read_dataset(path) -> Dataset:
    return loads_dataset(_read_text(path, "dataset"), str(path))


# reward models

def _click_to_dict(m: ClickModel) -> Dict:
    diag = {k: v for k, v in m.diagnostics.items() if k != "loss_history"}
    return {"weights": m.weights.tolist(), "intercept": m.intercept, "diagnostics": diag}


def _session_to_dict(m: SessionModel) -> Dict:
    return {"weights": [w.tolist() for w in m.weights], "intercepts": list(m.intercepts),
            "diagnostics": m.diagnostics}


def dumps_models(click: Optional[ClickModel], session: Optional[SessionModel],
                 schema: Sequence[str], config_digest: str = "") -> str:
    doc = {
        "kind": "reward_models",
        "format_version": FORMAT_VERSION,
        "schema": list(schema),
        "config_digest": config_digest,
        "click": None if click is None else _click_to_dict(click),
        "session": None if session is None else _session_to_dict(session),
    }
    return _dumps(doc) + "\n"


def read_models(path):
    """Returns ``(click, session)``; either may be None."""
    try:
        doc = json.loads(_read_text(path, "reward model file"))
    except json.JSONDecodeError as err:
        raise DataError(f"{path}: {err}") from None
    _check_header(doc, "reward_models", path)
    schema = tuple(doc["schema"])
    click = session = None
    if doc.get("click"):
        c = doc["click"]
        click = ClickModel(np.array(c["weights"], dtype=np.float64), float(c["intercept"]), schema,
                           c.get("diagnostics", {}))
    if doc.get("session"):
        s = doc["session"]
        session = SessionModel([np.array(w, dtype=np.float64) for w in s["weights"]],
                               [float(b) for b in s["intercepts"]], schema, s.get("diagnostics", {}))
    return click, session


# checkpoints

def dumps_checkpoint(policy: QPolicy, spec: Optional[RewardSpec], config: PipelineConfig) -> str:
    p = policy.params
    doc = {
        "kind": "checkpoint",
        "format_version": FORMAT_VERSION,
        "layer_dims": list(p.layer_dims),
        "activation": Activation(p.activation).value,
        "weights": [w.ravel().tolist() for w in p.weights],  # row-major (d_in, d_out)
        "biases": [b.tolist() for b in p.biases],
        "schema": list(policy.schema),
        "feature_offset": policy.feature_offset.tolist(),
        "feature_scale": policy.feature_scale.tolist(),
        "reward_spec": None if spec is None else {
            "formula": spec.formula,
            "prefs": [spec.prefs.w_s, spec.prefs.w_c, spec.prefs.w_v],
        },
        "config_digest": digest(config),
        "train_config": config.train.model_dump(mode="json"),
    }
    return _dumps(doc) + "\n"


def write_checkpoint(policy: QPolicy, spec: Optional[RewardSpec], config: PipelineConfig, path) -> None:
    atomic_write(path, dumps_checkpoint(policy, spec, config))


def loads_checkpoint(text: str, source: str = "<checkpoint>") -> QPolicy:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise DataError(f"{source}: {err}") from None
    _check_header(doc, "checkpoint", source)
    dims = [int(d) for d in doc["layer_dims"]]
    try:
        weights = [np.array(w, dtype=np.float64).reshape(a, b)
                   for w, a, b in zip(doc["weights"], dims[:-1], dims[1:])]
        params = MlpParams(dims, weights, [np.array(b, dtype=np.float64) for b in doc["biases"]],
                           Activation(doc["activation"]))
    except ValueError as err:
        raise DataError(f"{source}: malformed network arrays: {err}") from None
    return QPolicy(params, tuple(doc["schema"]), np.array(doc["feature_offset"], dtype=np.float64),
                   np.array(doc["feature_scale"], dtype=np.float64))


def read_checkpoint(path) -> QPolicy:
    return loads_checkpoint(_read_text(path, "checkpoint"), str(path))


# tables

def dumps_csv(columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def dumps_records(columns: Sequence[str], records: Sequence[Dict], fmt: str = "csv") -> str:
    if fmt == "json":
        return _dumps({"format_version": FORMAT_VERSION,
                       "rows": [{c: r.get(c) for c in columns} for r in records]}) + "\n"
    return dumps_csv(columns, ([r.get(c, "") for c in columns] for r in records))


LOSS_COLUMNS = ["step", "bellman", "penalty", "total"]


def dumps_loss(report: TrainReport) -> str:
    return dumps_csv(LOSS_COLUMNS, report.rows())


def manifest(stage: str, config_digest: str, seed: Optional[int], inputs: Dict[str, str],
             outputs: Dict[str, str]) -> Dict:
    return {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "config_digest": config_digest,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "toolkit_version": __version__,
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }


def manifest_path(path) -> Path:
    return Path(f"{path}.manifest.json")
