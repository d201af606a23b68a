"""
File I/O for experiment artifacts: CSV traces and summaries (pandas), JSON
summaries and diagnostics, YAML configs and trajectory CSVs.
"""
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel

from deepo.core.errors import DeepoError, ExperimentConfigError, SchemaError
from deepo.core.logging import logger
from deepo.schemas.data import DataBatch
from deepo.schemas.trace import TRACE_COLUMNS, RegretTrace, StepRecord

PathLike = Union[str, Path]


def ensure_dir(path: PathLike) -> Path:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def write_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    """Write a CSV with full float precision and no index column."""
    path = Path(path)
    ensure_dir(path.parent)
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.debug(f"Wrote {len(frame)} rows to {path}")
    return path


def read_frame(path: PathLike, expected: Iterable[str] = ()) -> pd.DataFrame:
    """
    Read a CSV written by ``write_frame``.

    Raises:
        SchemaError: If an expected column is missing
    """
    frame = pd.read_csv(path, keep_default_na=True)
    missing = [column for column in expected if column not in frame.columns]
    if missing:
        raise SchemaError(f"{path} lacks columns {missing}", path=str(path))
    return frame


def write_trace(trace: RegretTrace, path: PathLike) -> Path:
    return write_frame(trace.to_frame(), path)


def read_trace(path: PathLike, Cstar: float, method: str = "deepo") -> RegretTrace:
    frame = read_frame(path, TRACE_COLUMNS)
    frame["event_flags"] = frame["event_flags"].fillna("").astype(str)
    records = [StepRecord(**row) for row in frame[TRACE_COLUMNS].to_dict("records")]
    return RegretTrace(method=method, Cstar=Cstar, records=records)


def write_json(payload: Union[BaseModel, Dict[str, Any], List[Any]], path: PathLike) -> Path:
    path = Path(path)
    ensure_dir(path.parent)
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    else:
        text = json.dumps(payload, indent=2, default=_json_default)
    path.write_text(text + "\n")
    return path


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def write_diagnostics(error: DeepoError, path: PathLike) -> Path:
    """Dump a numerical failure (type, message and details) as JSON."""
    logger.error(f"Writing diagnostics to {path}: {error}")
    return write_json(error.to_dict(), path)


def write_metadata(directory: PathLike, config: BaseModel, started: datetime) -> Path:
    """Timestamps live here so the CSVs stay byte-identical across reruns."""
    finished = datetime.now(timezone.utc)
    return write_json(
        {
            "started": started.isoformat(),
            "finished": finished.isoformat(),
            "elapsed_seconds": (finished - started).total_seconds(),
            "config": config.model_dump(mode="json"),
        },
        Path(directory) / "metadata.json",
    )


def load_yaml(path: PathLike) -> Dict[str, Any]:
    """
    Raises:
        ExperimentConfigError: If the file is missing, unparsable or not a mapping
    """
    path = Path(path)
    if not path.is_file():
        raise ExperimentConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ExperimentConfigError(f"cannot parse {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ExperimentConfigError(f"{path} must hold a mapping at the top level")
    return data


def dump_trajectory(batch: DataBatch, path: PathLike) -> Path:
    """
    Trajectory CSV with columns t, x_1..x_n, u_1..u_m, w_1..w_n. The last row
    holds the final state x_t with empty inputs and noise.
    """
    n, m, t = batch.n, batch.m, batch.t
    X = np.hstack([batch.X0, batch.X1[:, -1:]])
    U = np.hstack([batch.U0, np.full((m, 1), np.nan)])
    W0 = batch.W0 if batch.W0 is not None else np.full((n, t), np.nan)
    W = np.hstack([W0, np.full((n, 1), np.nan)])
    frame = pd.DataFrame({"t": np.arange(t + 1)})
    for i in range(n):
        frame[f"x_{i + 1}"] = X[i]
    for i in range(m):
        frame[f"u_{i + 1}"] = U[i]
    for i in range(n):
        frame[f"w_{i + 1}"] = W[i]
    return write_frame(frame, path)


def load_trajectory(path: PathLike) -> DataBatch:
    """
    Inverse of ``dump_trajectory`` for consecutive data: X0 = x_0..x_{t-1},
    X1 = x_1..x_t. W0 is kept only when every noise entry is present.

    Raises:
        SchemaError: If the column layout is not a trajectory layout
    """
    frame = read_frame(path, ["t"])
    x_cols = [c for c in frame.columns if c.startswith("x_")]
    u_cols = [c for c in frame.columns if c.startswith("u_")]
    w_cols = [c for c in frame.columns if c.startswith("w_")]
    if not x_cols or not u_cols or len(frame) < 2:
        raise SchemaError(f"{path} is not a trajectory file", path=str(path))
    X = frame[x_cols].to_numpy(dtype=float).T
    U = frame[u_cols].to_numpy(dtype=float).T[:, :-1]
    W = frame[w_cols].to_numpy(dtype=float).T[:, :-1] if w_cols else None
    if W is not None and (W.shape[0] != X.shape[0] or not np.all(np.isfinite(W))):
        W = None
    return DataBatch(X0=X[:, :-1], U0=U, X1=X[:, 1:], W0=W)


__all__ = [
    "ensure_dir",
    "write_frame",
    "read_frame",
    "write_trace",
    "read_trace",
    "write_json",
    "write_diagnostics",
    "write_metadata",
    "load_yaml",
    "dump_trajectory",
    "load_trajectory",
]
