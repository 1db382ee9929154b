# datasets.py
"""CSV datasets with JSON sidecars.

LMM rows are `i,j,t,y`, MGLMM rows `i,j,y1,y2` and toy rows `i,j,y`, all with
one-based indices. The sidecar next to `name.csv` is `name.json` and holds the
dimensions, seed, generating theta and (MGLMM) the predictor array.
"""
import csv
import json
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import structlog

from ..errors import ConfigurationError, ContractError
from ..models.lmm import LmmDataset
from ..models.mglmm import MglmmDataset, MglmmDesign
from ..models.params import ModelKind, ParamVector
from .formatter import SCHEMA_VERSION, format_json

logger = structlog.get_logger()

HEADERS = {
    ModelKind.LMM: ["i", "j", "t", "y"],
    ModelKind.MGLMM: ["i", "j", "y1", "y2"],
    ModelKind.TOY: ["i", "j", "y"],
}


def sidecar_path(path: Path) -> Path:
    return Path(path).with_suffix(".json")


def dataset_kind(data) -> ModelKind:
    if isinstance(data, LmmDataset):
        return ModelKind.LMM
    if isinstance(data, MglmmDataset):
        return ModelKind.MGLMM
    if isinstance(data, np.ndarray):
        return ModelKind.TOY
    raise ContractError(f"Unsupported dataset type {type(data).__name__}")


def _rows(data):
    kind = dataset_kind(data)
    if kind is ModelKind.LMM:
        for (i, j, t), value in np.ndenumerate(data.y):
            yield [i + 1, j + 1, t + 1, repr(float(value))]
    elif kind is ModelKind.MGLMM:
        for (i, j), value in np.ndenumerate(data.y1):
            yield [i + 1, j + 1, repr(float(value)), int(data.y2[i, j])]
    else:
        for (i, j), value in np.ndenumerate(data):
            yield [i + 1, j + 1, repr(float(value))]


def write_dataset(path, data, theta: ParamVector, seed: Optional[int] = None) -> Tuple[Path, Path]:
    """
    Write `data` as CSV plus sidecar

    Args:
        path: CSV path; the sidecar goes next to it with a .json suffix
        data: LmmDataset, MglmmDataset or toy matrix
        theta: Generating parameters
        seed: Simulation seed, recorded in the sidecar
    Returns:
        Tuple of (csv path, sidecar path)
    """
    kind = dataset_kind(data)
    if theta.kind is not kind:
        raise ContractError(f"theta is a {theta.kind.value} parameter but the dataset is {kind.value}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(HEADERS[kind])
        writer.writerows(_rows(data))

    sidecar = {"model": kind.value, "seed": seed, "theta": [float(v) for v in theta.as_array()]}
    if kind is ModelKind.LMM:
        sidecar.update({"N": data.N, "T": data.T})
    elif kind is ModelKind.MGLMM:
        sidecar.update({"N": data.design.N, "p": data.design.p, "x": data.design.x.tolist()})
    else:
        sidecar["N"] = int(data.shape[0])
    meta_path = sidecar_path(path)
    meta_path.write_text(format_json(sidecar), encoding="utf-8")
    logger.info("dataset_written", path=str(path), model=kind.value, N=sidecar["N"])
    return path, meta_path


def read_sidecar(path) -> dict:
    meta_path = sidecar_path(path)
    try:
        sidecar = json.loads(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError("data", f"sidecar {meta_path} not found")
    except json.JSONDecodeError as e:
        raise ConfigurationError("data", f"sidecar {meta_path} is not valid JSON: {e.msg}", line=e.lineno)
    if sidecar.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError("schema_version", f"expected {SCHEMA_VERSION}, got {sidecar.get('schema_version')}")
    try:
        sidecar["model"] = ModelKind(sidecar["model"])
    except (KeyError, ValueError):
        raise ConfigurationError("model", f"sidecar {meta_path} has no valid model")
    return sidecar


def read_dataset(path):
    """
    Read a CSV dataset and its sidecar

    Returns:
        Tuple of (dataset, sidecar dict)
    Raises:
        ConfigurationError: Missing files, wrong header or incomplete index grid
    """
    path = Path(path)
    sidecar = read_sidecar(path)
    kind = sidecar["model"]
    try:
        with path.open(newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            rows = [row for row in reader if row]
    except FileNotFoundError:
        raise ConfigurationError("data", f"dataset {path} not found")
    if header != HEADERS[kind]:
        raise ConfigurationError("data", f"expected header {','.join(HEADERS[kind])}, got {header}", line=1)

    N = int(sidecar["N"])
    index_width = 3 if kind is ModelKind.LMM else 2
    shape = (N, N, int(sidecar["T"])) if kind is ModelKind.LMM else (N, N)
    expected = int(np.prod(shape))
    if len(rows) != expected:
        raise ConfigurationError("data", f"expected {expected} rows, found {len(rows)}")
    try:
        index = np.array([[int(v) - 1 for v in row[:index_width]] for row in rows])
        values = np.array([[float(v) for v in row[index_width:]] for row in rows])
    except ValueError as e:
        raise ConfigurationError("data", f"non-numeric entry: {e}")
    if np.any(index < 0) or np.any(index >= np.array(shape)):
        raise ConfigurationError("data", f"index outside the {shape} grid")
    filled = np.zeros(shape, dtype=bool)
    filled[tuple(index.T)] = True
    if not filled.all():
        raise ConfigurationError("data", "some cells are missing")

    columns = [np.empty(shape) for _ in range(values.shape[1])]
    for k, column in enumerate(columns):
        column[tuple(index.T)] = values[:, k]
    seed = sidecar.get("seed")
    if kind is ModelKind.LMM:
        data = LmmDataset(N=N, T=shape[2], y=columns[0], seed=seed)
    elif kind is ModelKind.MGLMM:
        design = MglmmDesign(N=N, p=int(sidecar["p"]), x=np.array(sidecar["x"], dtype=float)).validate()
        data = MglmmDataset(design=design, y1=columns[0], y2=columns[1], seed=seed)
    else:
        data = columns[0]
    logger.info("dataset_read", path=str(path), model=kind.value, N=N)
    return data, sidecar
