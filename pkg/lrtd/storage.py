"""On-disk formats: dataset directories, checkpoints, calibration results and CSV reports.

Arrays are raw row-major little-endian files (``.f32``, ``.f64``, ``.u8``)
next to a JSON header carrying counts, dimensions and a format version.
"""

import csv
import hashlib
import json
import logging
import platform
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel

from .dataset import OfflineDataset
from .exceptions import FormatError, HashMismatchError
from .labeling import Critic
from .policy import TwoHeadPolicy, flat_parameters, load_flat_parameters
from .schemas import FORMAT_VERSION, CalibrationResult, CheckpointMeta, DatasetMeta, ScheduleParams, SweepRow

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DTYPES = {".f32": "<f4", ".f64": "<f8", ".u8": "u1"}


def write_json(path: PathLike, obj: Any) -> None:
    if isinstance(obj, BaseModel):
        obj = obj.dict()
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"Missing file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e}")


def config_digest(cfg: BaseModel) -> str:
    return hashlib.sha256(json.dumps(cfg.dict(), sort_keys=True).encode("utf-8")).hexdigest()


def _check_version(found: Optional[int], path: Path) -> None:
    if found != FORMAT_VERSION:
        raise FormatError(f"{path} has format version {found}, expected {FORMAT_VERSION}")


def write_array(path: PathLike, arr) -> None:
    path = Path(path)
    np.ascontiguousarray(np.asarray(arr), dtype=DTYPES[path.suffix]).tofile(path)


def read_array(path: PathLike, shape: Tuple[int, ...]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"Missing array file: {path}")
    data = np.fromfile(path, dtype=DTYPES[path.suffix])
    expected = int(np.prod(shape))
    if data.size != expected:
        raise FormatError(f"{path.name} holds {data.size} values, header implies {expected}")
    return data.reshape(shape)


# ---------------------------------------------------------------------------
# datasets

def _dataset_columns(ds: OfflineDataset) -> Dict[str, Tuple[str, Optional[np.ndarray], Tuple[int, ...]]]:
    n, d_s, d_a = ds.meta.n_rows, ds.meta.d_s, ds.meta.d_a
    return {
        "states": ("states.f32", ds.states, (n, d_s)),
        "actions": ("actions.f32", ds.actions, (n, d_a)),
        "rewards": ("rewards.f32", ds.rewards, (n,)),
        "next_states": ("next_states.f32", ds.next_states, (n, d_s)),
        "dones": ("dones.u8", ds.dones, (n,)),
        "modes": ("modes.u8", ds.modes, (n,)),
        "advantages": ("advantages.f32", ds.advantages, (n,)),
        "labels": ("labels.u8", ds.labels, (n,)),
    }


def persist_dataset(dataset: OfflineDataset, path: PathLike) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if dataset.meta.n_rows != dataset.n:
        raise FormatError(f"Header counts {dataset.meta.n_rows} rows, dataset has {dataset.n}")
    files = []
    for fname, arr, _ in _dataset_columns(dataset).values():
        if arr is None:
            continue
        write_array(path / fname, arr)
        files.append(fname)
    header = dataset.meta.dict()
    header["files"] = sorted(files)
    write_json(path / "meta.json", header)
    logger.info(f"✅ Saved dataset ({dataset.n} rows) to {path}")


def load_dataset(path: PathLike) -> OfflineDataset:
    path = Path(path)
    header = read_json(path / "meta.json")
    _check_version(header.get("format_version"), path / "meta.json")
    files = set(header.pop("files", []))
    meta = DatasetMeta(**header)
    template = OfflineDataset(
        states=np.zeros((0, meta.d_s)), actions=np.zeros((0, meta.d_a)), rewards=np.zeros(0),
        next_states=np.zeros((0, meta.d_s)), dones=np.zeros(0), meta=meta,
    )
    columns = {}
    for name, (fname, _, shape) in _dataset_columns(template).items():
        required = name in ("states", "actions", "rewards", "next_states", "dones")
        if required or fname in files:
            columns[name] = read_array(path / fname, shape)
    if meta.labeled and ("advantages" not in columns or "labels" not in columns):
        raise FormatError(f"{path} is marked labeled but lacks advantages/labels")
    return OfflineDataset(meta=meta, **columns)


# ---------------------------------------------------------------------------
# checkpoints

def _persist_module(module, meta: CheckpointMeta, path: Path) -> CheckpointMeta:
    path.mkdir(parents=True, exist_ok=True)
    flat = flat_parameters(module)
    blob = flat.tobytes()
    meta = meta.copy(update={"param_count": int(flat.size), "content_hash": hashlib.sha256(blob).hexdigest()})
    (path / "weights.f32").write_bytes(blob)
    write_json(path / "model.json", meta)
    return meta


def _load_weights(path: Path, meta: CheckpointMeta) -> np.ndarray:
    weights = path / "weights.f32"
    if not weights.exists():
        raise FormatError(f"Missing weights file: {weights}")
    blob = weights.read_bytes()
    if len(blob) != 4 * meta.param_count:
        raise FormatError(f"weights.f32 holds {len(blob) // 4} parameters, model.json declares {meta.param_count}")
    digest = hashlib.sha256(blob).hexdigest()
    if digest != meta.content_hash:
        raise HashMismatchError(f"Checkpoint hash mismatch in {path}: {digest[:12]} != {meta.content_hash[:12]}")
    return np.frombuffer(blob, dtype="<f4")


def _read_checkpoint_meta(path: Path, kind: str) -> CheckpointMeta:
    header = read_json(path / "model.json")
    _check_version(header.get("format_version"), path / "model.json")
    meta = CheckpointMeta(**header)
    if meta.kind != kind:
        raise FormatError(f"{path} holds a {meta.kind} checkpoint, expected {kind}")
    return meta


def persist_policy(policy: TwoHeadPolicy, path: PathLike, schedule: ScheduleParams, digest: str = "") -> CheckpointMeta:
    meta = CheckpointMeta(
        kind="policy", d_s=policy.d_s, d_a=policy.d_a, hidden=policy.hidden, n_layers=policy.n_layers,
        temb_dim=policy.temb_dim, schedule=schedule, config_digest=digest, param_count=0,
        extra={"train_history": list(policy.train_history)},
    )
    meta = _persist_module(policy, meta, Path(path))
    logger.info(f"✅ Saved policy checkpoint {meta.content_hash[:12]} to {path}")
    return meta


def load_policy(path: PathLike) -> Tuple[TwoHeadPolicy, CheckpointMeta]:
    path = Path(path)
    meta = _read_checkpoint_meta(path, "policy")
    policy = TwoHeadPolicy(meta.d_s, meta.d_a, hidden=meta.hidden, n_layers=meta.n_layers, temb_dim=meta.temb_dim)
    load_flat_parameters(policy, _load_weights(path, meta))
    policy.train_history = list(meta.extra.get("train_history", []))
    return policy.freeze(), meta


def persist_critic(critic: Critic, path: PathLike, digest: str = "") -> CheckpointMeta:
    meta = CheckpointMeta(
        kind="critic", d_s=critic.d_s, d_a=critic.d_a, hidden=critic.hidden, n_layers=2,
        config_digest=digest, param_count=0,
        extra={"gamma": critic.gamma, "expectile": critic.expectile},
    )
    return _persist_module(critic, meta, Path(path))


def load_critic(path: PathLike) -> Tuple[Critic, CheckpointMeta]:
    path = Path(path)
    meta = _read_checkpoint_meta(path, "critic")
    critic = Critic(
        meta.d_s, meta.d_a, meta.hidden,
        gamma=float(meta.extra.get("gamma", 0.99)), expectile=float(meta.extra.get("expectile", 0.7)),
    )
    load_flat_parameters(critic, _load_weights(path, meta))
    critic.requires_grad_(False)
    critic.eval()
    return critic, meta


# ---------------------------------------------------------------------------
# calibration

def persist_calibration(result: CalibrationResult, path: PathLike) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = result.dict(exclude={"h0_llrs"})
    header["h0_count"] = len(result.h0_llrs)
    write_json(path / "calibration.json", header)
    write_array(path / "h0_llrs.f64", result.llrs)


def load_calibration(path: PathLike) -> CalibrationResult:
    path = Path(path)
    header = read_json(path / "calibration.json")
    _check_version(header.get("format_version"), path / "calibration.json")
    count = int(header.pop("h0_count", 0))
    llrs = read_array(path / "h0_llrs.f64", (count,))
    return CalibrationResult(**header, h0_llrs=llrs.tolist())


# ---------------------------------------------------------------------------
# reports

SWEEP_COLUMNS = ["alpha", "tau_hat", "return_mean", "return_se", "type1", "ood", "method"]
TRACE_COLUMNS = ["chain", "t", "beta", "dllr", "llr_cum", "dmu_norm"]


def write_csv(path: PathLike, fieldnames: List[str], rows: List[Dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"Missing report: {path}")
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def write_sweep_csv(path: PathLike, rows: List[SweepRow]) -> None:
    write_csv(path, SWEEP_COLUMNS, [r.dict() for r in rows])


def read_sweep_csv(path: PathLike) -> List[SweepRow]:
    return [SweepRow(**row) for row in read_csv(path)]


def write_trace_csv(path: PathLike, rows: List[Dict[str, float]]) -> None:
    write_csv(path, TRACE_COLUMNS, rows)


def package_versions() -> Dict[str, str]:
    from . import __version__

    versions = {"lrtd": __version__, "python": platform.python_version()}
    for name in ("numpy", "scipy", "torch", "pydantic", "sqlalchemy"):
        try:
            versions[name] = __import__(name).__version__
        except ImportError:
            versions[name] = "missing"
    return versions


def write_manifest(run_dir: PathLike, argv: List[str], config: BaseModel, seed: int, extra: Dict[str, Any] = None) -> Path:
    """Merge this command's entry into the run directory's manifest.json."""
    path = Path(run_dir) / "manifest.json"
    manifest = read_json(path) if path.exists() else {"format_version": FORMAT_VERSION, "commands": []}
    manifest["seed"] = seed
    manifest["config"] = config.dict()
    manifest["versions"] = package_versions()
    manifest["commands"].append({"argv": list(argv), **(extra or {})})
    write_json(path, manifest)
    return path
