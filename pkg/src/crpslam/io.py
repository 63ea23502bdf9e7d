"""Persistence: tensor files, manifests, datasets, checkpoints, forecast archives.

Tensor file layout (little endian)::

    b"CLT1" | dtype u8 (1 = float32) | ndim u8 | ndim x u64 dims | payload

Manifests are UTF-8 ``key=value`` lines with ``#`` comments.  Every write
goes to a temporary file first and is renamed into place.
"""

from __future__ import annotations

import ast
import hashlib
import json
import os
import shutil
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .domain import NormStats, Trajectory
from .errors import DataError

MAGIC = b"CLT1"
DTYPE_F32 = 1
FORMAT_VERSION = "1"


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def encode_tensor(arr: np.ndarray) -> bytes:
    a = np.asarray(arr, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
    if a.ndim > 255:
        raise DataError("too many dimensions")
    header = MAGIC + struct.pack("<BB", DTYPE_F32, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + a.tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise DataError("not a CLT1 tensor file")
    dtype, ndim = struct.unpack_from("<BB", blob, 4)
    if dtype != DTYPE_F32:
        raise DataError(f"unsupported dtype code {dtype}")
    dims = struct.unpack_from(f"<{ndim}Q", blob, 6)
    start = 6 + 8 * ndim
    count = int(np.prod(dims)) if ndim else 1
    if len(blob) - start != 4 * count:
        raise DataError(f"payload holds {len(blob) - start} bytes, expected {4 * count}")
    return np.frombuffer(blob, dtype="<f4", offset=start).reshape(dims).astype(np.float32)


def write_tensor(path, arr: np.ndarray) -> None:
    _atomic_write(Path(path), encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# manifests -----------------------------------------------------------------------


def format_manifest(entries: dict[str, str], comments: tuple[str, ...] = ()) -> str:
    lines = [f"# {c}" for c in comments]
    lines.append(f"format_version={entries.get('format_version', FORMAT_VERSION)}")
    for key, value in entries.items():
        if key == "format_version":
            continue
        if "=" in key or "\n" in key or "\n" in str(value):
            raise DataError(f"manifest entry {key!r} cannot be serialised")
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"manifest line {n} has no '=': {raw!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def write_manifest(path, entries: dict[str, str], comments: tuple[str, ...] = ()) -> None:
    _atomic_write(Path(path), format_manifest(entries, comments).encode("utf-8"))


def read_manifest(path, expect_kind: str | None = None) -> dict[str, str]:
    entries = parse_manifest(Path(path).read_text(encoding="utf-8"))
    version = entries.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format_version {version!r}")
    if expect_kind is not None and entries.get("kind") != expect_kind:
        raise DataError(f"{path}: expected a {expect_kind} manifest, got {entries.get('kind')!r}")
    return entries


def update_manifest(path, updates: dict[str, str]) -> None:
    """Rewrite a manifest with ``updates`` applied, keeping every other key."""
    entries = read_manifest(path)
    entries.update(updates)
    write_manifest(path, entries)


# key=value configuration files ----------------------------------------------------


def read_config(path) -> dict[str, str]:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


def coerce_dataclass(cls, values: dict[str, str], base=None):
    """Build ``cls`` from string values, using the field types of ``base`` (or defaults)."""
    base = base if base is not None else cls()
    kwargs = {}
    known = {f.name for f in fields(cls)}
    for key, raw in values.items():
        if key not in known:
            continue
        current = getattr(base, key)
        kwargs[key] = _coerce(raw, current)
    return type(base)(**{**{f.name: getattr(base, f.name) for f in fields(cls)}, **kwargs})


def _coerce(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise DataError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip()) if raw else ()
    if like is None:
        return None if raw.lower() in ("", "none") else int(raw)
    return raw


# datasets --------------------------------------------------------------------------


def _clean_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise FileExistsError(f"{path} exists and is not empty (use --force)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def save_dataset(ds, path, force: bool = False) -> None:
    from .toy_atmos import SPLITS

    path = Path(path)
    _clean_dir(path, force)
    cfg = ds.config
    entries = {"kind": "dataset", "seed": str(ds.seed)}
    for key, value in cfg.to_dict().items():
        entries[f"config.{key}"] = repr(value)
    entries["cfl.advective_number"] = repr(cfg.max_velocity())
    entries["cfl.diffusion_number"] = repr(cfg.diffusion)
    for split in SPLITS:
        entries[f"{split}.count"] = str(len(ds.splits[split]))
        for i, (tr, seed) in enumerate(zip(ds.splits[split], ds.seeds[split])):
            stem = f"{split}/{i:04d}"
            write_tensor(path / f"{stem}.states.clt", tr.states)
            write_tensor(path / f"{stem}.forcings.clt", tr.forcings)
            entries[f"{split}.{i:04d}.seed"] = str(seed)
            entries[f"{split}.{i:04d}.phase0"] = str(tr.phase0)
            entries[f"{split}.{i:04d}.states.shape"] = "x".join(map(str, tr.states.shape))
    write_tensor(path / "statics.clt", ds.splits["train"][0].statics)
    write_tensor(path / "norm_mean.clt", ds.stats.mean)
    write_tensor(path / "norm_std.clt", ds.stats.std)
    entries.update(ds.extra)
    write_manifest(path / "manifest.txt", entries, ("synthetic advection-diffusion dataset",))


def load_dataset(path):
    from .toy_atmos import SPLITS, EpisodeDataset, ToyDynamicsConfig

    path = Path(path)
    if not (path / "manifest.txt").exists():
        raise DataError(f"{path} has no manifest.txt")
    m = read_manifest(path / "manifest.txt", "dataset")
    known = {f.name for f in fields(ToyDynamicsConfig)}
    cfg_values = {k[len("config."):]: v for k, v in m.items() if k.startswith("config.")}
    cfg = ToyDynamicsConfig(**{k: _literal(v) for k, v in cfg_values.items() if k in known})
    statics = read_tensor(path / "statics.clt")
    splits, seeds = {}, {}
    for split in SPLITS:
        count = int(m.get(f"{split}.count", "0"))
        splits[split], seeds[split] = [], []
        for i in range(count):
            stem = f"{split}/{i:04d}"
            splits[split].append(Trajectory(
                states=read_tensor(path / f"{stem}.states.clt"),
                forcings=read_tensor(path / f"{stem}.forcings.clt"),
                statics=statics,
                phase0=int(m[f"{split}.{i:04d}.phase0"]),
            ))
            seeds[split].append(int(m[f"{split}.{i:04d}.seed"]))
    stats = NormStats(read_tensor(path / "norm_mean.clt"), read_tensor(path / "norm_std.clt"))
    extra = {k: v for k, v in m.items() if not _dataset_key(k)}
    return EpisodeDataset(cfg, int(m["seed"]), splits, seeds, stats, extra)


def _dataset_key(key: str) -> bool:
    head = key.split(".", 1)[0]
    return head in ("format_version", "kind", "seed", "config", "cfl", "train", "val", "test")


def _literal(text: str):
    return ast.literal_eval(text)


def dataset_id(path) -> str:
    """Content id of a dataset directory (hash of its manifest)."""
    return hashlib.sha256((Path(path) / "manifest.txt").read_bytes()).hexdigest()[:16]


# checkpoints -------------------------------------------------------------------------


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def save_params(path, params: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> str:
    """Write a parameter checkpoint directory; returns its content id."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {"kind": "checkpoint", "checkpoint_id": params_digest(params)}
    entries.update(meta or {})
    for name, arr in params.items():
        write_tensor(path / "params" / f"{name}.clt", arr)
        entries[f"param.{name}"] = "x".join(map(str, arr.shape))
    write_manifest(path / "manifest.txt", entries)
    return entries["checkpoint_id"]


def load_params(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    m = read_manifest(path / "manifest.txt", "checkpoint")
    params = {}
    for key in m:
        if key.startswith("param."):
            name = key[len("param."):]
            params[name] = read_tensor(path / "params" / f"{name}.clt")
    if params_digest(params) != m["checkpoint_id"]:
        raise DataError(f"{path}: checkpoint id does not match its parameters")
    return params, m


def _config_meta(fcfg, tcfg) -> dict[str, str]:
    meta = {f"model.{k}": json.dumps(v) for k, v in fcfg.to_dict().items()}
    meta["train.stages"] = ",".join(f"{s.epochs}:{s.lr!r}:{s.ar_steps}" for s in tcfg.stages)
    for f in fields(tcfg):
        if f.name != "stages":
            meta[f"train.{f.name}"] = json.dumps(getattr(tcfg, f.name))
    return meta


def model_config_from_meta(meta: dict[str, str]):
    from .net import ForecasterConfig

    kwargs = {k[len("model."):]: json.loads(v) for k, v in meta.items() if k.startswith("model.")}
    if "channels" in kwargs:
        kwargs["channels"] = tuple(kwargs["channels"])
    return ForecasterConfig(**kwargs)


def train_config_from_meta(meta: dict[str, str]):
    from .trainer import TrainConfig

    kwargs = {}
    names = {f.name for f in fields(TrainConfig)}
    for key, value in meta.items():
        if not key.startswith("train."):
            continue
        name = key[len("train."):]
        if name == "stages":
            kwargs["stages"] = parse_stages(value)
        elif name in names:
            v = json.loads(value)
            kwargs[name] = tuple(v) if isinstance(v, list) else v
    return TrainConfig(**kwargs)


def parse_stages(text: str):
    from .trainer import Stage

    out = []
    for part in text.split(","):
        epochs, lr, ar = part.split(":")
        out.append(Stage(int(epochs), float(lr), int(ar)))
    return tuple(out)


def save_train_state(out_dir, state, fcfg, tcfg, dataset_id: str = "") -> None:
    """Persist everything a bit-exact resume needs, plus best/stage checkpoints and logs."""
    from .trainer import log_rows_to_csv

    out = Path(out_dir)
    meta = _config_meta(fcfg, tcfg)
    meta["dataset_id"] = dataset_id
    save_params(out / "last.ckpt", state.params, {**meta, "epoch": str(state.epoch)})
    if state.best_params is not None:
        save_params(out / "best.ckpt", state.best_params, {**meta, "best_val_crps": repr(state.best_val)})
    for stage, params in state.stage_params.items():
        if not (out / f"stage{stage}.ckpt").exists():
            save_params(out / f"stage{stage}.ckpt", params, {**meta, "stage": str(stage)})
    opt = out / "optimizer"
    for name in state.adam.m:
        write_tensor(opt / f"m.{name}.clt", state.adam.m[name])
        write_tensor(opt / f"v.{name}.clt", state.adam.v[name])
    write_manifest(out / "state.txt", {
        "kind": "train-state",
        "epoch": str(state.epoch),
        "adam_t": str(state.adam.t),
        "best_val": repr(state.best_val),
        "low_spread_run": str(state.low_spread_run),
        "warmup_until": str(state.warmup_until),
        "stages_saved": ",".join(str(s) for s in sorted(state.stage_params)),
        **meta,
    })
    _atomic_write(out / "train_log.csv", log_rows_to_csv(state.log).encode("utf-8"))
    timing = "epoch,wall_time\n" + "".join(f"{r['epoch']},{r['wall_time']:.3f}\n" for r in state.timing)
    _atomic_write(out / "timing.csv", timing.encode("utf-8"))


def load_train_state(out_dir):
    from .trainer import LOG_COLUMNS, Adam, TrainState

    out = Path(out_dir)
    m = read_manifest(out / "state.txt", "train-state")
    params, _ = load_params(out / "last.ckpt")
    adam = Adam(params)
    adam.t = int(m["adam_t"])
    for name in params:
        adam.m[name] = read_tensor(out / "optimizer" / f"m.{name}.clt")
        adam.v[name] = read_tensor(out / "optimizer" / f"v.{name}.clt")
    best = load_params(out / "best.ckpt")[0] if (out / "best.ckpt").exists() else None
    stage_params = {}
    for s in filter(None, m.get("stages_saved", "").split(",")):
        stage_params[int(s)] = load_params(out / f"stage{s}.ckpt")[0]
    rows = []
    lines = (out / "train_log.csv").read_text().splitlines()
    for line in lines[1:]:
        vals = line.split(",")
        row = dict(zip(LOG_COLUMNS, vals))
        for key in ("epoch", "stage", "ar_steps", "members"):
            row[key] = int(row[key])
        for key in ("lr", "train_loss", "val_crps", "val_spread", "grad_norm"):
            row[key] = float(row[key])
        rows.append(row)
    timing = []
    for line in (out / "timing.csv").read_text().splitlines()[1:]:
        e, w = line.split(",")
        timing.append({"epoch": int(e), "wall_time": float(w)})
    state = TrainState(
        params=params, adam=adam, epoch=int(m["epoch"]), best_val=float(m["best_val"]),
        best_params=best, low_spread_run=int(m["low_spread_run"]),
        warmup_until=int(m["warmup_until"]), log=rows, timing=timing, stage_params=stage_params,
    )
    return state, model_config_from_meta(m), train_config_from_meta(m), m


# forecast archives ---------------------------------------------------------------------


def save_forecast(path, forecast, force: bool = True) -> None:
    path = Path(path)
    _clean_dir(path, force)
    write_tensor(path / "members.clt", forecast.members)
    write_tensor(path / "noise.clt", forecast.noise)
    entries = {
        "kind": "forecast",
        "members": str(forecast.members.shape[1]),
        "lead_steps": str(forecast.members.shape[2]),
        "cases": str(forecast.members.shape[0]),
        "noise_mode": forecast.noise_mode,
        "split": forecast.split,
        "init_times": ",".join(str(t) for t in forecast.init_times),
        "trajectories": ",".join(str(i) for i in forecast.trajectories),
        "dt_hours": repr(forecast.dt_hours),
    }
    entries.update({f"provenance.{k}": str(v) for k, v in forecast.provenance.items()})
    write_manifest(path / "manifest.txt", entries, ("ensemble forecast archive (denormalised members)",))


def load_forecast(path):
    from .forecast import EnsembleForecast

    path = Path(path)
    m = read_manifest(path / "manifest.txt", "forecast")
    return EnsembleForecast(
        members=read_tensor(path / "members.clt"),
        noise=read_tensor(path / "noise.clt"),
        noise_mode=m["noise_mode"],
        split=m["split"],
        init_times=[int(t) for t in m["init_times"].split(",") if t],
        trajectories=[int(i) for i in m["trajectories"].split(",") if i],
        dt_hours=float(m["dt_hours"]),
        provenance={k[len("provenance."):]: v for k, v in m.items() if k.startswith("provenance.")},
    )


def write_text(path, text: str) -> None:
    _atomic_write(Path(path), text.encode("utf-8"))
