"""Run configuration files, checkpoints, metrics streams and exporters.

File formats (all numeric binary data little-endian):

* run config: one flat JSON object; every key required, unknown keys rejected.
* checkpoint: ``.npz`` archive with ``param/<name>``, ``velocity/<name>``,
  ``accumulator`` arrays and a ``meta`` entry holding UTF-8 JSON
  (format version, config hash, full config, schedule position).
* metrics: JSON lines; the first line is a header with format version and
  config hash, then one record per epoch. Wall-clock times go to a separate
  ``timing.jsonl`` so the metrics file is reproducible byte for byte.
* grids (attention, masks, confusion matrices, embeddings): comma-separated
  values preceded by one ``#`` comment line carrying format version and
  config hash.
* graymap: binary PGM (P5, maxval 255).
* datasets: ``<split>_images.bin`` (<f4), ``<split>_labels.bin`` (<i8),
  ``<split>_positions.bin`` (<i8) and ``manifest.json``.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import SyntheticDataset, SyntheticDatasetSpec
from .training import EpochAccumulator, MetricsRecord, SGD, TrainConfig, Trainer
from .model import TPSKGModel
from .vit import ModelConfig, Params
from .tensor import Tensor

FORMAT_VERSION = 1


class FormatError(ValueError):
    """A file is malformed, from another format version, or from another config."""


class ConfigFileError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(message)


# -------------------------------------------------------------- run config

_MODEL_KEYS = ("image_h", "image_w", "channels", "patch", "embed_dim", "layers", "heads",
               "mlp_ratio", "classes", "seed")
_TRAIN_KEYS = ("lr0", "momentum", "batch", "epochs", "mu", "mode", "precision", "top_k", "pad")
_DATA_KEYS = ("train_per_class", "test_per_class", "jitter", "noise_std", "background_std",
              "glyph_block", "mirror_glyphs", "data_seed")

_TYPES = {
    "image_h": int, "image_w": int, "channels": int, "patch": int, "embed_dim": int, "layers": int,
    "heads": int, "mlp_ratio": float, "classes": int, "seed": int,
    "lr0": float, "momentum": float, "batch": int, "epochs": int, "mu": float, "mode": str,
    "precision": int, "top_k": int, "pad": int,
    "train_per_class": int, "test_per_class": int, "jitter": int, "noise_std": float,
    "background_std": float, "glyph_block": int, "mirror_glyphs": bool, "data_seed": int,
}
RUN_KEYS = _MODEL_KEYS + _TRAIN_KEYS + _DATA_KEYS
DATA_SPEC_KEYS = tuple(f.name for f in fields(SyntheticDatasetSpec))


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: SyntheticDatasetSpec

    def to_flat(self) -> dict:
        m, t, d = self.model, self.train, self.data
        flat = {k: getattr(m, k) for k in _MODEL_KEYS}
        flat.update({k: getattr(t, k) for k in _TRAIN_KEYS})
        flat.update({k: getattr(d, k) for k in _DATA_KEYS if k != "data_seed"})
        flat["data_seed"] = d.seed
        return flat

    def hash(self) -> str:
        return config_hash(self.to_flat())


def config_hash(flat: dict) -> str:
    canon = json.dumps(flat, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def default_run_config(mode: str = "full", seed: int = 0, **overrides) -> RunConfig:
    flat = RunConfig(ModelConfig(seed=seed), TrainConfig(mode=mode, seed=seed),
                     SyntheticDatasetSpec(seed=0)).to_flat()
    flat.update(overrides)
    return run_config_from_flat(flat)


def _coerce(key: str, value):
    want = _TYPES[key]
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigFileError(f"key {key!r} must be true or false, got {value!r}", key)
        return value
    if want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigFileError(f"key {key!r} must be an integer, got {value!r}", key)
        return value
    if want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigFileError(f"key {key!r} must be a number, got {value!r}", key)
        return float(value)
    if not isinstance(value, str):
        raise ConfigFileError(f"key {key!r} must be a string, got {value!r}", key)
    return value


def _check_keys(obj: dict, allowed: tuple) -> None:
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigFileError(f"unknown key {unknown[0]!r}", unknown[0])
    missing = [k for k in allowed if k not in obj]
    if missing:
        raise ConfigFileError(f"missing key {missing[0]!r}", missing[0])


def run_config_from_flat(obj: dict) -> RunConfig:
    _check_keys(obj, RUN_KEYS)
    v = {k: _coerce(k, obj[k]) for k in RUN_KEYS}
    try:
        model = ModelConfig(**{k: v[k] for k in _MODEL_KEYS})
    except ValueError as exc:
        raise ConfigFileError(f"model section: {exc}", _first_key_in(str(exc), _MODEL_KEYS)) from exc
    try:
        train = TrainConfig(**{k: v[k] for k in _TRAIN_KEYS}, seed=v["seed"])
    except ValueError as exc:
        raise ConfigFileError(f"training section: {exc}", _first_key_in(str(exc), _TRAIN_KEYS)) from exc
    try:
        data = SyntheticDatasetSpec(
            classes=model.classes, canvas_h=model.image_h, canvas_w=model.image_w,
            channels=model.channels, glyph=model.patch, seed=v["data_seed"],
            **{k: v[k] for k in _DATA_KEYS if k != "data_seed"},
        )
    except ValueError as exc:
        raise ConfigFileError(f"dataset section: {exc}", _first_key_in(str(exc), _DATA_KEYS)) from exc
    return RunConfig(model, train, data)


def _first_key_in(message: str, keys: tuple) -> str | None:
    for k in keys:
        if k in message:
            return k
    return None


def parse_run_config(text: str) -> RunConfig:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigFileError("config must be a single flat object")
    return run_config_from_flat(obj)


def serialize_run_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_flat(), indent=2) + "\n"


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config file {path}: {exc.strerror}") from exc
    return parse_run_config(text)


def parse_data_spec(text: str) -> SyntheticDatasetSpec:
    """A dataset spec file, or a full run config from which the dataset part is taken."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigFileError("spec must be a single flat object")
    if set(obj) <= set(DATA_SPEC_KEYS) and "data_seed" not in obj:
        _check_keys(obj, DATA_SPEC_KEYS)
        try:
            return SyntheticDatasetSpec(**obj)
        except (TypeError, ValueError) as exc:
            raise ConfigFileError(str(exc)) from exc
    return run_config_from_flat(obj).data


# ------------------------------------------------------------ atomic writes


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _le(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path, trainer: Trainer, run_cfg: RunConfig) -> None:
    model = trainer.model
    meta = {
        "format_version": FORMAT_VERSION,
        "config_hash": run_cfg.hash(),
        "config": run_cfg.to_flat(),
        "mode": model.mode,
        "dtype": model.dtype.name,
        "epoch": trainer.epoch,
        "batch_index": trainer.batch_index,
        "global_step": trainer.global_step,
        "encoder_keys": list(model.encoder),
        "head_keys": list(model.head),
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for name, p in model.params.items():
        arrays["param/" + name] = _le(p.data)
        arrays["velocity/" + name] = _le(trainer.optimizer.velocity[name])
    arrays["accumulator"] = _le(trainer.acc.as_array())
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


@dataclass
class Checkpoint:
    meta: dict
    run_config: RunConfig
    params: dict
    velocity: dict
    accumulator: np.ndarray

    def build_model(self) -> TPSKGModel:
        cfg = self.run_config
        dtype = np.dtype(self.meta["dtype"])

        def group(keys):
            return Params((k, Tensor(self.params[k].astype(dtype), requires_grad=True, name=k)) for k in keys)

        return TPSKGModel(cfg.model, cfg.train.mode, dtype=dtype, top_k=cfg.train.top_k,
                          encoder=group(self.meta["encoder_keys"]), head=group(self.meta["head_keys"]))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        if "meta" not in archive.files:
            raise FormatError(f"{path} is not a checkpoint (no meta entry)")
        meta = json.loads(archive["meta"].tobytes().decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"{path}: format version {meta.get('format_version')} != {FORMAT_VERSION}")
        run_cfg = run_config_from_flat(meta["config"])
        if run_cfg.hash() != meta["config_hash"]:
            raise FormatError(f"{path}: config hash mismatch")
        params = {k[6:]: archive[k] for k in archive.files if k.startswith("param/")}
        velocity = {k[9:]: archive[k] for k in archive.files if k.startswith("velocity/")}
        acc = archive["accumulator"]
    return Checkpoint(meta, run_cfg, params, velocity, acc)


def restore_trainer(ckpt: Checkpoint, train_set: SyntheticDataset, test_set: SyntheticDataset) -> Trainer:
    model = ckpt.build_model()
    trainer = Trainer(model, train_set, test_set, ckpt.run_config.train,
                      epoch=ckpt.meta["epoch"], batch_index=ckpt.meta["batch_index"],
                      global_step=ckpt.meta["global_step"],
                      acc=EpochAccumulator.from_array(ckpt.accumulator))
    opt = SGD(model.params, ckpt.run_config.train.momentum)
    for k in opt.velocity:
        opt.velocity[k] = ckpt.velocity[k].astype(model.dtype)
    trainer.optimizer = opt
    return trainer


# ----------------------------------------------------------------- metrics


def _metrics_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True) + "\n"


def metrics_header(run_cfg: RunConfig) -> dict:
    return {"format_version": FORMAT_VERSION, "config_hash": run_cfg.hash(), "mode": run_cfg.train.mode}


class MetricsWriter:
    """Line-delimited metrics; each append rewrites the file atomically."""

    def __init__(self, out_dir, run_cfg: RunConfig, resume: bool = False):
        self.path = Path(out_dir) / "metrics.jsonl"
        self.timing_path = Path(out_dir) / "timing.jsonl"
        header = _metrics_line(metrics_header(run_cfg))
        if resume and self.path.exists():
            existing = self.path.read_text()
            if not existing.startswith(header):
                raise FormatError(f"{self.path} belongs to a different run configuration")
        else:
            atomic_write_text(self.path, header)
            atomic_write_text(self.timing_path, "")

    def truncate_after(self, epoch: int) -> None:
        """Drop records past ``epoch`` (resuming from an older checkpoint)."""
        lines = self.path.read_text().splitlines(keepends=True)
        keep = [lines[0]] + [ln for ln in lines[1:] if json.loads(ln)["epoch"] <= epoch]
        atomic_write_text(self.path, "".join(keep))
        if self.timing_path.exists():
            t = [ln for ln in self.timing_path.read_text().splitlines(keepends=True)
                 if json.loads(ln)["epoch"] <= epoch]
            atomic_write_text(self.timing_path, "".join(t))

    def append(self, rec: MetricsRecord) -> None:
        current = self.path.read_text()
        atomic_write_text(self.path, current + _metrics_line(rec.deterministic_dict()))
        timing = self.timing_path.read_text() if self.timing_path.exists() else ""
        atomic_write_text(self.timing_path,
                          timing + _metrics_line({"epoch": rec.epoch, "step": rec.step, "wall_ms": rec.wall_ms}))


def read_metrics(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {header.get('format_version')}")
    return header, [json.loads(ln) for ln in lines[1:]]


# ------------------------------------------------------------------- grids


def _fmt(dtype) -> str:
    return "%.9g" if np.dtype(dtype) == np.float32 else "%.17g"


def write_grid(path, grid, config_hash_: str, note: str = "", fmt: str | None = None) -> None:
    grid = np.atleast_2d(np.asarray(grid))
    fmt = fmt or (_fmt(grid.dtype) if grid.dtype.kind == "f" else "%d")
    head = f"# tpskg format_version={FORMAT_VERSION} config_hash={config_hash_}"
    if note:
        head += f" {note}"
    lines = [head] + [",".join(fmt % v for v in row) for row in grid]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_grid(path, dtype=np.float64) -> tuple[dict, np.ndarray]:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# tpskg"):
        raise FormatError(f"{path} has no tpskg header line")
    meta = dict(tok.split("=", 1) for tok in text[0][2:].split()[1:] if "=" in tok)
    if int(meta.get("format_version", -1)) != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {meta.get('format_version')}")
    rows = [[float(x) for x in ln.split(",")] for ln in text[1:] if ln.strip()]
    return meta, np.array(rows, dtype=dtype)


def rescale_u8(values: np.ndarray) -> np.ndarray:
    """Linear map of [min, max] onto [0, 255]; a constant input maps to 0."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, grid: np.ndarray, scale: int = 1, comment: str = "") -> None:
    img = rescale_u8(grid)
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    h, w = img.shape
    head = "P5\n"
    if comment:
        head += f"# {comment}\n"
    head += f"{w} {h}\n255\n"
    atomic_write_bytes(path, head.encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode())
        pos = end
    if tokens[0] != "P5" or tokens[3] != "255":
        raise FormatError(f"{path}: only binary 8-bit PGM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------- datasets


def spec_hash(spec: SyntheticDatasetSpec) -> str:
    return config_hash(spec.to_dict())


def write_dataset(out_dir, spec: SyntheticDatasetSpec, train: SyntheticDataset, test: SyntheticDataset) -> None:
    out = Path(out_dir)
    manifest = {"format_version": FORMAT_VERSION, "spec": spec.to_dict(), "spec_hash": spec_hash(spec),
                "seed": spec.seed, "splits": {}}
    for name, ds in (("train", train), ("test", test)):
        atomic_write_bytes(out / f"{name}_images.bin", _le(ds.images.astype(np.float32)).tobytes())
        atomic_write_bytes(out / f"{name}_labels.bin", _le(ds.labels.astype(np.int64)).tobytes())
        entry = {"images": f"{name}_images.bin", "labels": f"{name}_labels.bin",
                 "shape": list(ds.images.shape), "dtype": "<f4", "label_dtype": "<i8",
                 "labels_list": ds.labels.tolist()}
        if ds.positions is not None:
            atomic_write_bytes(out / f"{name}_positions.bin", _le(ds.positions.astype(np.int64)).tobytes())
            entry["positions"] = f"{name}_positions.bin"
        manifest["splits"][name] = entry
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")


def read_dataset(data_dir):
    """Returns (spec, train, test) from a directory written by :func:`write_dataset`."""
    d = Path(data_dir)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except OSError as exc:
        raise FormatError(f"cannot read dataset manifest in {d}: {exc.strerror}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{d}: unsupported dataset format version {manifest.get('format_version')}")
    spec = SyntheticDatasetSpec(**manifest["spec"])
    if spec_hash(spec) != manifest["spec_hash"]:
        raise FormatError(f"{d}: manifest spec hash mismatch")
    splits = []
    for name in ("train", "test"):
        e = manifest["splits"][name]
        images = np.fromfile(d / e["images"], dtype="<f4").reshape(e["shape"]).astype(np.float32)
        labels = np.fromfile(d / e["labels"], dtype="<i8").astype(np.int64)
        pos = None
        if "positions" in e:
            pos = np.fromfile(d / e["positions"], dtype="<i8").reshape(len(labels), 2, 2).astype(np.int64)
        splits.append(SyntheticDataset(images, labels, pos))
    return spec, splits[0], splits[1]
