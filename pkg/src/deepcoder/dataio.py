"""Dataset/checkpoint formats, configuration parsing, synthetic data.

File formats (all little-endian, versioned, magic-guarded):

* Dataset: a directory holding ``manifest.json`` plus two payloads named
  by the manifest: raw float32 images (row-major [N,C,H,W]) and a labels
  CSV with header ``index,subject,au_1,...,au_Q``.
* Checkpoint: magic ``DC2C``, u32 format version, u32 byte length of a
  JSON metadata document (shapes, hyperparameters, RNG state, block
  table), then the raw float64 parameter blocks concatenated in block
  table order.
* Config and metric reports: JSON.

Loaders validate magic and version first and never trust a length field
without checking it against the actual payload size.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, InvalidArgumentError

DATASET_FORMAT = "deepcoder-dataset"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"DC2C"
CHECKPOINT_VERSION = 1


# ------------------------------------------------------------------ dataset


@dataclass
class Dataset:
    """In-memory dataset: images in [0,1], ordinal labels, subject ids.

    Images stay float32 (their storage dtype) so a save/load round trip
    is bit-exact; they are widened to float64 on entry to the models.
    """

    images: np.ndarray          # [N, C, H, W] float32
    labels: np.ndarray          # [N, Q] int64, values 1..levels[q]
    subjects: np.ndarray        # [N] int64
    levels: list[int]

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.subjects = np.ascontiguousarray(self.subjects, dtype=np.int64)
        self.levels = [int(v) for v in self.levels]

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def q(self) -> int:
        return len(self.levels)

    def validate(self) -> None:
        if self.images.ndim != 4:
            raise FormatError(f"images must be 4-D, got {self.images.ndim}-D")
        n = self.images.shape[0]
        if self.labels.shape != (n, self.q):
            raise FormatError(
                f"labels shape {self.labels.shape} != ({n}, {self.q})")
        if self.subjects.shape != (n,):
            raise FormatError(f"subjects shape {self.subjects.shape} != ({n},)")
        for q, lq in enumerate(self.levels):
            if lq < 2:
                raise FormatError(f"levels[{q}] must be >= 2, got {lq}")
            col = self.labels[:, q]
            if col.min() < 1 or col.max() > lq:
                raise FormatError(
                    f"labels for output {q} outside 1..{lq}: "
                    f"range {col.min()}..{col.max()}")


# ---------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    """Recipe for the ordinal blob images used in desk-scale runs.

    Each output owns one Gaussian blob site on a circle; blob amplitude
    scales with level/levels.  Subjects differ by a fixed smooth planar
    intensity offset; pixel noise is white Gaussian.  A six-level scale
    mirrors full-size ordinal coding setups; the desk default is 4.
    """

    height: int = 32
    width: int = 32
    outputs: int = 3
    levels: int = 4
    subjects: int = 8
    samples: int = 1200
    offset_scale: float = 0.15
    noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if min(self.height, self.width) < 8:
            raise InvalidArgumentError("image must be at least 8x8")
        if self.outputs < 1:
            raise InvalidArgumentError("need at least one output")
        if self.levels < 2:
            raise InvalidArgumentError("need at least 2 levels")
        if self.subjects < 1:
            raise InvalidArgumentError("need at least one subject")
        if self.samples < self.subjects:
            raise InvalidArgumentError(
                "need at least one sample per subject")
        if self.noise < 0.0 or self.offset_scale < 0.0:
            raise InvalidArgumentError("noise terms must be >= 0")
        radius = 0.3 * min(self.height, self.width)
        if radius < 1.0:
            raise InvalidArgumentError("blob sites would leave the image")


MAX_BLOB_AMPLITUDE = 0.8


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Render the dataset described by ``spec``, deterministically."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w, q = spec.height, spec.width, spec.outputs

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    radius = 0.3 * min(h, w)
    sigma_b = min(h, w) / 10.0
    angles = 2.0 * np.pi * np.arange(q) / q + 0.5
    blobs = np.empty((q, h, w))
    for i, ang in enumerate(angles):
        sy, sx = cy + radius * np.sin(ang), cx + radius * np.cos(ang)
        blobs[i] = np.exp(-((yy - sy) ** 2 + (xx - sx) ** 2)
                          / (2.0 * sigma_b ** 2))

    # smooth per-subject intensity field: a*x + b*y + c, fixed per subject
    coef = rng.uniform(-1.0, 1.0, size=(spec.subjects, 2))
    base = rng.uniform(0.0, 1.0, size=spec.subjects)
    grid_x = xx / max(w - 1, 1)
    grid_y = yy / max(h - 1, 1)
    offsets = spec.offset_scale * (coef[:, 0, None, None] * grid_x
                                   + coef[:, 1, None, None] * grid_y
                                   + base[:, None, None])

    # every subject appears at least once
    subjects = np.concatenate([
        rng.permutation(spec.subjects),
        rng.integers(0, spec.subjects, size=spec.samples - spec.subjects),
    ]).astype(np.int64)
    labels = rng.integers(1, spec.levels + 1,
                          size=(spec.samples, q)).astype(np.int64)

    amps = MAX_BLOB_AMPLITUDE * labels.astype(np.float64) / spec.levels
    images = offsets[subjects] + np.einsum("nq,qhw->nhw", amps, blobs)
    if spec.noise > 0.0:
        images = images + rng.normal(0.0, spec.noise, size=images.shape)
    images = np.clip(images, 0.0, 1.0)[:, None, :, :]

    ds = Dataset(images=images.astype(np.float32), labels=labels,
                 subjects=subjects, levels=[spec.levels] * q)
    ds.validate()
    return ds


# ----------------------------------------------------------- dataset on disk


def save_dataset(path: str, ds: Dataset) -> None:
    """Write manifest.json, images.f32 and labels.csv into directory."""
    ds.validate()
    os.makedirs(path, exist_ok=True)
    img = np.ascontiguousarray(ds.images, dtype="<f4")
    with open(os.path.join(path, "images.f32"), "wb") as fh:
        fh.write(img.tobytes())
    with open(os.path.join(path, "labels.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "subject"]
                        + [f"au_{i + 1}" for i in range(ds.q)])
        for i in range(ds.n):
            writer.writerow([i, int(ds.subjects[i])]
                            + [int(v) for v in ds.labels[i]])
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "images": {
            "file": "images.f32",
            "dtype": "float32-le",
            "shape": list(ds.images.shape),
        },
        "labels": {
            "file": "labels.csv",
            "outputs": ds.q,
            "levels": ds.levels,
        },
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _manifest_get(node: dict, key: str, kind, where: str):
    if key not in node:
        raise FormatError(f"manifest missing field {where}{key}")
    value = node[key]
    if kind is int and isinstance(value, bool):
        raise FormatError(f"manifest field {where}{key} must be an integer")
    if not isinstance(value, kind):
        raise FormatError(
            f"manifest field {where}{key} has wrong type "
            f"{type(value).__name__}")
    return value


def load_dataset(path: str) -> Dataset:
    """Load a dataset directory; every declared length is re-checked."""
    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"no manifest at {manifest_path}")
    except json.JSONDecodeError as err:
        raise FormatError(f"manifest is not valid JSON: {err}")

    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(
            f"manifest field format: expected {DATASET_FORMAT!r}, "
            f"got {manifest.get('format')!r}")
    if manifest.get("version") != DATASET_VERSION:
        raise FormatError(
            f"manifest field version: unsupported {manifest.get('version')!r}")

    img_node = _manifest_get(manifest, "images", dict, "")
    shape = _manifest_get(img_node, "shape", list, "images.")
    if len(shape) != 4 or not all(isinstance(v, int) and v > 0 for v in shape):
        raise FormatError("manifest field images.shape must be 4 positive ints")
    if _manifest_get(img_node, "dtype", str, "images.") != "float32-le":
        raise FormatError("manifest field images.dtype must be float32-le")
    img_file = os.path.join(path, _manifest_get(img_node, "file", str,
                                                "images."))
    expected = int(np.prod(shape)) * 4
    try:
        actual = os.path.getsize(img_file)
    except OSError as err:
        raise FormatError(f"cannot stat image payload: {err}")
    if actual != expected:
        raise FormatError(
            f"image payload is {actual} bytes, shape requires {expected}")
    with open(img_file, "rb") as fh:
        images = np.frombuffer(fh.read(), dtype="<f4").reshape(shape)

    lab_node = _manifest_get(manifest, "labels", dict, "")
    q = _manifest_get(lab_node, "outputs", int, "labels.")
    levels = _manifest_get(lab_node, "levels", list, "labels.")
    if len(levels) != q or not all(isinstance(v, int) for v in levels):
        raise FormatError("manifest field labels.levels must list Q integers")
    lab_file = os.path.join(path, _manifest_get(lab_node, "file", str,
                                                "labels."))
    header = ["index", "subject"] + [f"au_{i + 1}" for i in range(q)]
    labels = np.empty((shape[0], q), dtype=np.int64)
    subjects = np.empty(shape[0], dtype=np.int64)
    try:
        with open(lab_file, newline="") as fh:
            reader = csv.reader(fh)
            got = next(reader, None)
            if got != header:
                raise FormatError(
                    f"labels.csv header {got} != expected {header}")
            count = 0
            for row in reader:
                if len(row) != 2 + q:
                    raise FormatError(
                        f"labels.csv row {count}: {len(row)} fields, "
                        f"expected {2 + q}")
                if count >= shape[0]:
                    raise FormatError("labels.csv has more rows than images")
                try:
                    idx = int(row[0])
                    subjects[count] = int(row[1])
                    labels[count] = [int(v) for v in row[2:]]
                except ValueError as err:
                    raise FormatError(f"labels.csv row {count}: {err}")
                if idx != count:
                    raise FormatError(
                        f"labels.csv row {count}: index {idx} out of order")
                count += 1
            if count != shape[0]:
                raise FormatError(
                    f"labels.csv has {count} rows, images declare {shape[0]}")
    except OSError as err:
        raise FormatError(f"cannot read labels payload: {err}")

    ds = Dataset(images=images.copy(), labels=labels, subjects=subjects,
                 levels=levels)
    ds.validate()
    return ds


# --------------------------------------------------------------- checkpoint


def write_checkpoint(path: str, meta: dict,
                     blocks: list[tuple[str, np.ndarray]]) -> None:
    """Serialize metadata plus named float64 blocks.

    The block table (name, shape) is appended to ``meta`` so the reader
    can reconstruct arrays without trusting the payload length.
    """
    meta = dict(meta)
    meta["blocks"] = [{"name": name, "shape": list(arr.shape)}
                      for name, arr in blocks]
    blob = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Inverse of write_checkpoint; validates magic, version and sizes."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as err:
        raise FormatError(f"cannot read checkpoint: {err}")
    if len(raw) < 12:
        raise FormatError("checkpoint truncated before header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(
            f"bad checkpoint magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, meta_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if 12 + meta_len > len(raw):
        raise FormatError(
            f"metadata length {meta_len} exceeds file size {len(raw)}")
    try:
        meta = json.loads(raw[12:12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"checkpoint metadata is not valid JSON: {err}")
    table = meta.get("blocks")
    if not isinstance(table, list):
        raise FormatError("checkpoint metadata missing block table")
    offset = 12 + meta_len
    arrays: dict[str, np.ndarray] = {}
    for entry in table:
        if not isinstance(entry, dict) or "name" not in entry \
                or "shape" not in entry:
            raise FormatError("malformed block table entry")
        shape = entry["shape"]
        if not all(isinstance(v, int) and v >= 0 for v in shape):
            raise FormatError(f"block {entry['name']}: bad shape {shape}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + nbytes > len(raw):
            raise FormatError(
                f"block {entry['name']} overruns the file "
                f"({offset + nbytes} > {len(raw)})")
        arr = np.frombuffer(raw[offset:offset + nbytes],
                            dtype="<f8").reshape(shape).copy()
        arrays[entry["name"]] = arr
        offset += nbytes
    if offset != len(raw):
        raise FormatError(
            f"{len(raw) - offset} trailing bytes after the last block")
    return meta, arrays


# ------------------------------------------------------------------- config


@dataclass
class TrainConfig:
    """Every tunable of the pipeline, with desk-scale defaults."""

    seed: int = 0
    # split
    n_l: int = 400
    # optimizer
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 1.0
    # warm-up schedules (0 means the weight is 1 from the start)
    alpha_epochs: int = 10
    beta_epochs: int = 10
    # model
    latent_z0: int = 32
    latent_z1: int = 50
    conv_stages: list = field(
        default_factory=lambda: [[16, 3, True], [8, 3, True]])
    fc_layers: int = 1
    fc_width: int = 128
    sigma_x: float = 0.1
    mc_samples: int = 1
    # gp fitting
    gp_steps_per_epoch: int = 10
    gp_learning_rate: float = 0.05
    encoder_fit_steps: int = 2
    # training loop
    max_epochs: int = 100
    warm_start_epochs: int = 5
    tol: float = 1e-4
    patience: int = 5
    # synthetic data
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)


# section -> key -> (attribute, type)
_CONFIG_SCHEMA: dict[str, dict[str, tuple[str, type]]] = {
    "split": {"n_l": ("n_l", int)},
    "optimizer": {
        "batch_size": ("batch_size", int),
        "learning_rate": ("learning_rate", float),
        "momentum": ("momentum", float),
        "clip_norm": ("clip_norm", float),
    },
    "warmup": {
        "alpha_epochs": ("alpha_epochs", int),
        "beta_epochs": ("beta_epochs", int),
    },
    "model": {
        "latent_z0": ("latent_z0", int),
        "latent_z1": ("latent_z1", int),
        "conv_stages": ("conv_stages", list),
        "fc_layers": ("fc_layers", int),
        "fc_width": ("fc_width", int),
        "sigma_x": ("sigma_x", float),
        "mc_samples": ("mc_samples", int),
    },
    "gp": {
        "steps_per_epoch": ("gp_steps_per_epoch", int),
        "learning_rate": ("gp_learning_rate", float),
        "encoder_fit_steps": ("encoder_fit_steps", int),
    },
    "training": {
        "max_epochs": ("max_epochs", int),
        "warm_start_epochs": ("warm_start_epochs", int),
        "tol": ("tol", float),
        "patience": ("patience", int),
    },
}

_SYNTH_KEYS = {
    "height": int, "width": int, "outputs": int, "levels": int,
    "subjects": int, "samples": int, "offset_scale": float,
    "noise": float, "seed": int,
}


def _coerce(value, kind, path: str):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if kind is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported type")


def _validate_stages(stages, path: str) -> list:
    out = []
    for i, st in enumerate(stages):
        if not isinstance(st, list) or len(st) != 3:
            raise ConfigError(
                f"{path}[{i}]: expected [filters, kernel, pool]")
        filters = _coerce(st[0], int, f"{path}[{i}][0]")
        kernel = _coerce(st[1], int, f"{path}[{i}][1]")
        if not isinstance(st[2], bool):
            raise ConfigError(f"{path}[{i}][2]: expected true/false")
        out.append([filters, kernel, st[2]])
    if not out:
        raise ConfigError(f"{path}: needs at least one stage")
    return out


def parse_config_data(data: dict) -> TrainConfig:
    """Build a TrainConfig from a parsed JSON document.

    Unknown sections or keys are rejected with their full key path;
    missing keys fall back to the documented defaults.
    """
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    cfg = TrainConfig()
    for section, payload in data.items():
        if section == "seed":
            cfg.seed = _coerce(payload, int, "seed")
            continue
        if section == "synth":
            if not isinstance(payload, dict):
                raise ConfigError("synth: expected an object")
            for key, value in payload.items():
                if key not in _SYNTH_KEYS:
                    raise ConfigError(f"unknown key: synth.{key}")
                setattr(cfg.synth, key,
                        _coerce(value, _SYNTH_KEYS[key], f"synth.{key}"))
            continue
        if section not in _CONFIG_SCHEMA:
            raise ConfigError(f"unknown key: {section}")
        if not isinstance(payload, dict):
            raise ConfigError(f"{section}: expected an object")
        for key, value in payload.items():
            if key not in _CONFIG_SCHEMA[section]:
                raise ConfigError(f"unknown key: {section}.{key}")
            attr, kind = _CONFIG_SCHEMA[section][key]
            value = _coerce(value, kind, f"{section}.{key}")
            if attr == "conv_stages":
                value = _validate_stages(value, f"{section}.{key}")
            setattr(cfg, attr, value)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: TrainConfig) -> None:
    checks = [
        (cfg.n_l >= 2, "split.n_l must be >= 2"),
        (cfg.batch_size >= 1, "optimizer.batch_size must be >= 1"),
        (cfg.learning_rate > 0, "optimizer.learning_rate must be > 0"),
        (0 <= cfg.momentum < 1, "optimizer.momentum must lie in [0,1)"),
        (cfg.clip_norm > 0, "optimizer.clip_norm must be > 0"),
        (cfg.alpha_epochs >= 0, "warmup.alpha_epochs must be >= 0"),
        (cfg.beta_epochs >= 0, "warmup.beta_epochs must be >= 0"),
        (cfg.latent_z0 >= 1, "model.latent_z0 must be >= 1"),
        (cfg.latent_z1 >= 1, "model.latent_z1 must be >= 1"),
        (cfg.fc_layers >= 0, "model.fc_layers must be >= 0"),
        (cfg.sigma_x > 0, "model.sigma_x must be > 0"),
        (cfg.mc_samples >= 1, "model.mc_samples must be >= 1"),
        (cfg.gp_steps_per_epoch >= 0, "gp.steps_per_epoch must be >= 0"),
        (cfg.gp_learning_rate > 0, "gp.learning_rate must be > 0"),
        (cfg.encoder_fit_steps >= 0, "gp.encoder_fit_steps must be >= 0"),
        (cfg.max_epochs >= 0, "training.max_epochs must be >= 0"),
        (cfg.warm_start_epochs >= 0,
         "training.warm_start_epochs must be >= 0"),
        (cfg.tol >= 0, "training.tol must be >= 0"),
        (cfg.patience >= 1, "training.patience must be >= 1"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def parse_config(path: str) -> TrainConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        key = _nearest_key(text, err.pos)
        where = f" near key {key!r}" if key else ""
        raise ConfigError(f"config is not valid JSON{where}: {err}")
    return parse_config_data(data)


def _nearest_key(text: str, pos: int) -> str | None:
    """Best-effort: the JSON key preceding a parse error position."""
    import re
    matches = list(re.finditer(r'"([^"\\]+)"\s*:', text[:pos]))
    return matches[-1].group(1) if matches else None


def save_checkpoint(path: str, state) -> None:
    """Persist a trainer.TrainState so training can resume bit-exactly.

    Float64 tensors travel as raw blocks; everything else (config,
    split indices, epoch, history, RNG bit state, level counts) lives
    in the JSON metadata.
    """
    blocks: list[tuple[str, np.ndarray]] = []
    for name in sorted(state.vcae_params):
        blocks.append((f"vcae.{name}", state.vcae_params[name]))
    for name in sorted(state.vog.params):
        blocks.append((f"vog.{name}", state.vog.params[name]))
    blocks.append(("cache.z0_l", state.vog.z0))
    blocks.append(("prior.mean", state.prior.mean))
    blocks.append(("prior.var", state.prior.var))
    for name in sorted(state.velocities):
        blocks.append((f"vel.{name}", state.velocities[name]))
    meta = {
        "config": config_to_dict(state.config),
        "input_shape": [state.arch.in_channels, state.arch.in_height,
                        state.arch.in_width],
        "epoch": state.epoch,
        "history": state.history,
        "levels": state.vog.levels,
        "latent_z1": state.vog.d1,
        "idx_r": [int(v) for v in state.idx_r],
        "idx_l": [int(v) for v in state.idx_l],
        "rng_state": state.rng.bit_generator.state,
    }
    write_checkpoint(path, meta, blocks)


def load_checkpoint(path: str):
    """Rebuild the trainer.TrainState written by save_checkpoint."""
    from . import trainer, vcae, vogpae

    meta, arrays = read_checkpoint(path)
    for key in ("config", "input_shape", "epoch", "history", "levels",
                "latent_z1", "idx_r", "idx_l", "rng_state"):
        if key not in meta:
            raise FormatError(f"checkpoint metadata missing field {key}")
    cfg = parse_config_data(meta["config"])
    shape = meta["input_shape"]
    if len(shape) != 3 or not all(isinstance(v, int) and v > 0
                                  for v in shape):
        raise FormatError("checkpoint field input_shape must be 3 "
                          "positive ints")
    arch = vcae.VcaeArchitecture(
        in_channels=shape[0], in_height=shape[1], in_width=shape[2],
        stages=[vcae.ConvStage(f, k, p) for f, k, p in cfg.conv_stages],
        fc_layers=cfg.fc_layers, fc_width=cfg.fc_width,
        latent=cfg.latent_z0)
    arch.validate()
    vcae_params = {}
    vog_params = {}
    velocities = {}
    for name, arr in arrays.items():
        if name.startswith("vcae."):
            vcae_params[name.removeprefix("vcae.")] = arr
        elif name.startswith("vog."):
            vog_params[name.removeprefix("vog.")] = arr
        elif name.startswith("vel."):
            velocities[name.removeprefix("vel.")] = arr
    for required in ("cache.z0_l", "prior.mean", "prior.var"):
        if required not in arrays:
            raise FormatError(f"checkpoint missing block {required}")
    vog = vogpae.VogpaeState(
        params=vog_params, z0=arrays["cache.z0_l"],
        levels=[int(v) for v in meta["levels"]],
        d1=int(meta["latent_z1"]))
    prior = vcae.GaussianPrior(arrays["prior.mean"], arrays["prior.var"])
    rng = np.random.default_rng(0)
    try:
        rng.bit_generator.state = meta["rng_state"]
    except (KeyError, TypeError, ValueError) as err:
        raise FormatError(f"checkpoint field rng_state is invalid: {err}")
    return trainer.TrainState(
        config=cfg, arch=arch, vcae_params=vcae_params, vog=vog,
        prior=prior,
        idx_r=np.asarray(meta["idx_r"], dtype=np.int64),
        idx_l=np.asarray(meta["idx_l"], dtype=np.int64),
        epoch=int(meta["epoch"]), history=list(meta["history"]),
        velocities=velocities, rng=rng)


def config_to_dict(cfg: TrainConfig) -> dict:
    """Full round-trippable document (inverse of parse_config_data)."""
    return {
        "seed": cfg.seed,
        "split": {"n_l": cfg.n_l},
        "optimizer": {
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "momentum": cfg.momentum,
            "clip_norm": cfg.clip_norm,
        },
        "warmup": {
            "alpha_epochs": cfg.alpha_epochs,
            "beta_epochs": cfg.beta_epochs,
        },
        "model": {
            "latent_z0": cfg.latent_z0,
            "latent_z1": cfg.latent_z1,
            "conv_stages": [list(st) for st in cfg.conv_stages],
            "fc_layers": cfg.fc_layers,
            "fc_width": cfg.fc_width,
            "sigma_x": cfg.sigma_x,
            "mc_samples": cfg.mc_samples,
        },
        "gp": {
            "steps_per_epoch": cfg.gp_steps_per_epoch,
            "learning_rate": cfg.gp_learning_rate,
            "encoder_fit_steps": cfg.encoder_fit_steps,
        },
        "training": {
            "max_epochs": cfg.max_epochs,
            "warm_start_epochs": cfg.warm_start_epochs,
            "tol": cfg.tol,
            "patience": cfg.patience,
        },
        "synth": {
            "height": cfg.synth.height,
            "width": cfg.synth.width,
            "outputs": cfg.synth.outputs,
            "levels": cfg.synth.levels,
            "subjects": cfg.synth.subjects,
            "samples": cfg.synth.samples,
            "offset_scale": cfg.synth.offset_scale,
            "noise": cfg.synth.noise,
            "seed": cfg.synth.seed,
        },
    }
