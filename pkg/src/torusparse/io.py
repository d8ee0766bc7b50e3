"""Bit-exact checkpoint container and key=value config parsing.

Checkpoint layout (all little-endian):

    magic "LSC1" | version u16 | flags u16
    D, K, L, n, m, N as u32
    frequency table  L*n   int32, row-major
    basis            D*2L  float64, column-major
    dictionary       D*K   float64, column-major
    kappa, mu        L each, float64
    noise_var, sparsity    float64
    [flags bit 0] dataset: count u32, then count*D float64, image-major

The payload length is fully determined by the header; loading verifies
the magic, the version, and every model invariant before returning.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .datasets import Dataset
from .posterior import TorusPrior
from .torus import FrequencyTable
from .training import ModelParams, TrainConfig

MAGIC = b"LSC1"
VERSION = 1
FLAG_DATASET = 0x0001


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint payload."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class InvariantError(CheckpointError):
    pass


class ConfigError(ValueError):
    """Malformed or invalid configuration file."""


def save_checkpoint(model: ModelParams, path, n_grid: int = 50,
                    dataset: Optional[Dataset] = None) -> None:
    """Serialize model (and optionally a dataset) to the container format."""
    d, width = model.basis.shape
    L = model.freq.L
    k = model.dictionary.shape[1]
    flags = FLAG_DATASET if dataset is not None else 0
    parts = [
        MAGIC,
        struct.pack("<HH", VERSION, flags),
        struct.pack("<6I", d, k, L, model.freq.n, model.freq.multiplicity, n_grid),
        model.freq.entries.astype("<i4").tobytes(),
        model.basis.astype("<f8").tobytes(order="F"),
        model.dictionary.astype("<f8").tobytes(order="F"),
        model.prior.kappa.astype("<f8").tobytes(),
        model.prior.mu.astype("<f8").tobytes(),
        struct.pack("<dd", model.noise_var, model.sparsity),
    ]
    if dataset is not None:
        if dataset.images.shape[1] != d:
            raise CheckpointError("dataset image length does not match model D")
        parts.append(struct.pack("<I", dataset.images.shape[0]))
        parts.append(dataset.images.astype("<f8").tobytes())
    with open(path, "wb") as handle:
        handle.write(b"".join(parts))


@dataclass(eq=False)
class CheckpointContents:
    model: ModelParams
    n_grid: int
    dataset: Optional[Dataset]


def _read_exact(blob: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if offset + size > len(blob):
        raise CheckpointError(
            f"payload truncated reading {what} at byte {offset} (need {size} bytes)"
        )
    return blob[offset : offset + size], offset + size


def load_checkpoint_full(path) -> CheckpointContents:
    """Load and validate the container, returning model, grid size, dataset."""
    with open(path, "rb") as handle:
        blob = handle.read()
    raw, offset = _read_exact(blob, 0, 4, "magic")
    if raw != MAGIC:
        raise BadMagicError(f"bad magic {raw!r}")
    raw, offset = _read_exact(blob, offset, 4, "version/flags")
    version, flags = struct.unpack("<HH", raw)
    if version != VERSION:
        raise VersionError(f"unsupported version {version} (expected {VERSION})")
    raw, offset = _read_exact(blob, offset, 24, "dimensions")
    d, k, L, n, m, n_grid = struct.unpack("<6I", raw)

    raw, offset = _read_exact(blob, offset, 4 * L * n, "frequency table")
    entries = np.frombuffer(raw, dtype="<i4").reshape(L, n).astype(np.int64)
    raw, offset = _read_exact(blob, offset, 8 * d * 2 * L, "basis")
    basis = np.frombuffer(raw, dtype="<f8").reshape((d, 2 * L), order="F").copy()
    raw, offset = _read_exact(blob, offset, 8 * d * k, "dictionary")
    dictionary = np.frombuffer(raw, dtype="<f8").reshape((d, k), order="F").copy()
    raw, offset = _read_exact(blob, offset, 8 * L, "kappa")
    kappa = np.frombuffer(raw, dtype="<f8").copy()
    raw, offset = _read_exact(blob, offset, 8 * L, "mu")
    mu = np.frombuffer(raw, dtype="<f8").copy()
    raw, offset = _read_exact(blob, offset, 16, "scalars")
    noise_var, sparsity = struct.unpack("<dd", raw)

    dataset = None
    if flags & FLAG_DATASET:
        raw, offset = _read_exact(blob, offset, 4, "dataset count")
        (count,) = struct.unpack("<I", raw)
        raw, offset = _read_exact(blob, offset, 8 * count * d, "dataset images")
        images = np.frombuffer(raw, dtype="<f8").reshape(count, d).copy()
        side = int(round(d**0.5))
        if side * side != d:
            raise CheckpointError(f"dataset dimension {d} is not a square")
        dataset = Dataset(images=images, side=side)
    if offset != len(blob):
        raise CheckpointError(f"trailing bytes after offset {offset}")

    try:
        model = ModelParams(
            basis=basis,
            dictionary=dictionary,
            freq=FrequencyTable(n=n, entries=entries, multiplicity=m),
            noise_var=noise_var,
            sparsity=sparsity,
            prior=TorusPrior(kappa=kappa, mu=mu),
        )
        model.validate()
    except ValueError as exc:
        raise InvariantError(str(exc)) from exc
    return CheckpointContents(model=model, n_grid=n_grid, dataset=dataset)


def load_checkpoint(path) -> ModelParams:
    return load_checkpoint_full(path).model


# Config file keys -> TrainConfig attributes.
CONFIG_KEYS = {
    "B": "batch_size",
    "T": "fista_steps",
    "N": "grid_size",
    "epochs": "epochs",
    "lr_phi": "lr_dict",
    "lr_w": "lr_basis",
    "alpha0": "code_init",
    "seed": "seed",
    "grad_mode": "grad_mode",
    "n": "torus_dim",
    "L": "n_freq",
    "K": "n_atoms",
    "m": "multiplicity",
    "D": "image_dim",
    "sigma2": "noise_var",
    "lambda": "sparsity",
    "include_zero": "include_zero_freq",
}


def _parse_value(text: str, target_type):
    if target_type is bool:
        lowered = text.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return target_type(text)


def parse_config(path) -> TrainConfig:
    """Parse `key = value` lines ('#' comments); missing keys keep defaults."""
    cfg = TrainConfig()
    types = {f.name: f.type for f in fields(TrainConfig)}
    concrete = {"batch_size": int, "fista_steps": int, "grid_size": int,
                "epochs": int, "lr_dict": float, "lr_basis": float,
                "code_init": float, "seed": int, "grad_mode": str,
                "torus_dim": int, "n_freq": int, "n_atoms": int,
                "multiplicity": int, "image_dim": int, "noise_var": float,
                "sparsity": float, "include_zero_freq": bool}
    assert set(concrete) == set(types)
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"line {lineno}: expected `key = value`")
            key, _, value = body.partition("=")
            key = key.strip()
            value = value.strip()
            attr = CONFIG_KEYS.get(key)
            if attr is None:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                setattr(cfg, attr, _parse_value(value, concrete[attr]))
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg
