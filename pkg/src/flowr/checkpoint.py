"""Versioned checkpoint files for trained models.

Layout: magic "FLCK", version u32, header-length u32, a JSON header with
scalars and an array manifest, then the arrays as raw little-endian
float64 in manifest order. Raw bytes make the save/load round trip
bit-exact; the JSON carries the experiment-config hash so a load against
a different configuration can warn.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .crp import CrpParams
from .encoder import ClassEmbeddings, Encoder
from .gaussian import NoiseModel
from .meta import MetaParams

_MAGIC = b"FLCK"
_VERSION = 1
_PREFIX = struct.Struct("<4sII")


@dataclass(frozen=True)
class Checkpoint:
    params: MetaParams
    crp: CrpParams
    noise: NoiseModel
    setting: str
    embeddings: ClassEmbeddings | None = None
    config_hash: str | None = None


def save_checkpoint(path, ckpt: Checkpoint):
    arrays = {"q0": np.asarray(ckpt.params.q0, dtype=np.float64)}
    enc = ckpt.params.encoder
    if enc.kind == "affine":
        arrays["encoder_weight"] = enc.weight
        arrays["encoder_bias"] = enc.bias
    if ckpt.params.class_q is not None:
        arrays["class_q"] = ckpt.params.class_q
        arrays["class_log_lambda"] = ckpt.params.class_log_lambda
    if ckpt.embeddings is not None:
        arrays["embedding_means"] = ckpt.embeddings.means
        arrays["embedding_variances"] = ckpt.embeddings.variances

    header = {
        "setting": ckpt.setting,
        "encoder_kind": enc.kind,
        "a": ckpt.crp.a,
        "rho": ckpt.params.rho,
        "log_lambda0": ckpt.params.log_lambda0,
        "noise_variance": ckpt.noise.noise_variance,
        "config_hash": ckpt.config_hash,
        "arrays": [[name, list(arr.shape)] for name, arr in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(_MAGIC, _VERSION, len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, expected_config_hash=None) -> Checkpoint:
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise ValueError(f"{path}: checkpoint truncated in section 'prefix'")
        magic, version, header_len = _PREFIX.unpack(prefix)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, not a checkpoint")
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version} (expected {_VERSION})")
        blob = fh.read(header_len)
        if len(blob) < header_len:
            raise ValueError(f"{path}: checkpoint truncated in section 'header'")
        header = json.loads(blob)
        arrays = {}
        for name, shape in header["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n)
            if len(raw) < 8 * n:
                raise ValueError(f"{path}: checkpoint truncated in section {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        extra = fh.read(1)
    if extra:
        raise ValueError(f"{path}: trailing garbage after last section")

    if expected_config_hash is not None and header["config_hash"] != expected_config_hash:
        warnings.warn(
            f"{path}: checkpoint config hash {header['config_hash']} does not match "
            f"expected {expected_config_hash}",
            RuntimeWarning,
        )

    if header["encoder_kind"] == "affine":
        encoder = Encoder.affine(arrays["encoder_weight"], arrays["encoder_bias"])
    else:
        encoder = Encoder.identity()
    params = MetaParams(
        encoder=encoder,
        q0=arrays["q0"],
        log_lambda0=header["log_lambda0"],
        rho=header["rho"],
        class_q=arrays.get("class_q"),
        class_log_lambda=arrays.get("class_log_lambda"),
    )
    embeddings = None
    if "embedding_means" in arrays:
        embeddings = ClassEmbeddings(
            means=arrays["embedding_means"], variances=arrays["embedding_variances"]
        )
    return Checkpoint(
        params=params,
        crp=CrpParams(a=header["a"], rho=header["rho"]),
        noise=NoiseModel(noise_variance=header["noise_variance"]),
        setting=header["setting"],
        embeddings=embeddings,
        config_hash=header["config_hash"],
    )
