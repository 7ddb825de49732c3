"""Model checkpoints: the ``GPV1`` binary container.

Layout (all integers little-endian uint32):

    magic b"GPV1"
    <len> config block          utf-8 key=value lines (modality layout,
                                network widths, and run metadata)
    <count> parameter records
    per record: <len> name utf-8, <ndim>, <ndim extents>,
                float64 little-endian data, row-major

Parameter order is preserved, so saving and reloading round-trips the
registry exactly and identical runs produce byte-identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError
from .ioutils import atomic_write_bytes
from .networks import ModalityConfig, ModalitySpec, Params

CHECKPOINT_MAGIC = b"GPV1"

_U32 = struct.Struct("<I")


def _config_lines(config: ModalityConfig, meta: dict) -> str:
    lines = []

    def spec_lines(prefix: str, spec: ModalitySpec):
        lines.append(f"{prefix}.name={spec.name}")
        lines.append(f"{prefix}.dim={spec.dim}")
        lines.append(f"{prefix}.kind={spec.kind}")

    spec_lines("input", config.input)
    spec_lines("target", config.target)
    lines.append(f"n_aux={len(config.auxiliaries)}")
    for i, aux in enumerate(config.auxiliaries):
        spec_lines(f"aux.{i}", aux)
    lines.append(f"latent_dim={config.latent_dim}")
    lines.append(f"hidden_dim={config.hidden_dim}")
    lines.append(f"alpha_hidden_dim={config.alpha_hidden_dim}")
    lines.append(f"alpha_from_features={int(config.alpha_from_features)}")
    for key in sorted(meta):
        lines.append(f"meta.{key}={meta[key]}")
    return "\n".join(lines) + "\n"


def _parse_config(text: str) -> tuple[ModalityConfig, dict[str, str]]:
    entries: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        entries[key] = value

    def spec_of(prefix: str) -> ModalitySpec:
        return ModalitySpec(
            name=entries[f"{prefix}.name"],
            dim=int(entries[f"{prefix}.dim"]),
            kind=entries[f"{prefix}.kind"],
        )

    try:
        aux = tuple(spec_of(f"aux.{i}") for i in range(int(entries["n_aux"])))
        config = ModalityConfig(
            input=spec_of("input"),
            target=spec_of("target"),
            auxiliaries=aux,
            latent_dim=int(entries["latent_dim"]),
            hidden_dim=int(entries["hidden_dim"]),
            alpha_hidden_dim=int(entries["alpha_hidden_dim"]),
            alpha_from_features=bool(int(entries["alpha_from_features"])),
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint config block is missing key {exc}") from None
    meta = {k[len("meta.") :]: v for k, v in entries.items() if k.startswith("meta.")}
    return config, meta


def save_checkpoint(
    path, params: Params, config: ModalityConfig, meta: dict | None = None
) -> None:
    chunks = [CHECKPOINT_MAGIC]
    config_blob = _config_lines(config, meta or {}).encode("utf-8")
    chunks.append(_U32.pack(len(config_blob)))
    chunks.append(config_blob)
    chunks.append(_U32.pack(len(params)))
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        name_blob = name.encode("utf-8")
        chunks.append(_U32.pack(len(name_blob)))
        chunks.append(name_blob)
        chunks.append(_U32.pack(arr.ndim))
        for extent in arr.shape:
            chunks.append(_U32.pack(extent))
        chunks.append(arr.astype("<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.blob):
            raise FormatError(
                f"truncated checkpoint: needed {count} more bytes",
                offset=self.offset,
            )
        out = self.blob[self.offset : self.offset + count]
        self.offset += count
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def load_checkpoint(path) -> tuple[Params, ModalityConfig, dict[str, str]]:
    reader = _Reader(Path(path).read_bytes())
    magic = reader.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(
            f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", offset=0
        )
    config, meta = _parse_config(reader.take(reader.u32()).decode("utf-8"))
    params: Params = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(8 * size), dtype="<f8")
        params[name] = data.reshape(shape).astype(np.float64)
    if reader.offset != len(reader.blob):
        raise FormatError("trailing bytes after checkpoint", offset=reader.offset)
    return params, config, meta
