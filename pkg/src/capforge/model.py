"""The full captioning model and its binary checkpoint format.

Checkpoint layout (little-endian)::

    b"CGRU" | u32 version | u32 header length | header JSON (config + vocabulary)
    u32 tensor count
    per tensor: u16 name length | name (utf-8) | u8 ndim | u32 dims... | float64 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from capforge.config import TrainConfig
from capforge.data.vocab import Vocabulary
from capforge.decoder import DecoderParams
from capforge.encoder import EncoderParams
from capforge.errors import DataError
from capforge.numerics import Tensor
from capforge.reconstructor import ReconstructorParams

MAGIC = b"CGRU"
VERSION = 1


@dataclass
class CaptionModel:
    encoder: EncoderParams
    decoder: DecoderParams
    reconstructor: ReconstructorParams
    config: TrainConfig
    vocab: Vocabulary

    @classmethod
    def init(cls, cfg: TrainConfig, vocab: Vocabulary, seed: int | None = None) -> "CaptionModel":
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        enc = EncoderParams.init(rng, cfg.grid, cfg.c1, cfg.c2, cfg.d_v, cfg.d_a)
        dec = DecoderParams.init(rng, len(vocab), cfg.d_a, cfg.d_v, cfg.d_e, cfg.d_h, cfg.cell)
        rec = ReconstructorParams.init(rng, cfg.d_h, cfg.d_v, cfg.pooling)
        return cls(enc, dec, rec, cfg, vocab)

    @property
    def theta_ed(self) -> list[Tensor]:
        return self.encoder.tensors() + self.decoder.tensors()

    @property
    def theta_dr(self) -> list[Tensor]:
        return self.reconstructor.tensors()

    def parameters(self) -> list[Tensor]:
        return self.theta_ed + self.theta_dr

    def named_parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.parameters()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters().items():
            t.data[...] = snap[name]


def save_checkpoint(m: CaptionModel, path) -> None:
    header = json.dumps({"config": m.config.to_dict(), "vocab": m.vocab.tokens,
                         "min_count": m.vocab.min_count}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    params = m.named_parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, cfg: TrainConfig | None = None) -> CaptionModel:
    """Rebuild a model from ``path``.

    With ``cfg`` the tensors are loaded into a model of those dimensions and
    any shape disagreement is reported by tensor name.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise DataError(f"{path}: not a capforge checkpoint (bad magic)")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise DataError(f"{path}: checkpoint version {version}, expected {VERSION}")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
        saved_cfg = TrainConfig(**{f.name: header["config"][f.name] for f in fields(TrainConfig)})
        vocab = Vocabulary(list(header["vocab"]), min_count=int(header["min_count"]))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: corrupted checkpoint header: {exc}") from exc

    tensors = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.buf):
        raise DataError(f"{path}: trailing bytes after tensor records")

    m = CaptionModel.init(cfg or saved_cfg, vocab)
    params = m.named_parameters()
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise DataError(f"{path}: tensor names differ (missing {missing}, unexpected {extra})")
    for name, t in params.items():
        if tensors[name].shape != t.shape:
            raise DataError(f"{path}: shape mismatch for tensor {name}: "
                            f"checkpoint {tensors[name].shape}, model {t.shape}")
    for name, t in params.items():
        t.data[...] = tensors[name]
    return m
