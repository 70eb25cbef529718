"""Binary model file format (magic ``GFM1``).

Layout, all integers little-endian:

* 4 bytes magic ``GFM1``
* u32 header length, then the model config as UTF-8 JSON
* tensors until EOF, each: u32 name length, name bytes (UTF-8), u8 dtype tag
  (1 = float32), u8 rank, u32 dims[rank], then the row-major float32 payload.

Every tensor named by :meth:`ModelWeights.named_tensors` appears exactly
once; loads are validated against the header config and round-trip
bit-exactly.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .config import ModelConfig
from .errors import ConfigurationError, ModelFormatError
from .model import LayerWeights, ModelWeights

MAGIC = b"GFM1"
DTYPE_F32 = 1


def _write(fh, weights: ModelWeights) -> None:
    fh.write(MAGIC)
    header = json.dumps(weights.config.to_dict(), sort_keys=True).encode("utf-8")
    fh.write(struct.pack("<I", len(header)))
    fh.write(header)
    for name, arr in weights.named_tensors():
        payload = np.ascontiguousarray(arr, dtype="<f4")
        name_bytes = name.encode("utf-8")
        fh.write(struct.pack("<I", len(name_bytes)))
        fh.write(name_bytes)
        fh.write(struct.pack("<BB", DTYPE_F32, payload.ndim))
        fh.write(struct.pack(f"<{payload.ndim}I", *payload.shape))
        fh.write(payload.tobytes(order="C"))


def save_model(path, weights: ModelWeights) -> None:
    with open(path, "wb") as fh:
        _write(fh, weights)


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ModelFormatError(f"truncated file while reading {what}")
    return data


def load_model(path) -> ModelWeights:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ModelFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        header = _read_exact(fh, header_len, "config header")
        try:
            cfg = ModelConfig.from_dict(json.loads(header.decode("utf-8")))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ModelFormatError(f"unreadable config header: {exc}") from exc
        except ConfigurationError as exc:
            raise ModelFormatError(f"invalid config header: {exc}") from exc

        tensors: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ModelFormatError("truncated file while reading tensor name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            dtype_tag, rank = struct.unpack("<BB", _read_exact(fh, 2, f"tensor {name} header"))
            if dtype_tag != DTYPE_F32:
                raise ModelFormatError(f"tensor {name} has unsupported dtype tag {dtype_tag}")
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"tensor {name} dims"))
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(fh, 4 * count, f"tensor {name} payload")
            if name in tensors:
                raise ModelFormatError(f"tensor {name} appears more than once")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)

    return _assemble(cfg, tensors)


def _take(tensors: dict, name: str, shape: tuple[int, ...]) -> np.ndarray:
    if name not in tensors:
        raise ModelFormatError(f"missing tensor {name}")
    arr = tensors.pop(name)
    if arr.shape != shape:
        raise ModelFormatError(f"tensor {name} has dims {arr.shape}, config implies {shape}")
    return arr


def _assemble(cfg: ModelConfig, tensors: dict[str, np.ndarray]) -> ModelWeights:
    d, kv_dim = cfg.d_model, cfg.n_kv_heads * cfg.head_dim
    tok_emb = _take(tensors, "tok_emb", (cfg.vocab_size, d))
    layers = []
    for i in range(cfg.n_layers):
        layers.append(
            LayerWeights(
                wq=_take(tensors, f"layers.{i}.wq", (d, d)),
                wk=_take(tensors, f"layers.{i}.wk", (d, kv_dim)),
                wv=_take(tensors, f"layers.{i}.wv", (d, kv_dim)),
                wo=_take(tensors, f"layers.{i}.wo", (d, d)),
                w_in=_take(tensors, f"layers.{i}.w_in", (d, cfg.hidden_mlp)),
                w_out=_take(tensors, f"layers.{i}.w_out", (cfg.hidden_mlp, d)),
                attn_norm=_take(tensors, f"layers.{i}.attn_norm", (d,)),
                mlp_norm=_take(tensors, f"layers.{i}.mlp_norm", (d,)),
            )
        )
    final_norm = _take(tensors, "final_norm", (d,))
    out_emb = _take(tensors, "out_emb", (d, cfg.vocab_size))
    if tensors:
        raise ModelFormatError(f"unexpected tensors in file: {sorted(tensors)}")
    return ModelWeights(
        config=cfg, tok_emb=tok_emb, layers=layers, final_norm=final_norm, out_emb=out_emb
    )


def dump_bytes(weights: ModelWeights) -> bytes:
    """Serialize to bytes in the same format as :func:`save_model`."""
    buf = io.BytesIO()
    _write(buf, weights)
    return buf.getvalue()
