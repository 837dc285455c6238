"""Binary and text file formats.

All binary values are little-endian.

Model file (``.moeq``)::

    b"MOEQ" | u32 version=1 | 8 x u32 ModelConfig (declaration order)
    | every tensor as float32, row-major, in ModelWeights.named_tensors() order

Quantized model file (``.moeqq``)::

    b"MOEQQ" | u32 version=1 | 8 x u32 ModelConfig | u32 bits | i32 q_min | i32 q_max
    | tensors in model order; non-expert tensors as float32 like the model file;
      each expert linear as a record:
        u32 rows | u32 cols | u8 flags | rows x f32 steps
        | [cols x f32 input-channel scales, if flags & 1] | rows*cols x i8 codes
      Records hold the (out, in) orientation, i.e. the transpose of the
      model tensor. flags & 2 marks a Hadamard-rotated weight.

Trace dump (``.moeqt``)::

    b"MOEQT" | u32 version=1 | u32 record count | records of
    u32 layer | u32 expert | u8 linear (0 up, 1 gate, 2 down) | u32 rows | u32 dim
    | rows*dim x f32 activations | rows x f32 affinities

Calibration / eval corpus (text): optional header ``#ebss v1 w=<w> tau=<tau>
seed=<seed>`` or ``#external v1``, then one sequence per line as decimal
token ids separated by single spaces.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from moeqlab.agq import LINEARS, AffinityTrace
from moeqlab.errors import FormatError
from moeqlab.model import ModelConfig, ModelWeights, build_weights, tensor_layout
from moeqlab.quant import QuantizedTensor, QuantSpec, dequantize, hadamard_transform

MODEL_MAGIC = b"MOEQ"
QUANT_MAGIC = b"MOEQQ"
TRACE_MAGIC = b"MOEQT"
VERSION = 1

FLAG_SCALES = 1
FLAG_HADAMARD = 2

_CONFIG_FIELDS = ("vocab_size", "d_model", "n_layers", "d_ff", "n_shared",
                  "n_routed", "top_k", "max_seq_len")


class _Reader:
    def __init__(self, data: bytes):
        self.buf = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.pos}")
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def end(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes")


def _check_header(r: _Reader, magic: bytes) -> None:
    got = r.take(len(magic))
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = r.unpack("I")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")


def _f32_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _config_bytes(cfg: ModelConfig) -> bytes:
    return struct.pack("<8I", *(getattr(cfg, f) for f in _CONFIG_FIELDS))


def _read_config(r: _Reader) -> ModelConfig:
    values = r.unpack("8I")
    try:
        return ModelConfig(*values)
    except ValueError as exc:
        raise FormatError(f"invalid model config in file: {exc}") from exc


def _read_f32(r: _Reader, shape: tuple[int, ...]) -> np.ndarray:
    return r.array("f4", int(np.prod(shape))).reshape(shape).astype(np.float64)


# --- model ------------------------------------------------------------------

def dump_model(weights: ModelWeights) -> bytes:
    out = io.BytesIO()
    out.write(MODEL_MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(_config_bytes(weights.config))
    for _, t in weights.named_tensors():
        out.write(_f32_bytes(t))
    return out.getvalue()


def load_model_bytes(data: bytes) -> ModelWeights:
    r = _Reader(data)
    _check_header(r, MODEL_MAGIC)
    cfg = _read_config(r)
    tensors = [_read_f32(r, shape) for _, shape in tensor_layout(cfg)]
    r.end()
    return build_weights(cfg, tensors)


def save_model(weights: ModelWeights, path: str | Path) -> None:
    Path(path).write_bytes(dump_model(weights))


def load_model(path: str | Path) -> ModelWeights:
    return load_model_bytes(Path(path).read_bytes())


# --- quantized model --------------------------------------------------------

def is_expert_linear(name: str) -> bool:
    parts = name.split(".")
    return len(parts) == 5 and parts[2] in ("shared", "routed") and parts[4] in LINEARS


@dataclass
class QuantRecord:
    """Quantized expert linear in (out, in) orientation."""

    tensor: QuantizedTensor
    scales: np.ndarray | None = None
    hadamard: bool = False

    def effective_weight(self) -> np.ndarray:
        """Dequantized weight in (out, in) orientation, with scales and rotation undone."""
        w = dequantize(self.tensor)
        if self.scales is not None:
            w = w / self.scales[None, :]
        if self.hadamard:
            w = hadamard_transform(w)
        return w


@dataclass
class QuantizedModel:
    config: ModelConfig
    spec: QuantSpec
    tensors: dict[str, np.ndarray] = field(default_factory=dict)  # full-precision tensors
    records: dict[str, QuantRecord] = field(default_factory=dict)

    def dequantized_weights(self) -> ModelWeights:
        ordered = []
        for name, shape in tensor_layout(self.config):
            if name in self.records:
                ordered.append(self.records[name].effective_weight().T.copy())
            else:
                ordered.append(self.tensors[name])
        return build_weights(self.config, ordered)


def dump_quantized(qm: QuantizedModel) -> bytes:
    out = io.BytesIO()
    out.write(QUANT_MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(_config_bytes(qm.config))
    out.write(struct.pack("<Iii", qm.spec.bits, qm.spec.q_min, qm.spec.q_max))
    for name, shape in tensor_layout(qm.config):
        if not is_expert_linear(name):
            out.write(_f32_bytes(qm.tensors[name]))
            continue
        rec = qm.records[name]
        rows, cols = rec.tensor.shape
        if (cols, rows) != shape:
            raise FormatError(f"record {name} has shape {rec.tensor.shape}, expected {shape[::-1]}")
        flags = (FLAG_SCALES if rec.scales is not None else 0) | (FLAG_HADAMARD if rec.hadamard else 0)
        out.write(struct.pack("<IIB", rows, cols, flags))
        out.write(_f32_bytes(rec.tensor.steps))
        if rec.scales is not None:
            out.write(_f32_bytes(rec.scales))
        out.write(np.ascontiguousarray(rec.tensor.codes, dtype="i1").tobytes())
    return out.getvalue()


def load_quantized_bytes(data: bytes) -> QuantizedModel:
    r = _Reader(data)
    _check_header(r, QUANT_MAGIC)
    cfg = _read_config(r)
    bits, q_min, q_max = r.unpack("Iii")
    try:
        spec = QuantSpec(bits)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    if (q_min, q_max) != (spec.q_min, spec.q_max):
        raise FormatError(f"code range [{q_min}, {q_max}] does not match {bits}-bit symmetric range")
    qm = QuantizedModel(cfg, spec)
    for name, shape in tensor_layout(cfg):
        if not is_expert_linear(name):
            qm.tensors[name] = _read_f32(r, shape)
            continue
        rows, cols, flags = r.unpack("IIB")
        if (cols, rows) != shape:
            raise FormatError(f"record {name} has shape ({rows}, {cols}), expected {shape[::-1]}")
        steps = r.array("f4", rows).astype(np.float64)
        scales = r.array("f4", cols).astype(np.float64) if flags & FLAG_SCALES else None
        codes = r.array("i1", rows * cols).reshape(rows, cols).astype(np.int64)
        if np.any(codes < q_min) or np.any(codes > q_max):
            raise FormatError(f"record {name} has codes outside [{q_min}, {q_max}]")
        try:
            tensor = QuantizedTensor(codes, steps)
        except ValueError as exc:
            raise FormatError(f"record {name}: {exc}") from exc
        qm.records[name] = QuantRecord(tensor, scales, bool(flags & FLAG_HADAMARD))
    r.end()
    return qm


def save_quantized(qm: QuantizedModel, path: str | Path) -> None:
    Path(path).write_bytes(dump_quantized(qm))


def load_quantized(path: str | Path) -> QuantizedModel:
    return load_quantized_bytes(Path(path).read_bytes())


# --- traces -----------------------------------------------------------------

def dump_traces(traces: Iterable[AffinityTrace]) -> bytes:
    traces = list(traces)
    out = io.BytesIO()
    out.write(TRACE_MAGIC)
    out.write(struct.pack("<II", VERSION, len(traces)))
    for t in traces:
        out.write(struct.pack("<IIBII", t.layer, t.expert, LINEARS.index(t.linear),
                              t.x.shape[0], t.x.shape[1]))
        out.write(_f32_bytes(t.x))
        out.write(_f32_bytes(t.c))
    return out.getvalue()


def load_traces_bytes(data: bytes) -> list[AffinityTrace]:
    r = _Reader(data)
    _check_header(r, TRACE_MAGIC)
    (count,) = r.unpack("I")
    out = []
    for _ in range(count):
        layer, expert, lin, rows, dim = r.unpack("IIBII")
        if lin >= len(LINEARS):
            raise FormatError(f"unknown linear position {lin}")
        x = _read_f32(r, (rows, dim))
        c = r.array("f4", rows).astype(np.float64)
        out.append(AffinityTrace(layer, expert, LINEARS[lin], x, c))
    r.end()
    return out


# --- token text -------------------------------------------------------------

def format_calibration(sequences: Sequence[Sequence[int]], header: dict | None = None) -> str:
    if header is None:
        head = "#external v1"
    else:
        head = f"#ebss v1 w={header['w']} tau={header['tau']!r} seed={header['seed']}"
    lines = [head] + [" ".join(str(int(t)) for t in seq) for seq in sequences]
    return "\n".join(lines) + "\n"


def write_calibration(path: str | Path, sequences, header: dict | None = None) -> None:
    Path(path).write_text(format_calibration(sequences, header), encoding="utf-8")


def parse_calibration(text: str, vocab_size: int | None = None) -> tuple[list[list[int]], dict | None]:
    """Parse token-id text. Returns (sequences, header); header is None for external files.

    Raises :class:`FormatError` naming the 1-based line of any bad entry.
    """
    sequences: list[list[int]] = []
    header = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if lineno == 1 and line.startswith("#"):
            header = _parse_header(line, lineno)
            continue
        if not line.strip():
            continue
        seq = []
        for tok in line.split(" "):
            if not tok.isdigit():
                raise FormatError(f"line {lineno}: malformed token id {tok!r}")
            value = int(tok)
            if vocab_size is not None and value >= vocab_size:
                raise FormatError(f"line {lineno}: token id {value} outside vocabulary of size {vocab_size}")
            seq.append(value)
        sequences.append(seq)
    return sequences, header


def _parse_header(line: str, lineno: int) -> dict | None:
    parts = line[1:].split()
    if parts == ["external", "v1"]:
        return None
    if len(parts) == 5 and parts[:2] == ["ebss", "v1"]:
        try:
            kv = dict(p.split("=", 1) for p in parts[2:])
            return {"w": int(kv["w"]), "tau": float(kv["tau"]), "seed": int(kv["seed"])}
        except (KeyError, ValueError) as exc:
            raise FormatError(f"line {lineno}: malformed ebss header") from exc
    raise FormatError(f"line {lineno}: unknown header {line!r}")


def read_calibration(path: str | Path, vocab_size: int | None = None):
    return parse_calibration(Path(path).read_text(encoding="utf-8"), vocab_size)
