"""Command-line pipeline: forge, sample, capture, quantize, eval, report.

Every verb reads one :class:`PipelineConfig` (JSON file plus ``--set``
overrides) and works inside the output directory::

    model.moeq      forged model            (forge)
    calib.txt       calibration sequences   (sample)
    traces.moeqt    captured expert inputs  (capture)
    quantized.moeqq quantized model         (quantize)
    <verb>.json     report fragment of each verb
    report.json     merged fragments        (report)

Fragments are written with sorted keys; wall-clock values live under a
top-level ``"timing"`` key and are the only nondeterministic content.

Exit codes: 0 success, 2 config error, 3 data/format error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from moeqlab.agq import capture_calibration
from moeqlab.ebss import EBSSConfig, ebss_generate, sample_sequences, summarize
from moeqlab.errors import ConfigError, InputError
from moeqlab.formats import (
    dump_model,
    dump_quantized,
    dump_traces,
    format_calibration,
    load_model,
    load_quantized,
    read_calibration,
)
from moeqlab.model import ModelConfig, ModelWeights, forge_model
from moeqlab.pipeline import (
    QuantOptions,
    corpus_perplexity,
    expert_losses,
    logit_mse,
    quantize_model,
)
from moeqlab.quant import is_power_of_two

log = logging.getLogger("moeqlab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

MODEL_FILE = "model.moeq"
CALIB_FILE = "calib.txt"
TRACE_FILE = "traces.moeqt"
QUANT_FILE = "quantized.moeqq"
REPORT_FILE = "report.json"

# offsets from the global seed, so calibration and held-out draws never share a stream
SAMPLE_SEED_OFFSET = 1
HELDOUT_SEED_OFFSET = 2


@dataclass
class ForgeSection:
    vocab_size: int = 256
    d_model: int = 16
    n_layers: int = 2
    d_ff: int = 32
    n_shared: int = 1
    n_routed: int = 8
    top_k: int = 2
    max_seq_len: int = 64
    router_skew: float = 3.0

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.vocab_size, self.d_model, self.n_layers, self.d_ff,
                           self.n_shared, self.n_routed, self.top_k, self.max_seq_len)


@dataclass
class SampleSection:
    ebss: bool = True
    w: int = 4
    target_len: int = 32
    n_sequences: int = 16
    tau: float = 1.2
    calib_path: str | None = None  # external token file, used when ebss is off


@dataclass
class QuantSection:
    method: str = "gptq"
    bits: int = 4
    agq: bool = True
    hadamard: bool = False
    damping: float = 0.01
    awq_grid: int = 20

    def options(self) -> QuantOptions:
        return QuantOptions(self.method, self.bits, self.agq, self.hadamard, self.damping, self.awq_grid)


@dataclass
class EvalSection:
    corpus_path: str | None = None  # default: sequences sampled from the FP model
    n_sequences: int = 16
    length: int = 32


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "run"
    model_path: str | None = None  # default: <out>/model.moeq
    forge: ForgeSection = field(default_factory=ForgeSection)
    sample: SampleSection = field(default_factory=SampleSection)
    quant: QuantSection = field(default_factory=QuantSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.forge.router_skew < 0:
            raise ConfigError("forge.router_skew must be >= 0")
        cfg = self.forge.model_config()
        self.ebss_config()
        self.quant.options()
        if self.quant.agq and not (self.sample.ebss or self.sample.calib_path):
            raise ConfigError("quant.agq requires a calibration source (sample.ebss or sample.calib_path)")
        if self.quant.hadamard and self.model_path is None:
            for dim in (cfg.d_model, cfg.d_ff):
                if not is_power_of_two(dim):
                    raise ConfigError(f"quant.hadamard requires power-of-two expert input dims, got {dim}")
        if self.eval.n_sequences < 1 or self.eval.length < 2:
            raise ConfigError("eval needs n_sequences >= 1 and length >= 2")

    def ebss_config(self) -> EBSSConfig:
        s = self.sample
        return EBSSConfig(s.w, s.target_len, s.n_sequences, s.tau, self.seed + SAMPLE_SEED_OFFSET)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(value: Any, default: Any, key: str) -> Any:
    """Check an override against the type of the field's default."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif default is None or isinstance(default, str):
        if value is None or isinstance(value, str):
            return value
    raise ConfigError(f"bad value {value!r} for {key}")


def _apply(obj: Any, data: dict, prefix: str = "") -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        path = prefix + key
        if key not in names:
            raise ConfigError(f"unknown config key {path!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{path} must be an object")
            _apply(current, value, path + ".")
        else:
            setattr(obj, key, _coerce(value, current, path))


def _parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    nested: dict = {}
    node = nested
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return nested


def load_config(path: str | None = None, overrides: Sequence[str] = (), seed: int | None = None,
                out: str | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        _apply(cfg, data)
    for item in overrides:
        _apply(cfg, _parse_override(item))
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    cfg.validate()
    return cfg


# --- helpers ----------------------------------------------------------------

def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _config_digest(cfg: PipelineConfig) -> str:
    # the output directory does not influence any artifact
    body = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    return _digest(json.dumps(body, sort_keys=True).encode())[:16]


def write_report(path: Path, body: dict, seconds: float) -> None:
    body = dict(body, timing={"seconds": seconds})
    path.write_text(json.dumps(body, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _model(cfg: PipelineConfig) -> ModelWeights:
    path = Path(cfg.model_path) if cfg.model_path else cfg.out_dir / MODEL_FILE
    if not path.exists():
        raise ConfigError(f"model file {path} not found; run forge first or set model_path")
    return load_model(path)


def _calibration(cfg: PipelineConfig, vocab_size: int) -> list[list[int]] | None:
    path = cfg.out_dir / CALIB_FILE
    if not path.exists():
        if cfg.sample.calib_path is None:
            return None
        path = Path(cfg.sample.calib_path)
    return read_calibration(path, vocab_size)[0]


def _eval_corpus(cfg: PipelineConfig, fp: ModelWeights) -> list[list[int]]:
    if cfg.eval.corpus_path:
        return read_calibration(cfg.eval.corpus_path, fp.config.vocab_size)[0]
    return sample_sequences(fp, cfg.eval.n_sequences, cfg.eval.length, cfg.seed + HELDOUT_SEED_OFFSET)


# --- verbs ------------------------------------------------------------------

def cmd_forge(cfg: PipelineConfig) -> Path:
    t0 = time.perf_counter()
    weights = forge_model(cfg.forge.model_config(), cfg.seed, cfg.forge.router_skew)
    data = dump_model(weights)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / MODEL_FILE
    path.write_bytes(data)
    digest = _config_digest(cfg)
    print(f"config {digest} -> {path} sha256 {_digest(data)[:16]}")
    write_report(cfg.out_dir / "forge.json",
                 {"config_digest": digest, "model_sha256": _digest(data), "model": weights.config.to_dict(),
                  "router_skew": cfg.forge.router_skew, "seed": cfg.seed},
                 time.perf_counter() - t0)
    return path


def cmd_sample(cfg: PipelineConfig) -> Path:
    t0 = time.perf_counter()
    weights = _model(cfg)
    body: dict[str, Any] = {"ebss": cfg.sample.ebss}
    if cfg.sample.ebss:
        ec = cfg.ebss_config()
        cal = ebss_generate(weights, ec)
        sequences = cal.sequences
        text = format_calibration(sequences, {"w": ec.w, "tau": ec.tau, "seed": ec.seed})
        body["forward_passes"] = cal.stats.total_passes
    else:
        if cfg.sample.calib_path is None:
            raise ConfigError("sample.ebss is off and sample.calib_path is not set")
        sequences, _ = read_calibration(cfg.sample.calib_path, weights.config.vocab_size)
        if not sequences:
            raise InputError(f"{cfg.sample.calib_path}: no sequences")
        text = format_calibration(sequences)
    sigma, ppl = summarize(weights, sequences)
    body.update(sigma=sigma, mean_ppl=ppl, n_sequences=len(sequences))
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / CALIB_FILE
    path.write_text(text, encoding="utf-8")
    print(f"{len(sequences)} sequences -> {path} (sigma {sigma:.6g}, mean PPL {ppl:.6g})")
    write_report(cfg.out_dir / "sample.json", body, time.perf_counter() - t0)
    return path


def cmd_capture(cfg: PipelineConfig) -> Path:
    t0 = time.perf_counter()
    weights = _model(cfg)
    sequences = _calibration(cfg, weights.config.vocab_size)
    if not sequences:
        raise ConfigError("capture needs calibration sequences; run sample first")
    traces = capture_calibration(weights, sequences)
    path = cfg.out_dir / TRACE_FILE
    path.write_bytes(dump_traces(traces[k] for k in sorted(traces)))
    print(f"{len(traces)} traces -> {path}")
    write_report(cfg.out_dir / "capture.json",
                 {"traces": len(traces), "tokens": sum(len(s) for s in sequences)},
                 time.perf_counter() - t0)
    return path


def cmd_quantize(cfg: PipelineConfig) -> Path:
    t0 = time.perf_counter()
    weights = _model(cfg)
    opts = cfg.quant.options()
    sequences = _calibration(cfg, weights.config.vocab_size) if opts.needs_calibration else None
    if opts.needs_calibration and not sequences:
        raise ConfigError(f"method {opts.method} with agq={opts.agq} needs calibration; run sample first")
    qm = quantize_model(weights, sequences, opts)
    data = dump_quantized(qm)
    path = cfg.out_dir / QUANT_FILE
    path.write_bytes(data)
    print(f"{len(qm.records)} expert linears at {opts.bits} bits -> {path}")
    write_report(cfg.out_dir / "quantize.json",
                 {"method": opts.method, "bits": opts.bits, "agq": opts.agq, "hadamard": opts.hadamard,
                  "calibration_tokens": sum(len(s) for s in sequences) if sequences else 0,
                  "records": len(qm.records), "quantized_sha256": _digest(data)},
                 time.perf_counter() - t0)
    return path


@dataclass
class EvalReport:
    fp_ppl: float
    quant_ppl: float
    logit_mse: float
    calibration_sigma: float | None
    expert_losses: list[dict]
    forward_passes: int
    corpus_tokens: int

    def __post_init__(self):
        losses = [r[k] for r in self.expert_losses for k in ("loss", "affinity_loss")]
        if any(v < 0 for v in losses) or self.logit_mse < 0:
            raise ArithmeticError("negative loss in evaluation report")
        if self.quant_ppl < 1 or (self.calibration_sigma is not None and self.calibration_sigma < 0):
            raise ArithmeticError("evaluation report out of range")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ppl_ratio"] = self.quant_ppl / self.fp_ppl
        return d


def evaluate(fp: ModelWeights, quantized: ModelWeights, corpus: Sequence[Sequence[int]],
             calibration: Sequence[Sequence[int]] | None = None) -> EvalReport:
    """Compare a quantized model with its FP reference on ``corpus``."""
    n = len(corpus)
    passes = 5 * n  # two PPL, two logit and one capture pass per sequence
    sigma = None
    if calibration:
        sigma = summarize(fp, calibration)[0]
        passes += len(calibration)
    return EvalReport(
        fp_ppl=corpus_perplexity(fp, corpus),
        quant_ppl=corpus_perplexity(quantized, corpus),
        logit_mse=logit_mse(fp, quantized, corpus),
        calibration_sigma=sigma,
        expert_losses=expert_losses(fp, quantized, corpus),
        forward_passes=passes,
        corpus_tokens=sum(len(s) for s in corpus),
    )


def cmd_eval(cfg: PipelineConfig) -> Path:
    t0 = time.perf_counter()
    fp = _model(cfg)
    qpath = cfg.out_dir / QUANT_FILE
    if not qpath.exists():
        raise ConfigError(f"{qpath} not found; run quantize first")
    qm = load_quantized(qpath)
    if qm.config != fp.config:
        raise InputError("quantized model config does not match the FP model")
    report = evaluate(fp, qm.dequantized_weights(), _eval_corpus(cfg, fp),
                      _calibration(cfg, fp.config.vocab_size))
    path = cfg.out_dir / "eval.json"
    write_report(path, report.to_dict(), time.perf_counter() - t0)
    print(f"PPL {report.fp_ppl:.6g} -> {report.quant_ppl:.6g}, logit MSE {report.logit_mse:.6g}")
    return path


def cmd_report(cfg: PipelineConfig) -> Path:
    merged: dict[str, Any] = {"config": cfg.to_dict()}
    timing = {}
    for verb in ("forge", "sample", "capture", "quantize", "eval"):
        frag = cfg.out_dir / f"{verb}.json"
        if frag.exists():
            try:
                body = json.loads(frag.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise InputError(f"{frag}: {exc}") from exc
            timing[verb] = body.pop("timing", None)
            merged[verb] = body
    merged["timing"] = timing
    text = json.dumps(merged, sort_keys=True, indent=2) + "\n"
    path = cfg.out_dir / REPORT_FILE
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return path


COMMANDS = {
    "forge": cmd_forge,
    "sample": cmd_sample,
    "capture": cmd_capture,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moeqlab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. quant.method=rtn; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed, args.out)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArithmeticError as exc:  # FactorizationError after damping retries
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
