"""Run configuration: ``key = value`` lines with ``#`` comments.

Unknown keys are rejected and every dimension must be at least 1. Values not
given in the file keep their defaults; command-line ``--seed`` and
``--precision`` override the file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .core import ContractError

DIM_KEYS = ("L", "C", "d_model", "H", "H_v", "d_k", "d_v", "conv_width", "vocab", "pairs", "steps", "batch",
            "instances", "repeats")


class ConfigError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "f64"
    # model / kernel dimensions
    L: int = 64
    C: int = 64
    d_model: int = 32
    H: int = 2
    H_v: int = 2
    d_k: int = 16
    d_v: int = 16
    conv_width: int = 4
    neg_eig: bool = False
    solve_precision: str = "binary64"
    rule: str = "gdr2"
    # recall task and trainer
    vocab: int = 16
    pairs: int = 8
    steps: int = 2000
    lr: tuple[float, ...] = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)
    batch: int = 32
    rules: tuple[str, ...] = ("gdr2", "kda", "gdn")
    # suites
    instances: int = 24
    chunks: tuple[int, ...] = (1, 2, 3, 16, 64)
    bench_lengths: tuple[int, ...] = (1024, 4096, 16384)
    bench_chunks: tuple[int, ...] = (16, 64, 128)
    repeats: int = 3
    # decode
    decode_steps: int = 16

    _parsers = {
        "lr": _floats,
        "chunks": _ints,
        "bench_lengths": _ints,
        "bench_chunks": _ints,
        "rules": lambda s: tuple(s.replace(",", " ").split()),
        "neg_eig": _bool,
    }

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for key in DIM_KEYS:
            if getattr(self, key) < 1:
                raise ContractError(f"{key} must be >= 1")
        if self.decode_steps < 0:
            raise ContractError("decode_steps must be >= 0")
        for key in ("chunks", "bench_lengths", "bench_chunks"):
            if not getattr(self, key) or min(getattr(self, key)) < 1:
                raise ContractError(f"{key} must list values >= 1")
        if self.precision not in ("f32", "f64"):
            raise ContractError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.solve_precision not in ("binary64", "input"):
            raise ContractError("solve_precision must be binary64 or input")
        if self.H_v % self.H:
            raise ContractError("H_v must be a multiple of H")
        if not self.lr or min(self.lr) <= 0:
            raise ContractError("lr must list positive learning rates")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        values: dict = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        defaults = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(lineno, f"expected key = value, got {raw.strip()!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(lineno, f"unknown key {key!r}")
            if key in values:
                raise ConfigError(lineno, f"duplicate key {key!r}")
            try:
                parser = cls._parsers.get(key) or type(getattr(defaults, key))
                values[key] = parser(val)
            except ValueError as exc:
                raise ConfigError(lineno, f"{key}: {exc}") from None
        try:
            return cls(**values)
        except ContractError as exc:
            raise ConfigError(0, str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return dataclasses.replace(self, **kw)

    def dump(self) -> str:
        lines = []
        for key in self.keys():
            val = getattr(self, key)
            if isinstance(val, tuple):
                val = ", ".join(str(v) for v in val)
            elif isinstance(val, bool):
                val = str(val).lower()
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"

