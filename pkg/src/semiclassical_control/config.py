"""Scenario configuration files.

Flat ``key = value`` lines with section prefixes, ``#`` comments::

    scenario.name = identity
    spec.T = 1.0
    spec.g0 = "const:1.0 + cos:1:0.1"     # 1 + 0.1 cos x

Field expressions are sums of ``const:c``, ``cos:j:a``, ``sin:j:a`` and bare
numbers; a leading ``-`` negates a term.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .spectral import PeriodicField, PeriodicGrid

_NUM = r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?"
_TERM = re.compile(rf"\s*([+-])?\s*(?:(const):({_NUM})|(cos|sin):(\d+):({_NUM})|({_NUM}))\s*")


@dataclass(frozen=True)
class FieldExpr:
    """c + sum_j (a_j cos jx + b_j sin jx), kept as sorted mode lists."""

    const: float = 0.0
    cos: tuple[tuple[int, float], ...] = ()
    sin: tuple[tuple[int, float], ...] = ()

    @classmethod
    def parse(cls, text: str, key: str = "field") -> "FieldExpr":
        s = str(text).strip().strip('"').strip("'")
        if not s:
            raise ConfigError(f"{key}: empty field expression")
        const = 0.0
        modes = {"cos": {}, "sin": {}}
        pos = 0
        first = True
        while pos < len(s):
            m = _TERM.match(s, pos)
            if m is None or m.end() == pos:
                raise ConfigError(f"{key}: cannot parse field expression {text!r} at position {pos}")
            sign_txt = m.group(1)
            if not first and sign_txt is None:
                raise ConfigError(f"{key}: terms must be joined by '+' or '-' in {text!r}")
            sign = -1.0 if sign_txt == "-" else 1.0
            if m.group(2):
                const += sign * float(m.group(3))
            elif m.group(4):
                j = int(m.group(5))
                if j < 1:
                    raise ConfigError(f"{key}: mode index must be >= 1 in {text!r}")
                kind = m.group(4)
                modes[kind][j] = modes[kind].get(j, 0.0) + sign * float(m.group(6))
            else:
                const += sign * float(m.group(7))
            pos = m.end()
            first = False
        return cls(const, tuple(sorted(modes["cos"].items())), tuple(sorted(modes["sin"].items())))

    def values(self, grid: PeriodicGrid) -> np.ndarray:
        x = grid.x
        out = np.full(grid.n_points, self.const)
        for j, a in self.cos:
            out = out + a * np.cos(j * x)
        for j, b in self.sin:
            out = out + b * np.sin(j * x)
        return out

    def field(self, grid: PeriodicGrid) -> PeriodicField:
        return PeriodicField(grid, self.values(grid))

    def max_mode(self) -> int:
        return max([j for j, _ in self.cos] + [j for j, _ in self.sin] + [0])

    def coeffs(self, max_mode: int | None = None) -> np.ndarray:
        """(M, 2) coefficient array in the (sin, cos) layout; the constant is dropped."""
        M = max(self.max_mode(), 1) if max_mode is None else max_mode
        c = np.zeros((M, 2))
        for j, b in self.sin:
            if j <= M:
                c[j - 1, 0] = b
        for j, a in self.cos:
            if j <= M:
                c[j - 1, 1] = a
        return c

    def to_dict(self) -> dict:
        return {"const": self.const, "cos": [list(t) for t in self.cos], "sin": [list(t) for t in self.sin]}

    def __str__(self) -> str:
        parts = [f"const:{self.const!r}"] if self.const or not (self.cos or self.sin) else []
        parts += [f"cos:{j}:{a!r}" for j, a in self.cos]
        parts += [f"sin:{j}:{b!r}" for j, b in self.sin]
        return " + ".join(parts)


def _float(key, v):
    try:
        return float(v)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {v!r}") from None


def _int(key, v):
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {v!r}") from None


def _float_list(key, v):
    return tuple(_float(key, p) for p in str(v).split(",") if p.strip())


def _int_list(key, v):
    return tuple(_int(key, p.strip()) for p in str(v).split(",") if p.strip())


def _str(key, v):
    s = str(v).strip().strip('"').strip("'")
    if not s:
        raise ConfigError(f"{key}: empty value")
    return s


def _field(key, v):
    return FieldExpr.parse(v, key)


def _bool(key, v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {v!r}")


SPEC_FIELDS = ("g0", "g1", "v0", "v1", "ghat0", "ghat1", "vhat0", "vhat1", "A0")
_REQUIRED = ("scenario.name", "spec.T", "spec.g0", "spec.ghat0")

#: key -> (converter, default)
SCHEMA = {
    "scenario.name": (_str, None),
    "scenario.description": (_str, ""),
    "spec.T": (_float, None),
    "spec.eps": (_float, 1e-2),
    "spec.k": (_int, 3),
    **{f"spec.{n}": (_field, FieldExpr()) for n in SPEC_FIELDS},
    "numerics.grid": (_int, 256),
    "numerics.n_steps": (_int, 400),
    "numerics.delta": (_float, None),
    "numerics.cfl": (_float, 0.5),
    "synthesis.N": (_int, 0),
    "synthesis.osc_schedule": (_int_list, (4, 8, 16, 32)),
    "synthesis.smooth_schedule": (_float_list, (16.0,)),
    "synthesis.max_segments": (_int, 64),
    "semiclassical.enabled": (_bool, False),
    "semiclassical.hbar": (_float, 0.0625),
    "semiclassical.dt": (_float, 1e-3),
    "semiclassical.store_every": (_int, 50),
    "convergence.u0": (_field, FieldExpr(0.0, (), ((1, 0.5),))),
    "convergence.control0": (_field, FieldExpr(0.0, ((2, 0.05),), ())),
    "convergence.control1": (_field, FieldExpr(0.0, (), ((2, 0.05),))),
    "sweeps.N": (_int_list, (0, 1, 2, 3)),
    "sweeps.osc": (_int_list, (4, 8, 16, 32)),
    "sweeps.hbar": (_float_list, (0.125, 0.0625, 0.03125, 0.015625, 0.0078125)),
    "sweeps.dt": (_float_list, (0.004, 0.002, 0.001, 0.0005)),
    "sweeps.grid": (_int_list, (32, 64, 128, 256)),
    "seeds.seed": (_int, 0),
}


def parse_text(text: str, source: str = "<config>") -> dict:
    """Raw key -> string mapping with duplicate and syntax checks."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = _strip_comment(line).strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in stripped.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{source}:{lineno}: key {key!r} lacks a section prefix")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def _strip_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if ch in "\"'":
            quote = None if quote == ch else (ch if quote is None else quote)
        elif ch == "#" and quote is None:
            return line[:i]
    return line


@dataclass(frozen=True)
class Scenario:
    name: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def seed(self) -> int:
        return self.values["seeds.seed"]

    def grid(self) -> PeriodicGrid:
        return PeriodicGrid(self.values["numerics.grid"])

    def to_dict(self) -> dict:
        out = {}
        for k in sorted(self.values):
            v = self.values[k]
            if isinstance(v, FieldExpr):
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            out[k] = v
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    def to_text(self) -> str:
        lines = []
        for k in sorted(self.values):
            v = self.values[k]
            if isinstance(v, FieldExpr):
                v = f'"{v}"'
            elif isinstance(v, tuple):
                v = ",".join(repr(p) for p in v)
            elif v is None or v == "":
                continue
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def with_values(self, **updates) -> "Scenario":
        vals = dict(self.values)
        for k, v in updates.items():
            vals[k.replace("__", ".")] = v
        return Scenario(vals["scenario.name"], vals)

    def target_spec(self):
        """TargetSpec built from the spec.* keys (ConfigError on invalid data)."""
        from .errors import InvalidSpec
        from .synthesis import TargetSpec

        g = self.grid()
        fields = {n: self.values[f"spec.{n}"].field(g) for n in SPEC_FIELDS}
        spec = TargetSpec(T=self.values["spec.T"], eps=self.values["spec.eps"], k=self.values["spec.k"], **fields)
        try:
            spec.validate()
        except InvalidSpec as exc:
            raise ConfigError(f"spec: {exc}") from exc
        return spec


def scenario_from_text(text: str, source: str = "<config>") -> Scenario:
    raw = parse_text(text, source)
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"{source}: unknown key {unknown[0]!r}")
    missing = [k for k in _REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"{source}: missing required key {missing[0]!r}")
    values = {}
    for key, (conv, default) in SCHEMA.items():
        if key in raw:
            values[key] = conv(key, raw[key])
        else:
            values[key] = default
    if values["spec.T"] <= 0:
        raise ConfigError("spec.T: horizon must be positive")
    n = values["numerics.grid"]
    if n < 8 or n & (n - 1):
        raise ConfigError("numerics.grid: must be a power of two >= 8")
    return Scenario(values["scenario.name"], values)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return scenario_from_text(text, str(path))


def bundled_scenario_path(name: str) -> Path:
    from importlib import resources

    return Path(str(resources.files("semiclassical_control") / "scenarios" / f"{name}.cfg"))
