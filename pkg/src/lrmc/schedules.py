"""Per-iteration threshold/step-size schedules and their JSON files.

Three kinds share one type:

* ``fixed``   -- the same ``(zeta, eta)`` at every iteration;
* ``oracle``  -- thresholds computed from the ground truth by the solver,
  constant step size (verification only);
* ``learned`` -- ``K`` unrolled layers with their own parameters, optionally
  followed by a geometric tail ``eta_k = beta * eta_{k-1}``,
  ``zeta_k = phi * zeta_{k-1}``.
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InvalidParameterError, ScheduleExhaustedError, SchemaError

KINDS = ("fixed", "oracle", "learned")

# step size anchoring the recurrent tail when there are no unrolled layers
DEFAULT_TAIL_ETA = 0.5


@dataclass(frozen=True)
class ParamSchedule:
    kind: str
    zeta: tuple = ()
    eta: tuple = ()
    rnn: tuple | None = field(default=None)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError("kind", f"must be one of {KINDS}, got {self.kind!r}")
        object.__setattr__(self, "zeta", tuple(float(z) for z in self.zeta))
        object.__setattr__(self, "eta", tuple(float(e) for e in self.eta))
        if self.rnn is not None:
            object.__setattr__(self, "rnn", tuple(float(v) for v in self.rnn))
        _validate(self)

    @classmethod
    def fixed(cls, zeta, eta):
        return cls("fixed", (zeta,), (eta,))

    @classmethod
    def oracle(cls, eta=0.5):
        return cls("oracle", (), (eta,))

    @classmethod
    def learned(cls, zeta, eta, rnn=None):
        return cls("learned", tuple(zeta), tuple(eta), None if rnn is None else tuple(rnn))

    @property
    def K(self):
        return len(self.zeta) - 1 if self.kind == "learned" else 0

    @property
    def beta(self):
        return None if self.rnn is None else self.rnn[0]

    @property
    def phi(self):
        return None if self.rnn is None else self.rnn[1]

    @property
    def unlimited(self):
        return self.kind != "learned" or self.rnn is not None

    def with_rnn(self, beta, phi):
        return ParamSchedule.learned(self.zeta, self.eta, (beta, phi))

    def truncated(self, k):
        """Learned schedule restricted to its first ``k`` layers, tail dropped."""
        return ParamSchedule.learned(self.zeta[:k + 1], self.eta[:k])

    def scaled_thresholds(self, c):
        """Same schedule for data multiplied by ``c > 0``."""
        if self.kind == "oracle":
            return self
        return ParamSchedule(self.kind, tuple(c * z for z in self.zeta), self.eta, self.rnn)


def _validate(s):
    def nonneg(name, values):
        for i, v in enumerate(values):
            if not math.isfinite(v) or v < 0:
                raise SchemaError(f"{name}[{i}]", f"must be finite and >= 0, got {v}")

    def positive(name, values):
        for i, v in enumerate(values):
            if not math.isfinite(v) or v <= 0:
                raise SchemaError(f"{name}[{i}]", f"must be finite and > 0, got {v}")

    if s.kind == "fixed":
        if len(s.zeta) != 1 or len(s.eta) != 1:
            raise SchemaError("zeta", "fixed schedule needs one zeta and one eta")
        if s.rnn is not None:
            raise SchemaError("rnn", "only learned schedules have a recurrent tail")
    elif s.kind == "oracle":
        if s.zeta or len(s.eta) != 1:
            raise SchemaError("eta", "oracle schedule takes exactly one eta and no zeta")
        if s.rnn is not None:
            raise SchemaError("rnn", "only learned schedules have a recurrent tail")
    else:
        if len(s.zeta) < 1:
            raise SchemaError("zeta", "learned schedule needs zeta_0")
        if len(s.eta) != len(s.zeta) - 1:
            raise SchemaError("eta", f"expected {len(s.zeta) - 1} entries (K), got {len(s.eta)}")
        if s.rnn is not None:
            if len(s.rnn) != 2:
                raise SchemaError("rnn", "expected (beta, phi)")
            for name, v in zip(("rnn.beta", "rnn.phi"), s.rnn):
                if not (math.isfinite(v) and 0 < v <= 1):
                    raise SchemaError(name, f"must lie in (0, 1], got {v}")
    nonneg("zeta", s.zeta)
    positive("eta", s.eta)


def param_at(schedule, k):
    """``(zeta_k, eta_k)`` for iteration ``k >= 1``.

    Oracle thresholds depend on the current iterate and are produced by the
    solver; here the oracle kind only yields its step size (zeta is None).
    """
    k = int(k)
    if k < 1:
        raise InvalidParameterError(f"iterations are numbered from 1, got {k}")
    if schedule.kind == "fixed":
        return schedule.zeta[0], schedule.eta[0]
    if schedule.kind == "oracle":
        return None, schedule.eta[0]
    K = schedule.K
    if k <= K:
        return schedule.zeta[k], schedule.eta[k - 1]
    if schedule.rnn is None:
        raise ScheduleExhaustedError(f"schedule has {K} layers and no recurrent tail (asked for k={k})")
    beta, phi = schedule.rnn
    anchor_eta = schedule.eta[K - 1] if K >= 1 else DEFAULT_TAIL_ETA
    steps = k - K
    return phi ** steps * schedule.zeta[K], beta ** steps * anchor_eta


def zeta0(schedule, truth=None):
    """Threshold used by the initialization."""
    if schedule.kind == "oracle":
        if truth is None:
            raise ConfigurationError("oracle schedule needs the ground truth")
        return float(np.max(np.abs(truth.xstar)))
    return schedule.zeta[0]


def to_dict(schedule):
    if schedule.kind == "fixed":
        return {"kind": "fixed", "zeta": schedule.zeta[0], "eta": schedule.eta[0]}
    if schedule.kind == "oracle":
        return {"kind": "oracle", "eta": schedule.eta[0]}
    rnn = None if schedule.rnn is None else {"beta": schedule.rnn[0], "phi": schedule.rnn[1]}
    return {"kind": "learned", "K": schedule.K, "zeta": list(schedule.zeta),
            "eta": list(schedule.eta), "rnn": rnn}


def _number(doc, key, path):
    if key not in doc:
        raise SchemaError(path, "missing")
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(path, f"expected a number, got {type(v).__name__}")
    return float(v)


def _numbers(doc, key):
    if key not in doc:
        raise SchemaError(key, "missing")
    v = doc[key]
    if not isinstance(v, list):
        raise SchemaError(key, "expected a list of numbers")
    for i, x in enumerate(v):
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise SchemaError(f"{key}[{i}]", f"expected a number, got {type(x).__name__}")
    return [float(x) for x in v]


def from_dict(doc):
    if not isinstance(doc, dict):
        raise SchemaError("$", "expected a JSON object")
    kind = doc.get("kind")
    allowed = {"fixed": {"kind", "zeta", "eta"}, "oracle": {"kind", "eta"},
               "learned": {"kind", "K", "zeta", "eta", "rnn"}}
    if kind not in allowed:
        raise SchemaError("kind", f"must be one of {KINDS}, got {kind!r}")
    extra = set(doc) - allowed[kind]
    if extra:
        raise SchemaError(sorted(extra)[0], "unknown field")
    if kind == "fixed":
        return ParamSchedule.fixed(_number(doc, "zeta", "zeta"), _number(doc, "eta", "eta"))
    if kind == "oracle":
        return ParamSchedule.oracle(_number(doc, "eta", "eta"))
    K = doc.get("K")
    if isinstance(K, bool) or not isinstance(K, int) or K < 0:
        raise SchemaError("K", f"expected a non-negative integer, got {K!r}")
    zeta = _numbers(doc, "zeta")
    eta = _numbers(doc, "eta")
    if len(zeta) != K + 1:
        raise SchemaError("zeta", f"expected K+1={K + 1} entries, got {len(zeta)}")
    rnn = doc.get("rnn")
    if rnn is not None:
        if not isinstance(rnn, dict) or set(rnn) != {"beta", "phi"}:
            raise SchemaError("rnn", "expected {\"beta\": float, \"phi\": float} or null")
        rnn = (_number(rnn, "beta", "rnn.beta"), _number(rnn, "phi", "rnn.phi"))
    return ParamSchedule.learned(zeta, eta, rnn)


def save(schedule, path):
    Path(path).write_text(json.dumps(to_dict(schedule), indent=2) + "\n", encoding="utf-8")


def load(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from None
    return from_dict(doc)
