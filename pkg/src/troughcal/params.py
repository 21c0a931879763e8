"""Learnable parameter set and its stable flattened layout.

Blocks, in flattening order:

  a, b                      global allocation coefficients
  log_alpha/<subfield>      velocity scale, one per subfield (alpha = exp)
  omega/<subfield>/<era>    valve-state vectors, sorted by (subfield, era)
  hpg/<period>              pipe-glass coefficients per homogenization
                            period, (n_loops, n_spans) row-major
                            (loop-major, span-minor), stored as softplus
                            pre-images to keep h_pg >= 0

Gradient vectors returned by the gradient engine are aligned with this
layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def softplus(x):
    """log(1 + exp(x)), overflow-safe."""
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    """Pre-image of softplus; y must be > 0."""
    y = np.asarray(y, dtype=float)
    # log(exp(y) - 1) = y + log(1 - exp(-y))
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class ParamSet:
    a: float = 0.0
    b: float = 1.0
    log_alpha: dict = field(default_factory=dict)   # subfield -> float
    omega: dict = field(default_factory=dict)       # (subfield, era) -> (N,)
    hpg_raw: dict = field(default_factory=dict)     # period -> (N, n_spans)

    @classmethod
    def initialize(cls, topology, sequences, hpg_init=1.0) -> "ParamSet":
        """Neutral start: a=0, b=1 (logits equal omega), omega all ones,
        alpha=1, h_pg at a uniform prior value."""
        ps = cls()
        for seq in sequences:
            sf = topology.subfield(seq.subfield_id)
            ps.log_alpha.setdefault(seq.subfield_id, 0.0)
            key = (seq.subfield_id, seq.era_id)
            if key not in ps.omega:
                ps.omega[key] = np.ones(sf.n_loops)
            n_spans = sf.loops[0].n_spans
            ps.hpg_raw[seq.id] = np.full(
                (sf.n_loops, n_spans), float(softplus_inv(hpg_init)))
        return ps

    def ensure_blocks(self, topology, sequences, hpg_init=1.0):
        """Allocate default blocks for any (subfield, era, period) seen in
        ``sequences`` but missing here (e.g. when refitting on new data)."""
        for seq in sequences:
            sf = topology.subfield(seq.subfield_id)
            self.log_alpha.setdefault(seq.subfield_id, 0.0)
            key = (seq.subfield_id, seq.era_id)
            if key not in self.omega:
                self.omega[key] = np.ones(sf.n_loops)
            if seq.id not in self.hpg_raw:
                n_spans = sf.loops[0].n_spans
                self.hpg_raw[seq.id] = np.full(
                    (sf.n_loops, n_spans), float(softplus_inv(hpg_init)))
        return self

    # -- block layout ------------------------------------------------------

    def block_names(self):
        names = ["a", "b"]
        names += [f"log_alpha/{sf}" for sf in sorted(self.log_alpha)]
        names += [f"omega/{sf}/{era}" for sf, era in sorted(self.omega)]
        names += [f"hpg/{p}" for p in sorted(self.hpg_raw)]
        return names

    def block_value(self, name):
        if name == "a":
            return np.array([self.a])
        if name == "b":
            return np.array([self.b])
        kind, _, rest = name.partition("/")
        if kind == "log_alpha":
            return np.array([self.log_alpha[rest]])
        if kind == "omega":
            sf, _, era = rest.partition("/")
            return np.asarray(self.omega[(sf, int(era))]).ravel()
        if kind == "hpg":
            return np.asarray(self.hpg_raw[rest]).ravel()
        raise KeyError(name)

    def block_slices(self):
        """Ordered mapping block name -> slice into the flat vector."""
        slices = {}
        offset = 0
        for name in self.block_names():
            n = self.block_value(name).size
            slices[name] = slice(offset, offset + n)
            offset += n
        return slices

    @property
    def n_params(self):
        return sum(self.block_value(n).size for n in self.block_names())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.block_value(n) for n in self.block_names()])

    def replace_from_vector(self, vec) -> "ParamSet":
        """New ParamSet with the same block structure and values from vec."""
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} values, got {vec.size}")
        out = ParamSet(a=self.a, b=self.b,
                       log_alpha=dict(self.log_alpha),
                       omega={k: v.copy() for k, v in self.omega.items()},
                       hpg_raw={k: v.copy() for k, v in self.hpg_raw.items()})
        for name, sl in self.block_slices().items():
            chunk = vec[sl]
            if name == "a":
                out.a = float(chunk[0])
            elif name == "b":
                out.b = float(chunk[0])
            else:
                kind, _, rest = name.partition("/")
                if kind == "log_alpha":
                    out.log_alpha[rest] = float(chunk[0])
                elif kind == "omega":
                    sf, _, era = rest.partition("/")
                    key = (sf, int(era))
                    out.omega[key] = chunk.reshape(self.omega[key].shape).copy()
                elif kind == "hpg":
                    out.hpg_raw[rest] = chunk.reshape(
                        self.hpg_raw[rest].shape).copy()
        return out

    # -- derived values ----------------------------------------------------

    def alpha(self, subfield_id) -> float:
        return float(np.exp(self.log_alpha[subfield_id]))

    def hpg(self, period_id) -> np.ndarray:
        """Pipe-glass coefficients (n_loops, n_spans), >= 0 by softplus."""
        return softplus(self.hpg_raw[period_id])

    def block_group(self, name) -> str:
        """Learning-rate group of a block: one of a, b, alpha, omega, hpg.

        The groups differ by orders of magnitude in loss sensitivity, so the
        optimizer carries one rate per group.
        """
        if name in ("a", "b"):
            return name
        if name.startswith("log_alpha/"):
            return "alpha"
        return name.partition("/")[0]

    def to_dict(self) -> dict:
        return {
            "a": self.a,
            "b": self.b,
            "log_alpha": dict(self.log_alpha),
            "omega": {f"{sf}/{era}": list(map(float, v))
                      for (sf, era), v in sorted(self.omega.items())},
            "hpg_raw": {p: [list(map(float, row)) for row in v]
                        for p, v in sorted(self.hpg_raw.items())},
        }

    @classmethod
    def from_dict(cls, d) -> "ParamSet":
        omega = {}
        for key, v in d.get("omega", {}).items():
            sf, _, era = key.partition("/")
            omega[(sf, int(era))] = np.asarray(v, dtype=float)
        return cls(
            a=float(d["a"]), b=float(d["b"]),
            log_alpha={k: float(v) for k, v in d.get("log_alpha", {}).items()},
            omega=omega,
            hpg_raw={p: np.asarray(v, dtype=float)
                     for p, v in d.get("hpg_raw", {}).items()},
        )
