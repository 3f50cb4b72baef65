"""Lattice geometry, i.i.d. conductance sampling and environment shifts.

Sites of a box ``{0..L-1}^d`` are indexed by ``sum_i x_i L^i`` (coordinate 0
varies fastest).  Every site has ``2d`` ports; port ``2i`` points along
``+e_i`` and port ``2i+1`` along ``-e_i``.  An edge is the bond ``(x, x+e_i)``;
on the torus it is indexed by ``x*d + i`` so that each site carries exactly
``2d`` incident edges even for ``L = 2``, where the two bonds joining a pair
of sites are distinct edges.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Union

import numpy as np

PERIODIC = "periodic"
FREE = "free"


@dataclass(frozen=True)
class BoxLattice:
    dim: int
    side: int
    boundary: str = PERIODIC

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.side < 2:
            raise ValueError(f"side must be >= 2, got {self.side}")
        if self.boundary not in (PERIODIC, FREE):
            raise ValueError(f"boundary must be 'periodic' or 'free', got {self.boundary!r}")

    @property
    def periodic(self) -> bool:
        return self.boundary == PERIODIC

    @property
    def n_sites(self) -> int:
        return self.side**self.dim

    @property
    def n_ports(self) -> int:
        return 2 * self.dim

    @cached_property
    def _strides(self) -> np.ndarray:
        return self.side ** np.arange(self.dim, dtype=np.int64)

    @cached_property
    def port_vectors(self) -> np.ndarray:
        """(2d, d) integer displacement of each port."""
        vec = np.zeros((2 * self.dim, self.dim), dtype=np.int64)
        for i in range(self.dim):
            vec[2 * i, i] = 1
            vec[2 * i + 1, i] = -1
        return vec

    def coords(self, sites=None) -> np.ndarray:
        if sites is None:
            sites = np.arange(self.n_sites, dtype=np.int64)
        sites = np.asarray(sites, dtype=np.int64)
        return (sites[..., None] // self._strides) % self.side

    def index(self, coords) -> np.ndarray:
        """Site index of integer coordinates; wraps on the torus, -1 outside a free box."""
        c = np.asarray(coords, dtype=np.int64)
        if self.periodic:
            return (np.mod(c, self.side) * self._strides).sum(axis=-1)
        inside = np.all((c >= 0) & (c < self.side), axis=-1)
        idx = (np.clip(c, 0, self.side - 1) * self._strides).sum(axis=-1)
        return np.where(inside, idx, -1)

    def centered(self, coords) -> np.ndarray:
        """Map coordinates (or torus differences) into (-L/2, L/2]^d."""
        c = np.mod(np.asarray(coords, dtype=np.int64), self.side)
        return np.where(c > self.side / 2, c - self.side, c)

    def norm_inf(self, sites) -> np.ndarray:
        """Distance |x| to the origin in the sup norm, centered convention on the torus."""
        c = self.coords(sites)
        if self.periodic:
            c = self.centered(c)
        return np.abs(c).max(axis=-1)

    @cached_property
    def neighbors(self) -> np.ndarray:
        """(N, 2d) neighbor site per port, -1 where the port leaves a free box."""
        c = self.coords()
        out = np.empty((self.n_sites, 2 * self.dim), dtype=np.int64)
        for k, v in enumerate(self.port_vectors):
            out[:, k] = self.index(c + v)
        out.flags.writeable = False
        return out

    @cached_property
    def _edge_tables(self):
        n, d = self.n_sites, self.dim
        tail = np.repeat(np.arange(n, dtype=np.int64), d)
        direction = np.tile(np.arange(d, dtype=np.int64), n)
        head = self.neighbors[tail, 2 * direction]
        if not self.periodic:
            keep = head >= 0
            tail, direction, head = tail[keep], direction[keep], head[keep]
        port_edge = np.full((n, 2 * d), -1, dtype=np.int64)
        e = np.arange(tail.size, dtype=np.int64)
        port_edge[tail, 2 * direction] = e
        port_edge[head, 2 * direction + 1] = e
        for a in (tail, head, direction, port_edge):
            a.flags.writeable = False
        return tail, head, direction, port_edge

    @property
    def n_edges(self) -> int:
        return self._edge_tables[0].size

    @property
    def edge_tail(self) -> np.ndarray:
        return self._edge_tables[0]

    @property
    def edge_head(self) -> np.ndarray:
        return self._edge_tables[1]

    @property
    def edge_direction(self) -> np.ndarray:
        return self._edge_tables[2]

    @property
    def port_edge(self) -> np.ndarray:
        """(N, 2d) edge index behind each port, -1 where there is none."""
        return self._edge_tables[3]

    def edge_index(self, x, direction: int) -> int:
        """Index of the bond from site coordinates ``x`` towards ``+e_direction``."""
        site = int(self.index(np.asarray(x)))
        if site < 0:
            raise ValueError(f"site {x} outside the box")
        e = int(self.port_edge[site, 2 * direction])
        if e < 0:
            raise ValueError(f"no edge from {x} along +e_{direction}")
        return e

    def to_dict(self) -> dict:
        return {"dim": self.dim, "side": self.side, "boundary": self.boundary}


def build_box(dim: int, side: int, boundary: str = PERIODIC) -> BoxLattice:
    lattice = BoxLattice(int(dim), int(side), boundary)
    lattice.neighbors  # materialize tables once
    return lattice


# ---------------------------------------------------------------- laws


class ConductanceLaw:
    """Base class: every law is sampled by inverse transform of one uniform per edge."""

    def transform(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def cdf(self, a):
        raise NotImplementedError

    @property
    def continuous(self) -> bool:
        return False

    def describe(self) -> str:
        raise NotImplementedError

    def p_open(self) -> float:
        return 1.0 - float(self.cdf(0.0))


@dataclass(frozen=True)
class Constant(ConductanceLaw):
    c: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.c <= 1.0:
            raise ValueError(f"Constant conductance must lie in (0,1], got {self.c}")

    def transform(self, u):
        return np.full(np.shape(u), float(self.c))

    def cdf(self, a):
        return np.where(np.asarray(a) >= self.c, 1.0, 0.0)

    def describe(self):
        return f"constant({self.c!r})"


@dataclass(frozen=True)
class Bernoulli(ConductanceLaw):
    p: float

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"Bernoulli p must lie in (0,1], got {self.p}")

    def transform(self, u):
        return (np.asarray(u) < self.p).astype(np.float64)

    def cdf(self, a):
        a = np.asarray(a, dtype=float)
        return np.where(a >= 1.0, 1.0, np.where(a >= 0.0, 1.0 - self.p, 0.0))

    def describe(self):
        return f"bernoulli({self.p!r})"


@dataclass(frozen=True)
class UniformOpen(ConductanceLaw):
    """Uniform on (0, 1]."""

    def transform(self, u):
        return 1.0 - np.asarray(u)

    def cdf(self, a):
        return np.clip(np.asarray(a, dtype=float), 0.0, 1.0)

    @property
    def continuous(self):
        return True

    def describe(self):
        return "uniform"


@dataclass(frozen=True)
class HeavyTail(ConductanceLaw):
    """P(omega <= a) = a**gamma on (0, 1]; small gamma makes trap-rich environments."""

    gamma: float

    def __post_init__(self):
        if not self.gamma > 0.0:
            raise ValueError(f"HeavyTail gamma must be > 0, got {self.gamma}")

    def transform(self, u):
        return (1.0 - np.asarray(u)) ** (1.0 / self.gamma)

    def cdf(self, a):
        return np.clip(np.asarray(a, dtype=float), 0.0, 1.0) ** self.gamma

    @property
    def continuous(self):
        return True

    def describe(self):
        return f"heavytail({self.gamma!r})"


@dataclass(frozen=True)
class Mixture(ConductanceLaw):
    """Strong mass ``p_strong`` uniform on [alpha, 1], weak mass ``p_weak`` uniform
    on (0, alpha), the rest at zero.

    ``p_strong = P(omega >= alpha)`` and ``p_weak = P(0 < omega < alpha)`` are the
    two quantities the strong-cluster construction is controlled by.
    """

    p_strong: float
    p_weak: float
    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"Mixture alpha must lie in (0,1], got {self.alpha}")
        if not 0.0 < self.p_strong <= 1.0:
            raise ValueError(f"Mixture p_strong must lie in (0,1], got {self.p_strong}")
        if not 0.0 <= self.p_weak <= 1.0 - self.p_strong + 1e-15:
            raise ValueError(
                f"Mixture p_weak must lie in [0, 1 - p_strong], got {self.p_weak}"
            )

    def transform(self, u):
        u = np.asarray(u, dtype=float)
        ps, pw, a = self.p_strong, self.p_weak, self.alpha
        strong = a + (1.0 - a) * (u / ps)
        v = (u - ps) / pw if pw > 0 else np.zeros_like(u)
        weak = np.maximum(a * v, a * 2.0**-53)
        return np.where(u < ps, strong, np.where(u < ps + pw, weak, 0.0))

    def cdf(self, a):
        a = np.asarray(a, dtype=float)
        p0 = 1.0 - self.p_strong - self.p_weak
        weak = self.p_weak * np.clip(a / self.alpha, 0.0, 1.0)
        if self.alpha < 1.0:
            strong = self.p_strong * np.clip((a - self.alpha) / (1.0 - self.alpha), 0.0, 1.0)
        else:
            strong = np.where(a >= 1.0, self.p_strong, 0.0)
        return np.where(a < 0.0, 0.0, p0 + weak + strong)

    def describe(self):
        return f"mixture({self.p_strong!r},{self.p_weak!r},{self.alpha!r})"


_LAW_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\(([^)]*)\))?\s*$")


def parse_law(text: str) -> ConductanceLaw:
    """Parse ``constant(0.3)``, ``bernoulli(0.75)``, ``uniform``, ``heavytail(0.5)``,
    ``mixture(0.85,0.05,0.5)``."""
    m = _LAW_RE.match(text.lower())
    if not m:
        raise ValueError(f"cannot parse conductance law {text!r}")
    name, args = m.group(1), m.group(2)
    values = [float(v) for v in args.split(",")] if args and args.strip() else []
    table = {
        "constant": (Constant, (0, 1)),
        "bernoulli": (Bernoulli, (1,)),
        "uniform": (UniformOpen, (0,)),
        "heavytail": (HeavyTail, (1,)),
        "mixture": (Mixture, (3,)),
    }
    if name not in table:
        raise ValueError(f"unknown conductance law {name!r}")
    cls, arities = table[name]
    if len(values) not in arities:
        raise ValueError(f"law {name!r} takes {arities} parameters, got {len(values)}")
    return cls(*values)


# ---------------------------------------------------------------- fields


def edge_uniforms(seed: int, n_edges: int, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Uniforms in [0, 1) for edges ``start..stop-1``.

    Edge ``e`` always receives the ``e``-th draw of a Philox stream keyed by
    ``seed``, so any sub-range can be generated on its own and fields do not
    depend on generation order.
    """
    stop = n_edges if stop is None else stop
    if not 0 <= start <= stop <= n_edges:
        raise ValueError("invalid edge range")
    bitgen = np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF)
    block, offset = divmod(start, 4)
    if block:
        bitgen.advance(block)
    draws = np.random.Generator(bitgen).random(stop - start + offset)
    return draws[offset:]


@dataclass(frozen=True, eq=False)
class ConductanceField:
    lattice: BoxLattice
    weights: np.ndarray
    law: ConductanceLaw | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.shape != (self.lattice.n_edges,):
            raise ValueError(
                f"expected {self.lattice.n_edges} edge weights, got shape {w.shape}"
            )
        if np.any(~np.isfinite(w)) or w.min(initial=0.0) < 0.0 or w.max(initial=0.0) > 1.0:
            raise ValueError("conductances must lie in [0, 1]")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.lattice.dim

    @cached_property
    def port_weights(self) -> np.ndarray:
        """(N, 2d) conductance behind each port (0 where there is no edge)."""
        pe = self.lattice.port_edge
        out = np.where(pe >= 0, self.weights[np.maximum(pe, 0)], 0.0)
        out.flags.writeable = False
        return out

    def weight(self, x, direction: int) -> float:
        return float(self.weights[self.lattice.edge_index(x, direction)])

    def with_weights(self, weights) -> "ConductanceField":
        return ConductanceField(self.lattice, weights, None, None)

    def header(self) -> dict:
        h = self.lattice.to_dict()
        h.update(
            law=self.law.describe() if self.law is not None else None,
            seed=self.seed,
            n_edges=self.lattice.n_edges,
        )
        return h


def sample_field(lattice: BoxLattice, law: ConductanceLaw, seed: int) -> ConductanceField:
    weights = law.transform(edge_uniforms(seed, lattice.n_edges))
    return ConductanceField(lattice, weights, law, int(seed))


def field_from_function(lattice: BoxLattice, fn) -> ConductanceField:
    """Hand-built field: ``fn(tail_coords, head_coords, direction) -> omega`` per edge."""
    c = lattice.coords()
    w = [
        fn(tuple(c[t]), tuple(c[h]), int(i))
        for t, h, i in zip(lattice.edge_tail, lattice.edge_head, lattice.edge_direction)
    ]
    return ConductanceField(lattice, np.asarray(w, dtype=float))


def shift_field(field: ConductanceField, z) -> ConductanceField:
    """Return tau_z omega, i.e. (tau_z omega)_{x,y} = omega_{x+z, y+z}."""
    lat = field.lattice
    if not lat.periodic:
        raise ValueError("shifts are exact only on the periodic box")
    z = np.asarray(z, dtype=np.int64).reshape(lat.dim)
    src_site = lat.index(lat.coords(lat.edge_tail) + z)
    src = src_site * lat.dim + lat.edge_direction
    return ConductanceField(lat, field.weights[src], field.law, field.seed,
                            {"shift": z.tolist(), **field.meta})


# ---------------------------------------------------------------- serialization

_MAGIC = b"RCMF"


def save_field(field: ConductanceField, path: Union[str, Path]) -> Path:
    """Write ``edge_index, omega`` with a JSON header; ``.bin`` paths use a binary layout."""
    path = Path(path)
    header = json.dumps(field.header(), sort_keys=True)
    if path.suffix == ".bin":
        raw = header.encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(field.weights.astype("<f8").tobytes())
        return path
    with open(path, "w") as fh:
        fh.write(f"# {header}\n")
        fh.write("edge_index,omega\n")
        for e, w in enumerate(field.weights):
            fh.write(f"{e},{float(w)!r}\n")
    return path


def load_field(path: Union[str, Path]) -> ConductanceField:
    path = Path(path)
    if path.suffix == ".bin":
        with open(path, "rb") as fh:
            if fh.read(4) != _MAGIC:
                raise ValueError(f"{path} is not a field dump")
            (n,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(n).decode())
            weights = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    else:
        with open(path) as fh:
            header = json.loads(fh.readline()[1:])
            fh.readline()
            rows = [line.split(",") for line in fh if line.strip()]
        idx = np.array([int(r[0]) for r in rows])
        weights = np.empty(len(rows))
        weights[idx] = [float(r[1]) for r in rows]
    lattice = build_box(header["dim"], header["side"], header["boundary"])
    law = parse_law(header["law"]) if header.get("law") else None
    return ConductanceField(lattice, weights, law, header.get("seed"))


def walk_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for walk sampling, keyed by ``(seed, *stream)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


def derived_seed(seed: int, attempt: int) -> int:
    """Seed of the ``attempt``-th resample of ``seed`` (attempt 0 is ``seed`` itself)."""
    if attempt == 0:
        return int(seed)
    return int(np.random.SeedSequence([int(seed), int(attempt)]).generate_state(1, np.uint64)[0])
