"""Reservoir construction and state evolution.

Topologies are small frozen dataclasses; a :class:`ReservoirConfig` wraps one
together with scaling, leak and seed, and fully determines every weight
matrix.  :func:`build_reservoir` turns a config into an object with ``step``
and ``run`` methods.  Composite architectures (parallel members, deep stacks)
are built from member configs and behave like a single reservoir whose state
is the member-major concatenation.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "DenseSparse",
    "SimpleCycle",
    "CycleJumps",
    "SmallWorld",
    "MCI",
    "Parallel",
    "Deep",
    "ReservoirConfig",
    "ReservoirRun",
    "ESPReport",
    "IPResult",
    "SpectralRadiusError",
    "ReservoirError",
    "build_weights",
    "spectral_radius",
    "spectral_norm",
    "scale_spectral_radius",
    "gershgorin_bound",
    "build_reservoir",
    "step",
    "run",
    "verify_esp",
    "intrinsic_plasticity",
    "config_to_dict",
    "config_from_dict",
    "fingerprint",
]


class ReservoirError(RuntimeError):
    """Non-finite state or inconsistent dimensions during a run."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class SpectralRadiusError(RuntimeError):
    """Power iteration did not settle; carries the last estimate."""

    def __init__(self, message: str, last_estimate: float):
        super().__init__(f"{message}; last estimate {last_estimate:.6g}")
        self.last_estimate = last_estimate


# ---------------------------------------------------------------------------
# Topologies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenseSparse:
    """I.i.d. random weights kept with probability ``connectivity``."""

    n: int
    connectivity: float = 0.05
    distribution: str = "uniform"

    kind = "dense_sparse"

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("reservoir needs at least 2 neurons")
        if not 0.0 < self.connectivity <= 1.0:
            raise ValueError("connectivity must lie in (0, 1]")
        if self.distribution not in ("uniform", "normal"):
            raise ValueError("distribution must be 'uniform' or 'normal'")

    @property
    def size(self) -> int:
        return self.n


@dataclass(frozen=True)
class SimpleCycle:
    """Single directed ring with a shared edge weight."""

    n: int
    edge_weight: float = 0.8

    kind = "simple_cycle"

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("reservoir needs at least 2 neurons")

    @property
    def size(self) -> int:
        return self.n


@dataclass(frozen=True)
class CycleJumps:
    """Directed ring plus bidirectional chords every ``jump_size`` nodes."""

    n: int
    cycle_weight: float = 0.8
    jump_weight: float = 0.8
    jump_size: int = 15

    kind = "cycle_jumps"

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("reservoir needs at least 2 neurons")
        if not 2 <= self.jump_size <= self.n - 1:
            raise ValueError("jump_size must lie in [2, n - 1]")

    @property
    def size(self) -> int:
        return self.n


@dataclass(frozen=True)
class SmallWorld:
    """Watts-Strogatz ring lattice of even ``degree`` with rewiring."""

    n: int
    degree: int = 6
    rewire_prob: float = 0.1
    weight_scale: float = 1.0

    kind = "small_world"

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("reservoir needs at least 2 neurons")
        if self.degree % 2 or not 0 < self.degree < self.n:
            raise ValueError("degree must be even and below n")
        if not 0.0 <= self.rewire_prob <= 1.0:
            raise ValueError("rewire_prob must lie in [0, 1]")

    @property
    def size(self) -> int:
        return self.n


@dataclass(frozen=True)
class MCI:
    """Two simple cycles joined by one edge in each direction.

    ``input_balance`` scales the second ring's input weights relative to the
    first ring's.
    """

    n_sub: int
    cycle_weight: float = 0.8
    inter_weight: float = 0.8
    input_balance: float = 0.5

    kind = "mci"

    def __post_init__(self):
        if self.n_sub < 2:
            raise ValueError("each ring needs at least 2 neurons")

    @property
    def size(self) -> int:
        return 2 * self.n_sub


@dataclass(frozen=True)
class Parallel:
    """Independent members, each fed a buffered slice of the input vector.

    Member ``i`` sees input channels ``i*q - b .. (i+1)*q + b - 1`` taken
    modulo the input dimension.
    """

    members: tuple
    group_size: int = 1
    buffer: int = 0

    kind = "parallel"

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValueError("parallel reservoir needs members")
        if self.group_size < 1 or self.buffer < 0:
            raise ValueError("group_size must be >= 1 and buffer >= 0")
        for m in self.members:
            if isinstance(m.topology, (Parallel, Deep)):
                raise ValueError("members must be single reservoirs")
            if m.feedback:
                raise ValueError("member feedback is not supported")

    @property
    def size(self) -> int:
        return sum(m.topology.size for m in self.members)


DEEP_MODES = ("stacked", "input_to_all", "grouped")


@dataclass(frozen=True)
class Deep:
    """Layered reservoirs.

    ``stacked`` feeds each layer the fresh state of the one below,
    ``input_to_all`` feeds ``[u; x_below]`` and ``grouped`` feeds every layer
    the external input only.
    """

    layers: tuple
    mode: str = "stacked"

    kind = "deep"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("deep reservoir needs layers")
        if self.mode not in DEEP_MODES:
            raise ValueError(f"mode must be one of {DEEP_MODES}")
        for m in self.layers:
            if isinstance(m.topology, (Parallel, Deep)):
                raise ValueError("layers must be single reservoirs")
            if m.feedback:
                raise ValueError("layer feedback is not supported")

    @property
    def size(self) -> int:
        return sum(m.topology.size for m in self.layers)


@dataclass(frozen=True)
class ReservoirConfig:
    """Everything needed to reproduce a reservoir bit for bit.

    Attributes
    ----------
    topology : topology dataclass
    spectral_radius : float
        Target spectral radius of the recurrent matrix.
    input_scaling : float
        Input weights are uniform on ``[-input_scaling, input_scaling]``.
    bias_scale : float
        Biases are uniform on ``[-bias_scale, bias_scale]``.
    leak : float
        Leaking rate in ``(0, 1]``.
    feedback : bool
        Enable output feedback weights.
    param_channel : tuple of float, optional
        Static parameter vector added through its own weight matrix.
    seed : int
        Master seed.
    activation : str
        ``"tanh"``; ``"identity"`` exists only for linear-reservoir analysis.
    """

    topology: object
    spectral_radius: float = 0.95
    input_scaling: float = 0.2
    bias_scale: float = 0.2
    leak: float = 0.8
    feedback: bool = False
    param_channel: tuple | None = None
    seed: int = 0
    activation: str = "tanh"

    def __post_init__(self):
        if not self.spectral_radius > 0:
            raise ValueError("spectral_radius must be positive")
        if not 0.0 < self.leak <= 1.0:
            raise ValueError("leak must lie in (0, 1]")
        if self.activation not in ("tanh", "identity"):
            raise ValueError("activation must be 'tanh' or 'identity'")
        if self.param_channel is not None:
            object.__setattr__(self, "param_channel", tuple(float(v) for v in self.param_channel))
        if isinstance(self.topology, (Parallel, Deep)) and self.feedback:
            raise ValueError("feedback is supported on single reservoirs only")

    @property
    def size(self) -> int:
        return self.topology.size

    def reseeded(self, seed: int) -> "ReservoirConfig":
        """Copy with a new master seed; composite members get derived seeds."""
        topo = self.topology
        if isinstance(topo, (Parallel, Deep)):
            children = topo.members if isinstance(topo, Parallel) else topo.layers
            seeds = _child_seeds(seed, len(children))
            new_children = tuple(c.reseeded(s) for c, s in zip(children, seeds))
            if isinstance(topo, Parallel):
                topo = replace(topo, members=new_children)
            else:
                topo = replace(topo, layers=new_children)
        return replace(self, topology=topo, seed=int(seed))


def _child_seeds(seed: int, count: int) -> list:
    ss = np.random.SeedSequence(int(seed))
    return [int(c.generate_state(1, np.uint64)[0] >> np.uint64(1)) for c in ss.spawn(count)]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_TOPOLOGIES = {
    cls.kind: cls for cls in (DenseSparse, SimpleCycle, CycleJumps, SmallWorld, MCI, Parallel, Deep)
}
_CONFIG_FIELDS = {
    "topology",
    "spectral_radius",
    "input_scaling",
    "bias_scale",
    "leak",
    "feedback",
    "param_channel",
    "seed",
    "activation",
}


def topology_to_dict(topo) -> dict:
    if isinstance(topo, Parallel):
        return {
            "kind": "parallel",
            "members": [config_to_dict(m) for m in topo.members],
            "group_size": topo.group_size,
            "buffer": topo.buffer,
        }
    if isinstance(topo, Deep):
        return {"kind": "deep", "layers": [config_to_dict(m) for m in topo.layers], "mode": topo.mode}
    d = {"kind": topo.kind}
    d.update(asdict(topo))
    return d


def topology_from_dict(doc: dict):
    doc = dict(doc)
    kind = doc.pop("kind", None)
    if kind not in _TOPOLOGIES:
        raise ValueError(f"unknown topology kind {kind!r}; choose from {sorted(_TOPOLOGIES)}")
    cls = _TOPOLOGIES[kind]
    if kind == "parallel":
        doc["members"] = tuple(config_from_dict(m) for m in doc.get("members", []))
    elif kind == "deep":
        doc["layers"] = tuple(config_from_dict(m) for m in doc.get("layers", []))
    allowed = set(cls.__dataclass_fields__)
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown keys for topology {kind}: {sorted(unknown)}")
    return cls(**doc)


def config_to_dict(config: ReservoirConfig) -> dict:
    return {
        "topology": topology_to_dict(config.topology),
        "spectral_radius": config.spectral_radius,
        "input_scaling": config.input_scaling,
        "bias_scale": config.bias_scale,
        "leak": config.leak,
        "feedback": config.feedback,
        "param_channel": None if config.param_channel is None else list(config.param_channel),
        "seed": config.seed,
        "activation": config.activation,
    }


def config_from_dict(doc: dict) -> ReservoirConfig:
    unknown = set(doc) - _CONFIG_FIELDS
    if unknown:
        raise ValueError(f"unknown reservoir config keys: {sorted(unknown)}")
    if "topology" not in doc:
        raise ValueError("reservoir config needs a topology")
    kwargs = dict(doc)
    kwargs["topology"] = topology_from_dict(doc["topology"])
    return ReservoirConfig(**kwargs)


def fingerprint(config: ReservoirConfig) -> str:
    """Short stable hash of a config's canonical JSON form."""
    text = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Spectral tools
# ---------------------------------------------------------------------------


def gershgorin_bound(W) -> float:
    """Largest absolute row sum, an upper bound on the spectral radius."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError("W must be square")
    return float(np.max(np.sum(np.abs(W), axis=1)))


def _arnoldi_ritz(W: np.ndarray, v: np.ndarray, block: int):
    """Largest Ritz magnitude on ``span{v, W v, ..., W^(block-1) v}``.

    Also returns ``W^block v`` normalised, the next power-iteration vector.
    """
    n = v.size
    k = min(block, n)
    Q = np.zeros((n, k))
    H = np.zeros((k, k))
    Q[:, 0] = v
    size = k
    for j in range(k):
        w = W @ Q[:, j]
        scale = np.linalg.norm(w)
        for i in range(j + 1):
            H[i, j] = Q[:, i] @ w
            w = w - H[i, j] * Q[:, i]
        h = np.linalg.norm(w)
        if j + 1 < k:
            # invariant subspace found: the Ritz values are exact
            if h <= 1e-12 * max(scale, np.finfo(float).tiny):
                size = j + 1
                break
            H[j + 1, j] = h
            Q[:, j + 1] = w / h
    ritz = np.linalg.eigvals(H[:size, :size])
    est = float(np.max(np.abs(ritz)))
    nxt = v
    for _ in range(block):
        nxt = W @ nxt
        nn = np.linalg.norm(nxt)
        if nn == 0.0:
            return est, None
        nxt = nxt / nn
    return est, nxt


def spectral_radius(W, max_iter: int = 10000, tol: float = 1e-8, seed: int = 0, block: int = 8) -> float:
    """Dominant eigenvalue magnitude by power iteration.

    The iterate is advanced by ``W^block`` each round and the estimate is the
    largest Ritz value of ``W`` on the Krylov space spanned by the iterate
    and its next ``block - 1`` images.  The small Ritz problem separates
    complex-conjugate pairs and clusters of near-equal magnitude that make
    the plain Rayleigh quotient oscillate.

    Raises
    ------
    SpectralRadiusError
        If the estimate has not settled to relative ``tol`` within
        ``max_iter`` rounds.
    """
    W = np.asarray(W, dtype=float)
    n = W.shape[0]
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    prev = np.nan
    settled = 0
    est = 0.0
    for _ in range(max_iter):
        est, nxt = _arnoldi_ritz(W, v, block)
        if nxt is None:
            return 0.0
        if abs(est - prev) <= tol * max(est, 1e-300):
            settled += 1
            if settled >= 3:
                return est
        else:
            settled = 0
        prev = est
        v = nxt
    raise SpectralRadiusError("power iteration did not converge", est)


def spectral_norm(W, max_iter: int = 10000, tol: float = 1e-12) -> float:
    """Largest singular value via power iteration on ``W^T W``."""
    W = np.asarray(W, dtype=float)
    v = np.ones(W.shape[1]) / math.sqrt(W.shape[1])
    v += 1e-3 * np.random.default_rng(1).standard_normal(W.shape[1])
    est = 0.0
    for _ in range(max_iter):
        w = W.T @ (W @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        new = math.sqrt(nw)
        v = w / nw
        if abs(new - est) <= tol * new:
            return new
        est = new
    return est


def scale_spectral_radius(
    W,
    rho_target: float,
    tol: float = 1e-8,
    closed_form: float | None = None,
    allow_norm_fallback: bool = False,
):
    """Rescale ``W`` so its spectral radius equals ``rho_target``.

    Parameters
    ----------
    closed_form : float, optional
        Known spectral radius (for rings), used instead of iterating.
    allow_norm_fallback : bool
        When power iteration fails, scale by the spectral norm instead, an
        over-estimate of the radius, and log a warning.

    Returns
    -------
    scaled : ndarray
    info : dict
        ``{"rho_estimate": ..., "method": ...}``.
    """
    W = np.asarray(W, dtype=float)
    if not rho_target > 0:
        raise ValueError("rho_target must be positive")
    if not np.any(W):
        raise ValueError("cannot rescale a zero matrix")
    if closed_form is not None:
        rho, method = float(closed_form), "closed_form"
    else:
        try:
            rho, method = spectral_radius(W, tol=tol), "power_iteration"
        except SpectralRadiusError:
            if not allow_norm_fallback:
                raise
            rho, method = spectral_norm(W), "norm_fallback"
            logger.warning("power iteration stalled; scaling by the spectral norm %.6g", rho)
    if rho == 0.0:
        raise ValueError("matrix is nilpotent; spectral radius is zero")
    return W * (rho_target / rho), {"rho_estimate": rho, "method": method}


# ---------------------------------------------------------------------------
# Weight construction
# ---------------------------------------------------------------------------


def _streams(seed: int):
    """Independent counter-based generators for the five weight families."""
    ss = np.random.SeedSequence(int(seed))
    names = ("recurrent", "input", "bias", "feedback", "param")
    return {name: np.random.Generator(np.random.Philox(child)) for name, child in zip(names, ss.spawn(5))}


def _ring(n: int, w: float) -> np.ndarray:
    W = np.zeros((n, n))
    idx = np.arange(n)
    W[idx, (idx + 1) % n] = w
    return W


def _small_world(topo: SmallWorld, rng: np.random.Generator) -> np.ndarray:
    n, half = topo.n, topo.degree // 2
    adj = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(1, half + 1):
            k = (i + j) % n
            adj[i, k] = adj[k, i] = True
    for j in range(1, half + 1):
        for i in range(n):
            k = (i + j) % n
            if not adj[i, k] or rng.random() >= topo.rewire_prob:
                continue
            free = np.flatnonzero(~adj[i])
            free = free[free != i]
            if free.size == 0:
                continue
            new = int(rng.choice(free))
            adj[i, k] = adj[k, i] = False
            adj[i, new] = adj[new, i] = True
    weights = rng.uniform(-1.0, 1.0, size=(n, n)) * topo.weight_scale
    return np.where(adj, weights, 0.0)


def build_weights(topology, seed: int = 0):
    """Recurrent matrix of a single-matrix topology.

    Returns
    -------
    W : ndarray
    meta : dict
        ``kind``, ``nonzeros`` and, for rings, the exact spectral radius under
        ``closed_form_radius``.
    """
    rng = _streams(seed)["recurrent"]
    closed = None
    if isinstance(topology, DenseSparse):
        n = topology.n
        if topology.distribution == "uniform":
            vals = rng.uniform(-1.0, 1.0, size=(n, n))
        else:
            vals = rng.standard_normal((n, n))
        mask = rng.random((n, n)) < topology.connectivity
        W = np.where(mask, vals, 0.0)
    elif isinstance(topology, SimpleCycle):
        W = _ring(topology.n, topology.edge_weight)
        closed = abs(topology.edge_weight)
    elif isinstance(topology, CycleJumps):
        n, j = topology.n, topology.jump_size
        W = _ring(n, topology.cycle_weight)
        for i in range(0, n, j):
            k = (i + j) % n
            if k == i:
                continue
            W[i, k] = topology.jump_weight
            W[k, i] = topology.jump_weight
    elif isinstance(topology, SmallWorld):
        W = _small_world(topology, rng)
    elif isinstance(topology, MCI):
        n = topology.n_sub
        W = np.zeros((2 * n, 2 * n))
        W[:n, :n] = _ring(n, topology.cycle_weight)
        W[n:, n:] = _ring(n, topology.cycle_weight)
        W[0, n] = topology.inter_weight
        W[n, 0] = topology.inter_weight
    else:
        raise TypeError(f"{type(topology).__name__} is not a single-matrix topology")
    return W, {"kind": topology.kind, "nonzeros": int(np.count_nonzero(W)), "closed_form_radius": closed}


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


@dataclass
class ReservoirRun:
    """Post-washout states aligned with the inputs that produced them."""

    states: np.ndarray
    washout_used: int
    config_fingerprint: str
    final_state: np.ndarray = field(repr=False, default=None)


def _as_inputs(inputs) -> np.ndarray:
    data = getattr(inputs, "data", inputs)
    U = np.asarray(data, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    return U


class EchoStateReservoir:
    """Single leaky-integrator reservoir built from a :class:`ReservoirConfig`."""

    def __init__(self, config: ReservoirConfig, n_inputs: int, n_outputs: int | None = None):
        self.config = config
        self.n_inputs = int(n_inputs)
        self.n_outputs = int(n_outputs if n_outputs is not None else n_inputs)
        topo = config.topology
        streams = _streams(config.seed)
        W, meta = build_weights(topo, config.seed)
        self.W, self.scale_info = scale_spectral_radius(
            W, config.spectral_radius, closed_form=meta["closed_form_radius"], allow_norm_fallback=True
        )
        self.meta = meta
        N = topo.size
        self.n_states = N
        if isinstance(topo, MCI):
            half = streams["input"].uniform(-1.0, 1.0, size=(topo.n_sub, self.n_inputs))
            W_in = np.vstack([half, topo.input_balance * half])
        else:
            W_in = streams["input"].uniform(-1.0, 1.0, size=(N, self.n_inputs))
        self.W_in = W_in * config.input_scaling
        self.bias = streams["bias"].uniform(-1.0, 1.0, size=N) * config.bias_scale
        self.W_back = None
        if config.feedback:
            self.W_back = streams["feedback"].uniform(-1.0, 1.0, size=(N, self.n_outputs)) * config.input_scaling
        self.param_drive = np.zeros(N)
        if config.param_channel is not None:
            p = np.asarray(config.param_channel)
            W_param = streams["param"].uniform(-1.0, 1.0, size=(N, p.size)) * config.input_scaling
            self.param_drive = W_param @ p
        self.gain = None
        self.ip_bias = None
        self.leak = config.leak
        self._fingerprint = fingerprint(config)

    # activation with optional intrinsic-plasticity gain and bias
    def _act(self, net):
        if self.gain is not None:
            net = self.gain * net + self.ip_bias
        if self.config.activation == "tanh":
            return np.tanh(net)
        return net

    def with_plasticity(self, gain, bias) -> "EchoStateReservoir":
        """Copy whose activation is ``tanh(gain * net + bias)``."""
        other = object.__new__(EchoStateReservoir)
        other.__dict__.update(self.__dict__)
        other.gain = np.asarray(gain, dtype=float)
        other.ip_bias = np.asarray(bias, dtype=float)
        return other

    def initial_state(self) -> np.ndarray:
        return np.zeros(self.n_states)

    def step(self, state, u, y_prev=None) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if state.shape != (self.n_states,) or u.shape != (self.n_inputs,):
            raise ReservoirError(
                f"dimension mismatch: state {state.shape}, input {u.shape}; expected "
                f"({self.n_states},), ({self.n_inputs},)"
            )
        net = self.W_in @ u + self.W @ state + self.bias + self.param_drive
        if self.W_back is not None:
            if y_prev is None:
                raise ReservoirError("feedback is enabled but y_prev is missing")
            net = net + self.W_back @ np.atleast_1d(y_prev)
        elif y_prev is not None:
            raise ReservoirError("y_prev given but feedback is disabled")
        out = (1.0 - self.leak) * state + self.leak * self._act(net)
        if not np.all(np.isfinite(out)):
            raise ReservoirError("non-finite reservoir state", 0)
        return out

    def run(self, inputs, warmup: int = 0, x0=None, teacher=None) -> ReservoirRun:
        U = _as_inputs(inputs)
        T = len(U)
        if U.shape[1] != self.n_inputs:
            raise ReservoirError(f"input dimension {U.shape[1]} != {self.n_inputs}")
        if not 0 <= warmup < T:
            raise ValueError("warmup must satisfy 0 <= warmup < T")
        drive = U @ self.W_in.T + (self.bias + self.param_drive)
        if self.W_back is not None:
            if teacher is None:
                raise ReservoirError("feedback is enabled; pass teacher outputs")
            Y = _as_inputs(teacher)
            prev = np.vstack([np.zeros((1, Y.shape[1])), Y[:-1]])
            drive = drive + prev[:T] @ self.W_back.T
        x = self.initial_state() if x0 is None else np.asarray(x0, dtype=float).copy()
        states = np.empty((T, self.n_states))
        W, a = self.W, self.leak
        for t in range(T):
            x = (1.0 - a) * x + a * self._act(drive[t] + W @ x)
            states[t] = x
        if not np.all(np.isfinite(x)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(states), axis=1))[0])
            raise ReservoirError("non-finite reservoir state", bad)
        return ReservoirRun(states[warmup:], warmup, self._fingerprint, x.copy())

    def contraction_factor(self) -> float:
        """Lipschitz bound ``(1 - a) + a * |W|_2`` of one state update."""
        return (1.0 - self.leak) + self.leak * spectral_norm(self.W)


class ParallelReservoir:
    """Members driven by overlapping input slices with periodic wraparound."""

    def __init__(self, config: ReservoirConfig, n_inputs: int, n_outputs: int | None = None):
        topo: Parallel = config.topology
        self.config = config
        self.n_inputs = int(n_inputs)
        q, b = topo.group_size, topo.buffer
        if len(topo.members) * q != self.n_inputs:
            raise ValueError(
                f"parallel layout needs members * group_size == input dimension "
                f"({len(topo.members)} * {q} != {self.n_inputs})"
            )
        self.slices = [np.arange(i * q - b, (i + 1) * q + b) % self.n_inputs for i in range(len(topo.members))]
        self.groups = [np.arange(i * q, (i + 1) * q) for i in range(len(topo.members))]
        self.members = [EchoStateReservoir(m, len(s)) for m, s in zip(topo.members, self.slices)]
        self.offsets = np.cumsum([0] + [m.n_states for m in self.members])
        self.n_states = int(self.offsets[-1])
        self._fingerprint = fingerprint(config)

    def initial_state(self):
        return np.zeros(self.n_states)

    def state_blocks(self):
        """``(start, stop)`` column range of each member in the joint state."""
        return [(int(self.offsets[i]), int(self.offsets[i + 1])) for i in range(len(self.members))]

    def step(self, state, u, y_prev=None):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        out = np.empty(self.n_states)
        for m, s, (lo, hi) in zip(self.members, self.slices, self.state_blocks()):
            out[lo:hi] = m.step(state[lo:hi], u[s])
        return out

    def run(self, inputs, warmup: int = 0, x0=None, teacher=None) -> ReservoirRun:
        U = _as_inputs(inputs)
        parts, finals = [], []
        for m, s, (lo, hi) in zip(self.members, self.slices, self.state_blocks()):
            r = m.run(U[:, s], warmup, None if x0 is None else np.asarray(x0)[lo:hi])
            parts.append(r.states)
            finals.append(r.final_state)
        return ReservoirRun(np.hstack(parts), warmup, self._fingerprint, np.concatenate(finals))

    def contraction_factor(self) -> float:
        return max(m.contraction_factor() for m in self.members)


class DeepReservoir:
    """Layer stack; the joint state is layer-major."""

    def __init__(self, config: ReservoirConfig, n_inputs: int, n_outputs: int | None = None):
        topo: Deep = config.topology
        self.config = config
        self.mode = topo.mode
        self.n_inputs = int(n_inputs)
        layers = []
        below = None
        for layer_cfg in topo.layers:
            if below is None or self.mode == "grouped":
                dim = self.n_inputs
            elif self.mode == "stacked":
                dim = below
            else:
                dim = self.n_inputs + below
            layers.append(EchoStateReservoir(layer_cfg, dim))
            below = layer_cfg.topology.size
        self.layers = layers
        self.offsets = np.cumsum([0] + [m.n_states for m in layers])
        self.n_states = int(self.offsets[-1])
        self._fingerprint = fingerprint(config)

    def initial_state(self):
        return np.zeros(self.n_states)

    def state_blocks(self):
        return [(int(self.offsets[i]), int(self.offsets[i + 1])) for i in range(len(self.layers))]

    def _layer_input(self, u, below):
        if below is None or self.mode == "grouped":
            return u
        if self.mode == "stacked":
            return below
        return np.concatenate([u, below], axis=-1)

    def step(self, state, u, y_prev=None):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        out = np.empty(self.n_states)
        below = None
        for m, (lo, hi) in zip(self.layers, self.state_blocks()):
            out[lo:hi] = m.step(state[lo:hi], self._layer_input(u, below))
            below = out[lo:hi]
        return out

    def run(self, inputs, warmup: int = 0, x0=None, teacher=None) -> ReservoirRun:
        U = _as_inputs(inputs)
        parts, finals = [], []
        below = None
        for m, (lo, hi) in zip(self.layers, self.state_blocks()):
            r = m.run(self._layer_input(U, below), 0, None if x0 is None else np.asarray(x0)[lo:hi])
            below = r.states
            parts.append(r.states[warmup:])
            finals.append(r.final_state)
        if not 0 <= warmup < len(U):
            raise ValueError("warmup must satisfy 0 <= warmup < T")
        return ReservoirRun(np.hstack(parts), warmup, self._fingerprint, np.concatenate(finals))

    def contraction_factor(self):
        return None


@functools.lru_cache(maxsize=64)
def _build_cached(config: ReservoirConfig, n_inputs: int, n_outputs: int | None):
    topo = config.topology
    if isinstance(topo, Parallel):
        return ParallelReservoir(config, n_inputs, n_outputs)
    if isinstance(topo, Deep):
        return DeepReservoir(config, n_inputs, n_outputs)
    return EchoStateReservoir(config, n_inputs, n_outputs)


def build_reservoir(config: ReservoirConfig, n_inputs: int, n_outputs: int | None = None):
    """Materialise the weights of ``config`` for ``n_inputs`` input channels.

    Built reservoirs are cached per ``(config, n_inputs, n_outputs)`` and must
    be treated as read-only.
    """
    return _build_cached(config, int(n_inputs), None if n_outputs is None else int(n_outputs))


def step(config, state, u_t, y_prev=None):
    """One leaky update ``(1 - a) x + a tanh(W_in u + W x + W_back y + b)``."""
    res = config if not isinstance(config, ReservoirConfig) else build_reservoir(config, np.atleast_1d(u_t).size)
    return res.step(state, u_t, y_prev)


def run(config, inputs, warmup: int = 0, x0=None, teacher=None) -> ReservoirRun:
    """Drive a reservoir over ``inputs`` and drop the first ``warmup`` states."""
    U = _as_inputs(inputs)
    res = config if not isinstance(config, ReservoirConfig) else build_reservoir(config, U.shape[1])
    return res.run(U, warmup, x0, teacher)


# ---------------------------------------------------------------------------
# Echo state property
# ---------------------------------------------------------------------------


@dataclass
class ESPReport:
    """Outcome of driving random initial-state pairs with a shared input.

    Attributes
    ----------
    converged : bool
        True when every pair's log-distance trend is negative.
    decay_rate : float
        Mean per-step slope of the log distance.
    slopes : ndarray
        Slope per trial.
    contraction_factor : float or None
        Per-step Lipschitz bound of the update, when one is available.
    max_excess : float or None
        Largest ``|d(t+1)| - factor * |d(t)|`` over all trials and steps.
    """

    converged: bool
    decay_rate: float
    slopes: np.ndarray
    contraction_factor: float | None = None
    max_excess: float | None = None


def verify_esp(config, inputs, n_trials: int = 20, horizon: int | None = None, seed: int = 0) -> ESPReport:
    """Empirical echo-state check on pairs of random initial states.

    Each trial draws two initial states uniformly from ``[-1, 1]^N``, drives
    both with the same input for ``horizon`` steps and fits a line to the log
    of their Euclidean distance (floored at ``1e-300``).
    """
    if n_trials < 2:
        raise ValueError("need at least 2 trials")
    U = _as_inputs(inputs)
    if horizon is not None:
        U = U[:horizon]
    res = config if not isinstance(config, ReservoirConfig) else build_reservoir(config, U.shape[1])
    rng = np.random.default_rng(seed)
    factor = res.contraction_factor()
    T = len(U)
    t = np.arange(T + 1, dtype=float)
    slopes = np.empty(n_trials)
    excess = -np.inf
    for k in range(n_trials):
        xa = rng.uniform(-1.0, 1.0, res.n_states)
        xb = rng.uniform(-1.0, 1.0, res.n_states)
        sa = res.run(U, 0, xa).states
        sb = res.run(U, 0, xb).states
        d = np.concatenate([[np.linalg.norm(xa - xb)], np.linalg.norm(sa - sb, axis=1)])
        if factor is not None:
            excess = max(excess, float(np.max(d[1:] - factor * d[:-1])))
        logd = np.log(np.maximum(d, 1e-300))
        # stop the fit once the pair has merged to machine precision
        stop = np.flatnonzero(d <= 1e-300)
        end = int(stop[0]) + 1 if stop.size else T + 1
        tt, ll = t[:end], logd[:end]
        tc = tt - tt.mean()
        slopes[k] = float(np.dot(tc, ll - ll.mean()) / np.dot(tc, tc)) if end > 1 else -np.inf
    return ESPReport(
        bool(np.all(slopes < 0)),
        float(np.mean(slopes)),
        slopes,
        factor,
        None if factor is None else excess,
    )


# ---------------------------------------------------------------------------
# Intrinsic plasticity
# ---------------------------------------------------------------------------


@dataclass
class IPResult:
    """Adapted activation gains and biases with the resulting output statistics."""

    gain: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    clamped: bool = False


class GainClampWarning(UserWarning):
    """A plasticity gain fell below the floor and was clamped."""


def intrinsic_plasticity(config, inputs, eta: float = 1e-4, mu: float = 0.0, sigma: float = 0.2, epochs: int = 1, gain=None, bias=None) -> IPResult:
    """Adapt per-neuron gain and bias towards a Gaussian output distribution.

    With ``net`` the neuron's net input and ``y = tanh(gain * net + bias)``,
    every step applies::

        db = -eta * (-mu / sigma**2 + y / sigma**2 * (2 sigma**2 + 1 - y**2 + mu y))
        dg = eta / gain + db * net

    Gains are floored at ``1e-6``; flooring sets ``clamped``.
    """
    if eta < 0 or sigma <= 0:
        raise ValueError("eta must be >= 0 and sigma > 0")
    U = _as_inputs(inputs)
    res = config if not isinstance(config, ReservoirConfig) else build_reservoir(config, U.shape[1])
    if not isinstance(res, EchoStateReservoir):
        raise TypeError("intrinsic plasticity applies to single reservoirs")
    N = res.n_states
    g = np.ones(N) if gain is None else np.array(gain, dtype=float)
    b = np.zeros(N) if bias is None else np.array(bias, dtype=float)
    s2 = sigma * sigma
    clamped = False
    drive = U @ res.W_in.T + (res.bias + res.param_drive)
    a = res.leak
    outputs = np.empty((len(U), N))
    for _ in range(epochs):
        x = np.zeros(N)
        for t in range(len(U)):
            net = drive[t] + res.W @ x
            y = np.tanh(g * net + b)
            db = -eta * (-mu / s2 + (y / s2) * (2.0 * s2 + 1.0 - y * y + mu * y))
            dg = eta / g + db * net
            b = b + db
            g = g + dg
            if np.any(g < 1e-6):
                g = np.maximum(g, 1e-6)
                clamped = True
            x = (1.0 - a) * x + a * y
            outputs[t] = y
    if clamped:
        warnings.warn("intrinsic plasticity gain clamped at 1e-6", GainClampWarning, stacklevel=2)
    return IPResult(g, b, outputs.mean(axis=0), outputs.std(axis=0), clamped)
