"""The adaptive-parameter layer ladder.

Six layer versions share one interface:

* ``base`` -- static weight, ``y = act(W x)``.
* ``v1`` -- full weight generated per instance, ``W_i = reshape(G(z))``.
* ``v2`` -- low-rank factors ``U_i, S_i, V_i`` generated, ``W_i`` rebuilt.
* ``v3`` -- same factors, applied right to left without forming ``W_i``.
* ``v4`` -- only ``S_i`` generated, shared ``U`` and ``V``.
* ``v5`` -- as v4 with ``U = Ul Ur`` and ``V = Vl Vr`` during training;
  :func:`collapse_overparam` folds it back to v4 for inference.

All passes are batched: ``x`` is ``(B, M)``, ``z`` is ``(B, D)``.  The
single-instance entry points accept 1-D vectors and return 1-D results.
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import linalg
from .linalg import ShapeError

__all__ = [
    "Version",
    "GeneratorNet",
    "ApgLayer",
    "ForwardCache",
    "make_layer",
    "generate_full_weight",
    "generate_lowrank",
    "generate_specific",
    "forward",
    "backward",
    "apply_generated",
    "backward_generated",
    "collapse_overparam",
    "effective_weight",
    "glorot_uniform",
    "gen_out_dim",
]


class Version(str, enum.Enum):
    BASE = "base"
    V1 = "v1"
    V2 = "v2"
    V3 = "v3"
    V4 = "v4"
    V5 = "v5"

    @classmethod
    def parse(cls, value: "str | Version") -> "Version":
        if isinstance(value, Version):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown version {value!r}; expected one of {names}") from None

    @property
    def generated(self) -> bool:
        return self is not Version.BASE


class StaleCacheError(RuntimeError):
    pass


# -- activations ------------------------------------------------------------

def _relu(a):
    return np.maximum(a, 0.0)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


_ACT: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": _relu,
    "identity": lambda a: a,
    "sigmoid": _sigmoid,
}


def _act_grad(name: str, pre: np.ndarray, out: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if name == "relu":
        return dy * (pre > 0)
    if name == "sigmoid":
        return dy * out * (1.0 - out)
    return dy


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


# -- generator ----------------------------------------------------------------

def _alloc(shape: tuple[int, ...], directory: Path | None, name: str) -> np.ndarray:
    if directory is None:
        return np.zeros(shape)
    directory.mkdir(parents=True, exist_ok=True)
    return np.lib.format.open_memmap(directory / f"{name}.npy", mode="w+", dtype=np.float64, shape=shape)


@dataclass
class GeneratorNet:
    """MLP mapping a condition ``z`` to a flat parameter vector.

    ``weights[i]`` has shape ``(out, in)``.  Hidden layers use ReLU, the
    output layer is affine with no activation.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    grad_buffers: list[np.ndarray] | None = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("generator needs matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError("GeneratorNet", w.shape, b.shape, detail=f"layer {i}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError("GeneratorNet", self.weights[i - 1].shape, w.shape, detail="chain")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        in_dim: int,
        out_dim: int,
        bias: np.ndarray | None = None,
        hidden: tuple[int, ...] = (),
        out_of_core: str | Path | None = None,
        tag: str = "gen",
    ) -> "GeneratorNet":
        """Hidden layers get Glorot weights; the output layer gets
        ``N(0, 0.01^2 / fan_in)`` weights and ``bias`` (zeros if omitted).

        With ``out_of_core`` set, the output layer's weight and its gradient
        buffer live in memory-mapped files under that directory.
        """
        directory = Path(out_of_core) if out_of_core is not None else None
        dims = [in_dim, *hidden, out_dim]
        weights, biases = [], []
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            last = i == len(dims) - 2
            if last:
                w = _alloc((fan_out, fan_in), directory, f"{tag}_W{i}")
                std = 0.01 / math.sqrt(fan_in)
                # chunked fill keeps peak memory bounded for huge generators
                step = max(1, (1 << 22) // max(fan_in, 1))
                for r in range(0, fan_out, step):
                    w[r:r + step] = rng.normal(0.0, std, size=(min(step, fan_out - r), fan_in))
                b = np.zeros(fan_out) if bias is None else np.array(bias, dtype=np.float64)
                if b.shape != (fan_out,):
                    raise ShapeError("GeneratorNet.init", b.shape, (fan_out,), detail="bias")
            else:
                w = glorot_uniform(rng, fan_out, fan_in)
                b = np.zeros(fan_out)
            weights.append(w)
            biases.append(b)
        gen = cls(weights, biases)
        if directory is not None:
            gen.grad_buffers = [
                _alloc(w.shape, directory, f"{tag}_dW{i}") if isinstance(w, np.memmap) else None
                for i, w in enumerate(weights)
            ]
        return gen

    def forward(self, z: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        if z.ndim != 2 or z.shape[1] != self.in_dim:
            raise ShapeError("generator", z.shape, (self.in_dim,))
        acts = [z]
        h = z
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = linalg.linear(h, w) + b
            if i < last:
                h = _relu(h)
            acts.append(h)
        return h, acts

    def backward(self, acts: list[np.ndarray], dout: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        dh = dout
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                dh = dh * (acts[i + 1] > 0)
            x_in = acts[i]
            buf = self.grad_buffers[i] if self.grad_buffers else None
            if buf is not None:
                np.matmul(dh.T, x_in, out=buf)
                grads[f"W{i}"] = buf
            else:
                grads[f"W{i}"] = dh.T @ x_in
            grads[f"b{i}"] = dh.sum(axis=0)
            dh = dh @ self.weights[i]
        return grads, dh

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            return self.forward(z[None, :])[0][0]
        return self.forward(z)[0]


# -- layer ------------------------------------------------------------------------

def gen_out_dim(version: Version, n: int, m: int, k: int) -> int:
    """Length of the flat vector the generator must produce."""
    if version is Version.BASE:
        return 0
    if version is Version.V1:
        return n * m
    if version in (Version.V2, Version.V3):
        return n * k + k * k + k * m
    return k * k


_SHARED_FIELDS = {
    Version.BASE: ("W",),
    Version.V1: (),
    Version.V2: (),
    Version.V3: (),
    Version.V4: ("U", "V"),
    Version.V5: ("Ul", "Ur", "Vl", "Vr"),
}


@dataclass
class ApgLayer:
    version: Version
    n: int
    m: int
    k: int = 0
    p: int = 0
    activation: str = "relu"
    shared: dict[str, np.ndarray] = field(default_factory=dict)
    generators: list[GeneratorNet] = field(default_factory=list)

    def __post_init__(self):
        self.version = Version.parse(self.version)
        if self.activation not in _ACT:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.validate()

    @property
    def generator(self) -> GeneratorNet | None:
        return self.generators[0] if self.generators else None

    @property
    def gen_out_dim(self) -> int:
        return gen_out_dim(self.version, self.n, self.m, self.k)

    def validate(self) -> None:
        v, n, m, k, p = self.version, self.n, self.m, self.k, self.p
        if n < 1 or m < 1:
            raise ValueError(f"layer dims must be positive, got n={n}, m={m}")
        if v in (Version.V2, Version.V3, Version.V4, Version.V5):
            if not 1 <= k <= min(n, m):
                raise ValueError(f"rank k={k} must satisfy 1 <= k <= min(n, m) = {min(n, m)}")
        if v is Version.V5 and p <= k:
            raise ValueError(f"v5 needs p > k (got p={p}, k={k})")
        expected = set(_SHARED_FIELDS[v])
        if set(self.shared) != expected:
            raise ValueError(f"{v.value} layer needs shared fields {sorted(expected)}, got {sorted(self.shared)}")
        shapes = {
            "W": (n, m), "U": (n, k), "V": (k, m),
            "Ul": (n, p), "Ur": (p, k), "Vl": (k, p), "Vr": (p, m),
        }
        for name, arr in self.shared.items():
            if arr.shape != shapes[name]:
                raise ShapeError(f"{v.value}.{name}", arr.shape, shapes[name])
        if v is Version.BASE:
            if self.generators:
                raise ValueError("base layer must not carry a generator")
        else:
            if not self.generators:
                raise ValueError(f"{v.value} layer needs a generator")
            for g in self.generators:
                if g.out_dim != self.gen_out_dim:
                    raise ShapeError("generator out_dim", (g.out_dim,), (self.gen_out_dim,))

    def params(self) -> dict[str, np.ndarray]:
        """Learnable arrays by name; the arrays are the live storage."""
        out = dict(self.shared)
        for j, g in enumerate(self.generators):
            for name, arr in g.params().items():
                out[f"gen{j}.{name}"] = arr
        return out

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.params().values())


def _default_gen_bias(version: Version, n: int, m: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if version is Version.V1:
        return glorot_uniform(rng, n, m).ravel()
    if version in (Version.V2, Version.V3):
        return np.concatenate(
            [glorot_uniform(rng, n, k).ravel(), np.eye(k).ravel(), glorot_uniform(rng, k, m).ravel()]
        )
    return np.eye(k).ravel()


def make_layer(
    version: "Version | str",
    n: int,
    m: int,
    d: int = 0,
    k: int = 0,
    p: int = 0,
    activation: str = "relu",
    rng: np.random.Generator | None = None,
    n_generators: int = 1,
    gen_hidden: tuple[int, ...] = (),
    out_of_core: str | Path | None = None,
) -> ApgLayer:
    """Build a randomly initialised layer.

    ``d`` is the generator input (condition) dimension; ``n_generators`` > 1
    is used by output aggregation, one generator per condition source.
    """
    version = Version.parse(version)
    rng = rng if rng is not None else np.random.default_rng(0)
    shared: dict[str, np.ndarray] = {}
    if version is Version.BASE:
        shared["W"] = glorot_uniform(rng, n, m)
    elif version is Version.V4:
        shared["U"] = glorot_uniform(rng, n, k)
        shared["V"] = glorot_uniform(rng, k, m)
    elif version is Version.V5:
        shared["Ul"] = glorot_uniform(rng, n, p)
        shared["Ur"] = glorot_uniform(rng, p, k)
        shared["Vl"] = glorot_uniform(rng, k, p)
        shared["Vr"] = glorot_uniform(rng, p, m)
    generators = []
    if version.generated:
        if d < 1:
            raise ValueError(f"{version.value} layer needs condition dim d >= 1")
        out_dim = gen_out_dim(version, n, m, k)
        for j in range(n_generators):
            bias = _default_gen_bias(version, n, m, k, rng)
            ooc = None if out_of_core is None else Path(out_of_core)
            generators.append(
                GeneratorNet.init(rng, d, out_dim, bias=bias, hidden=gen_hidden, out_of_core=ooc, tag=f"gen{j}")
            )
    return ApgLayer(version, n, m, k=k, p=p, activation=activation, shared=shared, generators=generators)


# -- generation ---------------------------------------------------------------

def _split_lowrank(g: np.ndarray, n: int, m: int, k: int):
    b = g.shape[0]
    u = g[:, : n * k].reshape(b, n, k)
    s = g[:, n * k : n * k + k * k].reshape(b, k, k)
    v = g[:, n * k + k * k :].reshape(b, k, m)
    return u, s, v


def _check_gen(gen: GeneratorNet, z: np.ndarray, out_dim: int) -> None:
    if gen.out_dim != out_dim:
        raise ShapeError("generator out_dim", (gen.out_dim,), (out_dim,))
    if z.shape[-1] != gen.in_dim:
        raise ShapeError("condition", z.shape, (gen.in_dim,))


def generate_full_weight(gen: GeneratorNet, z, n: int, m: int) -> np.ndarray:
    z = linalg.as_vector(z)
    _check_gen(gen, z, n * m)
    return linalg.reshape(gen(z), n, m)


def generate_lowrank(gen: GeneratorNet, z, n: int, m: int, k: int):
    """Split the generator output in the order ``[U_i | S_i | V_i]``."""
    z = linalg.as_vector(z)
    _check_gen(gen, z, n * k + k * k + k * m)
    u, s, v = _split_lowrank(gen(z)[None, :], n, m, k)
    return u[0].copy(), s[0].copy(), v[0].copy()


def generate_specific(gen: GeneratorNet, z, k: int) -> np.ndarray:
    z = linalg.as_vector(z)
    _check_gen(gen, z, k * k)
    return linalg.reshape(gen(z), k, k)


# -- forward / backward -------------------------------------------------------------

@dataclass
class ForwardCache:
    layer_id: int
    version: Version
    x: np.ndarray
    g: np.ndarray | None
    pre: np.ndarray
    out: np.ndarray
    inter: dict[str, np.ndarray]
    gen_acts: list[list[np.ndarray]] | None = None
    single: bool = False


def apply_generated(layer: ApgLayer, g: np.ndarray | None, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Main-path pass given already-generated parameters ``g`` of shape ``(B, out_dim)``."""
    v, n, m, k = layer.version, layer.n, layer.m, layer.k
    if x.ndim != 2 or x.shape[1] != m:
        raise ShapeError(f"{v.value} forward input", x.shape, (m,))
    if v.generated:
        if g is None or g.shape != (x.shape[0], layer.gen_out_dim):
            raise ShapeError(f"{v.value} generated params", None if g is None else g.shape,
                             (x.shape[0], layer.gen_out_dim))
    inter: dict[str, np.ndarray] = {}
    sh = layer.shared
    if v is Version.BASE:
        pre = linalg.linear(x, sh["W"])
    elif v is Version.V1:
        w = g.reshape(-1, n, m)
        inter["W"] = w
        pre = linalg.bmatvec(w, x)
    elif v is Version.V2:
        u, s, vv = _split_lowrank(g, n, m, k)
        us = linalg.bmm(u, s)
        w = linalg.bmm(us, vv)
        inter.update(U=u, S=s, V=vv, US=us, W=w)
        pre = linalg.bmatvec(w, x)
    elif v is Version.V3:
        u, s, vv = _split_lowrank(g, n, m, k)
        t1 = linalg.bmatvec(vv, x)
        t2 = linalg.bmatvec(s, t1)
        inter.update(U=u, S=s, V=vv, t1=t1, t2=t2)
        pre = linalg.bmatvec(u, t2)
    elif v is Version.V4:
        s = g.reshape(-1, k, k)
        t1 = linalg.linear(x, sh["V"])
        t2 = linalg.bmatvec(s, t1)
        inter.update(S=s, t1=t1, t2=t2)
        pre = linalg.linear(t2, sh["U"])
    else:
        s = g.reshape(-1, k, k)
        a = linalg.linear(x, sh["Vr"])
        t1 = linalg.linear(a, sh["Vl"])
        t2 = linalg.bmatvec(s, t1)
        c = linalg.linear(t2, sh["Ur"])
        inter.update(S=s, a=a, t1=t1, t2=t2, c=c)
        pre = linalg.linear(c, sh["Ul"])
    out = _ACT[layer.activation](pre)
    cache = ForwardCache(id(layer), v, x, g, pre, out, inter)
    return out, cache


def backward_generated(layer: ApgLayer, cache: ForwardCache, dy: np.ndarray):
    """Backward through the main path only.

    Returns ``(shared_grads, dg, dx)`` where ``dg`` is the gradient with
    respect to the generated parameter vector (``None`` for base).
    """
    if cache.layer_id != id(layer) or cache.version is not layer.version:
        raise StaleCacheError("cache was produced by a different layer")
    if dy.shape != cache.out.shape:
        raise ShapeError("backward dy", dy.shape, cache.out.shape)
    v, n, m, k = layer.version, layer.n, layer.m, layer.k
    x, it, sh = cache.x, cache.inter, layer.shared
    dpre = _act_grad(layer.activation, cache.pre, cache.out, dy)
    grads: dict[str, np.ndarray] = {}
    dg = None
    if v is Version.BASE:
        grads["W"] = dpre.T @ x
        dx = dpre @ sh["W"]
    elif v is Version.V1:
        dw = dpre[:, :, None] * x[:, None, :]
        dx = np.matmul(dpre[:, None, :], it["W"])[:, 0, :]
        dg = dw.reshape(dw.shape[0], -1)
    elif v is Version.V2:
        dw = dpre[:, :, None] * x[:, None, :]
        dx = np.matmul(dpre[:, None, :], it["W"])[:, 0, :]
        dus = np.matmul(dw, it["V"].transpose(0, 2, 1))
        dv = np.matmul(it["US"].transpose(0, 2, 1), dw)
        du = np.matmul(dus, it["S"].transpose(0, 2, 1))
        ds = np.matmul(it["U"].transpose(0, 2, 1), dus)
        dg = np.concatenate([du.reshape(len(x), -1), ds.reshape(len(x), -1), dv.reshape(len(x), -1)], axis=1)
    elif v is Version.V3:
        du = dpre[:, :, None] * it["t2"][:, None, :]
        dt2 = np.matmul(dpre[:, None, :], it["U"])[:, 0, :]
        ds = dt2[:, :, None] * it["t1"][:, None, :]
        dt1 = np.matmul(dt2[:, None, :], it["S"])[:, 0, :]
        dv = dt1[:, :, None] * x[:, None, :]
        dx = np.matmul(dt1[:, None, :], it["V"])[:, 0, :]
        dg = np.concatenate([du.reshape(len(x), -1), ds.reshape(len(x), -1), dv.reshape(len(x), -1)], axis=1)
    elif v is Version.V4:
        grads["U"] = dpre.T @ it["t2"]
        dt2 = dpre @ sh["U"]
        ds = dt2[:, :, None] * it["t1"][:, None, :]
        dt1 = np.matmul(dt2[:, None, :], it["S"])[:, 0, :]
        grads["V"] = dt1.T @ x
        dx = dt1 @ sh["V"]
        dg = ds.reshape(len(x), -1)
    else:
        grads["Ul"] = dpre.T @ it["c"]
        dc = dpre @ sh["Ul"]
        grads["Ur"] = dc.T @ it["t2"]
        dt2 = dc @ sh["Ur"]
        ds = dt2[:, :, None] * it["t1"][:, None, :]
        dt1 = np.matmul(dt2[:, None, :], it["S"])[:, 0, :]
        grads["Vl"] = dt1.T @ it["a"]
        da = dt1 @ sh["Vl"]
        grads["Vr"] = da.T @ x
        dx = da @ sh["Vr"]
        dg = ds.reshape(len(x), -1)
    return grads, dg, dx


def _promote(a) -> tuple[np.ndarray, bool]:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        return a[None, :], True
    return a, False


def forward(layer: ApgLayer, z, x) -> tuple[np.ndarray, ForwardCache]:
    """Full layer pass: generate from ``z`` (ignored for base), then apply to ``x``."""
    x, single = _promote(x)
    g = None
    gen_acts = None
    if layer.version.generated:
        z, _ = _promote(z)
        if z.shape[0] != x.shape[0]:
            raise ShapeError("forward batch", z.shape, x.shape)
        g, acts = layer.generator.forward(z)
        gen_acts = [acts]
    y, cache = apply_generated(layer, g, x)
    cache.gen_acts = gen_acts
    cache.single = single
    return (y[0] if single else y), cache


def backward(layer: ApgLayer, cache: ForwardCache, dy):
    """Exact gradients for every learnable array plus ``dx`` and ``dz``.

    Returns ``(grads, dx, dz)``; ``dz`` is ``None`` for base layers.
    """
    dy = np.asarray(dy, dtype=np.float64)
    if cache.single and dy.ndim == 1:
        dy = dy[None, :]
    grads, dg, dx = backward_generated(layer, cache, dy)
    dz = None
    if layer.version.generated:
        ggrads, dz = layer.generator.backward(cache.gen_acts[0], dg)
        for name, arr in ggrads.items():
            grads[f"gen0.{name}"] = arr
    if cache.single:
        dx = dx[0]
        dz = None if dz is None else dz[0]
    return grads, dx, dz


def effective_weight(layer: ApgLayer, z) -> np.ndarray:
    """The ``N x M`` matrix the layer applies to ``x`` for condition ``z``."""
    v, n, m, k = layer.version, layer.n, layer.m, layer.k
    if v is Version.BASE:
        return layer.shared["W"].copy()
    g = layer.generator(np.asarray(z, dtype=np.float64))
    if v is Version.V1:
        return g.reshape(n, m)
    if v in (Version.V2, Version.V3):
        u, s, vv = _split_lowrank(g[None, :], n, m, k)
        return u[0] @ s[0] @ vv[0]
    s = g.reshape(k, k)
    if v is Version.V4:
        return layer.shared["U"] @ s @ layer.shared["V"]
    sh = layer.shared
    return (sh["Ul"] @ sh["Ur"]) @ s @ (sh["Vl"] @ sh["Vr"])


def collapse_overparam(layer: ApgLayer) -> ApgLayer:
    """Fold ``Ul Ur`` and ``Vl Vr`` into the shared ``U``, ``V`` of a v4 layer."""
    if layer.version is not Version.V5:
        raise ValueError(f"collapse_overparam needs a v5 layer, got {layer.version.value}")
    sh = layer.shared
    shared = {"U": sh["Ul"] @ sh["Ur"], "V": sh["Vl"] @ sh["Vr"]}
    return ApgLayer(
        Version.V4, layer.n, layer.m, k=layer.k, p=0, activation=layer.activation,
        shared=shared, generators=copy.deepcopy(layer.generators),
    )
