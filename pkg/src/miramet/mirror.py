"""Learnable convex conjugate h*(z; theta_h) and its inverse mirror map.

The network is an input-convex multilayer perceptron with skip connections
from the input:

    a_0 = z,  a_i = act(W_i^T a_{i-1} + M_i^T z + b_i),  h*(z) = a_I (+ z^T P z / 2)

Convexity and smoothness come from constraining the effective weights:
W_i = weight_bound * sigmoid(raw_W_i) is positive and bounded, M_i =
skip_bound * tanh(raw_M_i) is bounded, and the activation is convex and
non-decreasing.  The optional quadratic term uses P = quadratic_bound *
tanh(raw_P), or S S^T with S of that form when ``enforce_psd_quadratic``.

All graph functions take ``z`` as a (N, d) stack of independent rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad

ACTIVATION_CONSTANTS = {
    # (Lipschitz constant of act, Lipschitz constant of act')
    "softplus": (1.0, 0.25),
    "elu": (1.0, 1.0),
}


class MirrorSpecError(ValueError):
    pass


@dataclass(frozen=True)
class MirrorMapSpec:
    input_dim: int
    num_layers: int = 1
    hidden_widths: tuple = ()
    activation: str = "softplus"
    weight_bound: float = 1.0
    skip_bound: float = 1.0
    include_quadratic: bool = True
    quadratic_bound: float = 2.0
    enforce_psd_quadratic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        self.validate()

    def validate(self):
        if self.input_dim < 1:
            raise MirrorSpecError(f"input_dim must be positive, got {self.input_dim}")
        if self.num_layers < 0:
            raise MirrorSpecError(f"num_layers must be non-negative, got {self.num_layers}")
        if self.num_layers == 0 and not self.include_quadratic:
            raise MirrorSpecError("a map with no layers needs the quadratic term")
        expected = max(self.num_layers - 1, 0)
        if len(self.hidden_widths) != expected:
            raise MirrorSpecError(
                f"{self.num_layers} layers need {expected} hidden widths, "
                f"got {len(self.hidden_widths)}")
        if any(w < 1 for w in self.hidden_widths):
            raise MirrorSpecError(f"hidden widths must be positive: {self.hidden_widths}")
        if self.activation not in ACTIVATION_CONSTANTS:
            raise MirrorSpecError(
                f"activation must be one of {sorted(ACTIVATION_CONSTANTS)}, got {self.activation!r}")
        for name in ("weight_bound", "skip_bound", "quadratic_bound"):
            if not getattr(self, name) > 0:
                raise MirrorSpecError(f"{name} must be positive")

    @property
    def widths(self) -> list:
        """Output width of every layer (the last layer is scalar)."""
        return list(self.hidden_widths) + [1] if self.num_layers else []

    def layer_shapes(self) -> list:
        """(raw_W shape, raw_M shape, bias shape) per layer."""
        d = self.input_dim
        shapes, fan_in = [], d
        for n in self.widths:
            shapes.append(((fan_in, n), (d, n), (n,)))
            fan_in = n
        return shapes

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden_widths"] = list(self.hidden_widths)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MirrorMapSpec":
        return cls(**data)


@dataclass
class MirrorMapParams:
    raw_W: list
    raw_M: list
    bias: list
    raw_P: np.ndarray | None = None

    def arrays(self) -> list:
        """Parameter arrays in canonical (flattening) order."""
        out = []
        for w, m, b in zip(self.raw_W, self.raw_M, self.bias):
            out += [w, m, b]
        if self.raw_P is not None:
            out.append(self.raw_P)
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence, spec: MirrorMapSpec) -> "MirrorMapParams":
        arrays = list(arrays)
        n = spec.num_layers
        expected = 3 * n + (1 if spec.include_quadratic else 0)
        if len(arrays) != expected:
            raise MirrorSpecError(f"expected {expected} parameter arrays, got {len(arrays)}")
        raw_P = arrays[3 * n] if spec.include_quadratic else None
        return cls(arrays[0:3 * n:3], arrays[1:3 * n:3], arrays[2:3 * n:3], raw_P)

    def flatten(self) -> np.ndarray:
        arrs = self.arrays()
        if not arrs:
            return np.zeros(0)
        return np.concatenate([np.ravel(a) for a in arrs])

    @classmethod
    def unflatten(cls, flat, spec: MirrorMapSpec) -> "MirrorMapParams":
        flat = np.asarray(flat, dtype=np.float64)
        shapes = param_shapes(spec)
        total = sum(int(np.prod(s)) for s in shapes)
        if flat.shape != (total,):
            raise MirrorSpecError(f"flat parameter vector has shape {flat.shape}, expected ({total},)")
        arrays, i = [], 0
        for s in shapes:
            n = int(np.prod(s))
            arrays.append(flat[i:i + n].reshape(s).copy())
            i += n
        return cls.from_arrays(arrays, spec)

    def copy(self) -> "MirrorMapParams":
        return MirrorMapParams(
            [np.array(a) for a in self.raw_W], [np.array(a) for a in self.raw_M],
            [np.array(a) for a in self.bias],
            None if self.raw_P is None else np.array(self.raw_P))


def param_shapes(spec: MirrorMapSpec) -> list:
    shapes = []
    for ws, ms, bs in spec.layer_shapes():
        shapes += [ws, ms, bs]
    if spec.include_quadratic:
        shapes.append((spec.input_dim, spec.input_dim))
    return shapes


def num_params(spec: MirrorMapSpec) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(spec))


@dataclass
class EffectiveWeights:
    """Constrained weights actually used by the network.

    Passing one of these in place of ``MirrorMapParams`` skips the bounding
    maps; tests use it to build deliberately invalid networks.
    """

    W: list
    M: list
    bias: list
    P: object = None


def effective_weights(params, spec: MirrorMapSpec) -> EffectiveWeights:
    """Map raw parameters (arrays or graph nodes) to effective weights."""
    if isinstance(params, EffectiveWeights):
        return params
    W = [ad.mul(spec.weight_bound, ad.sigmoid(w)) for w in params.raw_W]
    M = [ad.mul(spec.skip_bound, ad.tanh(m)) for m in params.raw_M]
    P = None
    if spec.include_quadratic:
        S = ad.mul(spec.quadratic_bound, ad.tanh(params.raw_P))
        P = ad.matmul(S, ad.transpose(S)) if spec.enforce_psd_quadratic else S
    return EffectiveWeights(W, M, list(params.bias), P)


def check_params(params: MirrorMapParams, spec: MirrorMapSpec):
    if isinstance(params, EffectiveWeights):
        return
    got = [np.shape(ad.value_of(a)) for a in params.arrays()]
    want = [tuple(s) for s in param_shapes(spec)]
    if got != want:
        raise MirrorSpecError(f"parameter shapes {got} do not match spec shapes {want}")


def init_params(spec: MirrorMapSpec, rng_seed: int) -> MirrorMapParams:
    rng = np.random.default_rng(rng_seed)
    raw_W, raw_M, bias = [], [], []
    for ws, ms, bs in spec.layer_shapes():
        raw_W.append(rng.uniform(-0.5, 0.5, size=ws))
        raw_M.append(rng.uniform(-0.5, 0.5, size=ms))
        bias.append(np.zeros(bs))
    raw_P = None
    if spec.include_quadratic:
        raw_P = np.diag(np.full(spec.input_dim, _raw_for(1.0, spec.quadratic_bound)))
    return MirrorMapParams(raw_W, raw_M, bias, raw_P)


def _raw_for(target: float, bound: float) -> float:
    """Raw value r with bound*tanh(r) == target, exactly when float64 allows.

    Falls back to a clipped target when ``target`` lies outside the range.
    """
    ratio = min(target / bound, 0.999) if target >= 0 else max(target / bound, -0.999)
    r = float(np.arctanh(ratio))
    if abs(target / bound) >= 1.0:
        return r
    best = r
    for direction in (np.inf, -np.inf):
        cand = r
        for _ in range(8):
            if bound * np.tanh(cand) == target:
                return cand
            cand = float(np.nextafter(cand, direction))
    return best


# ------------------------------------------------------------------ graphs

def conjugate_rows(z, params, spec: MirrorMapSpec):
    """h*(z_n) for every row of a (N, d) input; returns shape (N,)."""
    eff = effective_weights(params, spec)
    act = ad.ACTIVATIONS[spec.activation]
    a = z
    out = None
    for W, M, b in zip(eff.W, eff.M, eff.bias):
        a = act(ad.add(ad.add(ad.matmul(a, W), ad.matmul(z, M)), b))
    if a is not z:
        out = ad.reshape(a, (np.shape(ad.value_of(z))[0],))
    if eff.P is not None:
        quad = ad.mul(0.5, ad.sum_(ad.mul(ad.matmul(z, eff.P), z), axis=1))
        out = quad if out is None else ad.add(out, quad)
    return out


def conjugate_sum(z, params, spec: MirrorMapSpec):
    return ad.sum_(conjugate_rows(z, params, spec))


def inverse_map_graph(z: ad.Var, params, spec: MirrorMapSpec, create_graph=True):
    """Rows of grad_z h*(z) as a graph node (or arrays without create_graph)."""
    h = conjugate_sum(z, params, spec)
    (g,) = ad.grad(h, [z], create_graph=create_graph)
    return g


def _as_rows(z, d: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != d:
        raise ad.ShapeError(f"z must have shape ({d},), got {z.shape}")
    return z[None, :]


# ----------------------------------------------------------- array interface

def conjugate_value(z, params, spec: MirrorMapSpec) -> float:
    check_params(params, spec)
    rows = _as_rows(z, spec.input_dim)
    return float(ad.value_of(conjugate_rows(rows, params, spec))[0])


def conjugate_values(Z, params, spec: MirrorMapSpec) -> np.ndarray:
    """Vectorized h* over the rows of a (N, d) array."""
    Z = np.asarray(Z, dtype=np.float64)
    return np.asarray(ad.value_of(conjugate_rows(Z, params, spec)))


def inverse_map(z, params, spec: MirrorMapSpec) -> np.ndarray:
    """Primal point phi = grad_z h*(z)."""
    check_params(params, spec)
    rows = _as_rows(z, spec.input_dim)
    return inverse_map_rows(rows, params, spec)[0]


def inverse_map_rows(Z, params, spec: MirrorMapSpec) -> np.ndarray:
    zn = ad.variable(np.asarray(Z, dtype=np.float64))
    return inverse_map_graph(zn, params, spec, create_graph=False)


def inverse_map_hvp(z, params, spec: MirrorMapSpec, v) -> np.ndarray:
    """Hessian of h* at z applied to v (forward-over-reverse)."""
    check_params(params, spec)
    rows = _as_rows(z, spec.input_dim)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (spec.input_dim,):
        raise ad.ShapeError(f"v must have shape ({spec.input_dim},), got {v.shape}")
    zn = ad.variable(rows, tangent=v[None, :])
    g = inverse_map_graph(zn, params, spec, create_graph=True)
    return ad._tangent_or_zero(g, rows)[0]


def effective_P(params, spec: MirrorMapSpec) -> np.ndarray | None:
    if not spec.include_quadratic:
        return None
    return np.asarray(ad.value_of(effective_weights(params, spec).P))


def mirror_second_derivatives(z, params: MirrorMapParams, spec: MirrorMapSpec):
    """Dense second derivatives of h* at z.

    Returns ``(hess_zz, mixed)`` where ``hess_zz`` is the d x d Hessian in z
    and ``mixed[j]`` is the gradient in flat theta_h of the j-th entry of
    grad_z h*, so ``mixed`` has shape (d, num_params).
    """
    d = spec.input_dim
    rows = _as_rows(z, d)
    zn = ad.variable(rows)
    nodes = [ad.variable(a) for a in params.arrays()]
    pv = MirrorMapParams.from_arrays(nodes, spec)
    g = inverse_map_graph(zn, pv, spec, create_graph=True)
    hess = np.zeros((d, d))
    mixed = np.zeros((d, num_params(spec)))
    for j in range(d):
        seed = np.zeros((1, d))
        seed[0, j] = 1.0
        grads = ad.grad(g, [zn] + nodes, seed=seed)
        hess[j] = grads[0][0]
        if nodes:
            mixed[j] = np.concatenate([np.ravel(x) for x in grads[1:]])
    return hess, mixed


# --------------------------------------------------------------- baselines

def identity_map(d: int):
    """Spec and params for h*(z) = |z|^2 / 2, whose inverse map is exactly z."""
    return quadratic_map(np.eye(d))


def quadratic_map(P, quadratic_bound: float = 2.0):
    """Spec and params for h*(z) = z^T P z / 2 with symmetric positive-definite P."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise MirrorSpecError(f"P must be square, got shape {P.shape}")
    if not np.allclose(P, P.T, rtol=0, atol=1e-12):
        raise MirrorSpecError("P must be symmetric")
    if np.linalg.eigvalsh(P).min() <= 0:
        raise MirrorSpecError("P must be positive definite")
    if np.max(np.abs(P)) >= quadratic_bound:
        raise MirrorSpecError(
            f"P has an entry of magnitude {np.max(np.abs(P)):.4g}, not representable "
            f"below quadratic_bound={quadratic_bound}")
    d = P.shape[0]
    spec = MirrorMapSpec(input_dim=d, num_layers=0, include_quadratic=True,
                         quadratic_bound=quadratic_bound)
    raw = np.vectorize(lambda x: _raw_for(float(x), quadratic_bound))(P)
    raw = 0.5 * (raw + raw.T)
    return spec, MirrorMapParams([], [], [], raw)


# ------------------------------------------------------------------ bounds

@dataclass(frozen=True)
class LipschitzBounds:
    L_h: float
    G_h: float


def lipschitz_bounds(spec: MirrorMapSpec) -> LipschitzBounds:
    """Parameter-free bounds on the gradient norm and gradient-Lipschitz
    constant of h*, in the l2 norm.

    Per-unit recursion: a unit of layer i has gradient norm at most L_i and
    Hessian norm at most G_i.  The input reaches the first layer through
    (W_1 + M_1), whose columns have l2 norm at most (W + M) sqrt(d).  Later
    layers sum n_{i-1} positive weights below W, so the previous layer's
    bounds enter scaled by W n_{i-1}.
    """
    L_act, G_act = ACTIVATION_CONSTANTS[spec.activation]
    d = spec.input_dim
    W, M = spec.weight_bound, spec.skip_bound
    root_d = float(np.sqrt(d))
    L, G = 0.0, 0.0
    fan_in = None
    for i, n in enumerate(spec.widths):
        if i == 0:
            slope = (W + M) * root_d
            L, G = L_act * slope, G_act * slope ** 2
        else:
            w_in = W * fan_in
            slope = w_in * L + M * root_d
            L, G = L_act * slope, w_in * L_act * G + G_act * slope ** 2
        fan_in = n
    G_total = G
    if spec.include_quadratic:
        # Frobenius bounds on the spectral norm of the symmetric part of P.
        p_bound = spec.quadratic_bound * d
        G_total += p_bound ** 2 if spec.enforce_psd_quadratic else p_bound
    return LipschitzBounds(L_h=float(L), G_h=float(G_total))


@dataclass
class ConvexityReport:
    n_samples: int
    violations: int
    monotonicity_violations: int
    worst_gap: float

    @property
    def total_violations(self) -> int:
        return self.violations + self.monotonicity_violations


def sample_ball(rng, n: int, d: int, radius: float) -> np.ndarray:
    direction = rng.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / d)
    return direction * r


def check_convexity(params, spec: MirrorMapSpec, n_samples: int, radius: float,
                    rng_seed: int, tol: float = 1e-9) -> ConvexityReport:
    """Sampled certificate of convexity and gradient monotonicity."""
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    rng = np.random.default_rng(rng_seed)
    d = spec.input_dim
    z1 = sample_ball(rng, n_samples, d, radius)
    z2 = sample_ball(rng, n_samples, d, radius)
    t = rng.uniform(size=(n_samples, 1))
    mid = t * z1 + (1.0 - t) * z2
    h1 = conjugate_values(z1, params, spec)
    h2 = conjugate_values(z2, params, spec)
    hm = conjugate_values(mid, params, spec)
    gap = hm - (t[:, 0] * h1 + (1.0 - t[:, 0]) * h2)
    g1 = inverse_map_rows(z1, params, spec)
    g2 = inverse_map_rows(z2, params, spec)
    mono = np.sum((g1 - g2) * (z1 - z2), axis=1)
    worst = max(float(gap.max()), float((-mono).max()))
    return ConvexityReport(
        n_samples=n_samples,
        violations=int(np.sum(gap > tol)),
        monotonicity_violations=int(np.sum(mono < -tol)),
        worst_gap=worst,
    )


def empirical_smoothness(params, spec: MirrorMapSpec, n_pairs: int, radius: float,
                         rng_seed: int) -> float:
    """Largest observed |grad h*(z1) - grad h*(z2)| / |z1 - z2| over sampled pairs."""
    rng = np.random.default_rng(rng_seed)
    d = spec.input_dim
    z1 = sample_ball(rng, n_pairs, d, radius)
    # Mix near and far pairs so local curvature peaks are probed too.
    scale = np.exp(rng.uniform(np.log(1e-3), np.log(radius), size=(n_pairs, 1)))
    step = rng.standard_normal((n_pairs, d))
    step *= scale / np.linalg.norm(step, axis=1, keepdims=True)
    z2 = z1 + step
    g1 = inverse_map_rows(z1, params, spec)
    g2 = inverse_map_rows(z2, params, spec)
    ratio = np.linalg.norm(g1 - g2, axis=1) / np.linalg.norm(z1 - z2, axis=1)
    return float(ratio.max())
