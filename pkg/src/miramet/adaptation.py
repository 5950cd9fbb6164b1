"""K-step task adaptation: mirror descent in dual space and its baselines.

Modes
-----
``mida``               z <- z - alpha * grad l(grad h*(z)), phi = grad h*(z), z^0 = theta_z
``gd``                 phi <- phi - alpha * grad l(phi), phi^0 = theta_z
``pgd``                phi <- phi - alpha * P grad l(phi)
``gd_explicit_prior``  phi <- phi - alpha * (grad l(phi) + lam * (phi - theta_z))

In the non-mirror modes theta_z is read as the primal initialization.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import mirror as mm
from .tasks import TaskInstance, stack_tasks, batch_losses

MODES = ("mida", "gd", "pgd", "gd_explicit_prior")


class AdaptationError(ValueError):
    pass


@dataclass
class MetaParams:
    """Meta-parameters: dual initialization plus mirror-map parameters."""

    theta_z: np.ndarray
    theta_h: mm.MirrorMapParams | None = None
    mirror_spec: mm.MirrorMapSpec | None = None

    def copy(self) -> "MetaParams":
        return MetaParams(np.array(self.theta_z),
                          None if self.theta_h is None else self.theta_h.copy(),
                          self.mirror_spec)

    @property
    def dim(self) -> int:
        return int(np.shape(self.theta_z)[0])


@dataclass(frozen=True)
class AdaptationConfig:
    K: int = 5
    alpha: float = 1e-2
    mode: str = "mida"
    prior_strength: float = 0.0
    preconditioner: tuple | None = None

    def __post_init__(self):
        if self.K < 0:
            raise AdaptationError(f"K must be non-negative, got {self.K}")
        # alpha = 0 is allowed: it is the no-movement limit used by the estimator checks.
        if not self.alpha >= 0:
            raise AdaptationError(f"alpha must be non-negative, got {self.alpha}")
        if self.mode not in MODES:
            raise AdaptationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.prior_strength < 0:
            raise AdaptationError("prior_strength must be non-negative")
        if self.preconditioner is not None and not isinstance(self.preconditioner, tuple):
            P = np.asarray(self.preconditioner, dtype=np.float64)
            object.__setattr__(self, "preconditioner", tuple(map(tuple, P)))

    def preconditioner_array(self) -> np.ndarray | None:
        if self.preconditioner is None:
            return None
        return np.array(self.preconditioner, dtype=np.float64)


@dataclass
class AdaptationTrace:
    dual_states: list = field(default_factory=list)
    primal_states: list = field(default_factory=list)
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)

    def __len__(self):
        return len(self.primal_states)


def _check_dims(tasks, theta: MetaParams, config: AdaptationConfig):
    d = theta.dim
    for t in tasks:
        if t.dim != d:
            raise AdaptationError(f"task model dimension {t.dim} != meta-parameter dimension {d}")
    if config.mode == "mida":
        if theta.theta_h is None or theta.mirror_spec is None:
            raise AdaptationError("mida mode needs mirror-map parameters and spec")
        if theta.mirror_spec.input_dim != d:
            raise AdaptationError(
                f"mirror map input_dim {theta.mirror_spec.input_dim} != meta-parameter dimension {d}")


def resolve_preconditioner(theta: MetaParams, config: AdaptationConfig, params=None):
    """P for pgd mode: the configured matrix, else the mirror map's effective P.

    ``params`` may hold graph nodes, in which case the result is a graph node.
    """
    P = config.preconditioner_array()
    if P is not None:
        return P
    spec = theta.mirror_spec
    if spec is None or not spec.include_quadratic:
        raise AdaptationError("pgd mode needs a preconditioner or a mirror map with a quadratic term")
    return mm.effective_weights(theta.theta_h if params is None else params, spec).P


def unroll(trn, val, start, theta: MetaParams, config: AdaptationConfig, params=None,
           create_graph: bool = False, record: bool = False):
    """Run K adaptation steps on a stack of tasks.

    ``trn`` and ``val`` are :class:`TaskBatch` objects, ``start`` is a (B, d)
    array or node holding theta_z per row, and ``params`` optionally replaces
    ``theta.theta_h`` (graph nodes for differentiation).  Returns the final
    primal stack, per-task validation losses and, when ``record``, the lists
    of dual and primal stacks for every step.
    """
    mode = config.mode
    alpha = config.alpha
    spec = theta.mirror_spec
    hp = theta.theta_h if params is None else params
    P = resolve_preconditioner(theta, config, hp) if mode == "pgd" else None
    duals, primals = [], []

    def primal_of(z):
        if mode != "mida":
            return z
        if not isinstance(z, ad.Var):
            z = ad.variable(z)
        return mm.inverse_map_graph(z, hp, spec, create_graph=create_graph)

    z = start
    for _ in range(config.K):
        phi = primal_of(z)
        if record:
            duals.append(ad.value_of(z))
            primals.append(ad.value_of(phi))
        phi_node = phi if isinstance(phi, ad.Var) else ad.variable(phi)
        (g,) = ad.grad(ad.sum_(batch_losses(trn, phi_node)), [phi_node], create_graph=create_graph)
        if mode == "pgd":
            g = ad.matmul(g, ad.transpose(P))
        elif mode == "gd_explicit_prior":
            g = ad.add(g, ad.mul(config.prior_strength, ad.sub(phi, start)))
        z = ad.sub(z, ad.mul(alpha, g))
        if not create_graph:
            z = np.asarray(ad.value_of(z))
    phi = primal_of(z)
    if record:
        duals.append(ad.value_of(z))
        primals.append(ad.value_of(phi))
    return phi, batch_losses(val, phi), duals, primals


def adapt(task: TaskInstance, theta: MetaParams, config: AdaptationConfig) -> AdaptationTrace:
    """Full K-step trace for one task."""
    _check_dims([task], theta, config)
    trn, val = stack_tasks([task], "trn"), stack_tasks([task], "val")
    start = np.asarray(theta.theta_z, dtype=np.float64)[None, :]
    _, _, duals, primals = unroll(trn, val, start, theta, config, record=True)
    trace = AdaptationTrace()
    for z, phi in zip(duals, primals):
        trace.dual_states.append(np.array(z[0]))
        trace.primal_states.append(np.array(phi[0]))
    stacked = np.stack([p[0] for p in primals])
    trace.train_losses = _losses_along(task, "trn", stacked)
    trace.val_losses = _losses_along(task, "val", stacked)
    for arr in (trace.train_losses, trace.val_losses):
        if not np.all(np.isfinite(arr)):
            raise ad.NonFiniteError("non-finite loss during adaptation")
    return trace


def _losses_along(task, which, phis):
    batch = stack_tasks([task] * len(phis), which)
    return [float(v) for v in np.asarray(batch_losses(batch, phis))]


def adapt_batch(tasks, theta: MetaParams, config: AdaptationConfig) -> list:
    """Primal stacks (B, d) for every step k = 0..K over a batch of tasks."""
    _check_dims(tasks, theta, config)
    trn, val = stack_tasks(tasks, "trn"), stack_tasks(tasks, "val")
    start = np.tile(np.asarray(theta.theta_z, dtype=np.float64), (len(tasks), 1))
    _, _, _, primals = unroll(trn, val, start, theta, config, record=True)
    return primals


def greedy_step_oracle(task: TaskInstance, phi_k, alpha: float, P) -> np.ndarray:
    """Minimizer of the linearized loss plus (1/2 alpha)(phi - phi_k)^T P^{-1} (phi - phi_k).

    Solved from the stationarity condition P^{-1}(phi - phi_k) = -alpha grad
    by a linear solve against P^{-1}, independently of the pgd update.
    """
    from .tasks import loss_grad
    P = np.asarray(P, dtype=np.float64)
    phi_k = np.asarray(phi_k, dtype=np.float64)
    if P.shape != (phi_k.shape[0],) * 2:
        raise ad.ShapeError(f"P must be {(phi_k.shape[0],) * 2}, got {P.shape}")
    if not np.allclose(P, P.T, rtol=0, atol=1e-12) or np.linalg.eigvalsh(P).min() <= 0:
        raise np.linalg.LinAlgError("P must be symmetric positive definite")
    P_inv = np.linalg.inv(P)
    g = loss_grad(task, "trn", phi_k)
    return phi_k + np.linalg.solve(P_inv, -alpha * g)
