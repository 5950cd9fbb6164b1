"""Meta-gradients of the post-adaptation validation loss.

Two independent routes:

* :func:`meta_gradient_unrolled` differentiates the whole K-step loop in
  reverse mode (the inner gradients are recorded with ``create_graph``).
* :func:`meta_gradient_explicit` materializes the per-step Jacobian factors
  (I - alpha * Hess h*(z_k) Hess l(phi_k)) and assembles the gradient from
  the product and sum formulas.

:func:`g_vector` gives grad_z of l_val(grad h*(z)) at z_K using a
forward-only adaptation loop, so its record size does not grow with K.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import mirror as mm
from .adaptation import (AdaptationConfig, MetaParams, _check_dims, unroll)
from .tasks import TaskInstance, stack_tasks, batch_losses, loss_grad, loss_hessian, loss_value

SMALL_DIM_CAP = 64


class DimensionCapError(ValueError):
    pass


@dataclass
class MetaGradient:
    grad_z: np.ndarray
    grad_h: np.ndarray
    val_loss: float


@dataclass
class ChainRuleIntermediates:
    g_K: np.ndarray
    step_jacobian_factors: list = field(default_factory=list)
    h_K: np.ndarray | None = None
    H_terms: list = field(default_factory=list)


@dataclass
class BatchMetaGradient:
    """Per-task z-gradients plus the batch-summed theta_h gradient."""

    grad_z_rows: np.ndarray
    grad_h_sum: np.ndarray
    val_losses: np.ndarray

    @property
    def mean_grad_z(self) -> np.ndarray:
        return self.grad_z_rows.mean(axis=0)

    @property
    def mean_grad_h(self) -> np.ndarray:
        return self.grad_h_sum / self.grad_z_rows.shape[0]


def _h_nodes(theta: MetaParams):
    if theta.theta_h is None:
        return [], None
    nodes = [ad.variable(a) for a in theta.theta_h.arrays()]
    return nodes, mm.MirrorMapParams.from_arrays(nodes, theta.mirror_spec)


def _flat(arrays) -> np.ndarray:
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.ravel(a) for a in arrays])


def batch_meta_gradient(tasks, theta: MetaParams, config: AdaptationConfig) -> BatchMetaGradient:
    """Unrolled meta-gradients for a batch of tasks in one record."""
    _check_dims(tasks, theta, config)
    trn, val = stack_tasks(tasks, "trn"), stack_tasks(tasks, "val")
    start = ad.variable(np.tile(np.asarray(theta.theta_z, dtype=np.float64), (len(tasks), 1)))
    nodes, hp = _h_nodes(theta)
    _, losses, _, _ = unroll(trn, val, start, theta, config, params=hp, create_graph=True)
    grads = ad.grad(ad.sum_(losses), [start] + nodes)
    return BatchMetaGradient(grad_z_rows=grads[0], grad_h_sum=_flat(grads[1:]),
                             val_losses=np.array(ad.value_of(losses)))


def meta_gradient_unrolled(task: TaskInstance, theta: MetaParams,
                           config: AdaptationConfig) -> MetaGradient:
    bm = batch_meta_gradient([task], theta, config)
    return MetaGradient(bm.grad_z_rows[0], bm.grad_h_sum, float(bm.val_losses[0]))


def meta_gradient_explicit(task: TaskInstance, theta: MetaParams, config: AdaptationConfig,
                           cap: int = SMALL_DIM_CAP):
    """Meta-gradient from the materialized chain-rule factors (mida mode)."""
    if config.mode != "mida":
        raise ValueError("the explicit formulas are stated for mida mode")
    _check_dims([task], theta, config)
    d, K, alpha = theta.dim, config.K, config.alpha
    if d > cap:
        raise DimensionCapError(f"dimension {d} exceeds the explicit-formula cap {cap}")
    spec, params = theta.mirror_spec, theta.theta_h

    # Forward trajectory, values only.
    z = np.asarray(theta.theta_z, dtype=np.float64)
    zs, phis = [], []
    for _ in range(K):
        phi = mm.inverse_map(z, params, spec)
        zs.append(z)
        phis.append(phi)
        z = z - alpha * loss_grad(task, "trn", phi)
    phi_K = mm.inverse_map(z, params, spec)

    eye = np.eye(d)
    factors, curv, mixed = [], [], []
    for zk, phik in zip(zs, phis):
        hess_h, mix = mm.mirror_second_derivatives(zk, params, spec)
        hess_l = loss_hessian(task, "trn", phik)
        factors.append(eye - alpha * hess_h @ hess_l)
        curv.append(hess_l)
        mixed.append(mix)

    hess_h_K, mixed_K = mm.mirror_second_derivatives(z, params, spec)
    val_grad = loss_grad(task, "val", phi_K)
    g_K = hess_h_K @ val_grad
    h_K = mixed_K.T @ val_grad

    grad_z = g_K.copy()
    for F in reversed(factors):
        grad_z = F @ grad_z

    # H_k = mixed_k^T Hess l(phi_k) prod_{l>k} F_l
    H_terms = [None] * K
    tail = eye
    for k in reversed(range(K)):
        H_terms[k] = mixed[k].T @ curv[k] @ tail
        tail = factors[k] @ tail
    grad_h = h_K.copy()
    for H in H_terms:
        grad_h = grad_h - alpha * (H @ g_K)

    mg = MetaGradient(grad_z, grad_h, loss_value(task, "val", phi_K))
    return mg, ChainRuleIntermediates(g_K, factors, h_K, H_terms)


def g_vectors(tasks, theta: MetaParams, config: AdaptationConfig) -> np.ndarray:
    """Rows g_t = grad_z l_val(grad h*(z)) at each task's z_K (forward-only loop)."""
    _check_dims(tasks, theta, config)
    trn, val = stack_tasks(tasks, "trn"), stack_tasks(tasks, "val")
    start = np.tile(np.asarray(theta.theta_z, dtype=np.float64), (len(tasks), 1))
    if config.mode == "mida":
        # Advance z in place; only the final map is differentiated.
        z = start
        for _ in range(config.K):
            phi = mm.inverse_map_rows(z, theta.theta_h, theta.mirror_spec)
            node = ad.variable(phi)
            (g,) = ad.grad(ad.sum_(batch_losses(trn, node)), [node])
            z = z - config.alpha * g
        zn = ad.variable(z)
        phi = mm.inverse_map_graph(zn, theta.theta_h, theta.mirror_spec, create_graph=True)
        (g,) = ad.grad(ad.sum_(batch_losses(val, phi)), [zn])
        return g
    phi, _, _, _ = unroll(trn, val, start, theta, config)
    node = ad.variable(phi)
    (g,) = ad.grad(ad.sum_(batch_losses(val, node)), [node])
    return g


def g_vector(task: TaskInstance, theta: MetaParams, config: AdaptationConfig) -> np.ndarray:
    return g_vectors([task], theta, config)[0]
