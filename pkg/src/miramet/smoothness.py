"""Convergence-theory constants and the adaptive meta learning rate.

Notation follows the code fields: gamma = 1 + alpha*G_h*G_ell is the per-step
expansion factor of the adaptation Jacobian, C_G1/C_G2 scale the meta-loss
smoothness with the g-vector norm, and eta1..eta5 are the coefficients of the
per-round descent inequality whose telescoped form gives the budget.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from .adaptation import AdaptationConfig, MetaParams
from .metagrad import g_vectors
from .tasks import stack_tasks, batch_losses


class ConstantsError(ValueError):
    pass


@dataclass(frozen=True)
class TheoryInputs:
    G_ell: float
    H_ell: float
    G_lh: float
    G_h: float
    H_h: float
    sigma: float
    T: int
    alpha: float
    K: int

    def __post_init__(self):
        for name in ("G_ell", "H_ell", "G_lh", "G_h", "H_h"):
            if not getattr(self, name) >= 0:
                raise ConstantsError(f"{name} must be non-negative")
        for name in ("G_ell", "G_lh", "G_h"):
            if not getattr(self, name) > 0:
                raise ConstantsError(f"{name} must be positive")
        if self.sigma < 0:
            raise ConstantsError("sigma must be non-negative")
        if self.T < 1:
            raise ConstantsError("T must be positive")
        if self.alpha < 0:
            raise ConstantsError("alpha must be non-negative")
        if self.K < 0:
            raise ConstantsError("K must be non-negative")


@dataclass
class DerivedConstants:
    inputs: TheoryInputs
    C_beta: float
    gamma: float
    C_G1: float
    C_G2: float
    zeta: float
    C_L1: float
    C_L2: float
    C_B1: float
    C_B2: float
    alpha_max: float
    B_min: int
    Bhat_min: int
    batch_size: int | None = None
    eta1: float | None = None
    eta2: float | None = None
    eta3: float | None = None
    eta4: float | None = None
    eta5: float | None = None
    # Finite forms used by the budget; they stay finite when C_G1 or C_G2 is 0.
    inv_eta1: float | None = None
    eta2_over_eta1: float | None = None
    inv_eta3: float | None = None
    eta4_over_eta3: float | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["inputs"] = asdict(self.inputs)
        return {k: _json_number(v) for k, v in out.items()}


def _json_number(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else "-inf"
    return v


def alpha_max(G_h: float, G_ell: float, K: int) -> float:
    """Largest admissible adaptation step: gamma^K < 2 iff alpha < alpha_max."""
    if K == 0:
        return math.inf
    return (2.0 ** (1.0 / K) - 1.0) / (G_h * G_ell)


def suggested_alpha(G_h: float, G_ell: float, T: int, K: int) -> float:
    """Step size of the rate-optimal setting, alpha = ((1 + T^-1/2)^(1/K) - 1) / (G_h G_ell)."""
    if K == 0:
        raise ConstantsError("the rate-optimal step size needs K >= 1")
    return ((1.0 + T ** -0.5) ** (1.0 / K) - 1.0) / (G_h * G_ell)


def _ceil(v: float) -> int:
    """Ceiling that ignores round-off just above an integer (2/(4/3 - 1) is 6, not 7)."""
    n = round(v)
    if abs(v - n) <= 1e-9 * max(1.0, abs(v)):
        return int(n)
    return math.ceil(v)


def suggested_C_beta(T: int) -> float:
    return math.sqrt(T)


def derive_constants(inputs: TheoryInputs, C_beta: float,
                     batch_size: int | None = None) -> DerivedConstants:
    x = inputs
    rT = math.sqrt(x.T)
    K = x.K
    if not C_beta > (rT + 1.0) / 2.0:
        raise ConstantsError(
            f"C_beta={C_beta} violates C_beta > (sqrt(T)+1)/2 = {(rT + 1) / 2:.6g}")
    a_max = alpha_max(x.G_h, x.G_ell, K)
    if not x.alpha < a_max:
        raise ConstantsError(
            f"alpha={x.alpha} violates the meta-gradient second-moment condition "
            f"alpha < alpha_max = (2^(1/K) - 1)/(G_h*G_ell) = {a_max:.6g}, i.e. gamma^K < 2")

    GhGl = x.G_h * x.G_ell
    gamma = 1.0 + x.alpha * GhGl
    gK = gamma ** K
    c = x.G_h * x.H_ell / x.G_ell + x.H_h / x.G_h
    C_G1 = gK * (gK - 1.0) * c
    C_G2 = gamma ** (K - 1) * ((gamma - 1.0) * c * K + (gK - 1.0 - x.alpha * K * GhGl) * c)
    zeta = 2.0 * x.alpha + (gK - gamma) * (rT + 1.0) / GhGl
    C_L1 = gK / (2.0 - gK)
    C_L2 = x.G_lh * zeta + x.G_h * rT
    C_B1 = 2.0 * C_beta / (rT + 1.0)
    ratio = max(C_G1 / C_G2, 1.0) if C_G2 > 0 else 1.0
    C_B2 = 2.0 * C_L1 ** 2 - 1.0 + 3.0 * (C_L1 - 1.0) ** 2 * ratio
    B_min = _ceil(max(C_B2, 2.0) / (C_B1 - 1.0))
    spread = (x.G_lh * zeta + x.G_h * (1.0 + rT)) ** 2 * x.sigma ** 2
    denom = gamma ** (4 * K) * x.G_lh ** 2 * rT
    Bhat_min = _ceil(max(2.0 * C ** 2 * spread / denom for C in (C_G1, C_G2)))

    out = DerivedConstants(inputs=x, C_beta=C_beta, gamma=gamma, C_G1=C_G1, C_G2=C_G2,
                           zeta=zeta, C_L1=C_L1, C_L2=C_L2, C_B1=C_B1, C_B2=C_B2,
                           alpha_max=a_max, B_min=B_min, Bhat_min=Bhat_min)
    if batch_size is not None:
        _fill_etas(out, batch_size)
    return out


def _fill_etas(c: DerivedConstants, B: int):
    if B < 1:
        raise ConstantsError("batch size must be positive")
    x = c.inputs
    gK = c.gamma ** x.K
    slack = 2.0 - gK
    g2K = c.gamma ** (2 * x.K)
    f1 = 1.0 - (c.C_B2 + B) / (c.C_B1 * B)
    f3 = 1.0 - (B + 2.0) / (c.C_B1 * B)
    if not (f1 > 0 and f3 > 0):
        raise ConstantsError(
            f"batch size B={B} violates B >= max(C_B2, 2)/(C_B1 - 1) = {c.B_min}")
    c.batch_size = B
    c.inv_eta1 = c.C_beta * c.C_G1 / (slack * f1)
    c.eta2_over_eta1 = (c.C_L2 * c.C_G1 + g2K * slack * x.G_lh) * c.C_beta / (slack * f1)
    c.inv_eta3 = c.C_beta * c.C_G2 / (slack * f3)
    c.eta4_over_eta3 = (c.C_L2 * c.C_G2 + g2K * slack * x.G_lh) * c.C_beta / (slack * f3)
    c.eta1 = slack * f1 / (c.C_beta * c.C_G1) if c.C_G1 > 0 else math.inf
    c.eta2 = c.C_L2 + g2K * slack * x.G_lh / c.C_G1 if c.C_G1 > 0 else math.inf
    c.eta3 = slack * f3 / (c.C_beta * c.C_G2) if c.C_G2 > 0 else math.inf
    c.eta4 = c.C_L2 + g2K * slack * x.G_lh / c.C_G2 if c.C_G2 > 0 else math.inf
    c.eta5 = (5.0 * c.C_L1 ** 2 * c.C_L2 ** 2 * x.sigma ** 2
              / (g2K * x.G_lh * c.C_B1 * c.C_beta))


def convergence_budget(Delta: float, R: int, B: int, constants: DerivedConstants) -> tuple:
    """Upper bounds on E|grad_z L| and E|grad_h L| at a uniformly drawn round."""
    if R < 1 or B < 1:
        raise ConstantsError("R and B must be at least 1")
    if Delta < 0:
        raise ConstantsError("Delta must be non-negative")
    c = constants
    if c.batch_size != B:
        c = derive_constants(c.inputs, c.C_beta, batch_size=B)
    X = Delta / R + c.eta5 / B
    bound_z = 0.5 * c.inv_eta1 * X + math.sqrt(0.25 * c.inv_eta1 ** 2 * X ** 2 + c.eta2_over_eta1 * X)
    bound_h = math.sqrt((c.inv_eta3 * bound_z + c.eta4_over_eta3) * X)
    return bound_z, bound_h


# --------------------------------------------------------------- estimator

def estimate_smoothness(batch_tasks, theta: MetaParams, config: AdaptationConfig,
                        constants: DerivedConstants) -> tuple:
    """Batch estimates of the two meta-loss smoothness constants."""
    if not batch_tasks:
        raise ConstantsError("estimation batch is empty")
    norms = np.linalg.norm(g_vectors(list(batch_tasks), theta, config), axis=1)
    return smoothness_from_norms(norms, constants)


def smoothness_from_norms(norms, constants: DerivedConstants) -> tuple:
    c = constants
    floor = c.gamma ** (2 * c.inputs.K) * c.inputs.G_lh
    mean = float(np.mean(norms))
    return c.C_G1 * mean + floor, c.C_G2 * mean + floor


def meta_learning_rates(Ghat1: float, Ghat2: float, C_beta: float) -> tuple:
    if not (Ghat1 > 0 and Ghat2 > 0 and C_beta > 0):
        raise ConstantsError("smoothness estimates and C_beta must be positive")
    return 1.0 / (C_beta * Ghat1), 1.0 / (C_beta * Ghat2)


def estimate_sigma(tasks, probe_points) -> float:
    """Largest variance E_t |grad l_t^val(phi) - mean_t grad l_t^val(phi)|^2 over probes.

    The task universe is finite, so the expectation is an exact mean over
    ``tasks``.  The returned value bounds sigma^2.
    """
    probes = list(probe_points)
    if not probes:
        raise ConstantsError("probe set is empty")
    tasks = list(tasks)
    val = stack_tasks(tasks, "val")
    worst = 0.0
    for phi in probes:
        phi = np.asarray(phi, dtype=np.float64)
        node = ad.variable(np.tile(phi, (len(tasks), 1)))
        (g,) = ad.grad(ad.sum_(batch_losses(val, node)), [node])
        dev = g - g.mean(axis=0)
        worst = max(worst, float(np.mean(np.sum(dev * dev, axis=1))))
    return worst
