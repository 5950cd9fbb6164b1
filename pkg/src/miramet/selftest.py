"""Fixed-seed property suites runnable from the command line."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import mirror as mm
from .adaptation import AdaptationConfig, MetaParams, adapt
from .metagrad import meta_gradient_explicit, meta_gradient_unrolled, g_vectors
from .smoothness import TheoryInputs, derive_constants, estimate_smoothness
from .tasks import TaskFamily, sample_task, sample_universe, init_model_params

SUITES = ("gradients", "convexity", "equivalence", "estimator")


def _rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(1.0, np.linalg.norm(b)))


def _learned_theta(d: int, seed: int) -> MetaParams:
    spec = mm.MirrorMapSpec(d, 2, (3,), enforce_psd_quadratic=True)
    rng = np.random.default_rng(seed)
    return MetaParams(rng.standard_normal(d), mm.init_params(spec, seed), spec)


def joint_fd_gradient(task, theta: MetaParams, config: AdaptationConfig, step: float = 1e-5):
    d = theta.dim
    spec = theta.mirror_spec

    def loss(x):
        th = MetaParams(x[:d], mm.MirrorMapParams.unflatten(x[d:], spec), spec)
        return adapt(task, th, config).val_losses[-1]

    x = np.concatenate([theta.theta_z, theta.theta_h.flatten()])
    return ad.finite_difference_grad(loss, x, step)


def gradients_suite():
    fam = TaskFamily("quadratic", T=8, dim=4, seed=11)
    for seed in range(3):
        task = sample_task(fam, seed)
        theta = _learned_theta(4, seed)
        for K in (0, 1, 3):
            cfg = AdaptationConfig(K=K, alpha=0.05)
            un = meta_gradient_unrolled(task, theta, cfg)
            ex, _ = meta_gradient_explicit(task, theta, cfg)
            fd = joint_fd_gradient(task, theta, cfg)
            joint = np.concatenate([un.grad_z, un.grad_h])
            e_fd = _rel(joint, fd)
            e_ex = _rel(joint, np.concatenate([ex.grad_z, ex.grad_h]))
            yield (f"meta-gradient seed={seed} K={K} unrolled~fd ({e_fd:.1e})", e_fd < 1e-5)
            yield (f"meta-gradient seed={seed} K={K} unrolled~explicit ({e_ex:.1e})", e_ex < 1e-8)
    f = lambda x: ad.sum_(ad.softplus(x) * ad.tanh(x))
    x = np.array([0.3, -1.1, 2.0])
    err = _rel(ad.value_and_grad(f, x)[1], ad.finite_difference_grad(f, x))
    yield (f"engine gradient vs finite differences ({err:.1e})", err < 1e-6)


def convexity_suite():
    for seed in range(3):
        spec = mm.MirrorMapSpec(3, 2, (4,), activation=("softplus", "elu")[seed % 2],
                                enforce_psd_quadratic=True)
        params = mm.init_params(spec, seed)
        rep = mm.check_convexity(params, spec, 2000, 10.0, seed)
        yield (f"convexity spec#{seed} ({rep.total_violations} violations)", rep.total_violations == 0)
        ratio = mm.empirical_smoothness(params, spec, 2000, 10.0, seed)
        bound = mm.lipschitz_bounds(spec).G_h
        yield (f"smoothness spec#{seed} ratio {ratio:.3g} <= bound {bound:.3g}", ratio <= bound)


def equivalence_suite():
    fam = TaskFamily("sinusoid_regression", T=5, seed=3)
    d = fam.model.dim
    spec, params = mm.identity_map(d)
    rng = np.random.default_rng(0)
    P = np.diag(rng.uniform(0.5, 1.5, d))
    qspec, qparams = mm.quadratic_map(P)
    P_eff = mm.effective_P(qparams, qspec)
    for i in range(fam.T):
        task = sample_task(fam, i)
        theta_z = init_model_params(fam.model, rng)
        mida = adapt(task, MetaParams(theta_z, params, spec), AdaptationConfig(K=5, alpha=0.01))
        gd = adapt(task, MetaParams(theta_z), AdaptationConfig(K=5, alpha=0.01, mode="gd"))
        dev = max(np.abs(a - b).max() for a, b in zip(mida.primal_states, gd.primal_states))
        yield (f"identity map == gd, task {i} ({dev:.1e})", dev <= 1e-12)
        mq = adapt(task, MetaParams(theta_z, qparams, qspec), AdaptationConfig(K=5, alpha=0.01))
        pg = adapt(task, MetaParams(P_eff @ theta_z),
                   AdaptationConfig(K=5, alpha=0.01, mode="pgd", preconditioner=P_eff))
        dev = max(np.abs(a - b).max() for a, b in zip(mq.primal_states, pg.primal_states))
        yield (f"quadratic map == pgd, task {i} ({dev:.1e})", dev <= 1e-12)


def estimator_suite():
    fam = TaskFamily("quadratic", T=8, dim=3, seed=5)
    tasks = sample_universe(fam)
    theta = _learned_theta(3, 1)
    G_lh = 1.7
    for alpha, K in ((0.0, 3), (0.05, 0)):
        inputs = TheoryInputs(G_ell=4.0, H_ell=0.0, G_lh=G_lh, G_h=2.0, H_h=1.0, sigma=1.0,
                              T=8, alpha=alpha, K=K)
        const = derive_constants(inputs, C_beta=3.0)
        G1, G2 = estimate_smoothness(tasks[:3], theta, AdaptationConfig(K=K, alpha=alpha), const)
        yield (f"tightness alpha={alpha} K={K}: Ghat=({G1}, {G2})", G1 == G_lh and G2 == G_lh)
    cfg = AdaptationConfig(K=2, alpha=0.02)
    inputs = TheoryInputs(4.0, 0.0, G_lh, 2.0, 1.0, 1.0, 8, 0.02, 2)
    const = derive_constants(inputs, C_beta=3.0)
    full = estimate_smoothness(tasks, theta, cfg, const)
    norms = np.linalg.norm(g_vectors(tasks, theta, cfg), axis=1)
    pairs = [(i, j) for i in range(8) for j in range(i + 1, 8)]
    avg = np.mean([const.C_G1 * (norms[i] + norms[j]) / 2 for i, j in pairs]) \
        + const.gamma ** 4 * G_lh
    dev = abs(avg - full[0])
    yield (f"unbiasedness over all pairs ({dev:.1e})", dev <= 1e-12)


def run_suite(name: str):
    names = SUITES if name == "all" else (name,)
    for n in names:
        fn = globals()[f"{n}_suite"]
        for label, ok in fn():
            yield n, label, bool(ok)
