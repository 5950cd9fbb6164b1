"""Meta-training loop, evaluation and checkpoints.

Each round samples a batch of task indices without replacement, averages
the unrolled meta-gradients over it and takes one step on theta_z and
theta_h.  In adaptive mode a second, independently sampled batch feeds the
smoothness estimator that sets the two learning rates.

Randomness comes from one ``SeedSequence`` split into fixed streams (init,
batch, estimation, evaluation, report), so results never depend on thread
scheduling, and a checkpoint carries the stream states needed to resume.
"""
from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import mirror as mm
from .adaptation import AdaptationConfig, MetaParams, adapt_batch
from .metagrad import batch_meta_gradient
from .smoothness import (TheoryInputs, derive_constants, estimate_smoothness,
                         meta_learning_rates)
from .tasks import (TaskFamily, sample_universe, init_model_params, stack_tasks,
                    batch_metric, metric_direction, metric_name)

SCHEMA_VERSION = 1
STREAMS = ("init", "batch", "estimation", "evaluation", "report")


class TrainError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class NumericalAbort(FloatingPointError):
    def __init__(self, round_index: int, what: str):
        super().__init__(f"non-finite {what} at round {round_index}")
        self.round_index = round_index


@dataclass(frozen=True)
class TrainConfig:
    family: TaskFamily
    adaptation: AdaptationConfig
    mirror_spec: mm.MirrorMapSpec | None = None
    R: int = 100
    B: int = 4
    B_hat: int = 0
    lr_mode: str = "constant"
    beta1: float = 1e-3
    beta2: float = 1e-4
    C_beta: float | None = None
    theory: TheoryInputs | None = None
    optimizer: str = "sgd"
    seed: int = 0
    eval_every: int = 0
    eval_tasks: int = 200
    chunk_size: int = 0
    population_every: int = 0

    def __post_init__(self):
        if self.R < 1:
            raise TrainError(f"R must be at least 1, got {self.R}")
        if not 1 <= self.B <= self.family.T:
            raise TrainError(f"B must be in [1, T={self.family.T}], got {self.B}")
        if self.lr_mode not in ("constant", "adaptive"):
            raise TrainError(f"lr_mode must be 'constant' or 'adaptive', got {self.lr_mode!r}")
        if self.lr_mode == "adaptive":
            if not 1 <= self.B_hat <= self.family.T:
                raise TrainError("adaptive learning rates need 1 <= B_hat <= T")
            if self.C_beta is None or self.theory is None:
                raise TrainError("adaptive learning rates need C_beta and theory inputs")
        if self.optimizer not in ("sgd", "adam"):
            raise TrainError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.adaptation.mode == "mida" and self.mirror_spec is None:
            raise TrainError("mida mode needs a mirror_spec")
        d = self.family.model.dim
        if self.mirror_spec is not None and self.mirror_spec.input_dim != d:
            raise TrainError(
                f"mirror_spec input_dim {self.mirror_spec.input_dim} != task model dimension {d}")
        if self.eval_every < 0 or self.chunk_size < 0 or self.population_every < 0:
            raise TrainError("eval_every, chunk_size and population_every must be non-negative")

    def to_dict(self) -> dict:
        ad_cfg = asdict(self.adaptation)
        if ad_cfg["preconditioner"] is not None:
            ad_cfg["preconditioner"] = [list(r) for r in ad_cfg["preconditioner"]]
        return {
            "family": self.family.to_dict(),
            "adaptation": ad_cfg,
            "mirror_spec": None if self.mirror_spec is None else self.mirror_spec.to_dict(),
            "R": self.R, "B": self.B, "B_hat": self.B_hat, "lr_mode": self.lr_mode,
            "beta1": self.beta1, "beta2": self.beta2, "C_beta": self.C_beta,
            "theory": None if self.theory is None else asdict(self.theory),
            "optimizer": self.optimizer, "seed": self.seed, "eval_every": self.eval_every,
            "eval_tasks": self.eval_tasks, "chunk_size": self.chunk_size,
            "population_every": self.population_every,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["family"] = TaskFamily.from_dict(data["family"])
        ad_cfg = dict(data["adaptation"])
        if ad_cfg.get("preconditioner") is not None:
            ad_cfg["preconditioner"] = tuple(map(tuple, ad_cfg["preconditioner"]))
        data["adaptation"] = AdaptationConfig(**ad_cfg)
        if data.get("mirror_spec") is not None:
            data["mirror_spec"] = mm.MirrorMapSpec.from_dict(data["mirror_spec"])
        if data.get("theory") is not None:
            data["theory"] = TheoryInputs(**data["theory"])
        return cls(**data)


@dataclass
class RunMetrics:
    records: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)
    rho_round: int | None = None

    def comparable(self) -> tuple:
        """Everything except wall-clock timings, for determinism checks."""
        recs = [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]
        return recs, self.evaluations, self.rho_round

    def summary(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "rounds": len(self.records),
               "rho_round": self.rho_round}
        if self.records:
            out["final"] = {k: v for k, v in self.records[-1].items() if k != "wall_time"}
        if self.rho_round is not None and self.rho_round < len(self.records):
            rec = self.records[self.rho_round]
            out["rho_record"] = {"round": rec["round"], "grad_z_norm": rec["grad_z_norm"],
                                 "grad_h_norm": rec["grad_h_norm"]}
        if self.evaluations:
            out["last_evaluation"] = self.evaluations[-1]
        return out


@dataclass
class TrainState:
    """Everything beyond the parameters that a resumed run needs."""

    round_index: int
    rng_states: dict
    optimizer_state: dict
    metrics: RunMetrics


# ----------------------------------------------------------------- helpers

def _streams(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.Generator(np.random.PCG64(c)) for name, c in zip(STREAMS, children)}


def init_meta_params(config: TrainConfig, rng) -> MetaParams:
    theta_z = init_model_params(config.family.model, rng)
    theta_h = None
    if config.mirror_spec is not None:
        theta_h = mm.init_params(config.mirror_spec, int(rng.integers(2 ** 31)))
    return MetaParams(theta_z, theta_h, config.mirror_spec)


def thread_count() -> int:
    raw = os.environ.get("MIRAMET_THREADS", "")
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise TrainError(f"MIRAMET_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise TrainError(f"MIRAMET_THREADS must be a positive integer, got {raw!r}")
    return n


def _chunked_meta_gradient(tasks, theta, adaptation, chunk_size: int):
    """Meta-gradients over fixed chunks; chunk boundaries, not threads, fix the sums."""
    size = chunk_size or len(tasks)
    chunks = [tasks[i:i + size] for i in range(0, len(tasks), size)]
    if len(chunks) == 1:
        results = [batch_meta_gradient(chunks[0], theta, adaptation)]
    else:
        workers = min(thread_count(), len(chunks))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: batch_meta_gradient(c, theta, adaptation), chunks))
    rows = np.concatenate([r.grad_z_rows for r in results])
    grad_h = results[0].grad_h_sum
    for r in results[1:]:
        grad_h = grad_h + r.grad_h_sum
    losses = np.concatenate([r.val_losses for r in results])
    return rows.mean(axis=0), grad_h / len(tasks), losses


class _Optimizer:
    def __init__(self, kind: str, state: dict | None = None):
        self.kind = kind
        self.state = {name: {"t": st["t"], "m": np.array(st["m"], dtype=np.float64),
                             "v": np.array(st["v"], dtype=np.float64)}
                      for name, st in (state or {}).items()}

    def serializable(self) -> dict:
        return {name: {"t": st["t"], "m": st["m"].tolist(), "v": st["v"].tolist()}
                for name, st in self.state.items()}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        if self.kind == "sgd":
            return param - lr * grad
        b1, b2, eps = 0.9, 0.999, 1e-8
        st = self.state.setdefault(name, {"t": 0, "m": np.zeros_like(param),
                                          "v": np.zeros_like(param)})
        m = b1 * st["m"] + (1 - b1) * grad
        v = b2 * st["v"] + (1 - b2) * grad * grad
        t = st["t"] + 1
        self.state[name] = {"t": t, "m": m, "v": v}
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        return param - lr * m_hat / (np.sqrt(v_hat) + eps)


# -------------------------------------------------------------------- train

def train(config: TrainConfig, resume: tuple | None = None, stop_after: int | None = None,
          checkpoint_path=None, checkpoint_every: int = 0, on_round=None):
    """Run meta-training.

    ``resume`` is ``(theta, TrainState)`` from :func:`load_checkpoint`.
    ``stop_after`` ends the run early after that many total rounds (used to
    produce mid-run checkpoints).  Returns ``(theta, metrics, state)``.
    """
    tasks = sample_universe(config.family)
    streams = _streams(config.seed)
    if resume is None:
        theta = init_meta_params(config, streams["init"])
        metrics = RunMetrics()
        start = 0
        opt = _Optimizer(config.optimizer)
    else:
        theta, state = resume
        theta = theta.copy()
        for name, st in state.rng_states.items():
            streams[name].bit_generator.state = st
        metrics = state.metrics
        start = state.round_index
        opt = _Optimizer(config.optimizer, state.optimizer_state)

    constants = None
    if config.lr_mode == "adaptive":
        constants = derive_constants(config.theory, config.C_beta)

    end = config.R if stop_after is None else min(config.R, stop_after)
    spec = config.mirror_spec
    for r in range(start, end):
        t0 = time.perf_counter()
        idx = streams["batch"].choice(config.family.T, size=config.B, replace=False)
        batch = [tasks[i] for i in idx]
        est_batch = None
        if config.lr_mode == "adaptive":
            est_idx = streams["estimation"].choice(config.family.T, size=config.B_hat, replace=False)
            est_batch = [tasks[i] for i in est_idx]

        try:
            gz, gh, losses = _chunked_meta_gradient(batch, theta, config.adaptation,
                                                    config.chunk_size)
        except FloatingPointError as exc:
            raise NumericalAbort(r, f"meta-gradient ({exc})") from exc
        if not (np.all(np.isfinite(gz)) and np.all(np.isfinite(gh))):
            raise NumericalAbort(r, "meta-gradient")

        pop_z = pop_h = None
        if config.population_every and r % config.population_every == 0:
            # Exact meta-gradient of the full-population loss at the current iterate.
            pz, ph, _ = _chunked_meta_gradient(tasks, theta, config.adaptation, config.chunk_size)
            pop_z = float(np.linalg.norm(pz))
            pop_h = float(np.linalg.norm(ph)) if ph.size else 0.0

        if est_batch is not None:
            G1, G2 = estimate_smoothness(est_batch, theta, config.adaptation, constants)
            beta1, beta2 = meta_learning_rates(G1, G2, config.C_beta)
        else:
            G1 = G2 = None
            beta1, beta2 = config.beta1, config.beta2

        new_z = opt.step("z", theta.theta_z, gz, beta1)
        new_h = theta.theta_h
        if theta.theta_h is not None and gh.size:
            flat = opt.step("h", theta.theta_h.flatten(), gh, beta2)
            new_h = mm.MirrorMapParams.unflatten(flat, spec)
        theta = MetaParams(new_z, new_h, spec)

        with np.errstate(over="ignore"):
            loss_std = float(np.std(losses))
        rec = {"round": r, "meta_loss": float(np.mean(losses)),
               "meta_loss_std": loss_std,
               "grad_z_norm": float(np.linalg.norm(gz)),
               "grad_h_norm": float(np.linalg.norm(gh)) if gh.size else 0.0,
               "pop_grad_z_norm": pop_z, "pop_grad_h_norm": pop_h,
               "beta1": float(beta1), "beta2": float(beta2),
               "Ghat1": None if G1 is None else float(G1),
               "Ghat2": None if G2 is None else float(G2),
               "wall_time": time.perf_counter() - t0}
        metrics.records.append(rec)

        if config.eval_every and (r + 1) % config.eval_every == 0:
            rep = evaluate(theta, config.family, config.adaptation, config.eval_tasks,
                           eval_seed(config.seed))
            rep["round"] = r + 1
            metrics.evaluations.append(rep)
        if on_round is not None:
            on_round(rec)
        if checkpoint_path and checkpoint_every and (r + 1) % checkpoint_every == 0:
            save_checkpoint(theta, config, checkpoint_path,
                            _state(r + 1, streams, opt, metrics))

    if end == config.R and metrics.rho_round is None:
        metrics.rho_round = int(streams["report"].integers(config.R))
    state = _state(end, streams, opt, metrics)
    if checkpoint_path:
        save_checkpoint(theta, config, checkpoint_path, state)
    return theta, metrics, state


def _state(round_index, streams, opt, metrics) -> TrainState:
    return TrainState(round_index=round_index,
                      rng_states={k: g.bit_generator.state for k, g in streams.items()},
                      optimizer_state=opt.serializable(),
                      metrics=metrics)


def eval_seed(seed: int) -> int:
    """Seed of the held-out evaluation universe, distinct from the training one."""
    return int(np.random.SeedSequence([seed, 0x5EED]).generate_state(1)[0])


# ----------------------------------------------------------------- evaluate

def evaluate(theta: MetaParams, family: TaskFamily, adaptation: AdaptationConfig,
             n_tasks: int, seed: int, chunk: int = 50) -> dict:
    """Per-step validation metric over freshly sampled held-out tasks."""
    if n_tasks < 2:
        raise TrainError("evaluation needs at least 2 tasks")
    held_out = replace(family, T=n_tasks, seed=seed)
    tasks = sample_universe(held_out)
    per_task = []
    for i in range(0, n_tasks, chunk):
        part = tasks[i:i + chunk]
        primals = adapt_batch(part, theta, adaptation)
        val = stack_tasks(part, "val")
        per_task.append(np.stack([batch_metric(val, phi) for phi in primals], axis=1))
    values = np.concatenate(per_task)  # (n_tasks, K + 1)
    mean = values.mean(axis=0)
    std = values.std(axis=0, ddof=1)
    half = 1.96 * std / math.sqrt(n_tasks)
    rows = [{"k": k, "mean": float(mean[k]), "std": float(std[k]),
             "ci_low": float(mean[k] - half[k]), "ci_high": float(mean[k] + half[k]),
             "half_width": float(half[k])} for k in range(values.shape[1])]
    return {"schema_version": SCHEMA_VERSION, "metric": metric_name(family.kind),
            "direction": metric_direction(family.kind), "n_tasks": n_tasks,
            "K": adaptation.K, "mode": adaptation.mode, "per_k": rows}


# -------------------------------------------------------------- checkpoints

def _encode_state(st):
    return json.loads(json.dumps(st, default=int))


def save_checkpoint(theta: MetaParams, config: TrainConfig, path, state: TrainState | None = None):
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "mirror_spec": None if theta.mirror_spec is None else theta.mirror_spec.to_dict(),
        "dim": theta.dim,
        "theta_z": np.asarray(theta.theta_z).tolist(),
        "theta_h": None if theta.theta_h is None else [np.asarray(a).tolist()
                                                       for a in theta.theta_h.arrays()],
    }
    if state is not None:
        doc["round_index"] = state.round_index
        doc["rng_states"] = _encode_state(state.rng_states)
        doc["optimizer_state"] = state.optimizer_state
        doc["metrics"] = {"records": state.metrics.records,
                          "evaluations": state.metrics.evaluations,
                          "rho_round": state.metrics.rho_round}
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_checkpoint(path, with_state: bool = False):
    """Read a checkpoint; returns ``(theta, config)`` or ``(theta, config, state)``."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint schema {doc.get('schema_version') if isinstance(doc, dict) else None!r} "
            f"!= supported {SCHEMA_VERSION}")
    try:
        config = TrainConfig.from_dict(doc["config"])
        spec = None if doc["mirror_spec"] is None else mm.MirrorMapSpec.from_dict(doc["mirror_spec"])
        theta_z = np.array(doc["theta_z"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    model_dim = config.family.model.dim
    if theta_z.shape != (model_dim,):
        raise CheckpointError(
            f"checkpoint theta_z has dimension {theta_z.shape[0] if theta_z.ndim else 0} "
            f"but the task model has dimension {model_dim}")
    if spec is not None and spec.input_dim != model_dim:
        raise CheckpointError(
            f"checkpoint mirror map has input dimension {spec.input_dim} "
            f"but the task model has dimension {model_dim}")
    theta_h = None
    if doc["theta_h"] is not None:
        arrays = [np.array(a, dtype=np.float64) for a in doc["theta_h"]]
        theta_h = mm.MirrorMapParams.from_arrays(arrays, spec)
        mm.check_params(theta_h, spec)
    theta = MetaParams(theta_z, theta_h, spec)
    if not with_state:
        return theta, config
    if "round_index" not in doc:
        raise CheckpointError(f"checkpoint {path} has no training state")
    m = doc["metrics"]
    state = TrainState(doc["round_index"], doc["rng_states"], doc["optimizer_state"],
                       RunMetrics(m["records"], m["evaluations"], m["rho_round"]))
    return theta, config, state
