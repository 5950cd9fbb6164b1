"""Synthetic few-shot task families.

Three families share one interface:

* ``sinusoid_regression``: y = a sin(x + p), fitted by a small tanh MLP
  (1 -> width -> width -> 1) under mean-squared error.
* ``gaussian_classification``: C isotropic Gaussian clusters whose means lie
  on a sphere, fitted by a one-hidden-layer tanh network under softmax
  cross-entropy.  ``shots`` and ``val_count`` count points per class.
* ``quadratic``: l(phi) = (phi - c)^T A (phi - c) / 2 with SPD A and separate
  train/validation centres.  No data arrays; every constant is exact.

Losses are built as graphs over a (B, d) stack of task parameters so one
graph serves a whole batch of tasks.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad

KINDS = ("sinusoid_regression", "gaussian_classification", "quadratic")
SCHEMA_VERSION = 1


class TaskError(ValueError):
    pass


class LipschitzUnavailable(Exception):
    """Raised for families whose loss constants must be configured manually."""


@dataclass(frozen=True)
class TaskFamily:
    kind: str = "sinusoid_regression"
    T: int = 64
    shots: int = 10
    val_count: int = 10
    seed: int = 0
    # sinusoid
    amplitude_range: tuple = (0.1, 5.0)
    phase_range: tuple = (0.0, float(np.pi))
    input_range: tuple = (-5.0, 5.0)
    hidden_width: int = 8
    # classification
    num_classes: int = 3
    feature_dim: int = 2
    class_radius: float = 2.0
    noise_std: float = 1.0
    # quadratic
    dim: int = 5
    eig_range: tuple = (0.5, 4.0)
    center_scale: float = 1.0
    val_gap: float = 0.1

    def __post_init__(self):
        for name in ("amplitude_range", "phase_range", "input_range", "eig_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.kind not in KINDS:
            raise TaskError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.T < 1:
            raise TaskError(f"T must be positive, got {self.T}")
        if self.kind != "quadratic" and (self.shots < 1 or self.val_count < 1):
            raise TaskError("shots and val_count must be positive")
        if self.kind == "quadratic" and not 0 < self.eig_range[0] <= self.eig_range[1]:
            raise TaskError(f"eig_range must be positive and ordered, got {self.eig_range}")

    @property
    def model(self) -> "TaskModel":
        return task_model(self)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TaskFamily":
        return cls(**data)


@dataclass(frozen=True)
class TaskModel:
    """Shared predictor architecture; ``widths`` lists layer sizes input to output."""

    kind: str
    widths: tuple

    @property
    def dim(self) -> int:
        if self.kind == "quadratic":
            return self.widths[0]
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def layer_slices(self):
        """(weight slice, weight shape, bias slice, bias shape) per layer."""
        out, i = [], 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            out.append((slice(i, i + a * b), (a, b), slice(i + a * b, i + a * b + b), (1, b)))
            i += a * b + b
        return out

    def unflatten(self, phi: np.ndarray) -> list:
        phi = np.asarray(phi, dtype=np.float64)
        return [(phi[ws].reshape(wshape), phi[bs].reshape(bshape))
                for ws, wshape, bs, bshape in self.layer_slices()]

    def flatten(self, layers) -> np.ndarray:
        return np.concatenate([np.concatenate([np.ravel(w), np.ravel(b)]) for w, b in layers])


def task_model(family: TaskFamily) -> TaskModel:
    if family.kind == "sinusoid_regression":
        h = family.hidden_width
        return TaskModel(family.kind, (1, h, h, 1))
    if family.kind == "gaussian_classification":
        return TaskModel(family.kind, (family.feature_dim, family.hidden_width, family.num_classes))
    return TaskModel(family.kind, (family.dim,))


@dataclass
class TaskInstance:
    task_id: int
    kind: str
    model: TaskModel
    train_inputs: np.ndarray | None = None
    train_labels: np.ndarray | None = None
    val_inputs: np.ndarray | None = None
    val_labels: np.ndarray | None = None
    train_index: np.ndarray | None = None
    val_index: np.ndarray | None = None
    A: np.ndarray | None = None
    c_trn: np.ndarray | None = None
    c_val: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.model.dim

    def to_dict(self) -> dict:
        out = {"task_id": self.task_id, "kind": self.kind, "widths": list(self.model.widths),
               "info": self.info}
        for name in ("train_inputs", "train_labels", "val_inputs", "val_labels",
                     "train_index", "val_index", "A", "c_trn", "c_val"):
            val = getattr(self, name)
            out[name] = None if val is None else np.asarray(val).tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TaskInstance":
        kw = {}
        for name in ("train_inputs", "val_inputs", "A", "c_trn", "c_val"):
            kw[name] = None if data[name] is None else np.array(data[name], dtype=np.float64)
        for name in ("train_index", "val_index"):
            kw[name] = None if data[name] is None else np.array(data[name], dtype=np.int64)
        label_dtype = np.int64 if data["kind"] == "gaussian_classification" else np.float64
        for name in ("train_labels", "val_labels"):
            kw[name] = None if data[name] is None else np.array(data[name], dtype=label_dtype)
        model = TaskModel(data["kind"], tuple(data["widths"]))
        return cls(task_id=data["task_id"], kind=data["kind"], model=model,
                   info=data.get("info", {}), **kw)


# ---------------------------------------------------------------- sampling

def sample_task(family: TaskFamily, task_index: int, rng_seed: int | None = None) -> TaskInstance:
    """Deterministic task ``task_index`` of the family's finite universe."""
    if not 0 <= task_index < family.T:
        raise TaskError(f"task_index {task_index} out of range [0, {family.T})")
    seed = family.seed if rng_seed is None else rng_seed
    rng = np.random.default_rng([seed, task_index])
    model = task_model(family)
    if family.kind == "sinusoid_regression":
        amp = rng.uniform(*family.amplitude_range)
        phase = rng.uniform(*family.phase_range)
        n = family.shots + family.val_count
        x = rng.uniform(*family.input_range, size=n)
        perm = rng.permutation(n)
        return sinusoid_task(amp, phase, x, perm[:family.shots], perm[family.shots:],
                             task_id=task_index, model=model)
    if family.kind == "gaussian_classification":
        C, p = family.num_classes, family.feature_dim
        means = rng.standard_normal((C, p))
        means *= family.class_radius / np.linalg.norm(means, axis=1, keepdims=True)
        per_class = family.shots + family.val_count
        labels = np.repeat(np.arange(C), per_class)
        x = means[labels] + family.noise_std * rng.standard_normal((C * per_class, p))
        train_idx, val_idx = [], []
        for c in range(C):
            idx = rng.permutation(np.flatnonzero(labels == c))
            train_idx.append(idx[:family.shots])
            val_idx.append(idx[family.shots:])
        tr, va = np.concatenate(train_idx), np.concatenate(val_idx)
        return TaskInstance(task_index, family.kind, model,
                            train_inputs=x[tr], train_labels=labels[tr],
                            val_inputs=x[va], val_labels=labels[va],
                            train_index=tr, val_index=va, info={"means": means.tolist()})
    d = family.dim
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eig = rng.uniform(*family.eig_range, size=d)
    A = (q * eig) @ q.T
    A = 0.5 * (A + A.T)
    c_trn = family.center_scale * rng.standard_normal(d)
    step = rng.standard_normal(d)
    c_val = c_trn + family.val_gap * step / np.linalg.norm(step)
    return quadratic_task(A, c_trn, c_val, task_id=task_index)


def sinusoid_task(amplitude, phase, x, train_index, val_index, task_id=0,
                  model: TaskModel | None = None) -> TaskInstance:
    x = np.asarray(x, dtype=np.float64)
    y = amplitude * np.sin(x + phase)
    train_index, val_index = np.asarray(train_index), np.asarray(val_index)
    if np.intersect1d(train_index, val_index).size:
        raise TaskError("train and validation indices overlap")
    model = model or TaskModel("sinusoid_regression", (1, 8, 8, 1))
    return TaskInstance(task_id, "sinusoid_regression", model,
                        train_inputs=x[train_index, None], train_labels=y[train_index, None],
                        val_inputs=x[val_index, None], val_labels=y[val_index, None],
                        train_index=train_index, val_index=val_index,
                        info={"amplitude": float(amplitude), "phase": float(phase)})


def quadratic_task(A, c_trn, c_val=None, task_id=0) -> TaskInstance:
    A = ad.as_array64(A, "A")
    c_trn = ad.as_array64(c_trn, "c_trn")
    c_val = c_trn.copy() if c_val is None else ad.as_array64(c_val, "c_val")
    d = c_trn.shape[0]
    if A.shape != (d, d) or c_val.shape != (d,):
        raise TaskError(f"inconsistent quadratic shapes A{A.shape}, c{c_trn.shape}, c_val{c_val.shape}")
    return TaskInstance(task_id, "quadratic", TaskModel("quadratic", (d,)),
                        A=A, c_trn=c_trn, c_val=c_val)


def sample_universe(family: TaskFamily, rng_seed: int | None = None) -> list:
    return [sample_task(family, i, rng_seed) for i in range(family.T)]


def init_model_params(model: TaskModel, rng) -> np.ndarray:
    """Initial predictor parameters: scaled normal weights, zero biases."""
    if model.kind == "quadratic":
        return np.zeros(model.dim)
    layers = []
    for a, b in zip(model.widths[:-1], model.widths[1:]):
        layers.append((rng.standard_normal((a, b)) / np.sqrt(a), np.zeros((1, b))))
    return model.flatten(layers)


# ------------------------------------------------------------ batched losses

@dataclass
class TaskBatch:
    """Stacked data of several tasks of one family, for one split."""

    kind: str
    model: TaskModel
    inputs: np.ndarray | None = None
    labels: np.ndarray | None = None
    onehot: np.ndarray | None = None
    A: np.ndarray | None = None
    centres: np.ndarray | None = None

    @property
    def size(self) -> int:
        arr = self.A if self.kind == "quadratic" else self.inputs
        return arr.shape[0]


def stack_tasks(tasks, which: str) -> TaskBatch:
    if which not in ("trn", "val"):
        raise TaskError(f"which must be 'trn' or 'val', got {which!r}")
    if not tasks:
        raise TaskError("empty task batch")
    first = tasks[0]
    for t in tasks:
        if t.kind != first.kind or t.model != first.model:
            raise TaskError("all tasks in a batch must share one family and model")
    if first.kind == "quadratic":
        c = [t.c_trn if which == "trn" else t.c_val for t in tasks]
        return TaskBatch(first.kind, first.model, A=np.stack([t.A for t in tasks]),
                         centres=np.stack(c))
    xs = [t.train_inputs if which == "trn" else t.val_inputs for t in tasks]
    ys = [t.train_labels if which == "trn" else t.val_labels for t in tasks]
    if len({x.shape for x in xs}) != 1:
        raise TaskError("tasks in a batch must have equal split sizes")
    batch = TaskBatch(first.kind, first.model, inputs=np.stack(xs), labels=np.stack(ys))
    if first.kind == "gaussian_classification":
        C = first.model.widths[-1]
        batch.onehot = np.eye(C)[batch.labels]
    return batch


def predict(model: TaskModel, phi, inputs):
    """Network outputs for a (B, d) parameter stack and (B, n, in) inputs."""
    out = inputs
    layers = model.layer_slices()
    B = np.shape(ad.value_of(phi))[0]
    for i, (ws, wshape, bs, bshape) in enumerate(layers):
        W = ad.reshape(ad.getitem(phi, (slice(None), ws)), (B,) + wshape)
        b = ad.reshape(ad.getitem(phi, (slice(None), bs)), (B,) + bshape)
        out = ad.add(ad.matmul(out, W), b)
        if i < len(layers) - 1:
            out = ad.tanh(out)
    return out


def batch_losses(batch: TaskBatch, phi):
    """Per-task losses (shape (B,)) for a (B, d) parameter stack."""
    if batch.kind == "quadratic":
        B, d = batch.centres.shape
        diff = ad.sub(phi, batch.centres)
        Ad = ad.reshape(ad.matmul(batch.A, ad.reshape(diff, (B, d, 1))), (B, d))
        return ad.mul(0.5, ad.sum_(ad.mul(diff, Ad), axis=1))
    out = predict(batch.model, phi, batch.inputs)
    n = batch.inputs.shape[1]
    if batch.kind == "sinusoid_regression":
        return ad.div(ad.sum_(ad.square(ad.sub(out, batch.labels)), axis=(1, 2)), float(n))
    shift = np.max(ad.value_of(out), axis=-1, keepdims=True)
    lse = ad.add(ad.log(ad.sum_(ad.exp(ad.sub(out, shift)), axis=-1)), shift[..., 0])
    picked = ad.sum_(ad.mul(out, batch.onehot), axis=-1)
    return ad.div(ad.sum_(ad.sub(lse, picked), axis=1), float(n))


def batch_metric(batch: TaskBatch, phi: np.ndarray) -> np.ndarray:
    """Evaluation metric per task: MSE, accuracy, or quadratic loss."""
    if batch.kind == "gaussian_classification":
        out = predict(batch.model, phi, batch.inputs)
        return np.mean(np.argmax(out, axis=-1) == batch.labels, axis=1)
    return np.asarray(batch_losses(batch, phi))


def metric_direction(kind: str) -> str:
    return "higher_is_better" if kind == "gaussian_classification" else "lower_is_better"


def metric_name(kind: str) -> str:
    return {"sinusoid_regression": "mse", "gaussian_classification": "accuracy",
            "quadratic": "loss"}[kind]


# ------------------------------------------------------- per-task interface

def _check_phi(task: TaskInstance, phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (task.dim,):
        raise ad.ShapeError(f"phi must have shape ({task.dim},), got {phi.shape}")
    return phi


def _centre(task, which):
    if which not in ("trn", "val"):
        raise TaskError(f"which must be 'trn' or 'val', got {which!r}")
    return task.c_trn if which == "trn" else task.c_val


def loss_value(task: TaskInstance, which: str, phi) -> float:
    phi = _check_phi(task, phi)
    if task.kind == "quadratic":
        diff = phi - _centre(task, which)
        return float(0.5 * diff @ task.A @ diff)
    return float(batch_losses(stack_tasks([task], which), phi[None, :])[0])


def loss_grad(task: TaskInstance, which: str, phi) -> np.ndarray:
    phi = _check_phi(task, phi)
    if task.kind == "quadratic":
        return task.A @ (phi - _centre(task, which))
    batch = stack_tasks([task], which)
    node = ad.variable(phi[None, :])
    (g,) = ad.grad(ad.sum_(batch_losses(batch, node)), [node])
    return g[0]


def loss_hvp(task: TaskInstance, which: str, phi, v) -> np.ndarray:
    phi = _check_phi(task, phi)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != phi.shape:
        raise ad.ShapeError(f"v must have shape {phi.shape}, got {v.shape}")
    if task.kind == "quadratic":
        _centre(task, which)
        return task.A @ v
    return loss_hvp_autodiff(task, which, phi, v)


def loss_hvp_autodiff(task: TaskInstance, which: str, phi, v) -> np.ndarray:
    """Forward-over-reverse HVP, also used for the quadratic family in tests."""
    batch = stack_tasks([task], which)
    node = ad.variable(np.asarray(phi, dtype=np.float64)[None, :], tangent=np.asarray(v)[None, :])
    (g,) = ad.grad(ad.sum_(batch_losses(batch, node)), [node], create_graph=True)
    return ad._tangent_or_zero(g, node.value)[0]


def loss_hessian(task: TaskInstance, which: str, phi) -> np.ndarray:
    """Dense Hessian from d HVPs (closed form for the quadratic family)."""
    phi = _check_phi(task, phi)
    if task.kind == "quadratic":
        return task.A.copy()
    eye = np.eye(task.dim)
    return np.stack([loss_hvp(task, which, phi, e) for e in eye], axis=1)


# --------------------------------------------------------------- constants

def spectral_norm(A: np.ndarray, iters: int = 1000, tol: float = 1e-14, seed: int = 0) -> float:
    """Largest eigenvalue magnitude of a symmetric matrix by power iteration."""
    v = np.random.default_rng(seed).standard_normal(A.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = A @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v_new = w / norm
        new_lam = float(v_new @ A @ v_new)
        if abs(new_lam - lam) <= tol * max(1.0, abs(new_lam)):
            lam = new_lam
            break
        v, lam = v_new, new_lam
    return abs(lam)


def family_lipschitz(family_or_tasks) -> tuple:
    """(G_ell, H_ell) for quadratic families; the max spectral norm over tasks."""
    if isinstance(family_or_tasks, TaskFamily):
        if family_or_tasks.kind != "quadratic":
            raise LipschitzUnavailable(
                f"loss constants for {family_or_tasks.kind!r} must be configured manually")
        tasks = sample_universe(family_or_tasks)
    else:
        tasks = list(family_or_tasks)
        if any(t.kind != "quadratic" for t in tasks):
            raise LipschitzUnavailable("loss constants for network families must be configured manually")
    return max(spectral_norm(t.A) for t in tasks), 0.0


# ----------------------------------------------------------- serialization

def dump_universe(family: TaskFamily, tasks, path) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "family": family.to_dict(),
           "tasks": [t.to_dict() for t in tasks]}
    Path(path).write_text(json.dumps(doc))


def load_universe(path) -> tuple:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise TaskError(f"unsupported task universe schema {doc.get('schema_version')!r}")
    family = TaskFamily.from_dict(doc["family"])
    return family, [TaskInstance.from_dict(t) for t in doc["tasks"]]
