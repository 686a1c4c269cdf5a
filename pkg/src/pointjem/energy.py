"""A PointNet-style classifier read as an energy function over point clouds.

Logits ``f(X)`` come from a per-point MLP, an average pool and a linear head.
The energy of a cloud is ``E(X) = -logsumexp(f(X))``. Training combines the
cross-entropy of the labels with the contrastive term ``E(X+) - E(X-)``.

Functions accept a single cloud ``(n, 3)`` or a batch ``(batch, n, 3)``; a
single cloud gives scalar results, a batch gives one value per cloud.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netcore import (
    Activation,
    ContractViolation,
    GradientCheckResult,
    NetworkParams,
    backward,
    forward,
    gradient_check,
)

__all__ = [
    "LossBreakdown",
    "NetworkParams",
    "class_probabilities",
    "classification_loss",
    "energy",
    "energy_and_input_gradient",
    "energy_from_logits",
    "energy_input_gradient",
    "finite_difference_check",
    "forward_logits",
    "generative_loss",
    "init_params",
    "joint_loss_and_grads",
    "logsumexp",
]


def init_params(
    n_classes: int = 10,
    point_widths=(64, 128, 256, 1024),
    head_widths=(),
    activation: str = "celu",
    slope: float = 0.01,
    alpha: float = 1.0,
    seed=0,
) -> NetworkParams:
    return NetworkParams.initialize(
        n_classes, point_widths, head_widths, Activation(activation, slope, alpha), rng=seed
    )


def _as_batch(cloud) -> tuple[np.ndarray, bool]:
    X = np.asarray(cloud, dtype=np.float64)
    if X.ndim == 2:
        if X.shape[0] < 1:
            raise ContractViolation("empty point cloud")
        return X[None], True
    if X.ndim == 3:
        return X, False
    raise ContractViolation(f"expected (n, 3) or (batch, n, 3), got shape {X.shape}")


def logsumexp(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(logits, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(logits - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def energy_from_logits(logits: np.ndarray) -> np.ndarray:
    return -logsumexp(np.asarray(logits, dtype=np.float64))


def class_probabilities(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max-shift."""
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - np.max(logits, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def forward_logits(params: NetworkParams, cloud) -> np.ndarray:
    X, single = _as_batch(cloud)
    logits, _ = forward(params, X, record=False)
    return logits[0] if single else logits


def energy(params: NetworkParams, cloud):
    X, single = _as_batch(cloud)
    e = energy_from_logits(forward(params, X, record=False)[0])
    return float(e[0]) if single else e


def _check_labels(labels, n_classes: int, batch: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim == 0:
        y = y[None]
    if y.shape != (batch,):
        raise ContractViolation(f"expected {batch} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ContractViolation(f"labels must be integers, got dtype {y.dtype}")
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ContractViolation(f"label out of range [0, {n_classes}): {y[(y < 0) | (y >= n_classes)]}")
    return y.astype(np.intp)


def _xent(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    return logsumexp(logits) - logits[np.arange(len(y)), y]


def classification_loss(params: NetworkParams, cloud, label):
    """Cross-entropy ``-log softmax(f(X))[label]``."""
    X, single = _as_batch(cloud)
    y = _check_labels(label, params.n_classes, X.shape[0])
    loss = _xent(forward(params, X, record=False)[0], y)
    return float(loss[0]) if single else loss


def generative_loss(params: NetworkParams, real, fake):
    """``E(real) - E(fake)``; ``fake`` is a constant sample (no gradient into its sampler)."""
    e_real = energy(params, real)
    e_fake = energy(params, fake)
    return e_real - e_fake


def energy_and_input_gradient(params: NetworkParams, clouds) -> tuple[np.ndarray, np.ndarray]:
    """Energies ``(batch,)`` and ``dE/dX`` ``(batch, n, 3)`` for a batch of clouds."""
    X, _ = _as_batch(clouds)
    logits, tape = forward(params, X)
    # d(-LSE)/dlogits = -softmax
    _, gx = backward(tape, params, -class_probabilities(logits), need_param_grads=False)
    return energy_from_logits(logits), gx


def energy_input_gradient(params: NetworkParams, cloud) -> np.ndarray:
    X, single = _as_batch(cloud)
    gx = energy_and_input_gradient(params, X)[1]
    return gx[0] if single else gx


@dataclass(frozen=True)
class LossBreakdown:
    l_clf: float
    l_gen: float
    energy_real: float
    energy_fake: float
    accuracy: float

    @property
    def total(self) -> float:
        return self.l_clf + self.l_gen


def joint_loss_and_grads(
    params: NetworkParams, real: np.ndarray, labels, fake: np.ndarray
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Batch-mean ``xent(f(X+), y) + E(X+) - E(X-)`` and its parameter gradient.

    ``fake`` may be None, in which case only the cross-entropy is used.
    """
    real, _ = _as_batch(real)
    b = real.shape[0]
    y = _check_labels(labels, params.n_classes, b)
    if fake is not None:
        fake, _ = _as_batch(fake)
        if fake.shape[0] != b:
            raise ContractViolation(f"{fake.shape[0]} negatives for {b} positives")

    if fake is not None and fake.shape[1] == real.shape[1]:
        logits, tape = forward(params, np.concatenate([real, fake]))
        lr_, lf = logits[:b], logits[b:]
    else:
        lr_, tape = forward(params, real)
        lf = None

    p_real = class_probabilities(lr_)
    onehot = np.zeros_like(p_real)
    onehot[np.arange(b), y] = 1.0
    l_clf = float(np.mean(_xent(lr_, y)))
    e_real = energy_from_logits(lr_)
    g_real = (p_real - onehot) / b
    accuracy = float(np.mean(np.argmax(lr_, axis=1) == y))

    if fake is None:
        grads, _ = backward(tape, params, g_real, need_input_grad=False)
        return LossBreakdown(l_clf, 0.0, float(e_real.mean()), float("nan"), accuracy), grads

    g_real = g_real - p_real / b
    if lf is not None:
        e_fake = energy_from_logits(lf)
        out_grad = np.concatenate([g_real, class_probabilities(lf) / b])
        grads, _ = backward(tape, params, out_grad, need_input_grad=False)
    else:
        grads, _ = backward(tape, params, g_real, need_input_grad=False)
        lf, tape_f = forward(params, fake)
        e_fake = energy_from_logits(lf)
        gf, _ = backward(tape_f, params, class_probabilities(lf) / b, need_input_grad=False)
        grads = {k: grads[k] + gf[k] for k in grads}
    l_gen = float(np.mean(e_real - e_fake))
    return (
        LossBreakdown(l_clf, l_gen, float(e_real.mean()), float(e_fake.mean()), accuracy),
        grads,
    )


_SCALARS = ("energy", "classification", "generative", "joint")


def finite_difference_check(
    params: NetworkParams,
    cloud,
    scalar_fn: str = "energy",
    step: float = 1e-5,
    wrt: str = "input",
    label=0,
    fake=None,
    n_coords: int = 100,
    rng=None,
) -> GradientCheckResult:
    """Check analytic gradients of a named scalar against central differences.

    ``scalar_fn`` is one of ``"energy"``, ``"classification"``,
    ``"generative"`` (needs ``fake``) or ``"joint"`` (needs ``fake``). Scalars
    are batch means when ``cloud`` is a batch. ``wrt`` is ``"input"`` or
    ``"params"``; gradients w.r.t. the input are for ``cloud`` (the positive
    sample), with ``fake`` held fixed.
    """
    if scalar_fn not in _SCALARS:
        raise ContractViolation(f"unknown scalar {scalar_fn!r}; expected one of {_SCALARS}")
    if scalar_fn in ("generative", "joint") and fake is None:
        raise ContractViolation(f"{scalar_fn!r} needs a fake cloud")
    X, single = _as_batch(cloud)
    F = None if fake is None else _as_batch(fake)[0]
    b = X.shape[0]
    y = _check_labels(np.broadcast_to(label, (b,)) if np.ndim(label) == 0 else label,
                      params.n_classes, b)

    def value(p: NetworkParams, x: np.ndarray) -> float:
        logits = forward(p, x, record=False)[0]
        e = energy_from_logits(logits)
        if scalar_fn == "energy":
            return float(np.mean(e))
        clf = float(np.mean(_xent(logits, y)))
        if scalar_fn == "classification":
            return clf
        gen = float(np.mean(e - energy_from_logits(forward(p, F, record=False)[0])))
        return gen if scalar_fn == "generative" else clf + gen

    def analytic_out_grad(logits: np.ndarray) -> np.ndarray:
        p = class_probabilities(logits)
        onehot = np.zeros_like(p)
        onehot[np.arange(b), y] = 1.0
        if scalar_fn == "energy" or scalar_fn == "generative":
            return -p / b
        if scalar_fn == "classification":
            return (p - onehot) / b
        return (p - onehot - p) / b

    logits, tape = forward(params, X)
    grads, gx = backward(tape, params, analytic_out_grad(logits))

    if wrt == "input":
        return gradient_check(lambda x: value(params, x), X, gx, step, n_coords, rng)
    if wrt != "params":
        raise ContractViolation(f"wrt must be 'input' or 'params', got {wrt!r}")

    if scalar_fn in ("generative", "joint"):
        lf, tape_f = forward(params, F)
        gf, _ = backward(tape_f, params, class_probabilities(lf) / b, need_input_grad=False)
        grads = {k: grads[k] + gf[k] for k in grads}
    keys = list(params.keys())
    sizes = [params[k].size for k in keys]
    flat = np.concatenate([params[k].ravel() for k in keys])
    flat_grad = np.concatenate([grads[k].ravel() for k in keys])

    def unflatten(vec: np.ndarray) -> NetworkParams:
        out, start = {}, 0
        for k, s in zip(keys, sizes):
            out[k] = vec[start:start + s].reshape(params[k].shape)
            start += s
        return params.replace(out)

    return gradient_check(lambda v: value(unflatten(v), X), flat, flat_grad, step, n_coords, rng)
