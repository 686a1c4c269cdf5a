"""Adam and a sharpness-aware (SAM) two-pass wrapper around it.

Parameters are :class:`~pointjem.netcore.NetworkParams`; gradients and
moments are dicts keyed like ``params.tensors``. Updates return new params
objects and never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .netcore import ContractViolation, NetworkParams, NonFiniteError

__all__ = [
    "Adam",
    "NonFiniteLossError",
    "SamConfig",
    "global_norm",
    "sam_perturbation",
    "sam_step",
    "step_decay_lr",
]

Grads = dict[str, np.ndarray]


class NonFiniteLossError(NonFiniteError):
    def __init__(self, loss: float, perturbed_loss: float):
        super().__init__(
            f"non-finite loss in SAM step (loss at params={loss!r}, at perturbed params={perturbed_loss!r})"
        )
        self.loss = loss
        self.perturbed_loss = perturbed_loss


class Adam:
    """Adam with bias-corrected moments.

    Parameters
    ----------
    lr : float, default=0.01
    beta1, beta2 : float, default=0.9, 0.999
    eps : float, default=1e-8
    """

    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ContractViolation(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        if not eps > 0:
            raise ContractViolation(f"eps must be positive, got {eps}")
        if not lr > 0:
            raise ContractViolation(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m: Grads = {}
        self.v: Grads = {}
        self.t = 0

    def step(self, params: NetworkParams, grads: Grads) -> NetworkParams:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {k!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        new = {}
        for k, p in params.tensors.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            new[k] = p - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return params.replace(new)

    def hyperparams(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(t)
        self.m = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("v/")}


def step_decay_lr(base_lr: float, epoch: int, factor: float = 0.2, every: int = 50) -> float:
    """``base_lr * factor ** (epoch // every)``."""
    if every <= 0:
        return base_lr
    return base_lr * factor ** (epoch // every)


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.05
    weight_decay: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if self.rho < 0 or self.weight_decay < 0:
            raise ContractViolation(f"rho and weight_decay must be >= 0, got {self.rho}, {self.weight_decay}")

    def to_dict(self) -> dict:
        return asdict(self)


def global_norm(grads: Grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def sam_perturbation(grads: Grads, rho: float) -> Grads:
    """``rho * g / ||g||`` using the norm over all tensors jointly; zero if ``||g|| < 1e-12``."""
    if rho < 0:
        raise ContractViolation(f"rho must be >= 0, got {rho}")
    norm = global_norm(grads)
    if norm < 1e-12 or rho == 0:
        return {k: np.zeros_like(g) for k, g in grads.items()}
    scale = rho / norm
    return {k: g * scale for k, g in grads.items()}


def sam_step(
    opt: Adam,
    sam: SamConfig,
    params: NetworkParams,
    loss_grad_fn: Callable[[NetworkParams], tuple[float, Grads]],
) -> tuple[NetworkParams, dict]:
    """One sharpness-aware update.

    Gradients are taken at ``params + rho * g / ||g||`` (two evaluations of
    ``loss_grad_fn``), weight decay ``2 * weight_decay * params`` is added and
    the result is fed to ``opt``. With ``sam.enabled`` False only one
    evaluation is made, at ``params``.

    Returns the new params and ``{"loss": ..., "perturbed_loss": ...}``.
    """
    loss, grads = loss_grad_fn(params)
    perturbed_loss = None
    if sam.enabled:
        if not np.isfinite(loss):
            raise NonFiniteLossError(loss, float("nan"))
        eps = sam_perturbation(grads, sam.rho)
        shifted = params.replace({k: params[k] + eps[k] for k in params.keys()})
        perturbed_loss, grads = loss_grad_fn(shifted)
        if not np.isfinite(perturbed_loss):
            raise NonFiniteLossError(loss, perturbed_loss)
    elif not np.isfinite(loss):
        raise NonFiniteLossError(loss, float("nan"))
    if sam.weight_decay > 0:
        grads = {k: g + 2.0 * sam.weight_decay * params[k] for k, g in grads.items()}
    return opt.step(params, grads), {"loss": loss, "perturbed_loss": perturbed_loss}
