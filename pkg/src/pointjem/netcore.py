"""Reverse-mode gradients for the fixed point-set network.

The network is always the same shape: a stack of affine + activation layers
applied to every point independently, an average pool over points, and a
small stack of affine layers on the pooled feature. Instead of a general
autograd graph, :func:`forward` records a :class:`ForwardTape` and
:func:`backward` walks it in reverse, returning gradients with respect to
the parameters, the input coordinates, or both.

Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

__all__ = [
    "ACTIVATION_KINDS",
    "Activation",
    "ContractViolation",
    "ForwardTape",
    "GradientCheckResult",
    "LayerSpec",
    "NetworkParams",
    "NonFiniteError",
    "activation_forward",
    "affine_forward",
    "backward",
    "forward",
    "gradient_check",
]

ACTIVATION_KINDS = ("relu", "leaky_relu", "celu", "identity")


class ContractViolation(ValueError):
    """An operation was called with inputs that break its contract."""


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or infinity."""


@dataclass(frozen=True)
class Activation:
    """Elementwise nonlinearity.

    ``slope`` is only used by ``leaky_relu`` and ``alpha`` only by ``celu``.
    The ReLU derivative at 0 is taken to be 0; LeakyReLU uses ``slope`` there.
    """

    kind: str = "celu"
    slope: float = 0.01
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ContractViolation(
                f"unknown activation {self.kind!r}; expected one of {ACTIVATION_KINDS}"
            )
        if self.kind == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ContractViolation(f"LeakyReLU slope must lie in (0, 1), got {self.slope}")
        if self.kind == "celu" and not self.alpha > 0.0:
            raise ContractViolation(f"CELU alpha must be positive, got {self.alpha}")

    def forward(self, z: np.ndarray) -> np.ndarray:
        return self.forward_with_derivative(z)[0]

    def derivative(self, z: np.ndarray) -> np.ndarray:
        d = self.forward_with_derivative(z)[1]
        return np.ones_like(z) if d is None else d

    def forward_with_derivative(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        """Return ``(f(z), f'(z))``; the derivative is ``None`` for identity."""
        if self.kind == "identity":
            return z, None
        if self.kind == "relu":
            out = np.maximum(z, 0.0)
            return out, (z > 0.0).astype(np.float64)
        if self.kind == "leaky_relu":
            pos = z >= 0.0
            out = np.where(pos, z, self.slope * z)
            return out, np.where(z > 0.0, 1.0, self.slope)
        # CELU: max(0, z) + min(0, a (exp(z/a) - 1)); derivative exp(min(z, 0)/a)
        a = self.alpha
        t = np.minimum(z, 0.0)
        if a != 1.0:
            t /= a
        deriv = np.exp(t, out=t)
        out = np.maximum(z, 0.0)
        if a != 1.0:
            out += a * (deriv - 1.0)
        else:
            out += deriv
            out -= 1.0
        return out, deriv

    def to_dict(self) -> dict:
        return {"kind": self.kind, "slope": self.slope, "alpha": self.alpha}


IDENTITY = Activation("identity")


def activation_forward(x: np.ndarray, activation: Activation) -> np.ndarray:
    return activation.forward(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: Activation = IDENTITY

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ContractViolation(f"layer dims must be >= 1, got {self.in_dim}->{self.out_dim}")


@dataclass
class ForwardTape:
    """Cached intermediates of one forward pass.

    ``inputs[i]`` is what layer ``i`` consumed, ``pre[i]`` its affine output
    and ``post[i]`` the activation output. Point layers see arrays of shape
    ``(batch * n_points, width)``; head layers see ``(batch, width)``.
    """

    params: "NetworkParams"
    batch: int
    n_points: int
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    derivs: list = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.pre)

    def record(self, x, z, a, d) -> None:
        self.inputs.append(x)
        self.pre.append(z)
        self.post.append(a)
        self.derivs.append(d)

    def replay(self) -> np.ndarray:
        """Recompute the logits from the cached network input."""
        clouds = self.inputs[0].reshape(self.batch, self.n_points, 3)
        return forward(self.params, clouds, record=False)[0]


class NetworkParams:
    """Weights of a point MLP + average pool + head network.

    Tensors are kept in a dict keyed ``"point.{i}.weight"``, ``"point.{i}.bias"``,
    ``"head.{i}.weight"``, ``"head.{i}.bias"``. Weight matrices are stored
    ``(out_dim, in_dim)`` so a layer computes ``W @ x + b``. Gradients and
    optimizer moments use dicts with the same keys.
    """

    def __init__(self, point_layers, head_layers, tensors: dict[str, np.ndarray]):
        self.point_layers = tuple(point_layers)
        self.head_layers = tuple(head_layers)
        self.tensors = dict(tensors)
        self._validate()

    def _validate(self) -> None:
        if not self.point_layers or not self.head_layers:
            raise ContractViolation("network needs at least one point layer and one head layer")
        if self.point_layers[0].in_dim != 3:
            raise ContractViolation("first point layer must take 3-D coordinates")
        prev = 3
        for name, spec in self.named_layers():
            if spec.in_dim != prev:
                raise ContractViolation(
                    f"layer {name} expects in_dim {spec.in_dim} but previous layer gives {prev}"
                )
            prev = spec.out_dim
            w = self.tensors.get(f"{name}.weight")
            b = self.tensors.get(f"{name}.bias")
            if w is None or b is None:
                raise ContractViolation(f"missing tensors for layer {name}")
            if w.shape != (spec.out_dim, spec.in_dim) or b.shape != (spec.out_dim,):
                raise ContractViolation(
                    f"layer {name}: weight {w.shape} / bias {b.shape} do not match "
                    f"{spec.in_dim}->{spec.out_dim}"
                )
        expected = {f"{n}.{k}" for n, _ in self.named_layers() for k in ("weight", "bias")}
        extra = set(self.tensors) - expected
        if extra:
            raise ContractViolation(f"unexpected tensors {sorted(extra)}")

    @classmethod
    def initialize(
        cls,
        n_classes: int,
        point_widths=(64, 128, 256, 1024),
        head_widths=(),
        activation: Activation | None = None,
        rng=None,
    ) -> "NetworkParams":
        """Fan-in uniform init: ``W ~ U(-1/sqrt(in), 1/sqrt(in))``, zero biases."""
        activation = activation or Activation("celu")
        rng = np.random.default_rng(rng)
        point_specs, head_specs = [], []
        prev = 3
        for w in point_widths:
            point_specs.append(LayerSpec(prev, int(w), activation))
            prev = int(w)
        for w in head_widths:
            head_specs.append(LayerSpec(prev, int(w), activation))
            prev = int(w)
        head_specs.append(LayerSpec(prev, int(n_classes), IDENTITY))
        tensors = {}
        for prefix, specs in (("point", point_specs), ("head", head_specs)):
            for i, spec in enumerate(specs):
                bound = 1.0 / np.sqrt(spec.in_dim)
                tensors[f"{prefix}.{i}.weight"] = rng.uniform(
                    -bound, bound, size=(spec.out_dim, spec.in_dim)
                )
                tensors[f"{prefix}.{i}.bias"] = np.zeros(spec.out_dim)
        return cls(point_specs, head_specs, tensors)

    def named_layers(self) -> Iterator[tuple[str, LayerSpec]]:
        for i, spec in enumerate(self.point_layers):
            yield f"point.{i}", spec
        for i, spec in enumerate(self.head_layers):
            yield f"head.{i}", spec

    @property
    def n_classes(self) -> int:
        return self.head_layers[-1].out_dim

    @property
    def feature_dim(self) -> int:
        return self.point_layers[-1].out_dim

    @property
    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def keys(self):
        return self.tensors.keys()

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.point_layers, self.head_layers, {k: v.copy() for k, v in self.tensors.items()}
        )

    def replace(self, tensors: dict[str, np.ndarray]) -> "NetworkParams":
        """Same architecture, new tensors."""
        return NetworkParams(self.point_layers, self.head_layers, tensors)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def architecture(self) -> dict:
        return {
            "point_layers": [
                {"in_dim": s.in_dim, "out_dim": s.out_dim, "activation": s.activation.to_dict()}
                for s in self.point_layers
            ],
            "head_layers": [
                {"in_dim": s.in_dim, "out_dim": s.out_dim, "activation": s.activation.to_dict()}
                for s in self.head_layers
            ],
        }

    @classmethod
    def from_architecture(cls, arch: dict, tensors: dict[str, np.ndarray]) -> "NetworkParams":
        def specs(rows):
            return [
                LayerSpec(int(r["in_dim"]), int(r["out_dim"]), Activation(**r["activation"]))
                for r in rows
            ]

        return cls(specs(arch["point_layers"]), specs(arch["head_layers"]), tensors)

    def __repr__(self) -> str:
        widths = [s.out_dim for s in self.point_layers]
        head = [s.out_dim for s in self.head_layers]
        act = self.point_layers[0].activation.kind
        return f"NetworkParams(point={widths}, head={head}, activation={act!r})"


def affine_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, tape=None) -> np.ndarray:
    """``weights @ x + bias`` for a vector or for each row of a 2-D batch.

    If ``tape`` is a list the pre-activation is appended to it.
    """
    x = np.asarray(x, dtype=np.float64)
    if weights.ndim != 2 or bias.shape != (weights.shape[0],):
        raise ContractViolation(
            f"bias length {bias.shape} does not match weight rows {weights.shape}"
        )
    if x.shape[-1] != weights.shape[1]:
        raise ContractViolation(
            f"input length {x.shape[-1]} does not match weight cols {weights.shape[1]}"
        )
    z = x @ weights.T
    z += bias
    if tape is not None:
        tape.append(z)
    return z


def forward(params: NetworkParams, clouds: np.ndarray, record: bool = True):
    """Run a batch of clouds ``(batch, n_points, 3)`` to logits ``(batch, C)``.

    Returns ``(logits, tape)``; ``tape`` is None when ``record`` is False.
    """
    clouds = np.asarray(clouds, dtype=np.float64)
    if clouds.ndim != 3 or clouds.shape[2] != 3:
        raise ContractViolation(f"expected clouds of shape (batch, n, 3), got {clouds.shape}")
    batch, n, _ = clouds.shape
    if batch < 1 or n < 1:
        raise ContractViolation("empty batch or empty cloud")
    tape = ForwardTape(params, batch, n) if record else None

    h = clouds.reshape(batch * n, 3)
    for i, spec in enumerate(params.point_layers):
        z = affine_forward(h, params.tensors[f"point.{i}.weight"], params.tensors[f"point.{i}.bias"])
        a, d = spec.activation.forward_with_derivative(z)
        if tape is not None:
            tape.record(h, z, a, d)
        h = a
    h = h.reshape(batch, n, -1).mean(axis=1)
    for i, spec in enumerate(params.head_layers):
        z = affine_forward(h, params.tensors[f"head.{i}.weight"], params.tensors[f"head.{i}.bias"])
        a, d = spec.activation.forward_with_derivative(z)
        if tape is not None:
            tape.record(h, z, a, d)
        h = a
    return h, tape


def backward(
    tape: ForwardTape,
    params: NetworkParams,
    out_grad: np.ndarray,
    need_param_grads: bool = True,
    need_input_grad: bool = True,
):
    """Pull ``out_grad`` (d scalar / d logits, shape ``(batch, C)``) back through the tape.

    Returns ``(param_grads, input_grad)``. Parameter gradients are summed over
    the batch; ``input_grad`` has the shape of the input clouds. Either may be
    ``None`` if not requested.
    """
    if tape.params is not params:
        raise ContractViolation("tape was recorded with a different NetworkParams object")
    n_point, n_head = len(params.point_layers), len(params.head_layers)
    if tape.depth != n_point + n_head:
        raise ContractViolation(f"tape depth {tape.depth} != network depth {n_point + n_head}")
    g = np.asarray(out_grad, dtype=np.float64)
    if g.shape != (tape.batch, params.n_classes):
        raise ContractViolation(
            f"out_grad shape {g.shape} != {(tape.batch, params.n_classes)}"
        )
    grads = {} if need_param_grads else None

    for i in reversed(range(n_head)):
        k = n_point + i
        if tape.derivs[k] is not None:
            g = g * tape.derivs[k]
        if grads is not None:
            grads[f"head.{i}.weight"] = g.T @ tape.inputs[k]
            grads[f"head.{i}.bias"] = g.sum(axis=0)
        g = g @ params.tensors[f"head.{i}.weight"]

    # average pool: every point receives 1/n of the pooled gradient
    batch, n = tape.batch, tape.n_points
    width = g.shape[1]
    g = np.broadcast_to((g / n)[:, None, :], (batch, n, width)).reshape(batch * n, width)

    for i in reversed(range(n_point)):
        if tape.derivs[i] is not None:
            g = g * tape.derivs[i]
        if grads is not None:
            grads[f"point.{i}.weight"] = g.T @ tape.inputs[i]
            grads[f"point.{i}.bias"] = g.sum(axis=0)
        if i > 0 or need_input_grad:
            g = g @ params.tensors[f"point.{i}.weight"]

    input_grad = g.reshape(batch, n, 3) if need_input_grad else None
    if grads is not None:
        grads = {k: grads[k] for k in params.keys()}
    return grads, input_grad


@dataclass(frozen=True)
class GradientCheckResult:
    max_rel_error: float
    worst_index: tuple
    n_checked: int

    def __float__(self) -> float:
        return self.max_rel_error


def gradient_check(
    fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
    step: float = 1e-5,
    n_coords: int = 100,
    rng=None,
) -> GradientCheckResult:
    """Compare ``analytic`` to central differences of ``fn`` at ``x``.

    Checks a random subsample of ``n_coords`` coordinates (all of them if
    ``x`` is smaller). The error per coordinate is
    ``|a - c| / (|a| + |c| + 1e-12)``.
    """
    if step <= 0:
        raise ContractViolation(f"step must be positive, got {step}")
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ContractViolation(f"gradient shape {analytic.shape} != point shape {x.shape}")
    rng = np.random.default_rng(rng)
    flat = x.reshape(-1)
    size = flat.size
    picks = np.arange(size) if size <= n_coords else rng.choice(size, n_coords, replace=False)
    worst, worst_idx = -1.0, ()
    for j in picks:
        orig = flat[j]
        flat[j] = orig + step
        up = fn(x)
        flat[j] = orig - step
        down = fn(x)
        flat[j] = orig
        idx = tuple(int(i) for i in np.unravel_index(j, x.shape))
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"non-finite value when perturbing coordinate {idx}")
        numeric = (up - down) / (2.0 * step)
        a = analytic[idx]
        err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
        if err > worst:
            worst, worst_idx = float(err), idx
    return GradientCheckResult(worst, worst_idx, len(picks))
