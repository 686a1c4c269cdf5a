"""Joint classifier/energy training loop, confidence-filtered generation and checkpoints.

One training step:

1. start one SGLD chain per real cloud (replay buffer or fresh prior draw),
2. run ``n_steps`` Langevin steps and detach the result as the negatives,
3. take a SAM step on ``mean xent(f(X+), y) + mean(E(X+) - E(X-))``,
4. push the negatives into the buffer.

Steps whose chains or losses go non-finite are aborted (params, optimizer
and buffer untouched) and counted in ``Trainer.divergences``.
"""

from __future__ import annotations

import json
import logging
import time
import zipfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .energy import class_probabilities, forward_logits, init_params, joint_loss_and_grads
from .netcore import ContractViolation, NetworkParams, NonFiniteError
from .optim import Adam, SamConfig, sam_step, step_decay_lr
from .sampler import InitStats, ReplayBuffer, SgldConfig, init_chains, run_chain

__all__ = [
    "AdamConfig",
    "CheckpointError",
    "ConfigError",
    "GeneratedSample",
    "GenerationResult",
    "TrainConfig",
    "TrainRecord",
    "Trainer",
    "evaluate_classifier",
    "generate_samples",
    "load_checkpoint",
    "predict_proba",
    "save_checkpoint",
]

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pointjem-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ContractViolation) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of a training run. Defaults are the full-scale ModelNet10 setup."""

    epochs: int = 200
    batch_size: int = 128
    n_classes: int = 10
    n_points: int = 2048
    point_widths: tuple[int, ...] = (64, 128, 256, 1024)
    head_widths: tuple[int, ...] = ()
    activation: str = "celu"
    leaky_slope: float = 0.01
    celu_alpha: float = 1.0
    buffer_size: int = 5000
    sgld: SgldConfig = field(default_factory=SgldConfig)
    sam: SamConfig = field(default_factory=SamConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    lr_decay: float = 0.2
    lr_decay_every: int = 50
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "point_widths", tuple(int(w) for w in self.point_widths))
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractViolation(f"epochs and batch_size must be >= 1, got {self.epochs}, {self.batch_size}")
        if self.n_classes < 2 or self.n_points < 1 or not self.point_widths:
            raise ContractViolation("need n_classes >= 2, n_points >= 1 and at least one point layer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["point_widths"] = list(self.point_widths)
        d["head_widths"] = list(self.head_widths)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        nested = {"sgld": SgldConfig, "sam": SamConfig, "adam": AdamConfig}
        for key, sub in nested.items():
            if key in data:
                data[key] = _build(sub, data[key], key)
        return _build(cls, data, "train")

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass
class TrainRecord:
    step: int
    epoch: int
    status: str
    l_clf: float | None
    l_gen: float | None
    energy_real: float | None
    energy_fake: float | None
    accuracy: float | None
    lr: float
    divergences: int
    wall_time: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class GeneratedSample:
    cloud: np.ndarray
    label: int
    confidence: float


@dataclass
class GenerationResult:
    samples: list[GeneratedSample]
    attempts: int
    exhausted: bool
    diverged_chains: int = 0

    @property
    def warnings(self) -> int:
        return int(self.exhausted) + self.diverged_chains


def predict_proba(params: NetworkParams, clouds: np.ndarray, batch_size: int = 128) -> np.ndarray:
    clouds = np.asarray(clouds, dtype=np.float64)
    out = [class_probabilities(forward_logits(params, clouds[i:i + batch_size]))
           for i in range(0, len(clouds), batch_size)]
    return np.concatenate(out)


def evaluate_classifier(params: NetworkParams, clouds, labels, batch_size: int = 128) -> float:
    """Fraction of clouds whose argmax logit (lowest index on ties) equals the label."""
    clouds = np.asarray(clouds, dtype=np.float64)
    labels = np.asarray(labels)
    if len(clouds) == 0:
        raise ContractViolation("empty evaluation set")
    pred = np.argmax(predict_proba(params, clouds, batch_size), axis=1)
    return float(np.mean(pred == labels))


def generate_samples(
    params: NetworkParams,
    count: int,
    cfg: SgldConfig,
    buffer: ReplayBuffer | None,
    rng: np.random.Generator,
    confidence_threshold: float = 0.9,
    target_class: int | None = None,
    n_points: int | None = None,
    from_buffer: bool = False,
    init_stats: InitStats | None = None,
    n_steps: int | None = None,
    max_attempts: int | None = None,
    chain_batch: int = 64,
) -> GenerationResult:
    """Run fresh SGLD chains and keep those the classifier is confident about.

    A chain survives when its max softmax probability is at least
    ``confidence_threshold`` and, if ``target_class`` is given, its argmax is
    that class. Chains start from the prior, or from buffer entries when
    ``from_buffer`` is set. At most ``max_attempts`` chains are inspected (default
    ``20 * count``); if fewer than ``count`` survive the result is flagged
    ``exhausted``.
    """
    if not 0.0 <= confidence_threshold <= 1.0:
        raise ContractViolation(f"confidence_threshold must lie in [0, 1], got {confidence_threshold}")
    if target_class is not None and not 0 <= target_class < params.n_classes:
        raise ContractViolation(f"target_class {target_class} out of range")
    buffer = buffer if buffer is not None else ReplayBuffer(1)
    if n_points is None:
        if buffer.n_points is None:
            raise ContractViolation("n_points is required when the buffer is empty")
        n_points = buffer.n_points
    chain_cfg = replace(cfg, reinit_prob=0.0 if from_buffer and len(buffer) else 1.0)
    max_attempts = 20 * count if max_attempts is None else int(max_attempts)

    samples: list[GeneratedSample] = []
    attempts = diverged = 0
    while len(samples) < count and attempts < max_attempts:
        b = min(chain_batch, max_attempts - attempts, max(count - len(samples), 8))
        X0 = init_chains(buffer, chain_cfg, init_stats, rng, n_points, b)
        try:
            X = run_chain(params, X0, cfg, rng, n_steps=n_steps)
        except NonFiniteError:
            attempts += b
            diverged += b
            continue
        probs = class_probabilities(forward_logits(params, X))
        for cloud, p in zip(X, probs):
            attempts += 1
            label = int(np.argmax(p))
            conf = float(p[label])
            if conf < confidence_threshold:
                continue
            if target_class is not None and label != target_class:
                continue
            samples.append(GeneratedSample(cloud, label, conf))
            if len(samples) == count:
                break
    exhausted = len(samples) < count
    if exhausted:
        logger.warning("generation budget exhausted: %d of %d samples after %d chains",
                       len(samples), count, attempts)
    return GenerationResult(samples, attempts, exhausted, diverged)


class Trainer:
    """Owns all mutable training state: params, optimizer, buffer, RNG, records."""

    def __init__(
        self,
        config: TrainConfig,
        params: NetworkParams | None = None,
        init_stats: InitStats | None = None,
        record_sink: Callable[[TrainRecord], None] | None = None,
    ):
        self.config = config
        init_seq, train_seq = np.random.SeedSequence(config.seed).spawn(2)
        self.params = params or init_params(
            config.n_classes,
            config.point_widths,
            config.head_widths,
            config.activation,
            config.leaky_slope,
            config.celu_alpha,
            seed=np.random.default_rng(init_seq),
        )
        if self.params.n_classes != config.n_classes:
            raise ContractViolation(
                f"params have {self.params.n_classes} classes, config says {config.n_classes}"
            )
        self.rng = np.random.default_rng(train_seq)
        a = config.adam
        self.opt = Adam(a.lr, a.beta1, a.beta2, a.eps)
        self.buffer = ReplayBuffer(config.buffer_size)
        self.init_stats = init_stats
        self.step = 0
        self.epoch = 0
        self.divergences = 0
        self.records: list[TrainRecord] = []
        self.record_sink = record_sink
        self.class_names: list[str] | None = None
        self._order: np.ndarray | None = None
        self._cursor = 0
        self._t0 = time.perf_counter()

    def _emit(self, rec: TrainRecord) -> TrainRecord:
        self.records.append(rec)
        if self.record_sink is not None:
            self.record_sink(rec)
        return rec

    def sample_negatives(self, batch: int, n: int) -> np.ndarray:
        cfg = self.config.sgld
        X0 = init_chains(self.buffer, cfg, self.init_stats, self.rng, n, batch)
        return run_chain(self.params, X0, cfg, self.rng)

    def train_step(self, clouds: np.ndarray, labels, negatives: np.ndarray | None = None) -> TrainRecord:
        """One joint update on a labeled batch.

        ``negatives`` replaces the SGLD samples when given (used by tests to
        pin the fake batch).
        """
        X = np.asarray(clouds, dtype=np.float64)
        if X.ndim != 3 or len(X) == 0:
            raise ContractViolation(f"expected a non-empty batch (batch, n, 3), got {X.shape}")
        y = np.asarray(labels)
        status = "ok"
        breakdown = None
        try:
            neg = negatives if negatives is not None else self.sample_negatives(len(X), X.shape[1])
            neg = np.array(neg, dtype=np.float64)
            first = []

            def loss_grad(p: NetworkParams):
                b, g = joint_loss_and_grads(p, X, y, neg)
                first.append(b)
                return b.total, g

            new_params, _ = sam_step(self.opt, self.config.sam, self.params, loss_grad)
            breakdown = first[0]
        except NonFiniteError as exc:
            status = "diverged"
            self.divergences += 1
            logger.warning("step %d aborted: %s", self.step, exc)
        else:
            self.params = new_params
            self.buffer.push(neg)
        self.step += 1
        rec = TrainRecord(
            step=self.step,
            epoch=self.epoch,
            status=status,
            l_clf=None if breakdown is None else breakdown.l_clf,
            l_gen=None if breakdown is None else breakdown.l_gen,
            energy_real=None if breakdown is None else breakdown.energy_real,
            energy_fake=None if breakdown is None else breakdown.energy_fake,
            accuracy=None if breakdown is None else breakdown.accuracy,
            lr=self.opt.lr,
            divergences=self.divergences,
            wall_time=time.perf_counter() - self._t0,
        )
        return self._emit(rec)

    def fit(
        self,
        clouds: np.ndarray,
        labels,
        epochs: int | None = None,
        on_epoch_end: Callable[["Trainer"], None] | None = None,
    ) -> "Trainer":
        """Train until ``epochs`` (default ``config.epochs``) epochs are complete.

        Resumes mid-epoch when the trainer was restored from a checkpoint.
        """
        X = np.asarray(clouds, dtype=np.float64)
        y = np.asarray(labels)
        if self.init_stats is None:
            self.init_stats = InitStats.from_clouds(X)
        epochs = self.config.epochs if epochs is None else epochs
        bs = self.config.batch_size
        while self.epoch < epochs:
            if self._order is None:
                self._order = self.rng.permutation(len(X))
                self._cursor = 0
            self.opt.lr = step_decay_lr(
                self.config.adam.lr, self.epoch, self.config.lr_decay, self.config.lr_decay_every
            )
            while self._cursor < len(X):
                idx = self._order[self._cursor:self._cursor + bs]
                self._cursor += len(idx)
                self.train_step(X[idx], y[idx])
            self.epoch += 1
            self._order = None
            if on_epoch_end is not None:
                on_epoch_end(self)
        return self

    def generate(self, count: int, confidence_threshold: float = 0.9, target_class=None,
                 from_buffer: bool = True, **kw) -> GenerationResult:
        return generate_samples(
            self.params, count, self.config.sgld, self.buffer, self.rng,
            confidence_threshold=confidence_threshold, target_class=target_class,
            n_points=kw.pop("n_points", self.buffer.n_points or self.config.n_points),
            from_buffer=from_buffer, init_stats=self.init_stats, **kw,
        )

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path, record_sink=None) -> "Trainer":
        return load_checkpoint(path, record_sink=record_sink)


def save_checkpoint(trainer: Trainer, path) -> None:
    """Write params, optimizer state, buffer, RNG and counters to one ``.npz`` file."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": trainer.config.to_dict(),
        "architecture": trainer.params.architecture(),
        "step": trainer.step,
        "epoch": trainer.epoch,
        "divergences": trainer.divergences,
        "adam_t": trainer.opt.t,
        "adam_lr": trainer.opt.lr,
        "rng_state": trainer.rng.bit_generator.state,
        "init_stats": None if trainer.init_stats is None else asdict(trainer.init_stats),
        "class_names": trainer.class_names,
        "cursor": trainer._cursor,
        "buffer_capacity": trainer.buffer.capacity,
    }
    arrays = {f"param/{k}": v for k, v in trainer.params.tensors.items()}
    arrays.update({f"adam/{k}": v for k, v in trainer.opt.state_arrays().items()})
    arrays["buffer"] = trainer.buffer.entries()
    if trainer._order is not None:
        arrays["order"] = trainer._order
    arrays["__meta__"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, record_sink=None) -> Trainer:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, ValueError, EOFError, OSError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path}: missing checkpoint header")
    meta = json.loads(str(arrays.pop("__meta__")))
    found = (meta.get("format"), meta.get("version"))
    if found != (CHECKPOINT_FORMAT, CHECKPOINT_VERSION):
        raise CheckpointError(
            f"{path}: expected format {CHECKPOINT_FORMAT!r} version {CHECKPOINT_VERSION}, "
            f"found {found[0]!r} version {found[1]}"
        )
    config = TrainConfig.from_dict(meta["config"])
    tensors = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    params = NetworkParams.from_architecture(meta["architecture"], tensors)
    stats = meta["init_stats"]
    trainer = Trainer(
        config,
        params=params,
        init_stats=None if stats is None else InitStats(tuple(stats["mean"]), tuple(stats["std"])),
        record_sink=record_sink,
    )
    trainer.opt.load_state(meta["adam_t"], {k[len("adam/"):]: v for k, v in arrays.items()
                                            if k.startswith("adam/")})
    trainer.opt.lr = meta["adam_lr"]
    trainer.buffer = ReplayBuffer.from_entries(meta["buffer_capacity"], arrays["buffer"])
    trainer.rng.bit_generator.state = meta["rng_state"]
    trainer.step = meta["step"]
    trainer.epoch = meta["epoch"]
    trainer.divergences = meta["divergences"]
    trainer.class_names = meta["class_names"]
    trainer._order = arrays.get("order")
    trainer._cursor = meta["cursor"]
    return trainer
