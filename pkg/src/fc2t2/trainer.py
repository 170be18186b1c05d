"""Parameter initialization, losses, and first-order optimizers.

The layers expose forwards and adjoint JVPs; everything here is the glue
that turns them into training loops: seeded initialization, MAE/MSE losses
with their output tangents, L1 regularization of the weights, and SGD/Adam
updates that keep source locations strictly inside the domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .expansion import SourceSet

DOMAIN_MARGIN = 1e-6  # sources are clipped back to (-1+eps, 1-eps)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-2
    # optional piecewise-constant schedule: list of (start_epoch, lr),
    # overrides learning_rate from each start epoch onward
    lr_schedule: list[tuple[int, float]] = field(default_factory=list)
    epochs: int = 100
    l1_weight: float = 0.0
    init_scheme: str = "uniform"
    init_scale: float = 1e-2
    seed: int = 0
    loss: str = "mae"
    train_positions: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss not in ("mae", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for start, value in sorted(self.lr_schedule):
            if epoch >= start:
                lr = value
        return lr


def init_params(n_sources: int, channels: int, scheme: str = "uniform",
                scale: float = 1e-2, seed: int = 0) -> tuple[SourceSet, float]:
    """Seeded source initialization: p uniform in the open domain, w small.

    Returns (sources, bias); the bias starts at 0 and is trained only by
    layers that use one.
    """
    rng = np.random.default_rng(seed)
    p = rng.uniform(-1.0 + DOMAIN_MARGIN, 1.0 - DOMAIN_MARGIN,
                    (n_sources, 3))
    if scheme == "uniform":
        w = rng.uniform(-scale, scale, (n_sources, channels))
    elif scheme == "zeros":
        w = np.zeros((n_sources, channels))
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return SourceSet(p, w), 0.0


def loss_and_tangent(pred: np.ndarray, target: np.ndarray, loss: str,
                     mask: np.ndarray | None = None
                     ) -> tuple[float, np.ndarray]:
    """Scalar loss over valid entries plus the output tangent d loss/d pred.

    ``mask`` selects valid outputs (e.g. hit pixels for root layers);
    invalid entries contribute zero loss and zero tangent.  An empty valid
    set yields loss 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    diff = pred - target
    if mask is not None:
        diff = np.where(np.reshape(mask, mask.shape + (1,) * (diff.ndim - mask.ndim)),
                        diff, 0.0)
        count = int(np.sum(mask)) * (diff.size // mask.size)
    else:
        count = diff.size
    if count == 0:
        return 0.0, np.zeros_like(diff)
    if loss == "mae":
        value = float(np.sum(np.abs(diff))) / count
        tangent = np.sign(diff) / count
    else:
        value = float(np.sum(diff * diff)) / count
        tangent = 2.0 * diff / count
    return value, tangent


def l1_term(w: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    """lam * sum |w| and its subgradient (0 at 0)."""
    if lam == 0.0:
        return 0.0, np.zeros_like(w)
    return lam * float(np.sum(np.abs(w))), lam * np.sign(w)


class Optimizer:
    """SGD or Adam over (w, p, bias) with domain clipping of p."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def _direction(self, name: str, grad: np.ndarray) -> np.ndarray:
        if self.config.optimizer == "sgd":
            return grad
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        m = self._m.setdefault(name, np.zeros_like(grad))
        v = self._v.setdefault(name, np.zeros_like(grad))
        m += (1 - beta1) * (grad - m)
        v += (1 - beta2) * (grad * grad - v)
        mhat = m / (1 - beta1 ** self.t)
        vhat = v / (1 - beta2 ** self.t)
        return mhat / (np.sqrt(vhat) + eps)

    def step(self, sources: SourceSet, w_bar: np.ndarray,
             p_bar: np.ndarray | None, epoch: int,
             bias: float = 0.0, bias_bar: float | None = None
             ) -> tuple[SourceSet, float]:
        if not np.all(np.isfinite(w_bar)) or (
                p_bar is not None and not np.all(np.isfinite(p_bar))):
            raise FloatingPointError("non-finite gradient in optimizer step")
        self.t += 1
        lr = self.config.lr_at(epoch)
        w = sources.w - lr * self._direction("w", w_bar)
        p = sources.p
        if p_bar is not None and self.config.train_positions:
            p = p - lr * self._direction("p", p_bar)
            p = np.clip(p, -1.0 + DOMAIN_MARGIN, 1.0 - DOMAIN_MARGIN)
        if bias_bar is not None:
            bias = bias - lr * float(self._direction("bias",
                                                     np.array([bias_bar]))[0])
        return SourceSet(p, w), bias
