"""Training objectives for the translator and the discriminator."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0  # reconstruction
    beta: float = 1.0  # disentanglement
    gamma: float = 1.0  # cycle
    lambda1: float = 0.25  # adversarial
    lambda2: float = 0.25  # auxiliary classification

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ, {a.shape} vs {b.shape}")


def mean_abs(a, b, op: str = "mean_abs") -> Tensor:
    a, b = T.as_tensor(a), T.as_tensor(b)
    _check_same(op, a, b)
    return T.mean(T.abs_(a - b))


def l_rec(x_y, fake_y) -> Tensor:
    """L1 between the ground-truth target slice and its synthesis."""
    return mean_abs(x_y, fake_y, "l_rec")


def l_disen(f_x, f_fake, detach: bool = False) -> Tensor:
    """L1 between the features of a source slice and of its translation.

    With ``detach`` the translated branch is treated as a constant.
    """
    f_fake = T.as_tensor(f_fake)
    if detach:
        f_fake = f_fake.detach()
    return mean_abs(f_x, f_fake, "l_disen")


def l_cyc(x, cycled) -> Tensor:
    return mean_abs(x, cycled, "l_cyc")


def l_adv_d(real_logit, fake_logit) -> Tensor:
    """Discriminator BCE: ``-log sigmoid(real) - log(1 - sigmoid(fake))``, batch-averaged."""
    real_logit, fake_logit = T.as_tensor(real_logit), T.as_tensor(fake_logit)
    return T.mean(T.softplus(-real_logit)) + T.mean(T.softplus(fake_logit))


def l_adv_g(fake_logit) -> Tensor:
    """Non-saturating generator loss ``-log sigmoid(fake)``."""
    return T.mean(T.softplus(-T.as_tensor(fake_logit)))


def l_aux(modality_logits, labels) -> Tensor:
    """Cross-entropy ``-log softmax(logits)[label]`` averaged over the batch.

    Accepts a single logit vector ``[M]`` with an integer label, or ``[B, M]``
    with ``B`` labels.
    """
    logits = T.as_tensor(modality_logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, m = logits.shape
    if m < 2:
        raise ValueError(f"need at least two modality logits, got {m}")
    if labels.size != b:
        raise ShapeError(f"l_aux: {labels.size} labels for {b} logit rows")
    if labels.min() < 0 or labels.max() >= m:
        raise IndexError(f"l_aux: label out of range [0, {m}): {labels}")
    logp = T.log_softmax(logits, axis=-1)
    return -T.mean(logp[np.arange(b), labels])


def total_generator_loss(rec, disen, cyc, adv, aux, weights: LossWeights = LossWeights()):
    """``alpha*rec + beta*disen + gamma*cyc + lambda1*adv + lambda2*aux``.

    Works on tensors or plain floats; the summation order is fixed so a float
    recombination of logged parts reproduces the taped total bit for bit.
    """
    w = weights
    return w.alpha * rec + w.beta * disen + w.gamma * cyc + w.lambda1 * adv + w.lambda2 * aux


@dataclass
class LossReport:
    rec: float
    disen: float
    cyc: float
    adv_g: float
    aux_g: float
    total_g: float
    adv_d: float
    aux_d: float

    def recombined(self, weights: LossWeights) -> float:
        return total_generator_loss(self.rec, self.disen, self.cyc, self.adv_g, self.aux_g, weights)

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


LOSS_FIELDS = [f.name for f in fields(LossReport)]
CSV_HEADER = ["step", *LOSS_FIELDS, "wall_ms"]


class LossLog:
    """Append-only CSV of per-step loss reports."""

    def __init__(self, path, append: bool = False):
        self.path = path
        exists = append and _nonempty(path)
        self._fh = open(path, "a" if append else "w", newline="")
        self._writer = csv.writer(self._fh)
        if not exists:
            self._writer.writerow(CSV_HEADER)

    def write(self, step: int, report: LossReport, wall_ms: float) -> None:
        self._writer.writerow([step, *(repr(float(v)) for v in report.as_dict().values()), f"{wall_ms:.3f}"])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _nonempty(path) -> bool:
    try:
        with open(path) as fh:
            return bool(fh.readline())
    except FileNotFoundError:
        return False


def read_loss_csv(path) -> list[tuple[int, LossReport]]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((int(row["step"]), LossReport(**{k: float(row[k]) for k in LOSS_FIELDS})))
    return rows
