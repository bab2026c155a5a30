"""Adversarial training: Adam, the alternating D/G step, epoch loop with checkpoints, ablations."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import SlicePack
from .layers import Module
from .losses import (
    LossLog,
    LossReport,
    LossWeights,
    l_adv_d,
    l_adv_g,
    l_aux,
    l_cyc,
    l_disen,
    l_rec,
    total_generator_loss,
)
from .model import Discriminator, MEMode, ModelConfig, Translator, load_models, save_models

log = logging.getLogger(__name__)

HIGH_REC_ALPHA = 50.0
LR_SCHEDULES = ("constant", "cosine")
# cosine decay ends at this fraction of the base learning rates
COSINE_FLOOR = 0.02


class TrainingDiverged(RuntimeError):
    """A loss term became NaN or infinite."""


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 24
    lr_g: float = 1e-4
    lr_d: float = 1e-5
    weights: LossWeights = field(default_factory=LossWeights)
    mode: MEMode = MEMode.SINGLE
    layers: int = 4
    width: int = 64
    heads: int = 4
    ffn_mult: int = 4
    me_classic: bool = False
    seed: int = 0
    checkpoint_every: int = 1
    val_every: int = 1
    lr_schedule: str = "constant"
    disen_detach: bool = False
    clip_norm: float | None = None
    max_steps: int | None = None
    # zero the wall-time column so logs are byte-reproducible
    deterministic: bool = True

    def __post_init__(self):
        self.mode = MEMode(self.mode)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.checkpoint_every < 1 or self.val_every < 1:
            raise ValueError("checkpoint_every and val_every must be >= 1")

    def effective_weights(self) -> LossWeights:
        if self.mode is MEMode.LEARNABLE_HIGH_REC:
            return replace(self.weights, alpha=HIGH_REC_ALPHA)
        return self.weights

    def total_steps(self, n_train: int) -> int:
        per_epoch = -(-n_train // self.batch_size)
        total = self.epochs * per_epoch
        return total if self.max_steps is None else min(total, self.max_steps)

    def lr_factor(self, step: int, total: int) -> float:
        """Multiplier on both learning rates for 0-based ``step`` out of ``total``."""
        if self.lr_schedule == "constant" or total <= 1:
            return 1.0
        return COSINE_FLOOR + (1.0 - COSINE_FLOOR) * 0.5 * (1.0 + math.cos(math.pi * step / (total - 1)))

    def model_config(self, modalities: int) -> ModelConfig:
        return ModelConfig(
            width=self.width,
            layers=self.layers,
            modalities=modalities,
            heads=self.heads,
            ffn_mult=self.ffn_mult,
            mode=self.mode,
            me_classic=self.me_classic,
        )

    def describe(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            if k == "weights":
                out.update({f"weights.{wk}": repr(wv) for wk, wv in v.items()})
            else:
                out[k] = v.value if isinstance(v, MEMode) else v if isinstance(v, str) else repr(v)
        return out


class Adam:
    """Bias-corrected Adam over a fixed, named parameter set."""

    def __init__(self, params: dict[str, T.Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        adam_step(self.params, grads, self, self.lr)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.m.{k}": v for k, v in self.m.items()}
        out.update({f"{prefix}.v.{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, prefix: str, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = arrays[f"{prefix}.m.{k}"].copy()
            self.v[k] = arrays[f"{prefix}.v.{k}"].copy()
        self.t = t


def adam_step(params, grads, state: Adam, lr: float) -> None:
    """In-place Adam update of ``params`` (name -> Tensor) from ``grads`` (name -> array)."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.data.shape:
            raise T.ShapeError(f"adam: gradient shape {g.shape} != parameter {k} shape {p.data.shape}")
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@contextlib.contextmanager
def frozen(module: Module):
    """Temporarily stop ``module``'s parameters from recording gradients."""
    params = module.parameters()
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


def _clip(module: Module, max_norm: float | None) -> None:
    if not max_norm:
        return
    params = [p for p in module.parameters() if p.grad is not None]
    total = np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if total > max_norm:
        for p in params:
            p.grad = p.grad * (max_norm / total)


def _check_finite(**terms) -> None:
    for name, value in terms.items():
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss term {name} is {value}")


def sample_pairs(rng: np.random.Generator, n: int, modalities: int) -> tuple[np.ndarray, np.ndarray]:
    """Source modality uniform; target uniform over the other ``modalities - 1``."""
    src = rng.integers(0, modalities, size=n)
    dst = (src + rng.integers(1, modalities, size=n)) % modalities
    return src, dst


@dataclass
class Trainer:
    gen: Translator
    disc: Discriminator
    cfg: TrainConfig
    opt_g: Adam = None
    opt_d: Adam = None
    modalities: tuple[str, ...] = ()

    def __post_init__(self):
        if self.opt_g is None:
            self.opt_g = Adam(dict(self.gen.named_parameters()), self.cfg.lr_g)
        if self.opt_d is None:
            self.opt_d = Adam(dict(self.disc.named_parameters()), self.cfg.lr_d)

    def step(self, images: np.ndarray, src: np.ndarray, dst: np.ndarray) -> LossReport:
        return train_step(images, src, dst, self.gen, self.disc, self.opt_g, self.opt_d, self.cfg)


def train_step(images, src, dst, gen: Translator, disc: Discriminator, opt_g: Adam, opt_d: Adam, cfg: TrainConfig) -> LossReport:
    """One discriminator update followed by one translator update.

    ``images`` is ``[B, M, H, W]``; ``src``/``dst`` give each sample's source
    and target modality.
    """
    w = cfg.effective_weights()
    idx = np.arange(images.shape[0])
    x = T.Tensor(images[idx, src][:, None])
    x_y = T.Tensor(images[idx, dst][:, None])

    # translator forward (taped); reused detached for the discriminator update
    f_x = gen.encode(x)
    fake = gen.decode(gen.infuse(f_x, dst))
    f_fake = gen.encode(fake)
    cycled = gen.decode(gen.infuse(f_fake, src))

    # discriminator: real x labelled m_x, detached fake labelled m_y
    real_logit, real_aux = disc(x)
    fake_logit, fake_aux = disc(fake.detach())
    adv_d = l_adv_d(real_logit, fake_logit)
    aux_d = l_aux(real_aux, src) + l_aux(fake_aux, dst)
    loss_d = adv_d + w.lambda2 * aux_d
    _check_finite(adv_d=adv_d.item(), aux_d=aux_d.item())
    disc.zero_grad()
    T.backward(loss_d)
    _clip(disc, cfg.clip_norm)
    opt_d.step()

    # translator: fresh pass through the updated discriminator
    with frozen(disc):
        g_logit, g_aux = disc(fake)
    rec = l_rec(x_y, fake)
    disen = l_disen(f_x, f_fake, detach=cfg.disen_detach)
    cyc = l_cyc(x, cycled)
    adv_g = l_adv_g(g_logit)
    aux_g = l_aux(g_aux, dst)
    total = total_generator_loss(rec, disen, cyc, adv_g, aux_g, w)
    _check_finite(rec=rec.item(), disen=disen.item(), cyc=cyc.item(), adv_g=adv_g.item(), aux_g=aux_g.item())
    gen.zero_grad()
    T.backward(total)
    _clip(gen, cfg.clip_norm)
    opt_g.step()

    return LossReport(
        rec=rec.item(),
        disen=disen.item(),
        cyc=cyc.item(),
        adv_g=adv_g.item(),
        aux_g=aux_g.item(),
        total_g=total.item(),
        adv_d=adv_d.item(),
        aux_d=aux_d.item(),
    )


def validation_l1(gen: Translator, pack: SlicePack, batch_size: int = 64) -> float:
    """Mean L1 over every directed modality pair of ``pack``."""
    m = pack.n_modalities
    total, count = 0.0, 0
    with T.no_grad():
        for a in range(m):
            for b in range(m):
                if a == b:
                    continue
                for start in range(0, len(pack), batch_size):
                    x = pack.images[start:start + batch_size, a:a + 1]
                    fake = gen.translate(x, np.full(x.shape[0], b)).data
                    total += float(np.abs(fake[:, 0] - pack.images[start:start + batch_size, b]).sum())
                    count += fake[:, 0].size
    return total / count


def mean_disentanglement(gen: Translator, pack: SlicePack, seed: int = 0, batch_size: int = 64) -> float:
    """Mean ``|f_x - f_translated|`` over ``pack`` with random directed pairs."""
    rng = np.random.default_rng([seed, 7])
    src, dst = sample_pairs(rng, len(pack), pack.n_modalities)
    vals = []
    with T.no_grad():
        for start in range(0, len(pack), batch_size):
            sl = slice(start, start + batch_size)
            idx = np.arange(start, min(start + batch_size, len(pack)))
            x = pack.images[idx, src[sl]][:, None]
            f = gen.encode(x)
            fake = gen.decode(gen.infuse(f, dst[sl]))
            vals.append(np.abs(f.data - gen.encode(fake).data).mean(axis=(1, 2, 3)))
    return float(np.concatenate(vals).mean())


def _ckpt_meta(epoch: int, step: int, trainer: Trainer, best_val: float, val_l1: float | None) -> dict[str, str]:
    meta = {
        "epoch": str(epoch),
        "step": str(step),
        "opt_g_t": str(trainer.opt_g.t),
        "opt_d_t": str(trainer.opt_d.t),
        "best_val": repr(float(best_val)),
    }
    if trainer.modalities:
        meta["modalities"] = ",".join(trainer.modalities)
    if val_l1 is not None:
        meta["val_l1"] = repr(float(val_l1))
    meta.update({f"cfg.{k}": v for k, v in trainer.cfg.describe().items()})
    return meta


def save_training_checkpoint(path, trainer: Trainer, epoch: int, step: int, best_val: float, val_l1: float | None = None) -> None:
    extra = trainer.opt_g.state_arrays("optG")
    extra.update(trainer.opt_d.state_arrays("optD"))
    save_models(path, trainer.gen, trainer.disc, extra, _ckpt_meta(epoch, step, trainer, best_val, val_l1))


def load_training_checkpoint(path, cfg: TrainConfig) -> tuple[Trainer, int, int, float]:
    gen, disc, rest, meta = load_models(path)
    trainer = Trainer(gen, disc, cfg)
    if any(k.startswith("optG.") for k in rest):
        trainer.opt_g.load_arrays("optG", rest, int(meta.get("opt_g_t", 0)))
        trainer.opt_d.load_arrays("optD", rest, int(meta.get("opt_d_t", 0)))
    return trainer, int(meta.get("epoch", 0)), int(meta.get("step", 0)), float(meta.get("best_val", "inf"))


@dataclass
class FitResult:
    trainer: Trainer
    epochs_done: int
    steps: int
    best_val: float
    val_history: list[tuple[int, float]]
    out_dir: Path


def fit(train: SlicePack, val: SlicePack | None, cfg: TrainConfig, out_dir, resume=None, notes: dict[str, str] | None = None) -> FitResult:
    """Epoch loop with periodic validation L1, best-val and periodic checkpoints.

    Writes ``loss.csv``, ``val.csv``, ``run_manifest.txt``, ``ckpt_{epoch}.mfz``
    and ``ckpt_best.mfz`` into ``out_dir``. ``resume`` continues from a
    checkpoint written by a previous call with the same config. ``notes`` are
    extra ``key=value`` lines for the manifest.
    """
    if len(train) == 0:
        raise ValueError("fit: empty training pack")
    if val is not None and set(train.subject_ids()) & set(val.subject_ids()):
        raise ValueError("fit: training and validation packs share subjects")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m = train.n_modalities

    if resume is not None:
        trainer, start_epoch, step, best_val = load_training_checkpoint(resume, cfg)
        trainer.modalities = tuple(train.modalities)
    else:
        mcfg = cfg.model_config(m)
        trainer = Trainer(Translator(mcfg, seed=cfg.seed), Discriminator(cfg.width, m, seed=cfg.seed), cfg,
                          modalities=tuple(train.modalities))
        start_epoch, step, best_val = 0, 0, float("inf")

    _write_manifest(out / "run_manifest.txt", cfg, train, val, notes)
    val_history: list[tuple[int, float]] = []
    if resume is None:
        v0 = validation_l1(trainer.gen, val) if val is not None and len(val) else None
        save_training_checkpoint(out / "ckpt_0.mfz", trainer, 0, 0, best_val, v0)
        if v0 is not None:
            val_history.append((0, v0))

    loss_log = LossLog(out / "loss.csv", append=resume is not None)
    val_fh = open(out / "val.csv", "a" if resume is not None else "w", newline="")
    val_writer = csv.writer(val_fh)
    if resume is None:
        val_writer.writerow(["epoch", "val_l1"])
        if val_history:
            val_writer.writerow([0, repr(val_history[0][1])])
    epoch = start_epoch
    total = cfg.total_steps(len(train))
    try:
        while epoch < cfg.epochs and (cfg.max_steps is None or step < cfg.max_steps):
            epoch += 1
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(train))
            for start in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                idx = np.sort(order[start:start + cfg.batch_size])
                src, dst = sample_pairs(rng, len(idx), m)
                factor = cfg.lr_factor(step, total)
                trainer.opt_g.lr, trainer.opt_d.lr = cfg.lr_g * factor, cfg.lr_d * factor
                t0 = time.perf_counter()
                report = trainer.step(train.images[idx], src, dst)
                step += 1
                wall = 0.0 if cfg.deterministic else (time.perf_counter() - t0) * 1e3
                loss_log.write(step, report, wall)
            last = epoch == cfg.epochs or (cfg.max_steps is not None and step >= cfg.max_steps)
            due = epoch % cfg.val_every == 0 or last
            val_l1 = validation_l1(trainer.gen, val) if due and val is not None and len(val) else None
            if val_l1 is not None:
                val_history.append((epoch, val_l1))
                val_writer.writerow([epoch, repr(val_l1)])
                val_fh.flush()
                if val_l1 < best_val:
                    best_val = val_l1
                    save_training_checkpoint(out / "ckpt_best.mfz", trainer, epoch, step, best_val, val_l1)
            log.info("epoch %d step %d val_l1 %s", epoch, step, val_l1)
            if epoch % cfg.checkpoint_every == 0 or last:
                save_training_checkpoint(out / f"ckpt_{epoch}.mfz", trainer, epoch, step, best_val, val_l1)
    finally:
        loss_log.close()
        val_fh.close()
    return FitResult(trainer, epoch, step, best_val, val_history, out)


def _write_manifest(path: Path, cfg: TrainConfig, train: SlicePack, val: SlicePack | None, notes=None) -> None:
    lines = [f"{k}={v}" for k, v in cfg.describe().items()]
    lines += [f"{k}={v}" for k, v in (notes or {}).items()]
    lines.append(f"train_slices={len(train)}")
    lines.append(f"train_subjects={','.join(train.subject_ids())}")
    if val is not None:
        lines.append(f"val_slices={len(val)}")
        lines.append(f"val_subjects={','.join(val.subject_ids())}")
    lines.append(f"modalities={','.join(train.modalities)}")
    path.write_text("\n".join(lines) + "\n")


ABLATION_HEADER = ["mode", "seed", "val_l1", "l1x1000", "psnr", "ssim", "msssim"]


def run_ablation(train: SlicePack, val: SlicePack, base: TrainConfig, modes, seeds=(0,), out_dir="ablation") -> list[dict]:
    """Train each ME mode under the same seed and budget; one row per (mode, seed)."""
    from .metrics import evaluate_pack

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in seeds:
        for mode in modes:
            mode = MEMode(mode)
            cfg = replace(base, mode=mode, seed=seed)
            res = fit(train, val, cfg, out / f"{mode.value}_seed{seed}")
            report = evaluate_pack(res.trainer.gen, val)
            g = report.grand()
            rows.append(
                {
                    "mode": mode.value,
                    "seed": seed,
                    "val_l1": validation_l1(res.trainer.gen, val),
                    "l1x1000": g["l1x1000"][0],
                    "psnr": g["psnr"][0],
                    "ssim": g["ssim"][0],
                    "msssim": g["msssim"][0],
                }
            )
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return rows
