import hashlib

import numpy as np
import pytest

from modinfuser import tensor as T
from modinfuser.data import PhantomSpec, generate_phantom, split_subjects
from modinfuser.losses import LossWeights, read_loss_csv
from modinfuser.model import Discriminator, MEMode, Translator, load_models
from modinfuser.train import (
    Adam,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    adam_step,
    fit,
    load_training_checkpoint,
    mean_disentanglement,
    run_ablation,
    sample_pairs,
    validation_l1,
)

TINY = dict(width=16, layers=1, heads=2, ffn_mult=2, batch_size=4, lr_g=1e-3, lr_d=1e-4)


@pytest.fixture(scope="module")
def packs():
    pack = generate_phantom(PhantomSpec(seed=2, size=32), n_subjects=5, slices_per_subject=3)
    tr, va, _ = split_subjects(pack, (0.6, 0.4, 0.0), seed=0)
    return tr, va


def csv_rows(path):
    return [line.split(",") for line in path.read_text().splitlines()]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_files(d):
    return {p.name: digest(p) for p in sorted(d.iterdir())}


class TestAdam:
    def test_first_step_closed_form(self):
        p = T.parameter(np.array([1.0, -2.0, 0.5]))
        g = np.array([0.3, -0.1, 0.0])
        opt = Adam({"p": p}, lr=0.01)
        adam_step(opt.params, {"p": g}, opt, 0.01)
        # bias correction makes the first update lr * g / (|g| + eps)
        np.testing.assert_allclose(p.data, [1.0 - 0.01 * 0.3 / (0.3 + 1e-8), -2.0 + 0.01 * 0.1 / (0.1 + 1e-8), 0.5], rtol=1e-15)

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(0)
        grads = [rng.normal(size=4) for _ in range(6)]
        p = T.parameter(np.zeros(4))
        opt = Adam({"p": p}, lr=0.05, beta1=0.8, beta2=0.95)
        x, m, v = np.zeros(4), np.zeros(4), np.zeros(4)
        for t, g in enumerate(grads, 1):
            p.grad = g
            opt.step()
            m = 0.8 * m + 0.2 * g
            v = 0.95 * v + 0.05 * g * g
            x = x - 0.05 * (m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.95**t)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=1e-14)
        assert opt.t == 6

    def test_zero_gradient_is_no_op(self):
        p = T.parameter(np.array([3.0]))
        opt = Adam({"p": p}, lr=1.0)
        opt.step()
        assert p.data[0] == 3.0

    def test_shape_mismatch(self):
        p = T.parameter(np.zeros(3))
        opt = Adam({"p": p}, lr=0.1)
        with pytest.raises(T.ShapeError):
            adam_step(opt.params, {"p": np.zeros(4)}, opt, 0.1)


class TestPairs:
    def test_never_identity(self):
        src, dst = sample_pairs(np.random.default_rng(0), 2000, 4)
        assert np.all(src != dst)
        counts = np.bincount(src * 4 + dst, minlength=16).reshape(4, 4)
        assert np.all(counts[~np.eye(4, dtype=bool)] > 80)


class TestStep:
    def make(self, **kw):
        cfg = TrainConfig(**{**TINY, **kw})
        gen = Translator(cfg.model_config(4), seed=0)
        return Trainer(gen, Discriminator(16, 4, seed=0), cfg)

    def batch(self, packs):
        tr, _ = packs
        return tr.images[:4], np.array([0, 1, 2, 3]), np.array([1, 2, 3, 0])

    def test_report_recombines_exactly(self, packs):
        trainer = self.make()
        r = trainer.step(*self.batch(packs))
        assert r.total_g == r.recombined(trainer.cfg.effective_weights())
        assert all(np.isfinite(v) for v in r.as_dict().values())

    def test_zero_weights_freeze_generator(self, packs):
        trainer = self.make(weights=LossWeights(0, 0, 0, 0, 0))
        before = {k: v.copy() for k, v in trainer.gen.state_dict().items()}
        d_before = {k: v.copy() for k, v in trainer.disc.state_dict().items()}
        r = trainer.step(*self.batch(packs))
        assert r.total_g == 0.0
        for k, v in trainer.gen.state_dict().items():
            np.testing.assert_array_equal(v, before[k])
        assert any(not np.array_equal(v, d_before[k]) for k, v in trainer.disc.state_dict().items())

    def test_fixed_table_constant(self, packs):
        trainer = self.make(mode="consecutive")
        table = trainer.gen.infuser.me_fixed.copy()
        for _ in range(2):
            trainer.step(*self.batch(packs))
        assert trainer.gen.infuser.me_fixed.tobytes() == table.tobytes()

    def test_learnable_table_moves(self, packs):
        trainer = self.make(mode="learnable")
        table = trainer.gen.infuser.me_table.data.copy()
        trainer.step(*self.batch(packs))
        assert not np.array_equal(trainer.gen.infuser.me_table.data, table)

    def test_high_rec_alpha(self):
        cfg = TrainConfig(mode="learnable-high-rec", weights=LossWeights(alpha=3.0))
        assert cfg.effective_weights().alpha == 50.0
        assert TrainConfig(mode="learnable").effective_weights().alpha == 10.0

    def test_nan_aborts(self, packs):
        trainer = self.make()
        images, src, dst = self.batch(packs)
        images = images.copy()
        images[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingDiverged):
            trainer.step(images, src, dst)

    def test_clipping_rescales_gradients(self):
        from modinfuser.train import _clip

        gen = Translator(seed=0, width=16, layers=1, heads=2)
        rng = np.random.default_rng(0)
        for p in gen.parameters():
            p.grad = rng.normal(size=p.shape)
        before = [p.grad.copy() for p in gen.parameters()]
        norm = np.sqrt(sum((g * g).sum() for g in before))
        _clip(gen, norm * 2)
        for p, g in zip(gen.parameters(), before):
            np.testing.assert_array_equal(p.grad, g)
        _clip(gen, 0.5)
        after = np.sqrt(sum((p.grad * p.grad).sum() for p in gen.parameters()))
        assert after == pytest.approx(0.5, rel=1e-12)
        for p, g in zip(gen.parameters(), before):
            np.testing.assert_allclose(p.grad, g * (0.5 / norm), rtol=1e-12)

    def test_disen_detach_changes_update(self, packs):
        a, b = self.make(disen_detach=True), self.make()
        a.step(*self.batch(packs))
        b.step(*self.batch(packs))
        differs = [not np.array_equal(pa.data, pb.data) for (_, pa), (_, pb) in zip(a.gen.named_parameters(), b.gen.named_parameters())]
        assert any(differs)


class TestFit:
    def test_epochs_zero_writes_initial_checkpoint(self, packs, tmp_path):
        tr, va = packs
        res = fit(tr, va, TrainConfig(**TINY, epochs=0), tmp_path)
        assert res.steps == 0
        assert sorted(p.name for p in tmp_path.glob("ckpt_*.mfz")) == ["ckpt_0.mfz"]
        gen, _, _, meta = load_models(tmp_path / "ckpt_0.mfz")
        assert meta["modalities"] == ",".join(tr.modalities)

    def test_artifacts_and_recombination(self, packs, tmp_path):
        tr, va = packs
        cfg = TrainConfig(**TINY, epochs=2)
        res = fit(tr, va, cfg, tmp_path)
        names = {p.name for p in tmp_path.iterdir()}
        assert {"ckpt_0.mfz", "ckpt_1.mfz", "ckpt_2.mfz", "ckpt_best.mfz", "loss.csv", "val.csv", "run_manifest.txt"} <= names
        rows = read_loss_csv(tmp_path / "loss.csv")
        assert [s for s, _ in rows] == list(range(1, res.steps + 1))
        for _, r in rows:
            assert r.total_g == r.recombined(cfg.effective_weights())
        manifest = (tmp_path / "run_manifest.txt").read_text()
        assert "seed=0" in manifest and "mode=single" in manifest
        assert res.best_val == min(v for _, v in res.val_history[1:])

    def test_deterministic(self, packs, tmp_path):
        tr, va = packs
        cfg = TrainConfig(**TINY, epochs=2)
        fit(tr, va, cfg, tmp_path / "a")
        fit(tr, va, cfg, tmp_path / "b")
        assert run_files(tmp_path / "a") == run_files(tmp_path / "b")

    def test_resume_equals_uninterrupted(self, packs, tmp_path):
        tr, va = packs
        fit(tr, va, TrainConfig(**TINY, epochs=2), tmp_path / "full")
        fit(tr, va, TrainConfig(**TINY, epochs=1), tmp_path / "part")
        fit(tr, va, TrainConfig(**TINY, epochs=2), tmp_path / "part", resume=tmp_path / "part" / "ckpt_1.mfz")
        full, part = run_files(tmp_path / "full"), run_files(tmp_path / "part")
        for name in ("ckpt_2.mfz", "ckpt_best.mfz", "loss.csv", "val.csv", "run_manifest.txt"):
            assert full[name] == part[name], name

    def test_resume_restores_optimizer(self, packs, tmp_path):
        tr, va = packs
        fit(tr, va, TrainConfig(**TINY, epochs=1), tmp_path)
        trainer, epoch, step, _ = load_training_checkpoint(tmp_path / "ckpt_1.mfz", TrainConfig(**TINY))
        assert epoch == 1 and trainer.opt_g.t == step == trainer.opt_d.t > 0

    def test_max_steps(self, packs, tmp_path):
        tr, va = packs
        res = fit(tr, va, TrainConfig(**TINY, epochs=50, max_steps=3), tmp_path)
        assert res.steps == 3

    def test_val_every(self, packs, tmp_path):
        tr, va = packs
        res = fit(tr, va, TrainConfig(**TINY, epochs=3, val_every=2), tmp_path)
        assert [e for e, _ in res.val_history] == [0, 2, 3]
        assert [r[0] for r in csv_rows(tmp_path / "val.csv")[1:]] == ["0", "2", "3"]

    def test_cosine_schedule(self, packs, tmp_path):
        cfg = TrainConfig(**TINY, epochs=2, lr_schedule="cosine")
        total = cfg.total_steps(9)
        assert total == 6
        factors = [cfg.lr_factor(s, total) for s in range(total)]
        assert factors[0] == 1.0 and factors[-1] == pytest.approx(0.02, abs=1e-15)
        assert all(a > b for a, b in zip(factors, factors[1:]))
        assert TrainConfig(max_steps=4).total_steps(1000) == 4
        assert TrainConfig().lr_factor(50, 100) == 1.0
        with pytest.raises(ValueError, match="lr_schedule"):
            TrainConfig(lr_schedule="step")

    def test_cosine_resume_matches(self, packs, tmp_path):
        # the schedule depends on the planned length, so resume the same plan from its epoch-1 checkpoint
        tr, va = packs
        cfg = TrainConfig(**TINY, epochs=2, lr_schedule="cosine")
        fit(tr, va, cfg, tmp_path / "full")
        fit(tr, va, cfg, tmp_path / "resumed", resume=tmp_path / "full" / "ckpt_1.mfz")
        assert digest(tmp_path / "full" / "ckpt_2.mfz") == digest(tmp_path / "resumed" / "ckpt_2.mfz")
        full_rows = (tmp_path / "full" / "loss.csv").read_text().splitlines()
        resumed_rows = (tmp_path / "resumed" / "loss.csv").read_text().splitlines()[1:]
        assert resumed_rows == full_rows[-len(resumed_rows):]

    def test_subject_leak_rejected(self, packs, tmp_path):
        tr, _ = packs
        with pytest.raises(ValueError, match="share subjects"):
            fit(tr, tr, TrainConfig(**TINY, epochs=1), tmp_path)

    def test_wall_time_recorded_when_not_deterministic(self, packs, tmp_path):
        tr, va = packs
        fit(tr, va, TrainConfig(**TINY, epochs=1, deterministic=False), tmp_path)
        walls = [float(line.rsplit(",", 1)[1]) for line in (tmp_path / "loss.csv").read_text().splitlines()[1:]]
        assert all(w > 0 for w in walls)


class TestEvaluation:
    def test_validation_l1_matches_loop(self, packs):
        _, va = packs
        gen = Translator(seed=0, width=16, layers=1, heads=2)
        total = []
        with T.no_grad():
            for a in range(4):
                for b in range(4):
                    if a != b:
                        for k in range(len(va)):
                            fake = gen.translate(va.images[k:k + 1, a:a + 1], [b]).data[0, 0]
                            total.append(np.abs(fake - va.images[k, b]).mean())
        assert validation_l1(gen, va) == pytest.approx(np.mean(total), rel=1e-12)

    def test_disentanglement_positive(self, packs):
        _, va = packs
        assert mean_disentanglement(Translator(seed=0, width=16, layers=1, heads=2), va) > 0

    def test_ablation_csv(self, packs, tmp_path):
        tr, va = packs
        rows = run_ablation(tr, va, TrainConfig(**TINY, epochs=1), [MEMode.SINGLE, MEMode.LEARNABLE], seeds=(0,), out_dir=tmp_path)
        assert [r["mode"] for r in rows] == ["single", "learnable"]
        lines = (tmp_path / "ablation.csv").read_text().splitlines()
        assert lines[0].startswith("mode,seed,val_l1") and len(lines) == 3
