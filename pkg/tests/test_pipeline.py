"""Detector assembly, the training loop, and its determinism contracts."""

import numpy as np
import pytest

from artext import tensor as T
from artext.config import make_config
from artext.dataio import load_checkpoint, save_checkpoint, synth_generate, synth_sample
from artext.errors import ConfigError, NumericError
from artext.optim import Adam
from artext.pipeline import (
    Detector,
    Trainer,
    detect,
    normalize_image,
    pad_to_multiple,
    train_step,
)
from artext.tensor import Tensor


def tiny_cfg(**kw):
    base = dict(image_size=64, batch=4, epochs=2, seed=0, lr0=1e-3,
                val_every=0, checkpoint_every=0, refine_iterations=2)
    base.update(kw)
    return make_config(**base)


class TestPreprocessing:
    def test_normalize_range_and_layout(self):
        img = np.zeros((4, 6, 3), dtype=np.uint8)
        img[0, 0] = (0, 128, 255)
        x = normalize_image(img)
        assert x.shape == (3, 4, 6)
        assert x.dtype == np.float32
        assert x[0, 0, 0] == pytest.approx(-1.0)
        assert x[2, 0, 0] == pytest.approx(1.0)
        assert abs(x[1, 0, 0]) < 0.01

    def test_pad_to_multiple(self):
        img = np.arange(100 * 50 * 3, dtype=np.uint8).reshape(100, 50, 3)
        out = pad_to_multiple(img)
        assert out.shape == (128, 64, 3)
        assert np.array_equal(out[:100, :50], img)
        # edge replication, not zeros
        assert np.array_equal(out[100:, :50], np.broadcast_to(img[99], (28, 50, 3)))

    def test_pad_noop_when_aligned(self):
        img = np.zeros((64, 32, 3), dtype=np.uint8)
        assert pad_to_multiple(img) is img


class TestDetector:
    def test_forward_shapes(self):
        model = Detector(tiny_cfg())
        fused, fields = model.fields(Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32)))
        assert fused.shape == (1, 64, 16, 16)
        assert fields.cls.shape == (1, 2, 16, 16)
        assert fields.dist.shape == (1, 1, 16, 16)
        assert fields.dir_raw.shape == (1, 2, 16, 16)

    def test_parameter_names_stable_across_switches(self):
        # checkpoints must interchange between ablation configs
        names = None
        for cfg in [tiny_cfg(), tiny_cfg(use_rcca=False), tiny_cfg(use_rfpn=False),
                    tiny_cfg(use_rfrm=False), tiny_cfg(use_bdm=False),
                    tiny_cfg(cycles=0)]:
            got = [n for n, _ in Detector(cfg).named_parameters()]
            if names is None:
                names = got
            assert got == names

    def test_switches_change_execution(self):
        x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 64, 64)).astype(np.float32))
        rng_seed = 7
        full = Detector(tiny_cfg(seed=rng_seed))
        no_att = Detector(tiny_cfg(seed=rng_seed, use_rcca=False))
        no_fpn = Detector(tiny_cfg(seed=rng_seed, use_rfpn=False))
        base = full(x).cls.data
        assert not np.allclose(no_att(x).cls.data, base)
        assert not np.allclose(no_fpn(x).cls.data, base)

    def test_checkpoint_crosses_ablation_configs(self, tmp_path):
        a = Detector(tiny_cfg(seed=3))
        save_checkpoint(a, tmp_path / "a.ckpt")
        b = Detector(tiny_cfg(seed=8, use_rcca=False, use_rfrm=False))
        load_checkpoint(tmp_path / "a.ckpt", b)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert np.array_equal(pa.data, pb.data)


def _train_batch(n=2, size=64, seed=0):
    out = []
    for i in range(n):
        s = synth_sample(np.random.default_rng([seed, i]), size, "easy")
        out.append(s)
    return out


class TestTrainStep:
    def test_returns_finite_components(self):
        cfg = tiny_cfg()
        model = Detector(cfg)
        opt = Adam(list(model.parameters()), lr=cfg.lr0)
        batch = _train_batch()
        loss, parts, fallbacks = train_step(model, opt, batch, cfg)
        assert np.isfinite(loss)
        for key in ("cls", "dist", "dir", "bp"):
            assert key in parts and np.isfinite(parts[key])
        assert fallbacks >= 0

    def test_loss_decreases_on_fixed_batch(self):
        cfg = tiny_cfg()
        model = Detector(cfg)
        opt = Adam(list(model.parameters()), lr=1e-3)
        batch = _train_batch()
        first, *_ = train_step(model, opt, batch, cfg)
        last = first
        for _ in range(9):
            last, *_ = train_step(model, opt, batch, cfg)
        assert last < first

    def test_no_bdm_never_reports_fallbacks(self):
        cfg = tiny_cfg(use_bdm=False)
        model = Detector(cfg)
        opt = Adam(list(model.parameters()), lr=cfg.lr0)
        for _ in range(3):
            _, _, fallbacks = train_step(model, opt, _train_batch(), cfg)
            assert fallbacks == 0


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinydata")
    manifest, _ = synth_generate(root, seed=4, count=6, size=64, difficulty="easy")
    return manifest


class TestTrainer:
    def test_two_epoch_smoke(self, tiny_dataset, tmp_path):
        cfg = tiny_cfg(train_manifest=tiny_dataset, out_dir=str(tmp_path / "run"),
                       epochs=2)
        tr = Trainer(cfg)
        summary = tr.run()
        assert summary["epochs_run"] == 2
        assert np.isfinite(summary["last_loss"])
        log = (tmp_path / "run" / "train.log").read_text()
        assert "epoch 2/2" in log
        assert "effective config" in log
        assert "fallbacks=" in log

    def test_missing_manifest_config_error(self):
        with pytest.raises(ConfigError, match="train_manifest"):
            Trainer(tiny_cfg())

    def test_split_audit_rejects_overlap(self, tiny_dataset, tmp_path):
        cfg = tiny_cfg(train_manifest=tiny_dataset, val_manifest=tiny_dataset,
                       out_dir=str(tmp_path / "run"))
        with pytest.raises(ConfigError, match="share"):
            Trainer(cfg)

    def test_non_finite_loss_aborts_with_context(self, tiny_dataset, tmp_path):
        cfg = tiny_cfg(train_manifest=tiny_dataset, out_dir=str(tmp_path / "run"),
                       epochs=1)
        tr = Trainer(cfg)
        w = tr.model.head.proj.weight
        w.data[0, 0, 0, 0] = np.nan
        with pytest.raises(NumericError, match="epoch 0 batch 0.*seed 0"):
            tr.run()
        assert (tmp_path / "run" / "diverged.ckpt").exists()

    def test_resume_is_bit_exact(self, tiny_dataset, tmp_path):
        # uninterrupted 4 epochs
        cfg_a = tiny_cfg(train_manifest=tiny_dataset, out_dir=str(tmp_path / "a"),
                         epochs=4, checkpoint_every=2)
        tr_a = Trainer(cfg_a)
        tr_a.run()

        # 4 epochs with a stop/reload after epoch 2
        cfg_b = tiny_cfg(train_manifest=tiny_dataset, out_dir=str(tmp_path / "b"),
                         epochs=4, checkpoint_every=2)
        tr_b1 = Trainer(cfg_b)
        tr_b1.cfg.epochs = 2
        tr_b1.run()
        tr_b2 = Trainer(tiny_cfg(train_manifest=tiny_dataset,
                                 out_dir=str(tmp_path / "b2"), epochs=4,
                                 checkpoint_every=2))
        tr_b2.resume(tmp_path / "b" / "final.ckpt")
        assert tr_b2.start_epoch == 2
        tr_b2.run()

        for (n, pa), (_, pb) in zip(tr_a.model.named_parameters(),
                                    tr_b2.model.named_parameters()):
            assert np.array_equal(pa.data, pb.data), n

    def test_identical_runs_identical_checkpoints(self, tiny_dataset, tmp_path):
        blobs = []
        for d in ("r1", "r2"):
            cfg = tiny_cfg(train_manifest=tiny_dataset, out_dir=str(tmp_path / d),
                           epochs=2)
            Trainer(cfg).run()
            blobs.append((tmp_path / d / "final.ckpt").read_bytes())
        assert blobs[0] == blobs[1]


class TestDetect:
    def test_blank_image_zero_head_no_detections(self):
        model = Detector(tiny_cfg())
        for prm in model.head.proj.parameters():
            prm.zero_()
        img = np.full((64, 64, 3), 170, dtype=np.uint8)
        assert detect(model, img) == []

    def test_unaligned_image_accepted(self):
        model = Detector(tiny_cfg())
        for prm in model.head.proj.parameters():
            prm.zero_()
        img = np.full((50, 70, 3), 80, dtype=np.uint8)
        assert detect(model, img) == []

    def test_deterministic(self):
        model = Detector(tiny_cfg(seed=2))
        img = (np.random.default_rng(0).integers(0, 256, (64, 64, 3))
               .astype(np.uint8))
        a = detect(model, img)
        b = detect(model, img)
        assert len(a) == len(b)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.points, pb.points)
            assert pa.score == pb.score
