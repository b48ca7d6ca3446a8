import json

import pytest
import torch

from edgestereo import data
from edgestereo.errors import CheckpointVersionError, ConfigError, CorruptDataError, DivergenceError
from edgestereo.losses import LossWeights
from edgestereo.model import NetConfig, init_model
from edgestereo.train import (
    CHECKPOINT_MAGIC,
    Trainer,
    TrainConfig,
    fit,
    load_checkpoint,
    read_log,
    save_checkpoint,
)
from toydata import real_image, synthetic_tuple

NET = NetConfig(
    base_channels=4,
    residual_blocks=1,
    discriminator_layers=2,
    discriminator_base_channels=4,
    discriminator_max_channels=8,
)
SIZE = 16


def sources(n_a=4, n_b=3):
    a = data.InMemorySource([synthetic_tuple(i, SIZE, SIZE, max_disp=3) for i in range(n_a)], "synthetic")
    b = data.InMemorySource([real_image(i, SIZE, SIZE) for i in range(n_b)], "real")
    return a, b


def one_batch(seed=0):
    return data.Batch.build([synthetic_tuple(seed, SIZE, SIZE, max_disp=3)], [real_image(seed, SIZE, SIZE)])


def trainer(**kw):
    kw.setdefault("lr", 1e-3)
    return Trainer.create(NET, TrainConfig(**kw))


def test_config_problems_listed_together():
    cfg = TrainConfig(epochs=0, batch_size=-2, beta1=1.5, lr=-1, weights=LossWeights(cycle=-3))
    probs = cfg.problems()
    assert len(probs) == 5
    with pytest.raises(ConfigError):
        Trainer.create(NET, cfg)
    assert TrainConfig.from_dict(TrainConfig(crop=(8, 8)).to_dict()) == TrainConfig(crop=(8, 8))
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epoch": 3})


def test_step_deterministic():
    batch = one_batch()
    r1 = trainer().train_step(batch)
    r2 = trainer().train_step(batch)
    assert r1.log_entry() == r2.log_entry()


def test_step_records_finite_and_consistent():
    t = trainer()
    for _ in range(3):
        rec = t.train_step(one_batch())
        assert rec.losses.consistent(t.cfg.weights)
        assert all(v == v and abs(v) < float("inf") for v in rec.losses.to_dict().values())
    assert t.step == 3 and t.styles_frozen()


def test_frozen_discriminator_untouched_by_generator_step():
    t = trainer(weights=LossWeights(adversarial=0.0))
    t.opt_d.step = lambda *a, **k: None
    d_before = [p.detach().clone() for p in t.model.discriminator_parameters()]
    g_before = [p.detach().clone() for p in t.model.generator_parameters()]
    t.train_step(one_batch())
    assert all(torch.equal(a, b) for a, b in zip(d_before, t.model.discriminator_parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(g_before, t.model.generator_parameters()))


def test_discriminator_step_leaves_generator():
    t = trainer()
    t.opt_g.step = lambda *a, **k: None
    g_before = [p.detach().clone() for p in t.model.generator_parameters()]
    d_before = [p.detach().clone() for p in t.model.discriminator_parameters()]
    t.train_step(one_batch())
    assert all(torch.equal(a, b) for a, b in zip(g_before, t.model.generator_parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(d_before, t.model.discriminator_parameters()))


def test_ablation_without_warp_has_zero_warp():
    a, b = sources()
    t = trainer(use_edges=False, use_warp=False, epochs=2, batch_size=2)
    recs = fit(t, data.BatchStream(a, b, 2, seed=0))
    assert len(recs) == 4 and all(r.losses.warp == 0 for r in recs)


def test_edges_change_the_forward():
    batch = one_batch()
    on, off = trainer(), trainer(use_edges=False)
    assert not torch.equal(on.forward_generator(batch)["x_ab"], off.forward_generator(batch)["x_ab"])


def test_non_finite_aborts():
    batch = one_batch()
    batch.real[0, 0, 0, 0] = float("nan")
    with pytest.raises(DivergenceError):
        trainer().train_step(batch)


def test_fit_step_count():
    a, b = sources(8, 3)
    t = trainer(epochs=1, batch_size=4)
    assert len(fit(t, data.BatchStream(a, b, 4, seed=0))) == 2


# ------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_bytes(tmp_path):
    t = trainer()
    t.train_step(one_batch())
    save_checkpoint(t, tmp_path / "a.ckpt")
    ck = load_checkpoint(tmp_path / "a.ckpt")
    for k, v in t.model.state_dict().items():
        assert torch.equal(v, ck.model.state_dict()[k])
    assert ck.step == 1 and ck.train == t.cfg
    save_checkpoint(Trainer.from_checkpoint(ck), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_model_only_checkpoint(tmp_path):
    m = init_model(NET, 5)
    save_checkpoint(m, tmp_path / "m.ckpt")
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck.train is None and ck.model.seed == 5
    assert torch.equal(ck.model.style_b, m.style_b)
    with pytest.raises(ConfigError):
        Trainer.from_checkpoint(ck)


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "c.ckpt"
    save_checkpoint(init_model(NET, 0), p)
    raw = p.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"X" + raw[1:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "ver.ckpt").write_bytes(CHECKPOINT_MAGIC + (99).to_bytes(4, "little") + raw[12:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "ver.ckpt")
    (tmp_path / "cut.ckpt").write_bytes(raw[:-7])
    with pytest.raises(CorruptDataError):
        load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "head.ckpt").write_bytes(raw[:15])
    with pytest.raises(CorruptDataError):
        load_checkpoint(tmp_path / "head.ckpt")


# ------------------------------------------------------------------ replay


def run(tmp, stop_after=None, resume_from=None, workers=0, **kw):
    a, b = sources()
    cfg = TrainConfig(lr=1e-3, epochs=3, batch_size=2, checkpoint_every=2, workers=workers, **kw)
    t = Trainer.from_checkpoint(load_checkpoint(resume_from), cfg) if resume_from else Trainer(init_model(NET, 0), cfg)
    fit(t, data.BatchStream(a, b, 2, seed=cfg.seed, workers=workers), tmp, stop_after=stop_after)
    return t


def test_replay_and_resume(tmp_path):
    full = tmp_path / "full"
    run(full)
    log = (full / "log.jsonl").read_text()
    assert len(read_log(full / "log.jsonl")) == 6
    assert not any("wall_ms" in ln for ln in log.splitlines())
    assert sorted(p.name for p in (full / "checkpoints").iterdir()) == [
        "latest.ckpt",
        "step_00000002.ckpt",
        "step_00000004.ckpt",
        "step_00000006.ckpt",
    ]

    again = tmp_path / "again"
    run(again)
    assert (again / "log.jsonl").read_text() == log
    assert (again / "checkpoints/latest.ckpt").read_bytes() == (full / "checkpoints/latest.ckpt").read_bytes()

    # interrupted after step 3 (mid-epoch), resumed from the step-2 checkpoint
    part = tmp_path / "part"
    run(part, stop_after=3)
    run(part, resume_from=part / "checkpoints/step_00000002.ckpt")
    assert (part / "log.jsonl").read_text() == log
    assert (part / "checkpoints/latest.ckpt").read_bytes() == (full / "checkpoints/latest.ckpt").read_bytes()
    timing = [json.loads(ln)["step"] for ln in (part / "timing.jsonl").read_text().splitlines()]
    assert timing == [1, 2, 3, 4, 5, 6]


def test_resume_with_other_worker_count(tmp_path):
    run(tmp_path / "full")
    part = tmp_path / "part"
    run(part, stop_after=2)
    t = run(part, resume_from=part / "checkpoints/latest.ckpt", workers=2)
    assert (part / "log.jsonl").read_text() == (tmp_path / "full/log.jsonl").read_text()
    ref = load_checkpoint(tmp_path / "full/checkpoints/latest.ckpt").model.state_dict()
    for k, v in t.model.state_dict().items():
        assert torch.equal(v, ref[k]), k


def test_styles_frozen_after_run(tmp_path):
    t = run(tmp_path)
    fresh = init_model(NET, 0)
    assert torch.equal(t.model.style_a, fresh.style_a) and torch.equal(t.model.style_b, fresh.style_b)
