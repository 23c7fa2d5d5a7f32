import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panelfusion.checkpoint import load_checkpoint, save_checkpoint
from panelfusion.core import ConfigError, IntegrityError, Rng
from panelfusion.data import DatasetManifest, generate_synthetic_corpus, save_png, to_tensor
from panelfusion.diffusion import default_schedule
from panelfusion.lora import attach
from panelfusion.model import UNetConfig, clone_params
from panelfusion.text import Vocab
from panelfusion.train import (
    Checkpoint,
    JsonlLogger,
    TrainConfig,
    cosine_restart_lr,
    expected_pairs_per_timestep,
    load_bundle,
    new_bundle,
    train_base,
    train_lora,
)

from oracles import cosine_lr

TINY = UNetConfig(base_channels=8, cond_dim=8, time_embed_dim=8, groups=2)


# -- learning rate ---------------------------------------------------------------------


def test_lr_anchors():
    assert cosine_restart_lr(0, 1e-4, 15_000) == 1e-4
    assert cosine_restart_lr(7_500, 1e-4, 15_000) == pytest.approx(5e-5, abs=1e-12)
    assert cosine_restart_lr(15_000, 1e-4, 15_000) == 1e-4
    last = cosine_restart_lr(14_999, 1e-4, 15_000)
    assert last == pytest.approx(cosine_lr(14_999, 1e-4, 15_000), abs=1e-12)
    assert 0 < last < 1e-11


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 20_000), st.floats(1e-6, 1.0))
def test_lr_properties(step, period, lr0):
    lr = cosine_restart_lr(step, lr0, period)
    assert 0 <= lr <= lr0
    assert lr == pytest.approx(cosine_lr(step, lr0, period), abs=1e-12 * lr0)
    assert cosine_restart_lr((step // period) * period, lr0, period) == lr0
    if step % period < period - 1:
        assert cosine_restart_lr(step + 1, lr0, period) < lr


def test_lr_errors():
    with pytest.raises(ConfigError):
        cosine_restart_lr(-1, 1e-4, 10)
    with pytest.raises(ConfigError):
        cosine_restart_lr(0, 1e-4, 0)


def test_expected_pairs():
    assert expected_pairs_per_timestep(30_000, 50) == 600
    assert expected_pairs_per_timestep(30_000, 1000) == 30
    assert expected_pairs_per_timestep(0, 100) == 0


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.total_steps, cfg.batch_size, cfg.lr0, cfg.lr_period) == (5000, 1, 1e-4, 2500)
    with pytest.raises(ConfigError):
        TrainConfig(total_steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_period=0)


def test_timestep_sampling_uniform():
    T, n = 100, 100_000
    rng = Rng(0)
    counts = np.bincount([rng.randint(1, T + 1) for _ in range(n)], minlength=T + 1)[1:]
    sigma = math.sqrt(n / T * (1 - 1 / T))
    assert np.abs(counts - n / T).max() <= 4 * sigma
    chi2 = ((counts - n / T) ** 2 / (n / T)).sum()
    assert chi2 < T + 5 * math.sqrt(2 * T)


# -- checkpoint container ------------------------------------------------------------------


def _tensors():
    rng = Rng(4)
    return {"a.weight": rng.normal((3, 4)), "b": rng.normal((5,)), "scalar": np.array(2.5, dtype=np.float32)}


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    t = _tensors()
    save_checkpoint(t, {"step": 7, "config": {"x": 1}}, tmp_path / "c.pnlf")
    got, meta = load_checkpoint(tmp_path / "c.pnlf")
    assert set(got) == set(t)
    for k in t:
        assert got[k].tobytes() == np.asarray(t[k], np.float32).tobytes() and got[k].shape == np.shape(t[k])
    assert meta["step"] == 7 and meta["config"] == {"x": 1} and meta["version"] == 1 and meta["adapter_only"] is False


@settings(max_examples=20, deadline=None)
@given(st.dictionaries(st.text("abc.", min_size=1, max_size=5), st.lists(st.integers(1, 4), max_size=3), max_size=4))
def test_checkpoint_roundtrip_property(tmp_path_factory, shapes):
    rng = Rng(len(shapes))
    t = {k: rng.normal(tuple(s)) for k, s in shapes.items()}
    path = tmp_path_factory.mktemp("ck") / "x.pnlf"
    save_checkpoint(t, {}, path)
    got, _ = load_checkpoint(path)
    assert all(np.array_equal(got[k], t[k]) for k in t)


def test_checkpoint_layout(tmp_path):
    save_checkpoint(_tensors(), {}, tmp_path / "c.pnlf")
    raw = (tmp_path / "c.pnlf").read_bytes()
    assert raw[:4] == b"PNLF"
    (hlen,) = struct.unpack("<I", raw[4:8])
    assert len(raw) == 8 + hlen + 4 * (12 + 5 + 1)


@pytest.mark.parametrize(
    "corrupt,pattern",
    [
        (lambda b: b"XXXX" + b[4:], "offset 0"),
        (lambda b: b[:-3], "offset"),
        (lambda b: b[:-1] + bytes([b[-1] ^ 0xFF]), "checksum"),
        (lambda b: b + b"\x00\x00\x00\x00", "trailing"),
        (lambda b: b[:6], "offset 6"),
    ],
)
def test_checkpoint_corruption_detected(tmp_path, corrupt, pattern):
    path = tmp_path / "c.pnlf"
    save_checkpoint(_tensors(), {}, path)
    path.write_bytes(corrupt(path.read_bytes()))
    with pytest.raises(IntegrityError, match=pattern):
        load_checkpoint(path)


# -- training loops ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def shapes16():
    return [to_tensor(img) for img in generate_synthetic_corpus("shape_panels", 12, seed=0, panel_size=16)]


def _base(seed=0):
    return new_bundle(TINY, Vocab(), default_schedule(20), seed=seed)


def test_train_base_reduces_loss_and_logs(shapes16, tmp_path):
    b = _base()
    logger = JsonlLogger(tmp_path / "log.jsonl")
    losses = train_base(b, shapes16, ["CNH3000"] * 12, TrainConfig(total_steps=60, lr0=3e-3, seed=1, log_every=20), logger)
    logger.close()
    assert len(losses) == 60 and np.isfinite(losses).all()
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    import json

    recs = [json.loads(l) for l in lines]
    assert [r["step"] for r in recs] == [0, 20, 40, 59]
    assert set(recs[0]) == {"step", "loss", "lr", "t_sampled"} and 1 <= recs[0]["t_sampled"] <= 20


def _lora_run(shapes16, base, seed=3, steps=15, **kw):
    lora = attach(base.unet.params, rank=2, seed=seed)
    manifest = DatasetManifest([(f"img{i}", "CNH3000") for i in range(len(shapes16))])
    cfg = TrainConfig(total_steps=steps, lr0=1e-3, seed=seed)
    return lora, train_lora(base, lora, manifest, cfg, images=shapes16, **kw)


def test_train_lora_freezes_base_and_is_deterministic(shapes16):
    b1, b2 = _base(), _base()
    b1.unet.params["conv_out.weight"].data[:] = 0.01
    b2.unet.params["conv_out.weight"].data[:] = 0.01
    snapshot = clone_params(b1.unet.params)
    _, r1 = _lora_run(shapes16, b1)
    _, r2 = _lora_run(shapes16, b2)
    assert all(np.array_equal(snapshot[k].data, b1.unet.params[k].data) for k in snapshot)
    assert r1.losses == r2.losses
    assert r1.checkpoint.meta == r2.checkpoint.meta
    assert all(np.array_equal(r1.checkpoint.tensors[k], r2.checkpoint.tensors[k]) for k in r1.checkpoint.tensors)
    assert r1.checkpoint.meta["adapter_only"] is True and "text.table" in r1.checkpoint.tensors


def test_train_lora_preconditions(shapes16):
    b = _base()
    lora = attach(b.unet.params)
    with pytest.raises(ConfigError, match="empty"):
        train_lora(b, lora, DatasetManifest([]), TrainConfig(total_steps=1))
    b.unet.params["conv_in.weight"].requires_grad = True
    with pytest.raises(ConfigError, match="frozen"):
        train_lora(b, lora, DatasetManifest([("x", "CNH3000")]), TrainConfig(total_steps=1), images=shapes16[:1])


def test_periodic_checkpoints_and_reload(shapes16, tmp_path):
    b = _base()
    b.save(tmp_path / "base.pnlf")
    lora = attach(b.unet.params, rank=2, seed=0)
    manifest = DatasetManifest([("x", "CNH3000")] * len(shapes16))
    cfg = TrainConfig(total_steps=10, lr0=1e-3, checkpoint_every=5)
    run = train_lora(b, lora, manifest, cfg, images=shapes16, base_path=tmp_path / "base.pnlf", checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("lora_step*.pnlf")) == ["lora_step000005.pnlf", "lora_step000010.pnlf"]
    run.checkpoint.save(tmp_path / "final.pnlf")
    final = Checkpoint.load(tmp_path / "final.pnlf")
    step10 = Checkpoint.load(tmp_path / "lora_step000010.pnlf")
    assert all(np.array_equal(final.tensors[k], step10.tensors[k]) for k in final.tensors)
    reloaded = load_bundle(tmp_path / "final.pnlf")
    for ad, ad2 in zip(lora.adapters, reloaded.adapters.adapters):
        assert np.array_equal(ad.B.data, ad2.B.data)
    assert np.array_equal(reloaded.text.table.data, b.text.table.data)


def test_base_bundle_roundtrip(tmp_path):
    b = _base(seed=5)
    b.save(tmp_path / "base.pnlf")
    r = load_bundle(tmp_path / "base.pnlf")
    assert r.unet.cfg == b.unet.cfg and r.vocab.tokens == b.vocab.tokens
    assert np.array_equal(r.schedule.beta, b.schedule.beta)
    assert all(np.array_equal(r.unet.params[k].data, b.unet.params[k].data) for k in b.unet.params)


def test_manifest_images_from_disk(tmp_path, shapes16):
    from panelfusion.data import build_manifest
    from panelfusion.train import load_manifest_images

    for i, img in enumerate(generate_synthetic_corpus("shape_panels", 3, seed=0, panel_size=16)):
        save_png(img, tmp_path / f"s{i}.png")
    imgs = load_manifest_images(build_manifest(tmp_path))
    assert len(imgs) == 3 and np.array_equal(imgs[0].data, shapes16[0].data)
