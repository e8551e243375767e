import copy
import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from dogo import trainer
from dogo.augment import AugmentPolicy, make_view_pairs
from dogo.checkpoint import read_metadata
from dogo.data import LabeledDataset
from dogo.errors import NonFiniteLoss
from dogo.losses import kd_loss, similarity_distribution
from dogo.models import parameter_checksum
from dogo.trainer import (
    PeerSpec,
    TrainConfig,
    TrainState,
    _forward_peer,
    epoch_batches,
    init_state,
    kd_trend,
    list_checkpoints,
    make_optimizer,
    pretrain,
    read_step_log,
    single_config,
    train_step,
)

SIZE = 16


def small_config(**kw):
    base = dict(peer1=PeerSpec("conv4"), peer2=PeerSpec("conv8"), batch_size=16, epochs=2, seed=3,
                checkpoint_every=1, image_size=SIZE, augment=AugmentPolicy(output_size=SIZE))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def toy_ds():
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(64, 3, SIZE, SIZE), dtype=np.uint8)
    return LabeledDataset(imgs, rng.integers(0, 4, 64).astype(np.int64), 4)


def batch(ds, n=16):
    idx = np.arange(n)
    return ds.images[idx], idx


def strip_time(rows):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]


def test_lambda_zero_matches_single(toy_ds):
    trainer.set_determinism(True)
    joint_cfg = small_config(lam=0.0)
    joint, single = init_state(joint_cfg), init_state(single_config(joint_cfg))
    assert len(single.peers) == 1
    for step, idx in enumerate(epoch_batches(64, 16, 0, 1) + epoch_batches(64, 16, 0, 2)[:1]):
        train_step(joint, toy_ds.images[idx], idx, joint_cfg, epoch=1)
        train_step(single, toy_ds.images[idx], idx, single_config(joint_cfg), epoch=1)
        a, b = joint.peers[0].state_dict(), single.peers[0].state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a), f"diverged at step {step + 1}"


def test_identical_peers_zero_kd(toy_ds):
    cfg = small_config(peer2=PeerSpec("conv4"), shared_augmentation=True)
    peers = [cfg.peer1.build(SIZE, 5), cfg.peer1.build(SIZE, 5)]
    state = TrainState(peers, [make_optimizer(p, cfg) for p in peers])
    rec = train_step(state, *batch(toy_ds), cfg, epoch=1)
    for tag in ("peer1", "peer2"):
        assert abs(rec.losses[tag]["kd"]) < 1e-9


def test_independent_streams_nonzero_kd(toy_ds):
    cfg = small_config(peer2=PeerSpec("conv4"))
    peers = [cfg.peer1.build(SIZE, 5), cfg.peer1.build(SIZE, 5)]
    state = TrainState(peers, [make_optimizer(p, cfg) for p in peers])
    rec = train_step(state, *batch(toy_ds), cfg, epoch=1)
    assert rec.losses["peer1"]["kd"] > 1e-6


def test_step_record_invariant(toy_ds):
    cfg = small_config(lam=100.0)
    state = init_state(cfg)
    for _ in range(3):
        rec = train_step(state, *batch(toy_ds), cfg, epoch=1)
        for v in rec.losses.values():
            assert all(np.isfinite(list(v.values())))
            assert v["total"] == pytest.approx(v["task"] + 100.0 * v["kd"], abs=1e-5, rel=1e-6)
    assert rec.step == 3
    lines = rec.log_lines()
    assert {ln["peer"] for ln in lines} == {"peer1", "peer2"}
    assert set(lines[0]) == {"step", "epoch", "peer", "task_loss", "kd_loss", "total_loss", "wall_time"}


def test_lambda_affine(toy_ds):
    base = init_state(small_config())
    recs = {}
    for lam in (0.0, 1.0, 100.0):
        state = copy.deepcopy(base)
        recs[lam] = train_step(state, *batch(toy_ds), small_config(lam=lam), epoch=1).losses["peer1"]
    kd = recs[0.0]["kd"]
    assert recs[1.0]["kd"] == kd and recs[100.0]["kd"] == kd
    assert recs[1.0]["total"] - recs[0.0]["total"] == pytest.approx(kd, rel=1e-5)
    assert recs[100.0]["total"] - recs[0.0]["total"] == pytest.approx(100 * kd, rel=1e-5)


def test_gradient_isolation(toy_ds):
    cfg = small_config()
    state = init_state(cfg)
    images, idx = batch(toy_ds)
    outs = []
    for k, model in enumerate(state.peers):
        v1, v2 = make_view_pairs(images, idx, cfg.augment, cfg.seed, 1, k)
        outs.append(_forward_peer(model, v1, v2, cfg))
    dists = [similarity_distribution(*o[1], cfg.tau_kd) for o in outs]
    for k in (0, 1):
        total = outs[k][0] + cfg.lam * kd_loss(dists[k], dists[1 - k])
        other = list(state.peers[1 - k].parameters())
        grads = torch.autograd.grad(total, other, allow_unused=True, retain_graph=True)
        assert all(g is None for g in grads)


def test_step_touches_each_peer_once(toy_ds):
    cfg = small_config()
    state = init_state(cfg)
    before = [parameter_checksum(p) for p in state.peers]
    # freeze peer2's optimizer: a peer1 step must leave peer2 bit-identical
    state.optimizers[1] = torch.optim.SGD(state.peers[1].parameters(), lr=0.0)
    state.peers[1].eval()
    train_step(state, *batch(toy_ds), cfg, epoch=1)
    assert parameter_checksum(state.peers[0]) != before[0]
    params_after = {k: v for k, v in state.peers[1].state_dict().items() if "running" not in k and "num_batches" not in k}
    fresh = init_state(cfg).peers[1].state_dict()
    assert all(torch.equal(params_after[k], fresh[k]) for k in params_after)


def test_cross_objective_kd_uses_predictor(toy_ds):
    cfg = small_config(peer2=PeerSpec("conv4", objective="simsiam"))
    state = init_state(cfg)
    assert state.peers[1].predictor is not None
    images, idx = batch(toy_ds)
    v1, v2 = make_view_pairs(images, idx, cfg.augment, cfg.seed, 1, 1)
    model = state.peers[1].eval()
    with torch.no_grad():
        _, (a, b) = _forward_peer(model, v1, v2, cfg)
        assert torch.equal(a, model.predictor(model.project(torch.cat([v1, v2])))[:16])
    model.train()
    rec = train_step(state, images, idx, cfg, epoch=1)
    assert np.isfinite(rec.losses["peer2"]["total"])


def test_non_finite_aborts(toy_ds, monkeypatch):
    monkeypatch.setattr(trainer, "nt_xent_loss", lambda *a, **k: torch.tensor(float("nan")))
    cfg = small_config()
    with pytest.raises(NonFiniteLoss) as ei:
        train_step(init_state(cfg), *batch(toy_ds), cfg, epoch=1)
    assert ei.value.diagnostics["step"] == 1 and ei.value.diagnostics["peer"] == "peer1"


def test_epoch_batches():
    bs = epoch_batches(70, 16, 0, 1)
    assert len(bs) == 4 and all(len(b) == 16 for b in bs)
    assert len(set(np.concatenate(bs))) == 64
    assert not np.array_equal(np.concatenate(bs), np.concatenate(epoch_batches(70, 16, 0, 2)))
    assert np.array_equal(np.concatenate(bs), np.concatenate(epoch_batches(70, 16, 0, 1)))


def test_config_validation_and_roundtrip():
    cfg = small_config(peer2=PeerSpec("conv8", objective="simsiam"))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.config_hash() == TrainConfig.from_dict(cfg.to_dict()).config_hash()
    assert cfg.config_hash() != replace(cfg, lam=1.0).config_hash()
    with pytest.raises(ValueError):
        TrainConfig(mode="single")
    with pytest.raises(ValueError):
        small_config(lam=-1.0)
    with pytest.raises(ValueError):
        small_config(tau_kd=0.0)
    with pytest.raises(ValueError):
        small_config(kd_reduction="sum")


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lam, cfg.tau_c, cfg.tau_kd, cfg.lr, cfg.weight_decay) == (100.0, 0.5, 0.1, 3e-4, 1e-6)
    assert cfg.kd_warmup_epochs == 0 and not cfg.joint_backprop and cfg.kd_reduction == "pairmean"


def test_pretrain_outputs_and_determinism(toy_ds, tmp_path):
    cfg = small_config()
    r1 = pretrain(cfg, toy_ds, tmp_path / "a")
    r2 = pretrain(cfg, toy_ds, tmp_path / "b")
    assert len(r1.checkpoints) == 4  # 2 epochs x 2 peers
    rows1, rows2 = read_step_log(r1.log_path), read_step_log(r2.log_path)
    assert len(rows1) == 2 * 4 * 2
    assert strip_time(rows1) == strip_time(rows2)
    meta = read_metadata(list_checkpoints(tmp_path / "a", "peer2")[-1])
    assert meta["epoch"] == 2 and meta["config_hash"] == cfg.config_hash() and meta["peer_tag"] == "peer2"


def test_resume_continues(toy_ds, tmp_path):
    cfg = small_config(epochs=3)
    full = pretrain(cfg, toy_ds, tmp_path / "full")

    class Stop(Exception):
        pass

    def interrupt(epoch, state):
        if epoch == 2:
            raise Stop

    with pytest.raises(Stop):
        pretrain(cfg, toy_ds, tmp_path / "cut", on_epoch_end=interrupt)
    seen = []
    resumed = pretrain(cfg, toy_ds, tmp_path / "cut", resume=True, on_epoch_end=lambda e, s: seen.append(e))
    assert seen == [3]
    assert strip_time(read_step_log(full.log_path)) == strip_time(read_step_log(resumed.log_path))
    for a, b in zip(full.state.peers, resumed.state.peers):
        assert parameter_checksum(a) == parameter_checksum(b)


def test_kd_trend():
    rows = [{"peer": "peer1", "kd_loss": float(v)} for v in range(100, 0, -1)]
    first, last = kd_trend(rows)
    assert first > last
