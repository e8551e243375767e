import pytest
import torch
from torch import nn

from dogo.checkpoint import load_checkpoint, read_metadata, save_checkpoint
from dogo.errors import (
    CheckpointMismatch,
    CheckpointMissing,
    CorruptArchive,
    DimensionMismatch,
    NoPredictor,
    PredictorRequired,
    ShapeMismatch,
)
from dogo.losses import normalize_rows
from dogo.models import (
    ENCODER_PRESETS,
    PRESET_PAIRS,
    EncoderConfig,
    PredictorConfig,
    ProjectorConfig,
    build_peer,
    default_predictor,
    default_projector,
    encoder_preset,
    forward_embed,
    forward_predict,
    forward_project,
    parameter_checksum,
)


def conv4(**kw):
    enc = encoder_preset("conv4")
    return build_peer(enc, default_projector(enc), **kw)


def images(n, size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g) * 2 - 1


def test_same_seed_same_parameters():
    assert parameter_checksum(conv4(seed=7)) == parameter_checksum(conv4(seed=7))
    assert parameter_checksum(conv4(seed=7)) != parameter_checksum(conv4(seed=8))


def test_build_does_not_touch_global_rng():
    torch.manual_seed(3)
    expected = torch.rand(3)
    torch.manual_seed(3)
    conv4(seed=11)
    assert torch.equal(torch.rand(3), expected)


def test_simsiam_needs_predictor():
    enc = encoder_preset("conv4")
    with pytest.raises(PredictorRequired):
        build_peer(enc, default_projector(enc), None, "simsiam", 0)


def test_predictor_dim_mismatch():
    enc = encoder_preset("conv4")
    with pytest.raises(DimensionMismatch):
        build_peer(enc, ProjectorConfig(128, 128), PredictorConfig(32, 64), "simsiam", 0)


def test_wide_conv_project_shape():
    enc = encoder_preset("conv4-wide")
    assert enc.feature_dim == 256
    model = build_peer(enc, ProjectorConfig(256, 128), seed=0)
    assert forward_project(model, images(4)).shape == (4, 128)


def test_embed_and_custom_projection_width():
    enc = encoder_preset("conv4")
    model = build_peer(enc, ProjectorConfig(enc.feature_dim, 64), seed=0)
    x = images(5)
    assert forward_embed(model, x).shape == (5, enc.feature_dim)
    assert forward_project(model, x).shape == (5, 64)


def test_eval_mode_deterministic():
    model = conv4(seed=0).eval()
    x = images(3)
    with torch.no_grad():
        assert torch.equal(forward_embed(model, x), forward_embed(model, x))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        forward_embed(conv4(seed=0), images(2, size=16))
    with pytest.raises(ShapeMismatch):
        forward_embed(conv4(seed=0), torch.zeros(2, 1, 32, 32))


def test_predictor_paths():
    with pytest.raises(NoPredictor):
        forward_predict(conv4(seed=0), images(2))
    enc = encoder_preset("conv4")
    ss = build_peer(enc, default_projector(enc), default_predictor(), "simsiam", 0)
    x = images(4)
    out = forward_predict(ss, x)
    assert out.shape == (4, 128)
    ss.eval()
    with torch.no_grad():
        assert torch.equal(forward_predict(ss, x), ss.predictor(forward_project(ss, x)))


def test_predictor_dropped_for_contrastive():
    enc = encoder_preset("conv4")
    m = build_peer(enc, default_projector(enc), default_predictor(), "contrastive", 0)
    assert m.predictor is None


def test_composition_law():
    for mode in ("train", "eval"):
        model = conv4(seed=1)
        getattr(model, mode)()
        x = images(6)
        with torch.no_grad():
            assert torch.equal(forward_project(model, x), model.projector(forward_embed(model, x)))


def test_projector_structure():
    model = conv4(seed=0)
    linears = [m for m in model.projector.modules() if isinstance(m, nn.Linear)]
    relus = [m for m in model.projector.modules() if isinstance(m, nn.ReLU)]
    assert len(linears) == 2 and len(relus) == 1
    assert not isinstance(list(model.projector)[-1], (nn.BatchNorm1d, nn.ReLU))


def test_finite_and_nonzero_over_100_seeds():
    enc = encoder_preset("conv4")
    x = images(4, seed=99)
    for seed in range(100):
        model = build_peer(enc, default_projector(enc), seed=seed)
        with torch.no_grad():
            z = forward_project(model, x)
            assert torch.isfinite(forward_embed(model, x)).all()
        assert torch.isfinite(z).all()
        normalize_rows(z)


@pytest.mark.parametrize("small,large", PRESET_PAIRS)
def test_preset_pair_parameter_ordering(small, large):
    def count(name):
        enc = encoder_preset(name)
        return build_peer(enc, default_projector(enc), seed=0).parameter_count
    assert count(large) > count(small)


@pytest.mark.parametrize("name", sorted(ENCODER_PRESETS))
def test_small_image_stem(name):
    model = build_peer(encoder_preset(name), ProjectorConfig(16, 8), seed=0)
    first = next(m for m in model.encoder.modules() if isinstance(m, nn.Conv2d))
    assert first.kernel_size == (3, 3) and first.stride == (1, 1)
    assert not any(isinstance(m, nn.MaxPool2d) for m in model.encoder.modules())


def test_imagenet_stem_when_disabled():
    model = build_peer(encoder_preset("resnet10-tiny", small_image_stem=False), ProjectorConfig(16, 8), seed=0)
    first = next(m for m in model.encoder.modules() if isinstance(m, nn.Conv2d))
    assert first.kernel_size == (7, 7) and first.stride == (2, 2)
    assert any(isinstance(m, nn.MaxPool2d) for m in model.encoder.modules())


@pytest.mark.parametrize("name", ["resnet10-tiny", "wrn-10-2"])
def test_other_families_forward(name):
    enc = encoder_preset(name)
    model = build_peer(enc, default_projector(enc), seed=0)
    assert forward_embed(model, images(2)).shape == (2, enc.feature_dim)


def test_feature_dim_table():
    assert EncoderConfig("resnet", ("basic", (2, 2, 2, 2), 64)).feature_dim == 512
    assert EncoderConfig("resnet", ("bottleneck", (3, 4, 6, 3), 64)).feature_dim == 2048
    assert EncoderConfig("wide-resnet", (16, 2)).feature_dim == 128


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = conv4(seed=3)
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        model(images(4)).sum().backward()
        opt.step()
        path = save_checkpoint(tmp_path / "a.ckpt.zip", model, config_hash="abc", epoch=2, step=10,
                               seed=3, peer_tag="peer1", optimizer=opt)
        loaded, meta, opt2 = load_checkpoint(path, "abc", lambda m: torch.optim.Adam(m.parameters(), lr=1e-3))
        assert parameter_checksum(loaded) == parameter_checksum(model)
        assert meta["epoch"] == 2 and meta["peer_tag"] == "peer1" and meta["objective"] == "contrastive"
        s1, s2 = opt.state_dict()["state"], opt2.state_dict()["state"]
        assert all(torch.equal(s1[k]["exp_avg"], s2[k]["exp_avg"]) for k in s1)

    def test_mismatch(self, tmp_path):
        path = save_checkpoint(tmp_path / "a.ckpt.zip", conv4(seed=0), config_hash="abc", epoch=1,
                               step=1, seed=0, peer_tag="peer1")
        with pytest.raises(CheckpointMismatch):
            load_checkpoint(path, "other")

    def test_missing_and_corrupt(self, tmp_path):
        with pytest.raises(CheckpointMissing):
            read_metadata(tmp_path / "nope.ckpt.zip")
        bad = tmp_path / "bad.ckpt.zip"
        bad.write_bytes(b"not a zip")
        with pytest.raises(CorruptArchive):
            read_metadata(bad)

    def test_simsiam_roundtrip(self, tmp_path):
        enc = encoder_preset("conv4")
        model = build_peer(enc, default_projector(enc), default_predictor(), "simsiam", 5)
        path = save_checkpoint(tmp_path / "s.ckpt.zip", model, config_hash="h", epoch=1, step=1,
                               seed=5, peer_tag="peer2")
        loaded, _, _ = load_checkpoint(path)
        assert loaded.predictor is not None
        assert parameter_checksum(loaded) == parameter_checksum(model)
