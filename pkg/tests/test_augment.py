import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from dogo.augment import (
    AugmentPolicy,
    _view_children,
    apply_view_params,
    make_view_pair,
    make_view_pairs,
    resize_images,
    sample_seedseq,
    sample_view_params,
    to_float_images,
)
from dogo.errors import ImageTooSmall


@pytest.fixture
def image():
    g = np.random.default_rng(0)
    return g.integers(0, 256, size=(3, 32, 32), dtype=np.uint8)


def test_identity_policy(image):
    v1, v2 = make_view_pair(image, AugmentPolicy.identity(32), 5)
    ref = to_float_images(image)
    assert torch.allclose(v1, ref, atol=1e-6)
    assert torch.allclose(v2, ref, atol=1e-6)


def test_identity_policy_resizes():
    img = np.random.default_rng(1).integers(0, 256, size=(3, 48, 48), dtype=np.uint8)
    v1, v2 = make_view_pair(img, AugmentPolicy.identity(32), 0)
    assert v1.shape == (3, 32, 32)
    ref = F.interpolate(to_float_images(img)[None], size=(32, 32), mode="bilinear", align_corners=False)[0]
    assert torch.equal(v1, v2)
    assert torch.allclose(v1, ref, atol=1e-6)


def test_resize_images_passthrough():
    imgs = np.random.default_rng(1).integers(0, 256, size=(2, 3, 32, 32), dtype=np.uint8)
    assert torch.equal(resize_images(imgs, 32), to_float_images(imgs))
    assert resize_images(imgs, 16).shape == (2, 3, 16, 16)


def test_same_state_bit_identical(image):
    pol = AugmentPolicy()
    a = make_view_pair(image, pol, np.random.SeedSequence(42, spawn_key=(1, 2)))
    b = make_view_pair(image, pol, np.random.SeedSequence(42, spawn_key=(1, 2)))
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_state_not_consumed(image):
    ss = np.random.SeedSequence(9)
    a = make_view_pair(image, AugmentPolicy(), ss)
    b = make_view_pair(image, AugmentPolicy(), ss)
    assert torch.equal(a[0], b[0])


def test_views_differ(image):
    v1, v2 = make_view_pair(image, AugmentPolicy(), 3)
    assert not torch.equal(v1, v2)


def test_flip_rate():
    pol = AugmentPolicy()
    flips = sum(sample_view_params(np.random.default_rng(_view_children(sample_seedseq(0, 0, i))[0]),
                                   32, 32, pol).flip for i in range(1000))
    assert 0.45 <= flips / 1000 <= 0.55


def test_view1_independent_of_view2_stream(image):
    pol = AugmentPolicy()
    img = to_float_images(image)
    ss1, _ = _view_children(np.random.SeedSequence(17))
    p1 = sample_view_params(np.random.default_rng(ss1), 32, 32, pol)
    v1, _ = make_view_pair(image, pol, np.random.SeedSequence(17))
    for other in range(5):
        p2 = sample_view_params(np.random.default_rng(other), 32, 32, pol)
        out = apply_view_params(torch.stack([img, img]), [p1, p2], 32)
        assert torch.equal(out[0], v1)


def test_batched_matches_single():
    imgs = np.random.default_rng(2).integers(0, 256, size=(4, 3, 32, 32), dtype=np.uint8)
    idx = [10, 3, 7, 0]
    b1, b2 = make_view_pairs(imgs, idx, AugmentPolicy(), seed=5, epoch=2, stream=1)
    for k, i in enumerate(idx):
        s1, s2 = make_view_pair(imgs[k], AugmentPolicy(), sample_seedseq(5, 2, i, 1))
        assert torch.allclose(b1[k], s1, atol=1e-6) and torch.allclose(b2[k], s2, atol=1e-6)


def test_streams_differ():
    imgs = np.random.default_rng(2).integers(0, 256, size=(2, 3, 32, 32), dtype=np.uint8)
    a, _ = make_view_pairs(imgs, [0, 1], AugmentPolicy(), 0, 1, stream=0)
    b, _ = make_view_pairs(imgs, [0, 1], AugmentPolicy(), 0, 1, stream=1)
    assert not torch.equal(a, b)


def test_too_small():
    with pytest.raises(ImageTooSmall):
        make_view_pair(np.zeros((3, 7, 7), np.uint8), AugmentPolicy(output_size=32), 0)
    v1, _ = make_view_pair(np.zeros((3, 8, 8), np.uint8), AugmentPolicy(output_size=32), 0)
    assert v1.shape == (3, 32, 32)


def test_output_size(image):
    v1, v2 = make_view_pair(image, AugmentPolicy(output_size=24), 1)
    assert v1.shape == v2.shape == (3, 24, 24)


@pytest.mark.parametrize("kwargs", [
    {"crop_scale_range": (0.0, 1.0)},
    {"crop_scale_range": (0.8, 0.5)},
    {"flip_prob": 1.5},
    {"grayscale_prob": -0.1},
    {"jitter_strengths": (0.4, 0.4, 0.4, 0.6)},
    {"jitter_strengths": (-0.1, 0.4, 0.4, 0.1)},
])
def test_policy_validation(kwargs):
    with pytest.raises(ValueError):
        AugmentPolicy(**kwargs)


def test_policy_dict_roundtrip():
    pol = AugmentPolicy(crop_scale_range=(0.3, 0.9), output_size=64)
    assert AugmentPolicy.from_dict(pol.to_dict()) == pol


def test_no_blur_field():
    assert not any("blur" in k for k in AugmentPolicy().to_dict())


@settings(max_examples=40, deadline=None)
@given(lo=st.floats(0.05, 1.0), span=st.floats(0.0, 1.0), flip=st.floats(0, 1), jit=st.floats(0, 1),
       gray=st.floats(0, 1), strength=st.floats(0, 2), hue=st.floats(0, 0.5), seed=st.integers(0, 2 ** 32 - 1))
def test_value_range(lo, span, flip, jit, gray, strength, hue, seed):
    hi = min(1.0, lo + span)
    pol = AugmentPolicy((lo, hi), flip_prob=flip, jitter_strengths=(strength, strength, strength, hue),
                        jitter_apply_prob=jit, grayscale_prob=gray)
    img = np.random.default_rng(seed).integers(0, 256, size=(3, 32, 32), dtype=np.uint8)
    v1, v2 = make_view_pair(img, pol, seed)
    for v in (v1, v2):
        assert torch.isfinite(v).all()
        assert v.min() >= 0 and v.max() <= 1
