import numpy as np
import pytest

from fedseg import tensor as T
from fedseg.protoseg import (
    EncoderConfig,
    PrototypeSet,
    ProtoConfig,
    aggregate_prototypes,
    encode,
    extract_prototypes,
    init_params,
    predict,
    score_maps,
    segment,
)
from fedseg.tensor import DimensionError, Tensor


def blob_image(seed=0, hw=32):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:hw, 0:hw]
    mask = ((yy - hw / 2) ** 2 / 40 + (xx - hw / 2.5) ** 2 / 60 < 1).astype(np.uint8)
    img = 0.3 + 0.5 * mask + 0.03 * rng.normal(size=(hw, hw))
    return np.clip(img, 0, 1).astype(np.float32), mask


def test_encoder_shapes_and_parameter_count():
    cfg = EncoderConfig()
    params = init_params(cfg, 0)
    assert encode(params, np.zeros((64, 64))).shape == (64, 16, 16)
    assert params.num_parameters() == cfg.num_parameters() == 16 * 9 + 16 + 32 * 16 * 9 + 32 + 64 * 32 * 9 + 64
    assert init_params(cfg, 0).checksum() == params.checksum()


def test_zero_image_gives_zero_features():
    feats = encode(init_params(EncoderConfig(), 3), np.zeros((16, 16)))
    assert np.all(feats.data == 0)


def test_encode_rejects_indivisible_dims():
    with pytest.raises(DimensionError):
        encode(init_params(EncoderConfig(), 0), np.zeros((30, 32)))


def test_flip_equivariance_with_symmetric_kernels():
    params = init_params(EncoderConfig(), 1)
    for name, t in params.items():
        if name.endswith("weight"):
            t.data = (t.data + t.data[..., ::-1]) / 2
        else:
            t.data = np.random.default_rng(2).normal(size=t.shape).astype(np.float32) * 0.1
    img = np.random.default_rng(4).random((32, 32)).astype(np.float32)
    a = encode(params, img[:, ::-1].copy()).data
    b = encode(params, img).data[:, :, ::-1]
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_full_mask_uses_fallback_background():
    feats = Tensor(np.random.default_rng(0).normal(size=(4, 3, 3)))
    ps = extract_prototypes(feats, np.ones((12, 12)))
    assert ps.fg.shape == (9, 4) and not ps.fg_fallback
    assert ps.bg_fallback and ps.bg.shape == (1, 4) and np.all(np.isfinite(ps.bg.data))


def test_single_block_mask_gives_one_prototype():
    feats = Tensor(np.random.default_rng(0).normal(size=(4, 3, 3)))
    mask = np.zeros((12, 12))
    mask[4:8, 8:12] = 1
    ps = extract_prototypes(feats, mask, 0.5)
    assert ps.fg_cells == [(1, 2)]
    np.testing.assert_array_equal(ps.fg.data[0], feats.data[:, 1, 2])
    assert len(ps.bg_cells) == 8


def test_empty_mask_fallback_is_finite():
    feats = Tensor(np.random.default_rng(0).normal(size=(4, 2, 2)))
    ps = extract_prototypes(feats, np.zeros((8, 8)))
    assert ps.fg_fallback and np.all(np.isfinite(ps.fg.data))
    assert ps.bg.shape == (4, 4)


def test_score_map_values():
    q = Tensor(np.array([1.0, 0.0]).reshape(2, 1, 1))
    ps = PrototypeSet(Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])), Tensor(np.array([[1.0, 0.0]])), [], [])
    fg, bg = score_maps(q, ps)
    np.testing.assert_allclose(fg.data.ravel(), [1.0, 0.0], atol=1e-7)
    feats = Tensor(np.tile(np.array([1.0, 2.0, 3.0])[:, None, None], (1, 2, 2)))
    ps1 = PrototypeSet(Tensor(np.array([[1.0, 2.0, 3.0]])), Tensor(np.array([[0.0, 0.0, 0.0]])), [], [])
    fg, bg = score_maps(feats, ps1)
    np.testing.assert_allclose(fg.data, 1.0, atol=1e-6)
    np.testing.assert_allclose(bg.data, 0.0)


def test_aggregation_examples():
    p = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    ps = PrototypeSet(p, Tensor(np.array([[3.0, -1.0]])), [], [])
    eq = Tensor(np.zeros((2, 2, 2)))
    fg_hat, bg_hat = aggregate_prototypes((eq, Tensor(np.full((1, 2, 2), 0.3))), ps)
    np.testing.assert_allclose(fg_hat.data, 0.5)
    np.testing.assert_allclose(bg_hat.data[:, 0, 0], [3.0, -1.0])
    same = PrototypeSet(Tensor(np.array([[2.0, 1.0], [2.0, 1.0]])), ps.bg, [], [])
    scores = Tensor(np.random.default_rng(0).normal(size=(2, 2, 2)))
    fg_hat, _ = aggregate_prototypes((scores, Tensor(np.zeros((1, 2, 2)))), same)
    np.testing.assert_allclose(fg_hat.data[:, 1, 1], [2.0, 1.0], atol=1e-12)


def test_predict_examples():
    q = Tensor(np.random.default_rng(1).normal(size=(2, 2, 2)))
    ortho = Tensor(np.stack([-q.data[1], q.data[0]]))
    prob = predict(q, q, ortho, 8, 8)
    np.testing.assert_allclose(prob.data[1], 1 / (1 + np.exp(-20.0)), atol=1e-7)
    half = predict(q, ortho, ortho, 8, 8)
    np.testing.assert_allclose(half.data, 0.5)
    np.testing.assert_allclose(prob.data.sum(axis=0), 1.0, atol=1e-5)


def test_self_matching_property():
    params = init_params(EncoderConfig(), 0)
    for seed in range(5):
        img, mask = blob_image(seed)
        fg = segment(params, img, mask, img).data[1]
        assert fg[mask > 0].mean() >= fg[mask == 0].mean()


def test_all_ones_support_mask_still_valid():
    params = init_params(EncoderConfig(), 0)
    img, _ = blob_image(1)
    out = segment(params, img, np.ones_like(img), img).data
    assert np.all(np.isfinite(out)) and np.all((out >= 0) & (out <= 1))
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-5)


def test_segment_is_deterministic():
    params = init_params(EncoderConfig(), 0)
    img, mask = blob_image(2)
    a = segment(params, img, mask, img[::-1].copy()).data
    b = segment(params, img, mask, img[::-1].copy()).data
    assert a.tobytes() == b.tobytes()


def test_complement_mask_swaps_channels():
    params = init_params(EncoderConfig(), 5)
    img, mask = blob_image(3)
    q = blob_image(4)[0]
    a = segment(params, img, mask, q).data
    b = segment(params, img, 1 - mask, q).data
    np.testing.assert_array_equal(a[0], b[1])
    np.testing.assert_array_equal(a[1], b[0])


def test_prototype_scaling_invariance():
    rng = np.random.default_rng(0)
    q = Tensor(rng.normal(size=(8, 4, 4)))
    ps = extract_prototypes(Tensor(rng.normal(size=(8, 4, 4))), (rng.random((16, 16)) > 0.5).astype(np.uint8))
    scaled = PrototypeSet(ps.fg * 3.7, ps.bg * 3.7, ps.fg_cells, ps.bg_cells)
    outs = []
    for p in (ps, scaled):
        fg_hat, bg_hat = aggregate_prototypes(score_maps(q, p), p)
        outs.append(predict(q, fg_hat, bg_hat, 16, 16).data)
    assert np.abs(outs[0] - outs[1]).max() < 1e-5


def test_segment_gradients_reach_every_parameter():
    params = init_params(EncoderConfig(), 0)
    img, mask = blob_image(0)
    out = segment(params, img, mask, img)
    (out[1] * Tensor(mask.astype(np.float32))).sum().backward()
    for name, t in params.items():
        assert t.grad is not None and np.any(t.grad != 0), name


def test_config_knobs_flow_through():
    params = init_params(EncoderConfig(), 0)
    img, mask = blob_image(0)
    soft = segment(params, img, mask, img, ProtoConfig(alpha_p=1.0)).data[1]
    sharp = segment(params, img, mask, img).data[1]
    assert np.abs(soft - 0.5).max() < np.abs(sharp - 0.5).max()
    with pytest.raises(ValueError):
        EncoderConfig(widths=(8, 8))
    assert T.get_default_dtype() == np.float32
