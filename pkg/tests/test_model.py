import numpy as np
import pytest

from udmlss.errors import DimensionError
from udmlss.losses import rotation_loss
from udmlss.model import (
    BackboneSpec, backbone_forward, embed, expected_param_count, infer, init_params, rotation_logits,
)
from udmlss.tensor import Tensor, grad_check, grad_check_many, tsum

SMALL = BackboneSpec("small_conv", (3, 4, 5), 1, 8)


def model64(seed=0, spec=SMALL, d_embed=3):
    return init_params(spec, d_embed, seed, np.float64)


def test_same_seed_bitwise():
    a, b = init_params(BackboneSpec(), 32, 5), init_params(BackboneSpec(), 32, 5)
    for x, y in zip(a.parameters(), b.parameters()):
        assert x.data.tobytes() == y.data.tobytes()


def test_seed_sensitivity():
    a, b = init_params(BackboneSpec(), 32, 5), init_params(BackboneSpec(), 32, 6)
    assert not np.array_equal(a.backbone[0]["w"].data, b.backbone[0]["w"].data)


def test_default_param_count():
    # conv 1->16, 16->32, 32->64 (3x3 kernels + bias), embed 64->32, rotation 64->4
    hand = (16 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64) + (64 * 32 + 32) + (64 * 4 + 4)
    assert hand == 25636
    p = init_params(BackboneSpec(), 32, 0)
    assert p.num_parameters() == hand == expected_param_count(BackboneSpec(), 32)


def test_mlp_param_count():
    spec = BackboneSpec("mlp", (10, 6), 1, 16)
    assert init_params(spec, 4, 0).num_parameters() == expected_param_count(spec, 4) == 256 * 10 + 10 + 66 + 28 + 28


def test_he_scale():
    p = init_params(BackboneSpec(widths=(64, 64, 64)), 32, 0, np.float64)
    w = p.backbone[1]["w"].data
    assert w.std() == pytest.approx(np.sqrt(2 / (64 * 9)), rel=0.05)
    assert not p.backbone[1]["b"].data.any()


def test_zero_images_zero_features():
    p = model64()
    out = backbone_forward(p, Tensor(np.zeros((2, 1, 8, 8))))
    assert out.shape == (2, 5) and not out.data.any()


def test_batch_independence(rng):
    p = model64()
    x = rng.standard_normal((2, 1, 8, 8))
    one = backbone_forward(p, Tensor(x[:1])).data
    two = backbone_forward(p, Tensor(x)).data
    np.testing.assert_allclose(one[0], two[0], rtol=0, atol=1e-14)


def test_permutation_equivariance(rng):
    p = model64()
    x = rng.standard_normal((5, 1, 8, 8))
    perm = rng.permutation(5)
    a = embed(p, backbone_forward(p, Tensor(x))).data
    b = embed(p, backbone_forward(p, Tensor(x[perm]))).data
    np.testing.assert_allclose(a[perm], b, atol=1e-14)


def test_backbone_gradcheck(rng):
    p = model64(1)
    x = Tensor(rng.standard_normal((3, 1, 8, 8)))
    w = rng.standard_normal((3, 5))
    assert grad_check_many(lambda: tsum(backbone_forward(p, x) * Tensor(w)), p.parameters()[:6]) < 1e-4


def test_embedding_rows_unit(rng):
    p = init_params(BackboneSpec(), 32, 0, np.float64)
    e = infer(p, rng.uniform(size=(7, 1, 32, 32)))
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1, atol=1e-6)


def test_duplicated_rows_duplicate(rng):
    p = model64()
    f = rng.standard_normal((1, 5))
    e = embed(p, Tensor(np.vstack([f, f]))).data
    assert e[0].tobytes() == e[1].tobytes()


@pytest.mark.parametrize("d", [64, 128, 256, 512, 1024])
def test_embedding_sizes(d):
    p = init_params(SMALL, d, 0, np.float64)
    assert embed(p, Tensor(np.ones((2, 5)))).shape == (2, d)


def test_rotation_head_zero_case():
    p = model64()
    p.rot_head["w"].data[:] = 0
    logits = rotation_logits(p, Tensor(np.zeros((8, 5))))
    assert logits.shape == (8, 4) and not logits.data.any()
    assert rotation_loss(logits, np.tile(np.arange(4), 2)).item() == pytest.approx(4 * np.log(4))


def test_rotation_head_gradcheck(rng):
    p = model64()
    z = np.tile(np.arange(4), 2)
    assert grad_check(lambda f: rotation_loss(rotation_logits(p, f), z), Tensor(rng.standard_normal((8, 5)))) < 1e-4


def test_heads_share_backbone(rng):
    p = model64()
    x = Tensor(rng.standard_normal((2, 1, 8, 8)))
    f = backbone_forward(p, x)
    e0, r0 = embed(p, f).data, rotation_logits(p, f).data
    p.backbone[0]["w"].data[0, 0, 1, 1] += 0.5
    f = backbone_forward(p, x)
    assert not np.allclose(embed(p, f).data, e0)
    assert not np.allclose(rotation_logits(p, f).data, r0)


def test_wrong_channels():
    with pytest.raises(DimensionError):
        backbone_forward(model64(), Tensor(np.zeros((1, 3, 8, 8))))
