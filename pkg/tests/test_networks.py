import numpy as np
import pytest
import torch

from boostgan.booster import Booster, ResBlock, boost_forward, parameter_audit
from boostgan.checkpoint import CheckpointError, load_container, module_entry, restore_module, save_container
from boostgan.discriminator import EPS, Discriminator, DiscriminatorConfig, disc_forward
from boostgan.facedata import make_keypoint_quadruple
from boostgan.generator import (MINIATURE, CoarseGenerator, GeneratorConfig, coarse_forward,
                                coarse_forward_quadruple, describe, images_to_tensor)
from boostgan.gradcheck import fd_max_rel_error, network_suite
from boostgan.identity import LinearExtractor, StandinExtractor, extract, parameter_bytes

SMALL = GeneratorConfig(image_size=128, widths=(8, 8, 16, 16, 32), bottleneck=32, bottleneck_channels=8)


@pytest.fixture(scope="module")
def small_gen():
    torch.manual_seed(0)
    return CoarseGenerator(SMALL).eval()


@pytest.fixture(scope="module")
def booster():
    torch.manual_seed(0)
    return Booster().eval()


def _rand(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed))


# ------------------------------------------------------------------ generator

def test_generator_shapes_and_range(small_gen):
    out = coarse_forward(small_gen, _rand(2, 3, 128, 128))
    assert out.full.shape == (2, 3, 128, 128)
    assert out.half.shape == (2, 3, 64, 64)
    assert out.quarter.shape == (2, 3, 32, 32)
    for t in out.scales():
        assert t.min() >= 0 and t.max() <= 1


def test_default_generator_table():
    table = describe(CoarseGenerator())
    assert table[-1]["output"] == [128, 128, 3]
    enc = [r for r in table if r["layer"].startswith("enc")]
    assert [r["output"][2] for r in enc] == [64, 64, 128, 256, 512]
    assert enc[-1]["output"][:2] == [8, 8]
    assert next(r for r in table if r["layer"] == "code")["output"] == [256]
    assert next(r for r in table if r["layer"] == "head_half")["output"] == [64, 64, 3]
    assert next(r for r in table if r["layer"] == "head_quarter")["output"] == [32, 32, 3]


def test_describe_param_total(small_gen):
    table = describe(small_gen)
    assert sum(r["params"] for r in table) == sum(p.numel() for p in small_gen.parameters())
    assert describe(small_gen) == table


def test_generator_wrong_shape(small_gen):
    with pytest.raises(ValueError, match=r"\(N, 3, 128, 128\)"):
        coarse_forward(small_gen, torch.zeros(1, 3, 64, 64))


def test_generator_deterministic_in_eval(small_gen):
    x = _rand(1, 3, 128, 128)
    a, b = coarse_forward(small_gen, x), coarse_forward(small_gen, x)
    assert torch.equal(a.full, b.full) and torch.equal(a.half, b.half)


def test_side_outputs_are_not_downsamples(small_gen):
    out = coarse_forward(small_gen, _rand(1, 3, 128, 128))
    pooled = torch.nn.functional.avg_pool2d(out.full, 2)
    assert not torch.allclose(pooled, out.half, atol=1e-3)


def test_encoder_weight_perturbation_changes_output(small_gen):
    x = _rand(1, 3, 128, 128)
    before = coarse_forward(small_gen, x).full.clone()
    w = small_gen.enc[0][0].weight
    with torch.no_grad():
        w[0, 0, 3, 3] += 1e-3
        after = coarse_forward(small_gen, x).full.clone()
        w[0, 0, 3, 3] -= 1e-3
    assert not torch.equal(before, after)


def test_quadruple_weight_sharing(small_gen, sample):
    quad = make_keypoint_quadruple(sample)
    quad.images[2] = quad.images[0].copy()
    outs = coarse_forward_quadruple(small_gen, quad)
    assert len(outs) == 4
    assert torch.equal(outs[0].full, outs[2].full)
    assert not torch.equal(outs[0].full, outs[1].full)


def test_quadruple_batched_matches_looped(small_gen, sample):
    quad = make_keypoint_quadruple(sample)
    batched = coarse_forward_quadruple(small_gen, quad)
    for img, out in zip(quad.images, batched):
        single = coarse_forward(small_gen, images_to_tensor([img]))
        for a, b in zip(single.scales(), out.scales()):
            assert torch.allclose(a, b, atol=1e-5)


def test_generator_gradient_miniature():
    err = network_suite(coords=24)["generator(sum of scale means)"]
    assert err <= 1e-3


def test_table_round_trips_through_checkpoint(tmp_path, small_gen):
    path = tmp_path / "g.pt"
    save_container(path, {"generator": module_entry(small_gen, SMALL.to_json(), describe(small_gen))})
    blob = load_container(path)
    assert blob["namespaces"]["generator"]["table"] == describe(small_gen)
    fresh = CoarseGenerator(SMALL)
    restore_module(fresh, blob["namespaces"]["generator"], describe(fresh))
    assert parameter_bytes(fresh) == parameter_bytes(small_gen)


def test_checkpoint_rejects_mismatched_table(tmp_path, small_gen):
    path = tmp_path / "g.pt"
    save_container(path, {"generator": module_entry(small_gen, SMALL.to_json(), describe(small_gen))})
    other = CoarseGenerator(MINIATURE)
    with pytest.raises(CheckpointError):
        restore_module(other, load_container(path)["namespaces"]["generator"], describe(other))


def test_corrupt_checkpoint(tmp_path):
    path = tmp_path / "junk.pt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_container(path)


# ------------------------------------------------------------------ booster

BOOSTER_ROWS = [
    ("resblock1", "5x5,12 twice", [128, 128, 12]),
    ("conv1", "5x5,64", [128, 128, 64]),
    ("resblock2", "3x3,64 twice", [128, 128, 64]),
    ("conv2", "3x3,32", [128, 128, 32]),
    ("conv3", "3x3,3", [128, 128, 3]),
]


def booster_param_total():
    # conv weights + biases, plus BN scale/shift after every conv except the last
    def conv(k, cin, cout):
        return k * k * cin * cout + cout
    bn = lambda c: 2 * c
    return (2 * (conv(5, 12, 12) + bn(12))
            + conv(5, 12, 64) + bn(64)
            + 2 * (conv(3, 64, 64) + bn(64))
            + conv(3, 64, 32) + bn(32)
            + conv(3, 32, 3))


def test_parameter_audit_matches_layer_table(booster):
    rows = parameter_audit(booster)
    assert [(r["layer"], r["filter"], r["output"]) for r in rows] == BOOSTER_ROWS


def test_booster_param_total(booster):
    assert booster_param_total() == 120171
    assert sum(r["params"] for r in parameter_audit(booster)) == booster_param_total()
    assert sum(p.numel() for p in booster.parameters()) == booster_param_total()


def test_booster_intermediate_shapes(booster):
    x = torch.cat([_rand(1, 3, 128, 128, seed=i) for i in range(4)], 1)
    shapes = [tuple(t.shape[1:]) for t in booster.stages(x)]
    assert shapes == [(12, 128, 128), (64, 128, 128), (64, 128, 128), (32, 128, 128), (3, 128, 128)]


def test_booster_output_range_and_determinism(booster):
    ins = [_rand(1, 3, 128, 128, seed=i) for i in range(4)]
    a = boost_forward(booster, ins)
    assert a.shape == (1, 3, 128, 128)
    assert a.min() >= 0 and a.max() <= 1
    assert torch.equal(a, boost_forward(booster, ins))


def test_booster_order_sensitive(booster):
    ins = [_rand(1, 3, 128, 128, seed=i) for i in range(4)]
    permuted = [ins[2], ins[0], ins[3], ins[1]]
    assert not torch.equal(boost_forward(booster, ins), boost_forward(booster, permuted))


def test_booster_rejects_bad_inputs(booster):
    ins = [torch.zeros(1, 3, 128, 128)] * 3
    with pytest.raises(ValueError, match="exactly 4"):
        boost_forward(booster, ins)
    with pytest.raises(ValueError):
        boost_forward(booster, [torch.zeros(1, 3, 64, 64)] * 4)


def test_resblock_identity_when_zeroed():
    block = ResBlock(6, 3).eval()
    with torch.no_grad():
        for conv in (block.conv_a, block.conv_b):
            conv.weight.zero_()
            conv.bias.zero_()
        # BN in eval with default running stats: zero in, zero out
    x = _rand(2, 6, 8, 8)
    assert torch.equal(block(x), x)


def test_booster_gradient_miniature():
    assert network_suite(coords=24)["booster(mean)"] <= 1e-3


# ------------------------------------------------------------------ discriminator

def test_discriminator_range_and_determinism():
    torch.manual_seed(0)
    d = Discriminator(DiscriminatorConfig(widths=(8, 8, 16, 16, 16)))
    x = _rand(3, 3, 128, 128)
    p = disc_forward(d, x)
    assert p.shape == (3,)
    assert torch.all(p >= EPS) and torch.all(p <= 1 - EPS)
    assert torch.equal(p, disc_forward(d, x))
    single = disc_forward(d, x[1])
    assert single.dim() == 0
    assert torch.allclose(single, p[1], atol=1e-5)


def test_discriminator_clamps_extremes():
    d = Discriminator(DiscriminatorConfig(image_size=8, widths=(2, 2)))
    with torch.no_grad():
        d.head.bias.fill_(1e4)
    assert disc_forward(d, torch.zeros(3, 8, 8)).item() == pytest.approx(1 - EPS)
    with torch.no_grad():
        d.head.bias.fill_(-1e4)
    assert disc_forward(d, torch.zeros(3, 8, 8)).item() == pytest.approx(EPS)


def test_discriminator_shape_error():
    d = Discriminator(DiscriminatorConfig(image_size=8, widths=(2, 2)))
    with pytest.raises(ValueError):
        disc_forward(d, torch.zeros(1, 3, 16, 16))


def test_discriminator_gradient_miniature():
    assert network_suite(coords=24)["discriminator(log p)"] <= 1e-3


# ------------------------------------------------------------------ identity

def test_extract_taps_declared_dims():
    ext = StandinExtractor(widths=(4, 4, 8, 8), fc_dim=5).freeze()
    x = _rand(2, 3, 32, 32)
    taps = extract(ext, x)
    assert taps.pool.shape == (2, ext.pool_dim) and taps.fc.shape == (2, 5)
    again = extract(ext, x)
    assert torch.equal(taps.pool, again.pool) and torch.equal(taps.fc, again.fc)


def test_extract_gradient_wrt_pixels():
    assert network_suite(coords=24)["extractor(sum pool wrt pixels)"] <= 1e-3


def test_frozen_extractor_stays_put():
    ext = StandinExtractor(widths=(4, 4, 8, 8), fc_dim=5).freeze()
    before = parameter_bytes(ext)
    ext.train()
    assert not ext.training
    x = _rand(2, 3, 32, 32).requires_grad_(True)
    extract(ext, x).fc.sum().backward()
    assert x.grad is not None and x.grad.abs().sum() > 0
    assert all(p.grad is None for p in ext.parameters())
    assert parameter_bytes(ext) == before


def test_linear_extractor_is_linear():
    ext = LinearExtractor(8).double()
    a, b = torch.rand(1, 3, 8, 8, dtype=torch.float64), torch.rand(1, 3, 8, 8, dtype=torch.float64)
    ta, tb, tab = extract(ext, a), extract(ext, b), extract(ext, a + 2 * b)
    assert torch.allclose(tab.fc, ta.fc + 2 * tb.fc)
    assert torch.allclose(tab.pool, ta.pool + 2 * tb.pool)


def test_fd_helper_on_known_function():
    x = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64, requires_grad=True)
    assert fd_max_rel_error(lambda: (x ** 3).sum() + torch.sin(x).prod(), [x]) < 1e-6
