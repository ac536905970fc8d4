import copy

import pytest
import torch

from keystego.backbone import (
    FILL_CACHE_SIZE,
    BackboneConfigError,
    MaskedBackbone,
    TaskError,
    TaskMode,
    build_backbone,
    extract_recovery_features,
    run_task,
    stack_inputs,
)
from keystego.keyed_weights import KeyRegistry, assemble, generate_key_weights
from keystego.models import BackboneConfig

from .conftest import random_images


def test_parameter_count_and_manifest_for_known_config():
    manifest, net = build_backbone(BackboneConfig(width=16, depth=2, side=32))
    # inc 880, down stages 4704 + 18624, up stages 27744 + 6960, outc 51
    assert sum(p.numel() for p in net.parameters()) == 58963
    assert manifest.total_size == 58512
    assert manifest.names == (
        "inc.weight",
        "downs.0.conv.weight",
        "downs.1.conv.weight",
        "ups.0.conv.weight",
        "ups.1.conv.weight",
        "outc.weight",
    )


def test_output_shape_and_range():
    _, net = build_backbone(BackboneConfig(width=8, depth=2, side=16))
    out = net(random_images(2, 16).repeat(1, 2, 1, 1))
    assert out.shape == (2, 3, 16, 16)
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_zero_weights_give_zero_preactivation():
    _, net = build_backbone(BackboneConfig(width=8, depth=2, side=16))
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    x = random_images(1, 16).repeat(1, 2, 1, 1)
    assert torch.equal(net(x, activate=False), torch.zeros(1, 3, 16, 16))
    assert torch.equal(net(x), torch.full((1, 3, 16, 16), 0.5))


def test_build_rejects_indivisible_side():
    with pytest.raises(BackboneConfigError):
        build_backbone(BackboneConfig(width=8, depth=3, side=20))


def test_depth_zero_is_two_layer_net():
    manifest, _ = build_backbone(BackboneConfig(width=4, depth=0, side=8))
    assert manifest.names == ("inc.weight", "outc.weight")


# ============================================
# Masked backbone
# ============================================
def test_init_is_seeded(tiny_backbone):
    a = MaskedBackbone(tiny_backbone, 0.7, mask_seed=1, init_seed=5)
    b = MaskedBackbone(tiny_backbone, 0.7, mask_seed=1, init_seed=5)
    c = MaskedBackbone(tiny_backbone, 0.7, mask_seed=1, init_seed=6)
    for name, p in a.net.state_dict().items():
        assert torch.equal(p, b.net.state_dict()[name])
    assert not torch.equal(a.net.inc.weight, c.net.inc.weight)
    assert float(a.net.inc.bias.abs().sum()) == 0.0


def test_keyed_forward_uses_assembled_weights(tiny_backbone, registry):
    model = MaskedBackbone(tiny_backbone, 0.6, mask_seed=3)
    fill = registry.embed_fill(1, model.manifest)
    expected_weights = assemble(model.shared_weights(), model.mask, fill)
    reference = copy.deepcopy(model.net)
    with torch.no_grad():
        for name in model.manifest.names:
            reference.get_parameter(name).copy_(expected_weights[name].float())
    x = random_images(2, 16).repeat(1, 2, 1, 1)
    with torch.no_grad():
        assert torch.allclose(model(x, fill=fill), reference(x), atol=1e-6)
        assert not torch.allclose(model(x, fill=fill), model(x), atol=1e-4)


def test_repeated_forward_is_bit_identical(tiny_backbone, registry):
    model = MaskedBackbone(tiny_backbone, 0.6, mask_seed=3)
    secret, cover = random_images(2, 16, seed=1), random_images(2, 16, seed=2)
    with torch.no_grad():
        first = run_task(model, registry, TaskMode.embed(1), [secret, cover])
        assert torch.equal(first, run_task(model, registry, TaskMode.embed(1), [secret, cover]))


def test_key_equal_to_init_seed_does_not_reproduce_purify(tiny_backbone):
    model = MaskedBackbone(tiny_backbone, 0.6, mask_seed=3, init_seed=1)
    registry = KeyRegistry.from_values([(5, 1)])
    x = random_images(2, 16, seed=4)
    with torch.no_grad():
        purified = run_task(model, registry, TaskMode.purify(), [x])
        recovered = run_task(model, registry, TaskMode.recover(1), [x])
        stego = run_task(model, KeyRegistry.from_values([(1, 5)]), TaskMode.embed(1), [x, x])
        assert not torch.equal(recovered, purified)
        assert not torch.equal(stego, purified)


def test_purify_ignores_registry_contents(tiny_backbone, registry):
    model = MaskedBackbone(tiny_backbone, 0.6, mask_seed=3)
    x = random_images(2, 16, seed=4)
    with torch.no_grad():
        expected = run_task(model, None, TaskMode.purify(), [x])
        assert torch.equal(run_task(model, registry, TaskMode.purify(), [x]), expected)
        assert torch.equal(run_task(model, KeyRegistry.random(5, seed=99), TaskMode.purify(), [x]), expected)


def test_fill_cache_stays_bounded(tiny_backbone):
    model = MaskedBackbone(tiny_backbone, 0.6, mask_seed=3)
    x = random_images(1, 16).repeat(1, 2, 1, 1)
    with torch.no_grad():
        for key in range(1000, 1000 + 3 * FILL_CACHE_SIZE):
            model(x, fill=generate_key_weights(key, model.manifest))
    assert len(model._fill_cache) == FILL_CACHE_SIZE


def test_alpha_one_ignores_the_fill(tiny_backbone, registry):
    model = MaskedBackbone(tiny_backbone, 1.0, mask_seed=3)
    x = random_images(2, 16).repeat(1, 2, 1, 1)
    with torch.no_grad():
        assert torch.equal(model(x, fill=registry.embed_fill(2, model.manifest)), model(x))


def test_mask_gradients_zero_the_complement(tiny_backbone, registry):
    model = MaskedBackbone(tiny_backbone, 0.5, mask_seed=3)
    x = random_images(2, 16)
    model(x, fill=registry.recover_fill(1, model.manifest)).sum().backward()
    model.mask_gradients()
    for name, p in model.masked_parameters().items():
        assert float(p.grad[~model.mask.bits[name]].abs().sum()) == 0.0
        assert float(p.grad[model.mask.bits[name]].abs().sum()) > 0.0


def test_mismatched_mask_is_rejected(tiny_backbone):
    model = MaskedBackbone(tiny_backbone, 0.5, mask_seed=3)
    with pytest.raises(BackboneConfigError):
        MaskedBackbone(tiny_backbone, 0.5, mask_seed=4, mask=model.mask)


# ============================================
# Task modes
# ============================================
def test_purify_duplicates_single_image(tiny_backbone):
    model = MaskedBackbone(tiny_backbone, 0.7, mask_seed=0)
    x = random_images(3, 16)
    out = run_task(model, None, TaskMode.purify(), [x])
    with torch.no_grad():
        expected = model.net(torch.cat([x, x], dim=1)).clamp(0, 1)
    assert torch.equal(out, expected)


def test_single_plane_inputs_keep_their_rank(tiny_backbone, registry):
    model = MaskedBackbone(tiny_backbone, 0.7, mask_seed=0)
    secret, cover = random_images(2, 16)
    stego = run_task(model, registry, TaskMode.embed(1), [secret, cover])
    assert stego.shape == (3, 16, 16)
    assert run_task(model, registry, TaskMode.recover(1), [stego]).shape == (3, 16, 16)


def test_keys_change_the_output(tiny_backbone, registry):
    model = MaskedBackbone(tiny_backbone, 0.5, mask_seed=0)
    stego = random_images(2, 16)
    r1 = run_task(model, registry, TaskMode.recover(1), [stego])
    r2 = run_task(model, registry, TaskMode.recover(2), [stego])
    assert not torch.equal(r1, r2)


def test_task_arity_and_index_errors(tiny_backbone, registry):
    model = MaskedBackbone(tiny_backbone, 0.7, mask_seed=0)
    x = random_images(1, 16)
    with pytest.raises(TaskError):
        run_task(model, registry, TaskMode.embed(1), [x])
    with pytest.raises(TaskError):
        run_task(model, registry, TaskMode.recover(1), [x, x])
    with pytest.raises(TaskError):
        run_task(model, registry, TaskMode.recover(len(registry) + 1), [x])
    with pytest.raises(TaskError):
        run_task(model, None, TaskMode.embed(1), [x, x])
    with pytest.raises(TaskError):
        TaskMode(TaskMode.purify().kind, key_index=1)
    with pytest.raises(TaskError):
        stack_inputs(TaskMode.purify(), [torch.zeros(1, 16, 16)])


def test_recovery_features_have_decoder_width(tiny_backbone, registry):
    model = MaskedBackbone(tiny_backbone, 0.7, mask_seed=0)
    feats = extract_recovery_features(model, registry, 2, random_images(4, 16))
    assert feats.shape == (4, tiny_backbone.width * 16 * 16)
    single = extract_recovery_features(model, registry, 2, random_images(1, 16)[0])
    assert single.ndim == 1


def test_registry_with_one_key_pair_works(tiny_backbone):
    model = MaskedBackbone(tiny_backbone, 0.7, mask_seed=0)
    reg = KeyRegistry.random(1, seed=0)
    secret, cover = random_images(2, 16)
    stego = run_task(model, reg, TaskMode.embed(1), [secret, cover])
    assert run_task(model, reg, TaskMode.recover(1), [stego]).shape == secret.shape
