import struct

import numpy as np
import pytest
import torch

from conftest import TINY, randomize_adapters
from flowtint.condnet import (COLD_START, POST_TRAINING, BranchLayout, ConditioningContext, ContextBatch,
                              NetConfig, VelocityField, adapter_digest, attach_adapter, base_digest,
                              build_mask, checkpoint_bytes, grad, load_checkpoint, save_checkpoint,
                              tokenize)
from flowtint.errors import ConfigurationError, DataError, DimensionError, DomainError, LayoutError
from flowtint.flow import fm_loss


def brute_mask(layout):
    """Direct enumeration of the three attention rules."""
    n = layout.length
    out = np.zeros((n, n), dtype=bool)
    for q in range(n):
        for k in range(n):
            if q in layout.ref_span:
                out[q, k] = k in layout.ref_span
            elif q in layout.src_span:
                out[q, k] = k in layout.src_span
            else:
                out[q, k] = k in layout.ref_span or k in layout.src_span or (k in layout.main_span and k <= q)
    return out


def test_mask_six_tokens():
    layout = BranchLayout(range(0, 2), range(2, 4), range(4, 6))
    allowed = {(q, k) for q, k in zip(*np.nonzero(build_mask(layout).numpy()))}
    expected = {(0, 0), (0, 1), (1, 0), (1, 1), (2, 2), (2, 3), (3, 2), (3, 3),
                (4, 0), (4, 1), (4, 2), (4, 3), (4, 4)} | {(5, k) for k in range(6)}
    assert allowed == expected


def test_mask_one_token_per_branch():
    mask = build_mask(BranchLayout(range(0, 1), range(1, 2), range(2, 3)))
    assert mask.int().tolist() == [[1, 0, 0], [0, 1, 0], [1, 1, 1]]


@pytest.mark.parametrize("sizes", [(1, 1, 1), (3, 2, 5), (4, 4, 12), (16, 16, 24)])
def test_mask_matches_enumeration(sizes):
    a, b, c = sizes
    layout = BranchLayout(range(0, a), range(a, a + b), range(a + b, a + b + c))
    mask = build_mask(layout).numpy()
    assert np.array_equal(mask, brute_mask(layout))
    assert mask.any(axis=1).all()
    assert mask.diagonal().all()


@pytest.mark.parametrize("layout", [
    BranchLayout(range(0, 2), range(2, 4), range(4, 4)),       # empty main
    BranchLayout(range(0, 3), range(2, 4), range(4, 6)),       # overlap
    BranchLayout(range(0, 2), range(3, 4), range(4, 6)),       # gap
    BranchLayout(range(2, 4), range(0, 2), range(4, 6)),       # wrong order
])
def test_bad_layouts(layout):
    with pytest.raises(LayoutError):
        build_mask(layout)


def test_default_layout_sizes():
    cfg = NetConfig()
    layout = cfg.layout()
    assert len(layout.ref_span) == len(layout.src_span) == 64
    assert len(layout.main_span) == 8 + 64


def test_tokenize_default_prompt():
    ids = tokenize("transfer the color preset of the reference image to the source image")
    assert len(ids) == 7 and 1 not in ids
    with pytest.raises(ConfigurationError):
        tokenize("color " * 9)


def _ctx(rng, size=4):
    return ConditioningContext(rng.random((size, size, 3)), rng.random((size, size, 3)))


def test_context_shape_check(rng):
    with pytest.raises(DimensionError):
        ConditioningContext(rng.random((4, 4, 3)), rng.random((8, 8, 3)))


def test_zero_head_outputs_zero(rng):
    f = VelocityField(TINY, seed=1, dtype=torch.float64, zero_head=True)
    for _ in range(3):
        x = torch.as_tensor(rng.standard_normal((4, 4, 3)))
        assert torch.equal(f(x, _ctx(rng), float(rng.random())), torch.zeros(4, 4, 3, dtype=torch.float64))


def test_forward_shapes_and_errors(tiny_net, rng):
    x = torch.as_tensor(rng.standard_normal((2, 4, 4, 3)))
    ctx = _ctx(rng)
    assert tiny_net(x, ctx, 0.3).shape == (2, 4, 4, 3)
    assert tiny_net(x[0], ctx, 0.3).shape == (4, 4, 3)
    with pytest.raises(DomainError):
        tiny_net(x, ctx, 1.2)
    with pytest.raises(DimensionError):
        tiny_net(torch.zeros(2, 5, 5, 3), ctx, 0.3)


def test_forward_deterministic(tiny_net, rng):
    x = torch.as_tensor(rng.standard_normal((4, 4, 3)))
    ctx = _ctx(rng)
    assert torch.equal(tiny_net(x, ctx, 0.4), tiny_net(x, ctx, 0.4))


def _features(field, x, ctx, t=0.5):
    batch = ContextBatch.collate([ctx], field.cfg.max_prompt, field.dtype)
    return field.features(x[None], batch, torch.tensor([t], dtype=torch.float64))[0]


def test_main_perturbation_leaves_image_branches(tiny_net, rng):
    layout = tiny_net.layout
    x = torch.as_tensor(rng.standard_normal((4, 4, 3)))
    ctx = _ctx(rng)
    a = _features(tiny_net, x, ctx)
    b = _features(tiny_net, x + torch.as_tensor(rng.standard_normal((4, 4, 3))), ctx)
    img = list(layout.ref_span) + list(layout.src_span)
    assert torch.equal(a[img], b[img])
    assert not torch.equal(a[list(layout.main_span)], b[list(layout.main_span)])


def test_later_latent_token_does_not_reach_earlier(tiny_net, rng):
    layout = tiny_net.layout
    text = tiny_net.cfg.max_prompt
    x = torch.as_tensor(rng.standard_normal((4, 4, 3)))
    ctx = _ctx(rng)
    y = x.clone()
    y[2:, 2:] += 1.0  # last 2x2 patch = last latent token
    a, b = _features(tiny_net, x, ctx), _features(tiny_net, y, ctx)
    last = layout.main_span[-1]
    assert torch.equal(a[:last], b[:last])
    assert not torch.equal(a[last], b[last])
    assert layout.main_span[text] < last


def test_reference_perturbation_reaches_main(tiny_net, rng):
    x = torch.as_tensor(rng.standard_normal((4, 4, 3)))
    ctx = _ctx(rng)
    moved = ConditioningContext(ctx.source, ctx.reference + 0.3)
    assert not torch.equal(tiny_net(x, ctx, 0.5), tiny_net(x, moved, 0.5))


def test_attach_is_noop(tiny_net, rng):
    x = torch.as_tensor(rng.standard_normal((4, 4, 3)))
    ctx = _ctx(rng)
    before = tiny_net(x, ctx, 0.7)
    attach_adapter(tiny_net, 1, 1.0, COLD_START)
    assert torch.equal(tiny_net(x, ctx, 0.7), before)
    attach_adapter(tiny_net, 2, 4.0, POST_TRAINING)
    assert torch.equal(tiny_net(x, ctx, 0.7), before)


def test_nonzero_b_changes_output(tiny_adapted, rng):
    x = torch.as_tensor(rng.standard_normal((4, 4, 3)))
    ctx = _ctx(rng)
    before = tiny_adapted(x, ctx, 0.7)
    with torch.no_grad():
        for name, p in tiny_adapted.adapter_parameters():
            if name.endswith(".B"):
                p.fill_(0.1)
    assert not torch.equal(tiny_adapted(x, ctx, 0.7), before)


def test_effective_weight_is_base_plus_scaled_products(tiny_net):
    attach_adapter(tiny_net, 1, 3.0, COLD_START)
    attach_adapter(tiny_net, 2, 5.0, POST_TRAINING)
    randomize_adapters(tiny_net)
    for layer in tiny_net.adapted_layers():
        expect = layer.weight.clone()
        for ad in layer.adapters:
            expect += (ad.alpha / ad.rank) * ad.B @ ad.A
        assert torch.allclose(layer.effective_weight(), expect, atol=1e-14)


def test_adapter_init_ranges(tiny_net):
    attach_adapter(tiny_net, 1, 1.0, COLD_START)
    for layer in tiny_net.adapted_layers():
        ad = layer.adapters[0]
        assert torch.count_nonzero(ad.B) == 0
        bound = 1 / np.sqrt(ad.A.shape[1])
        assert float(ad.A.abs().max()) <= bound


def test_rank_too_large(tiny_net):
    with pytest.raises(ConfigurationError):
        attach_adapter(tiny_net, 5, 1.0, COLD_START)
    with pytest.raises(ConfigurationError):
        attach_adapter(tiny_net, 0, 1.0, COLD_START)


def test_grad_zero_at_target(tiny_adapted, rng):
    tiny_adapted.set_trainable(COLD_START)
    randomize_adapters(tiny_adapted)
    x = torch.as_tensor(rng.standard_normal((4, 4, 3)))
    ctx = _ctx(rng)
    with torch.no_grad():
        target = tiny_adapted(x, ctx, 0.5).clone()
    loss, grads = grad(tiny_adapted, lambda f: fm_loss(f(x, ctx, 0.5), target))
    assert float(loss) == 0.0
    assert grads and all(torch.count_nonzero(g) == 0 for g in grads.values())


def test_grad_skips_frozen_adapter(tiny_adapted, rng):
    attach_adapter(tiny_adapted, 1, 1.0, POST_TRAINING)
    tiny_adapted.set_trainable(POST_TRAINING)
    randomize_adapters(tiny_adapted)
    x = torch.as_tensor(rng.standard_normal((4, 4, 3)))
    ctx = _ctx(rng)
    target = torch.zeros(4, 4, 3, dtype=torch.float64)
    _, grads = grad(tiny_adapted, lambda f: fm_loss(f(x, ctx, 0.5), target))
    assert grads and all(".adapters.1." in n for n in grads)
    assert not any(p.grad is not None for _, p in tiny_adapted.adapter_parameters(COLD_START))


def test_grad_matches_central_differences(tiny_adapted, rng):
    tiny_adapted.set_trainable(COLD_START)
    randomize_adapters(tiny_adapted, seed=4)
    x = torch.as_tensor(rng.standard_normal((4, 4, 3)))
    ctx = _ctx(rng)
    target = torch.as_tensor(rng.standard_normal((4, 4, 3)))
    closure = lambda f: fm_loss(f(x, ctx, 0.3), target)  # noqa: E731
    _, grads = grad(tiny_adapted, closure)
    params = dict(tiny_adapted.active_parameters())
    h = 1e-4
    for name, g in list(grads.items())[:6]:
        p = params[name]
        flat = p.data.view(-1)
        for i in range(min(4, flat.numel())):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                up = float(closure(tiny_adapted))
                flat[i] = old - h
                down = float(closure(tiny_adapted))
                flat[i] = old
            fd = (up - down) / (2 * h)
            assert abs(fd - g.view(-1)[i].item()) <= 1e-3 * max(abs(fd), 1e-6)


def test_checkpoint_roundtrip(tmp_path, tiny_adapted, rng):
    randomize_adapters(tiny_adapted)
    tiny_adapted.step_counter = 17
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_adapted, path)
    back = load_checkpoint(path, dtype=torch.float64)
    assert back.step_counter == 17
    assert back.adapter_specs == tiny_adapted.adapter_specs
    assert base_digest(back) == base_digest(tiny_adapted)
    assert adapter_digest(back, COLD_START) == adapter_digest(tiny_adapted, COLD_START)
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_layout(tmp_path, tiny_net):
    raw = checkpoint_bytes(tiny_net)
    assert raw[:4] == b"FTCK"
    version, hlen = struct.unpack("<II", raw[4:12])
    assert version == 1
    import json
    header = json.loads(raw[12:12 + hlen])
    n = sum(int(np.prod(s)) for _, s in header["tensors"])
    assert len(raw) == 12 + hlen + 4 * n
    first_name, first_shape = header["tensors"][0]
    first = np.frombuffer(raw, dtype="<f4", count=int(np.prod(first_shape)), offset=12 + hlen)
    param = dict(tiny_net.named_parameters())[first_name]
    assert np.array_equal(first, param.detach().numpy().astype(np.float32).ravel())


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    with pytest.raises(DataError):
        load_checkpoint(bad)
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.ckpt")
