import numpy as np
import pytest
import torch

from flowtint.condnet import COLD_START, NetConfig, VelocityField, attach_adapter
from flowtint.pool import procedural_pool, quantize

# 4x4 images, 2x2 patches, width 4: 364 base weights + 48 per rank-1 adapter stack
TINY = NetConfig(image_size=4, patch=2, width=4, heads=2, blocks=1, mlp_ratio=1, max_prompt=8)

ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str = ""):
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def tiny_net():
    return VelocityField(TINY, seed=3, dtype=torch.float64)


def randomize_adapters(field, seed=0, scale=0.3):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in field.adapter_parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * scale)
    return field


@pytest.fixture
def tiny_adapted(tiny_net):
    attach_adapter(tiny_net, rank=1, alpha=1.0, stage_tag=COLD_START)
    return tiny_net


@pytest.fixture(scope="session")
def fixture_images():
    """Eight 16x16 crops of procedural pool images."""
    return [quantize(p[8:24, 8:24]) for p in procedural_pool(8, 1234, 32)]


@pytest.fixture
def rng():
    return np.random.default_rng(0)
