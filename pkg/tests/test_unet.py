"""Architecture assembly: channel schedules, parameter counts, forward contract."""

import hashlib
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crackseg import (
    Tensor,
    UNetConfig,
    build,
    channel_schedule,
    count_parameters,
    no_grad,
)
from crackseg.unet import _layer_shapes

GOLDEN = Path(__file__).parent / "golden" / "tiny_forward.npz"


def test_widened_schedule_matches_reference():
    cfg = UNetConfig(depth=5, base_channels=64, widen_factor=1.5, input_size=256)
    assert channel_schedule(cfg) == [96, 192, 384, 768, 1536]


def test_original_schedule():
    cfg = UNetConfig(depth=5, base_channels=64, widen_factor=1.0, input_size=256)
    assert channel_schedule(cfg) == [64, 128, 256, 512, 1024]


@given(
    depth=st.integers(2, 6),
    base=st.integers(1, 64),
    widen=st.sampled_from([0.5, 1.0, 1.25, 1.5, 2.0]),
)
def test_schedule_formula_property(depth, base, widen):
    cfg = UNetConfig(
        depth=depth, base_channels=base, widen_factor=widen, input_size=2 ** (depth - 1)
    )
    schedule = channel_schedule(cfg)
    assert len(schedule) == depth
    for i, c in enumerate(schedule):
        if widen == 1.0:
            expected = base * 2**i
        else:
            expected = max(1, int(np.floor(base * widen * 2**i + 0.5)))
        assert c == expected


def test_parameter_count_hand_enumerated_two_level_net():
    # depth=2, base=1, widen=1, in=1 -> channels [1, 2]. Layer by layer:
    #   enc0.conv1 1->1 3x3: 9+1    enc0.conv2 1->1 3x3: 9+1
    #   enc1.conv1 1->2 3x3: 18+2   enc1.conv2 2->2 3x3: 36+2
    #   dec0.up    2->1 2x2: 8+1    dec0.conv1 2->1 3x3: 18+1
    #   dec0.conv2 1->1 3x3: 9+1    head 1->1 1x1: 1+1
    cfg = UNetConfig(depth=2, base_channels=1, widen_factor=1.0, in_channels=1, input_size=4)
    assert count_parameters(cfg) == 118
    model = build(cfg, seed=0)
    assert sum(p.size for p in model.parameters()) == 118


@pytest.mark.parametrize("seed", range(20))
def test_count_matches_built_model_for_random_configs(seed):
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(2, 5))
    cfg = UNetConfig(
        depth=depth,
        base_channels=int(rng.integers(1, 9)),
        widen_factor=float(rng.choice([0.75, 1.0, 1.5, 2.0])),
        in_channels=int(rng.integers(1, 4)),
        input_size=2 ** (depth - 1) * int(rng.integers(1, 5)),
    )
    model = build(cfg, seed=seed)
    assert count_parameters(cfg) == sum(p.size for p in model.parameters())


def test_doubling_base_roughly_quadruples_parameters():
    small = count_parameters(UNetConfig(depth=3, base_channels=8, input_size=16))
    large = count_parameters(UNetConfig(depth=3, base_channels=16, input_size=16))
    assert 3.5 < large / small < 4.5


def test_widening_strictly_increases_count():
    narrow = count_parameters(UNetConfig(depth=3, base_channels=8, input_size=16))
    wide = count_parameters(
        UNetConfig(depth=3, base_channels=8, widen_factor=1.5, input_size=16)
    )
    assert wide > narrow


def test_canonical_structure_at_widen_one():
    # depth 5, base 64, widen 1 reproduces the classic layer shapes.
    cfg = UNetConfig(depth=5, base_channels=64, widen_factor=1.0, in_channels=1, input_size=256)
    shapes = dict(_layer_shapes(cfg))
    assert shapes["enc0.conv1.weight"] == (64, 1, 3, 3)
    assert shapes["enc3.conv2.weight"] == (512, 512, 3, 3)
    assert shapes["enc4.conv1.weight"] == (1024, 512, 3, 3)
    assert shapes["dec3.up.weight"] == (512, 1024, 2, 2)
    assert shapes["dec3.conv1.weight"] == (512, 1024, 3, 3)
    assert shapes["dec0.conv2.weight"] == (64, 64, 3, 3)
    assert shapes["head.weight"] == (1, 64, 1, 1)
    assert len(shapes) == (5 * 2 + 4 * 3 + 1) * 2


def test_config_rejects_indivisible_input_size():
    with pytest.raises(ValueError, match="multiple of 4"):
        UNetConfig(depth=3, base_channels=4, input_size=18)


def test_parameter_names_unique_and_ordered():
    cfg = UNetConfig(depth=3, base_channels=2, input_size=8)
    names = [name for name, _ in _layer_shapes(cfg)]
    assert len(names) == len(set(names))
    model = build(cfg, seed=1)
    assert list(model.params) == names


def test_build_deterministic_given_seed():
    cfg = UNetConfig(depth=3, base_channels=4, input_size=16)
    a = build(cfg, seed=9)
    b = build(cfg, seed=9)
    c = build(cfg, seed=10)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    assert any(
        not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params
    )


def test_forward_shape_and_open_range(rng):
    cfg = UNetConfig(depth=3, base_channels=4, in_channels=3, input_size=16)
    model = build(cfg, seed=2)
    with no_grad():
        out = model.forward(Tensor(rng.random((2, 3, 16, 16), dtype=np.float32)))
    assert out.shape == (2, 1, 16, 16)
    assert np.all(out.data > 0.0)
    assert np.all(out.data < 1.0)


def test_forward_accepts_other_divisible_sizes(rng):
    cfg = UNetConfig(depth=3, base_channels=4, input_size=16)
    model = build(cfg, seed=2)
    with no_grad():
        out = model.forward(Tensor(rng.random((1, 1, 32, 32), dtype=np.float32)))
    assert out.shape == (1, 1, 32, 32)


def test_forward_rejects_indivisible_size_naming_divisor(rng):
    cfg = UNetConfig(depth=4, base_channels=2, input_size=32)
    model = build(cfg, seed=2)
    with pytest.raises(ValueError, match="divisible by 8"):
        model.forward(Tensor(rng.random((1, 1, 20, 20), dtype=np.float32)))


def test_forward_rejects_wrong_channel_count(rng):
    cfg = UNetConfig(depth=2, base_channels=2, in_channels=1, input_size=8)
    model = build(cfg, seed=2)
    with pytest.raises(ValueError, match="channels"):
        model.forward(Tensor(rng.random((1, 3, 8, 8), dtype=np.float32)))


def test_identical_batch_rows_give_identical_outputs(rng):
    cfg = UNetConfig(depth=2, base_channels=2, input_size=8)
    model = build(cfg, seed=3)
    row = rng.random((1, 8, 8), dtype=np.float32)
    batch = Tensor(np.stack([row, row, row]))
    with no_grad():
        out = model.forward(batch)
    np.testing.assert_array_equal(out.data[0], out.data[1])
    np.testing.assert_array_equal(out.data[0], out.data[2])


def _golden_forward() -> tuple[np.ndarray, np.ndarray]:
    cfg = UNetConfig(depth=2, base_channels=2, in_channels=1, input_size=8)
    model = build(cfg, seed=42)
    x = np.random.default_rng(7).random((1, 1, 8, 8), dtype=np.float32)
    with no_grad():
        out = model.forward(Tensor(x))
    return x, out.data


def test_forward_matches_frozen_golden_file():
    # Captured once from this implementation and frozen; asserts bit-for-bit
    # reproducibility across runs on the same BLAS/platform.
    x, out = _golden_forward()
    stored = np.load(GOLDEN)
    np.testing.assert_array_equal(x, stored["input"])
    np.testing.assert_array_equal(out, stored["output"])


def test_forward_bit_identical_across_processes():
    script = (
        "import numpy as np, hashlib\n"
        "from crackseg import UNetConfig, build, Tensor, no_grad\n"
        "cfg = UNetConfig(depth=2, base_channels=2, in_channels=1, input_size=8)\n"
        "model = build(cfg, seed=42)\n"
        "x = np.random.default_rng(7).random((1, 1, 8, 8), dtype=np.float32)\n"
        "with no_grad():\n"
        "    out = model.forward(Tensor(x))\n"
        "print(hashlib.sha256(out.data.tobytes()).hexdigest())\n"
    )
    digests = {
        subprocess.run(
            [sys.executable, "-c", script], capture_output=True, text=True, check=True
        ).stdout.strip()
        for _ in range(2)
    }
    assert len(digests) == 1
    _, out = _golden_forward()
    assert hashlib.sha256(out.tobytes()).hexdigest() in digests
