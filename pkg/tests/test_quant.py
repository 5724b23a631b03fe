import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lbq.errors import ConfigError, DimensionError, RangeError
from lbq.quant import (
    ZERO_SCALE,
    Granularity,
    QuantizedTensor,
    QuantScheme,
    ScaleSet,
    compute_scale,
    dequantize,
    pack_int4,
    quant_error,
    quantize,
    quantize_tensor,
    unpack_int4,
)
from lbq.tensor import rand_tensor

from conftest import ulp_bound

PT = Granularity.PER_TENSOR


def test_clamp_bounds():
    assert (QuantScheme(4).qmin, QuantScheme(4).qmax) == (-8, 7)
    assert (QuantScheme(8).qmin, QuantScheme(8).qmax) == (-128, 127)


def test_scale_int8_per_tensor():
    s = compute_scale(np.array([127.0, -3.0], np.float32), QuantScheme(8, PT)).scales
    assert s.shape == (1,)
    assert s[0] == pytest.approx(254 / 255, rel=1e-7)


def test_scale_int4_per_tensor():
    s = compute_scale(np.array([[7.5, 0.25]], np.float32), QuantScheme(4, PT)).scales
    assert s[0] == np.float32(1.0)


def test_scale_rounds_upward():
    x = np.array([1.0, -2.0], np.float32)
    s = compute_scale(x, QuantScheme(8, PT)).scales[0]
    assert float(s) >= 4 / 255


def test_zero_region_floor():
    x = np.zeros((4, 3), np.float32)
    ss = compute_scale(x, QuantScheme(8, Granularity.PER_CHANNEL))
    assert np.all(ss.scales == ZERO_SCALE)
    q = quantize(x, ss, QuantScheme(8, Granularity.PER_CHANNEL))
    assert not q.values().any()
    assert not dequantize(q).any()


def test_quantize_hand_example():
    x = np.array([1.0, -2.0, 0.5], np.float32)
    q = quantize_tensor(x, QuantScheme(8, PT))
    # fl32(4/255) > 4/255, so -2/s is -127.49999, not a half-way case.
    assert q.values().tolist() == [64, -127, 32]


def test_round_half_away_from_zero():
    # max 127.5 gives s = 1 exactly, so +-127.5 and +-2.5 are exact half-way cases.
    x = np.array([127.5, -127.5, 2.5, -2.5, 0.5, -0.5, 1.49], np.float32)
    q = quantize_tensor(x, QuantScheme(8, PT))
    assert q.scales.scales[0] == 1.0
    assert q.values().tolist() == [127, -128, 3, -3, 1, -1, 1]


def test_clamp_external_scale():
    scheme = QuantScheme(8, PT)
    q = quantize(np.array([10.0, -10.0], np.float32), ScaleSet(PT, [0.01]), scheme)
    assert q.values().tolist() == [127, -128]


def test_dequantize_single():
    q = QuantizedTensor(QuantScheme(8, PT), (1,), np.array([127], np.int8), ScaleSet(PT, [0.5]))
    assert dequantize(q).tolist() == [63.5]


def test_per_group_layout():
    x = np.arange(1, 17, dtype=np.float32).reshape(8, 2)
    scheme = QuantScheme(8, Granularity.PER_GROUP, 4)
    ss = compute_scale(x, scheme)
    assert ss.scales.shape == (2, 2)
    # group 0 of column 0 is rows 0..3: values 1, 3, 5, 7
    assert ss.scales[0, 0] == pytest.approx(2 * 7 / 255, rel=1e-7)
    assert ss.scales[1, 1] == pytest.approx(2 * 16 / 255, rel=1e-7)


def test_scale_counts_per_granularity():
    x = rand_tensor((8, 6), 0, "normal")
    assert compute_scale(x, QuantScheme(8, Granularity.PER_CHANNEL)).scales.shape == (6,)
    assert compute_scale(x, QuantScheme(8, Granularity.PER_TOKEN)).scales.shape == (8,)


def test_group_size_must_divide():
    with pytest.raises(ConfigError):
        compute_scale(np.ones((6, 2), np.float32), QuantScheme(8, Granularity.PER_GROUP, 4))


def test_scale_count_mismatch():
    x = np.ones((4, 3), np.float32)
    with pytest.raises(ConfigError):
        quantize(x, ScaleSet(Granularity.PER_CHANNEL, np.ones(4)), QuantScheme(8, Granularity.PER_CHANNEL))
    with pytest.raises(ConfigError):
        quantize(x, ScaleSet(PT, [1.0]), QuantScheme(8, Granularity.PER_CHANNEL))


def test_non_2d_for_channel():
    with pytest.raises(DimensionError):
        compute_scale(np.ones(4, np.float32), QuantScheme(8, Granularity.PER_CHANNEL))


def test_nonpositive_scale_rejected():
    with pytest.raises(ConfigError):
        ScaleSet(PT, [0.0])


def test_int4_payload_is_packed():
    x = rand_tensor((5, 3), 9, "normal")
    q = quantize_tensor(x, QuantScheme(4, Granularity.PER_CHANNEL))
    assert q.payload.dtype == np.uint8 and q.payload.size == 8
    assert q.values().shape == (5, 3)


def test_pack_examples():
    assert bytes(pack_int4([-8, 7])) == b"\x78"
    assert bytes(pack_int4([0, 0])) == b"\x00"
    assert bytes(pack_int4([-1])) == b"\x0f"


def test_pack_exhaustive_pairs():
    lo, hi = np.meshgrid(np.arange(-8, 8), np.arange(-8, 8), indexing="ij")
    values = np.stack([lo.ravel(), hi.ravel()], axis=1).ravel().astype(np.int8)
    packed = pack_int4(values)
    assert len(set(packed.tolist())) == 256
    np.testing.assert_array_equal(unpack_int4(packed, values.size), values)


def test_pack_out_of_range():
    with pytest.raises(RangeError):
        pack_int4([8])
    with pytest.raises(RangeError):
        unpack_int4(b"\x00", 3)


def test_unpack_accepts_bytes():
    assert unpack_int4(b"\x78", 2).tolist() == [-8, 7]


def test_quant_error_exact_and_zero():
    x = np.array([[2.0, -1.0], [0.0, 1.0]], np.float32)
    scheme = QuantScheme(8, PT)
    q = quantize(x, ScaleSet(PT, [1.0]), scheme)
    assert quant_error(x, q).mse == 0.0
    z = np.zeros((2, 2), np.float32)
    e = quant_error(z, quantize_tensor(z, scheme))
    assert e.mse == 0.0 and e.max_abs_err == 0.0
    with pytest.raises(DimensionError):
        quant_error(np.zeros((2, 3), np.float32), q)


def test_quant_error_per_channel_bound():
    x = rand_tensor((64, 64), 11, "uniform")
    q = quantize_tensor(x, QuantScheme(8, Granularity.PER_CHANNEL))
    err = quant_error(x, q)
    assert err.max_abs_err <= float(q.scales.scales.max()) / 2 + float(np.spacing(np.float32(1.0)))


def _heterogeneous(seed, rows=64, cols=32):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((rows, cols))
    col_mag = 10 ** rng.uniform(-2, 2, size=cols)
    return (base * col_mag).astype(np.float32)


@pytest.mark.parametrize("seed", range(10))
def test_per_channel_beats_per_tensor(seed):
    x = _heterogeneous(seed)
    mse_t = quant_error(x, quantize_tensor(x, QuantScheme(8, PT))).mse
    mse_c = quant_error(x, quantize_tensor(x, QuantScheme(8, Granularity.PER_CHANNEL))).mse
    assert mse_c <= mse_t


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("bits", [4, 8])
def test_per_group_beats_per_channel(seed, bits):
    rng = np.random.default_rng(100 + seed)
    x = rng.standard_normal((64, 16)) * np.repeat(10 ** rng.uniform(-1, 1, size=(4, 16)), 16, axis=0)
    x = x.astype(np.float32)
    mse_c = quant_error(x, quantize_tensor(x, QuantScheme(bits, Granularity.PER_CHANNEL))).mse
    mse_g = quant_error(x, quantize_tensor(x, QuantScheme(bits, Granularity.PER_GROUP, 16))).mse
    assert mse_g <= mse_c


_floats = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False, width=32)


@settings(max_examples=200, deadline=None)
@given(
    x=hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8), elements=_floats),
    bits=st.sampled_from([4, 8]),
    gran=st.sampled_from(list(Granularity)),
)
def test_range_and_reconstruction(x, bits, gran):
    rows = x.shape[0]
    group = max(g for g in (1, 2, 4, 8) if rows % g == 0)
    scheme = QuantScheme(bits, gran, group)
    q = quantize_tensor(x, scheme)
    v = q.values()
    assert v.min() >= scheme.qmin and v.max() <= scheme.qmax
    assert np.all(q.scales.scales > 0)
    deq = dequantize(q)
    s = np.broadcast_to(q.scales.expand(x.shape), x.shape)
    err = np.abs(x.astype(np.float64) - deq.astype(np.float64))
    assert np.all(err <= ulp_bound(x, deq, s))
