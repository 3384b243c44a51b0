"""
张量运算测试
"""

import math

import numpy as np
import pytest
from scipy.signal import correlate2d

from esrkit.core.tensor_ops import (
    ConvSpec,
    activation,
    add,
    channel_concat,
    channel_split,
    conv2d,
    conv2d_oracle,
    gelu,
    get_num_threads,
    maxpool,
    num_threads,
    pad_constant_per_channel,
    pixel_shuffle,
    pixel_unshuffle,
    resize_bilinear,
    set_num_threads,
    shifted_sigmoid,
    silu,
    upsample,
)
from esrkit.exceptions import ShapeError


def _random_case(rng: np.random.Generator):
    """随机生成一个合法的 (x, spec)"""
    while True:
        groups = int(rng.integers(1, 4))
        c_in = groups * int(rng.integers(1, 3))
        c_out = groups * int(rng.integers(1, 3))
        kh, kw = (int(k) for k in rng.integers(1, 4, size=2))
        stride = tuple(int(s) for s in rng.integers(1, 3, size=2))
        padding = tuple(int(p) for p in rng.integers(0, 3, size=2))
        dilation = tuple(int(d) for d in rng.integers(1, 3, size=2))
        h, w = (int(s) for s in rng.integers(1, 9, size=2))
        if h + 2 * padding[0] < dilation[0] * (kh - 1) + 1:
            continue
        if w + 2 * padding[1] < dilation[1] * (kw - 1) + 1:
            continue
        weight = rng.standard_normal((c_out, c_in // groups, kh, kw)).astype(np.float32)
        bias = rng.standard_normal(c_out).astype(np.float32) if rng.random() < 0.7 else None
        spec = ConvSpec(weight, bias, stride, padding, dilation, groups)
        x = rng.standard_normal((int(rng.integers(1, 3)), c_in, h, w)).astype(np.float32)
        return x, spec


class TestConv2d:
    """卷积测试"""

    def test_box_filter_center(self):
        """3×3 均值核在 1..9 上的中心输出为 5"""
        x = np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3)
        spec = ConvSpec(np.full((1, 1, 3, 3), 1.0 / 9.0, dtype=np.float32), padding=1)
        out = conv2d(x, spec)
        assert out.shape == (1, 1, 3, 3)
        assert out[0, 0, 1, 1] == pytest.approx(5.0, abs=1e-6)

    def test_matches_oracle_on_random_cases(self):
        """500 个随机形状/步长/填充/膨胀/分组用例与朴素实现一致"""
        rng = np.random.default_rng(7)
        for _ in range(500):
            x, spec = _random_case(rng)
            fast, slow = conv2d(x, spec), conv2d_oracle(x, spec)
            assert fast.shape == slow.shape
            assert np.max(np.abs(fast - slow)) <= 1e-5

    def test_depthwise_equals_per_channel_correlation(self, rng):
        """groups=C 的卷积等于逐通道独立二维互相关"""
        c = 4
        x = rng.standard_normal((1, c, 7, 6))
        weight = rng.standard_normal((c, 1, 3, 3))
        out = conv2d(x, ConvSpec.same(weight, groups=c))
        for ch in range(c):
            expected = correlate2d(x[0, ch], weight[ch, 0], mode="same")
            np.testing.assert_allclose(out[0, ch], expected, atol=1e-10)

    def test_preserves_dtype(self, rng):
        """输出 dtype 与输入一致"""
        weight = rng.standard_normal((2, 3, 3, 3))
        for dtype in (np.float32, np.float64):
            x = rng.standard_normal((1, 3, 5, 5)).astype(dtype)
            assert conv2d(x, ConvSpec.same(weight.astype(dtype))).dtype == dtype

    def test_channel_mismatch(self, rng):
        """输入通道数与卷积不一致时报错"""
        spec = ConvSpec.same(rng.standard_normal((2, 3, 3, 3)))
        with pytest.raises(ShapeError) as exc_info:
            conv2d(np.zeros((1, 4, 5, 5), dtype=np.float32), spec)
        assert exc_info.value.dim == "c"

    def test_output_too_small(self, rng):
        """输出尺寸小于 1 时报错"""
        spec = ConvSpec(rng.standard_normal((1, 1, 5, 5)))
        with pytest.raises(ShapeError):
            conv2d(np.zeros((1, 1, 3, 3), dtype=np.float32), spec)

    def test_groups_must_divide(self):
        """分组数不整除输出通道时报错"""
        with pytest.raises(ShapeError):
            ConvSpec(np.zeros((3, 1, 3, 3)), groups=2)

    def test_same_rejects_even_kernel(self):
        """same 填充不接受偶数核"""
        with pytest.raises(ShapeError):
            ConvSpec.same(np.zeros((1, 1, 2, 2)))

    def test_multithreaded_matches_single(self, rng):
        """多线程结果与单线程一致"""
        x = rng.standard_normal((1, 8, 9, 9)).astype(np.float32)
        spec = ConvSpec.same(rng.standard_normal((16, 8, 3, 3)).astype(np.float32))
        single = conv2d(x, spec)
        with num_threads(3):
            multi = conv2d(x, spec)
        np.testing.assert_allclose(single, multi, atol=1e-6)

    def test_param_count(self):
        """参数量包含偏置"""
        spec = ConvSpec.same(np.zeros((32, 32, 3, 3)), bias=np.zeros(32))
        assert spec.param_count == 9248


class TestThreads:
    """引擎线程数测试"""

    def test_context_restores(self):
        """上下文退出后恢复原线程数"""
        set_num_threads(2)
        with num_threads(4) as n:
            assert n == 4
            assert get_num_threads() == 4
        assert get_num_threads() == 2

    def test_rejects_zero(self):
        """线程数必须为正"""
        with pytest.raises(ValueError):
            set_num_threads(0)


class TestActivations:
    """激活函数测试"""

    def test_gelu_exact_erf(self):
        """GELU 使用精确 erf 形式"""
        value = gelu(np.array([1.0]))[0]
        assert value == pytest.approx(0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0))), abs=1e-15)
        assert value == pytest.approx(0.8413447460685429, abs=1e-12)

    def test_silu_zero(self):
        """SiLU(0) = 0"""
        assert silu(np.array([0.0]))[0] == 0.0

    def test_shifted_sigmoid_is_odd(self):
        """b=-0.5 的平移 Sigmoid 是奇函数"""
        x = np.linspace(-4, 4, 17)
        y = shifted_sigmoid(x, -0.5)
        assert y[8] == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(y, -y[::-1], atol=1e-12)

    def test_leaky_relu(self):
        """LeakyReLU 负半轴按 alpha 缩放"""
        out = activation(np.array([-2.0, 3.0]), "leaky_relu", alpha=0.1)
        np.testing.assert_allclose(out, [-0.2, 3.0])

    def test_unknown_kind(self):
        """未知激活函数报错"""
        with pytest.raises(ValueError):
            activation(np.zeros(3), "swish2")


class TestLayoutOps:
    """像素重排、上采样等布局运算测试"""

    def test_pixel_shuffle_index_mapping(self):
        """通道 c·r²+i·r+j 映射到 (c, h·r+i, w·r+j)"""
        r, c, h, w = 2, 3, 2, 3
        x = np.arange(c * r * r * h * w, dtype=np.float32).reshape(1, c * r * r, h, w)
        out = pixel_shuffle(x, r)
        assert out.shape == (1, c, h * r, w * r)
        for ch in range(c):
            for i in range(r):
                for j in range(r):
                    np.testing.assert_array_equal(
                        out[0, ch, i::r, j::r], x[0, ch * r * r + i * r + j]
                    )

    def test_pixel_shuffle_bad_channels(self):
        """通道数不能被 r² 整除时报错并指明维度"""
        with pytest.raises(ShapeError) as exc_info:
            pixel_shuffle(np.zeros((1, 5, 2, 2), dtype=np.float32), 2)
        assert exc_info.value.dim == "c"

    def test_pixel_unshuffle_inverts(self, rng):
        """pixel_unshuffle 是 pixel_shuffle 的逆"""
        x = rng.standard_normal((1, 12, 3, 4)).astype(np.float32)
        np.testing.assert_array_equal(pixel_unshuffle(pixel_shuffle(x, 2), 2), x)

    def test_nearest_upsample(self):
        """nearest 上采样复制像素"""
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32)
        out = upsample(x, 2)
        assert out.shape == (1, 1, 4, 4)
        np.testing.assert_array_equal(out[0, 0, :2, :2], np.ones((2, 2)))
        np.testing.assert_array_equal(out[0, 0, 2:, 2:], np.full((2, 2), 4.0))

    def test_bilinear_ramp(self):
        """线性斜坡上的双线性插值等于闭式解"""
        ramp = np.tile(np.arange(4, dtype=np.float64), (3, 1))[None, None]
        out = upsample(ramp, 2, mode="bilinear")
        src = np.clip((np.arange(8) + 0.5) / 2.0 - 0.5, 0.0, 3.0)
        for row in out[0, 0]:
            np.testing.assert_allclose(row, src, atol=1e-12)

    def test_resize_identity(self, rng):
        """尺寸不变时双线性缩放不改变数值"""
        x = rng.standard_normal((1, 2, 5, 6))
        np.testing.assert_allclose(resize_bilinear(x, (5, 6)), x, atol=1e-12)

    def test_maxpool_shape(self, rng):
        """池化输出尺寸为 ⌊(h−k)/s⌋+1"""
        x = rng.standard_normal((1, 2, 16, 13)).astype(np.float32)
        assert maxpool(x, 7, 3).shape == (1, 2, 4, 3)

    def test_maxpool_too_small(self):
        """输入小于窗口时报错"""
        with pytest.raises(ShapeError):
            maxpool(np.zeros((1, 1, 3, 8), dtype=np.float32), 7, 3)

    def test_split_concat_inverse(self, rng):
        """拆分后拼接还原"""
        x = rng.standard_normal((1, 6, 4, 4)).astype(np.float32)
        parts = channel_split(x, [1, 2, 3])
        assert [p.shape[1] for p in parts] == [1, 2, 3]
        np.testing.assert_array_equal(channel_concat(parts), x)

    def test_split_bad_sizes(self):
        """拆分尺寸之和不等于通道数时报错"""
        with pytest.raises(ShapeError):
            channel_split(np.zeros((1, 4, 2, 2), dtype=np.float32), [1, 2])

    def test_add_shape_mismatch(self):
        """逐元素加法要求形状一致"""
        with pytest.raises(ShapeError):
            add(np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 3, 4)))

    def test_pad_constant_per_channel(self):
        """逐通道常数填充"""
        x = np.zeros((1, 2, 1, 1), dtype=np.float32)
        out = pad_constant_per_channel(x, 1, np.array([3.0, -1.0]))
        assert out.shape == (1, 2, 3, 3)
        assert out[0, 0, 0, 0] == 3.0
        assert out[0, 1, 2, 2] == -1.0
        assert out[0, 0, 1, 1] == 0.0
