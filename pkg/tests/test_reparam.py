"""
结构重参数化测试
"""

from dataclasses import replace

import numpy as np
import pytest

from esrkit.core.rep_blocks import (
    REP_CONSTRUCTORS,
    build_rep_block,
    conv3xc_block,
    conv_lora_block,
    mbga_block,
    random_batchnorm,
    random_conv,
)
from esrkit.core.reparam import (
    ConvBranch,
    FixedFilterBranch,
    IdentityBranch,
    RepBlockSpec,
    ScaledIdentityBranch,
    SeqBranch,
    fixed_filter_bank,
    fold_batchnorm,
    fuse_block,
    fuse_parallel,
    fuse_sequential,
    identity_to_kernel,
    merge_lora,
    rep_block_forward,
    rep_block_param_count,
)
from esrkit.core.tensor_ops import ConvSpec, conv2d
from esrkit.exceptions import FusionError, ShapeError

TOL_F32 = 1e-4
TOL_F64 = 1e-10


def _max_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))


def _random_mixed_spec(rng: np.random.Generator, c: int, dtype) -> RepBlockSpec:
    """随机组合 1~5 条不同类型的分支"""
    bank = fixed_filter_bank(dtype)

    def make(kind: str):
        if kind == "conv3":
            return ConvBranch(random_conv(rng, c, c, 3, dtype=dtype))
        if kind == "conv1":
            return ConvBranch(random_conv(rng, c, c, 1, dtype=dtype))
        if kind == "asym":
            kernel = (1, 3) if rng.random() < 0.5 else (3, 1)
            return ConvBranch(random_conv(rng, c, c, kernel, bias=False, dtype=dtype))
        if kind == "bn":
            return ConvBranch(random_conv(rng, c, c, 3, dtype=dtype), random_batchnorm(rng, c))
        if kind == "seq_1_3":
            mid = c * int(rng.integers(1, 4))
            return SeqBranch(
                (random_conv(rng, c, mid, 1, dtype=dtype), random_conv(rng, mid, c, 3, dtype=dtype))
            )
        if kind == "seq_3_1":
            mid = c * int(rng.integers(1, 3))
            return SeqBranch(
                (random_conv(rng, c, mid, 3, dtype=dtype), random_conv(rng, mid, c, 1, dtype=dtype))
            )
        if kind == "identity":
            return IdentityBranch(c)
        if kind == "scaled_identity":
            return ScaledIdentityBranch(rng.normal(1.0, 0.2, c).astype(dtype))
        name = ["sobel_x", "sobel_y", "laplacian", "hpf"][int(rng.integers(0, 4))]
        return FixedFilterBranch(
            filter=bank[name],
            scale=rng.normal(0.0, 0.5, c).astype(dtype),
            pre=random_conv(rng, c, c, 1, dtype=dtype) if rng.random() < 0.7 else None,
            bias=rng.normal(0.0, 0.1, c).astype(dtype) if rng.random() < 0.5 else None,
            name=name,
        )

    kinds = [
        "conv3", "conv1", "asym", "bn", "seq_1_3", "seq_3_1",
        "identity", "scaled_identity", "fixed",
    ]  # fmt: skip
    chosen = rng.choice(kinds, size=int(rng.integers(1, 6)))
    branches = [make(str(k)) for k in chosen]
    try:
        return RepBlockSpec(tuple(branches), name="mixed")
    except FusionError:
        # 融合后参数量会增加的组合在构造时被拒绝，补一条稠密 3×3 分支
        return RepBlockSpec((*branches, make("conv3")), name="mixed")


class TestFusionSoundness:
    """融合前后前向一致性测试"""

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_all_constructors(self, dtype):
        """每种构造器在随机权重与随机输入上融合前后一致"""
        tol = TOL_F32 if dtype == np.float32 else TOL_F64
        rng = np.random.default_rng(11)
        cases = 0
        for name in sorted(REP_CONSTRUCTORS):
            for _ in range(6):
                channels = int(rng.integers(2, 13))
                spec = build_rep_block(name, rng, channels, dtype=dtype)
                fused = fuse_block(spec)
                h, w = (int(s) for s in rng.integers(3, 17, size=2))
                x = rng.standard_normal((1, channels, h, w)).astype(dtype)
                assert fused.kernel_size == (3, 3)
                assert fused.dtype == dtype
                assert _max_diff(rep_block_forward(x, spec), conv2d(x, fused)) <= tol, name
                cases += 1
        assert cases == 6 * len(REP_CONSTRUCTORS)

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_random_mixed_branches(self, dtype):
        """随机混合分支的模块融合前后一致"""
        tol = TOL_F32 if dtype == np.float32 else TOL_F64
        rng = np.random.default_rng(23)
        for _ in range(75):
            channels = int(rng.integers(1, 17))
            spec = _random_mixed_spec(rng, channels, dtype)
            x = rng.standard_normal((1, channels, 8, 9)).astype(dtype)
            assert _max_diff(rep_block_forward(x, spec), conv2d(x, fuse_block(spec))) <= tol

    @pytest.mark.parametrize("gain", [1, 2, 3])
    def test_conv3xc_gains(self, rng, gain):
        """Conv3XC 各增益的融合一致性"""
        spec = conv3xc_block(rng, 8, 8, gains=(gain,))
        x = rng.standard_normal((1, 8, 12, 12)).astype(np.float32)
        assert _max_diff(rep_block_forward(x, spec), conv2d(x, fuse_block(spec))) <= TOL_F32

    def test_mbga_wide(self, rng):
        """32 通道 mbga 分支组合在 16×16 输入上融合一致"""
        spec = mbga_block(rng, 32)
        x = rng.standard_normal((1, 32, 16, 16)).astype(np.float32)
        assert _max_diff(rep_block_forward(x, spec), conv2d(x, fuse_block(spec))) <= TOL_F32

    def test_fused_param_reduction(self, rng):
        """32 通道 Conv3XC 融合后参数量降为 3×3 卷积的 9248"""
        spec = conv3xc_block(rng, 32, 32, gains=(2,))
        assert rep_block_param_count(spec) == 2112 + 36928 + 2080 + 1056
        assert fuse_block(spec).param_count == 9248


class TestFuseSequential:
    """串联融合测试"""

    def test_forward_equivalence(self, rng):
        """3×3 → 1×1 两次前向等于融合后一次前向"""
        a = random_conv(rng, 4, 6, 3)
        b = random_conv(rng, 6, 5, 1)
        x = rng.standard_normal((1, 4, 6, 6)).astype(np.float32)
        fused = fuse_sequential(a, b)
        assert _max_diff(conv2d(conv2d(x, a), b), conv2d(x, fused)) <= TOL_F32

    def test_bias_contraction_closed_form(self, rng):
        """前一卷积偏置 β 经全 1 的 3×3 核后，融合偏置为 9·Σβ"""
        beta = rng.standard_normal(3)
        a = ConvSpec(rng.standard_normal((3, 2, 1, 1)), bias=beta)
        b = ConvSpec.same(np.ones((4, 3, 3, 3)))
        fused = fuse_sequential(a, b)
        np.testing.assert_allclose(fused.bias, np.full(4, 9.0 * beta.sum()), atol=1e-10)

    def test_rejects_two_spatial_kernels(self, rng):
        """两个核都大于 1×1 时报错"""
        with pytest.raises(FusionError):
            fuse_sequential(random_conv(rng, 2, 2, 3), random_conv(rng, 2, 2, 3))

    def test_rejects_stride(self, rng):
        """步长不为 1 时报错"""
        a = ConvSpec(rng.standard_normal((2, 2, 1, 1)), stride=2)
        with pytest.raises(FusionError):
            fuse_sequential(a, random_conv(rng, 2, 2, 3))

    def test_rejects_channel_mismatch(self, rng):
        """通道不衔接时报错"""
        with pytest.raises(FusionError):
            fuse_sequential(random_conv(rng, 2, 3, 1), random_conv(rng, 4, 2, 3))

    def test_seq_branch_single_spatial(self, rng):
        """串联分支至多一个非 1×1 卷积"""
        with pytest.raises(FusionError):
            SeqBranch((random_conv(rng, 2, 2, 3), random_conv(rng, 2, 2, 3)))


class TestFuseParallel:
    """并联融合测试"""

    def test_pointwise_and_spatial(self, rng):
        """1×1 补零为 3×3 后与 3×3 分支求和"""
        k1, k3 = random_conv(rng, 4, 4, 1), random_conv(rng, 4, 4, 3)
        x = rng.standard_normal((1, 4, 7, 7)).astype(np.float32)
        fused = fuse_parallel([k1, k3])
        assert _max_diff(conv2d(x, k1) + conv2d(x, k3), conv2d(x, fused)) <= TOL_F32

    def test_with_identity(self, rng):
        """[K, 恒等] 融合后等于 conv(x, K) + x"""
        k = random_conv(rng, 3, 3, 3)
        x = rng.standard_normal((1, 3, 6, 5)).astype(np.float32)
        fused = fuse_parallel([k, identity_to_kernel(3)])
        assert _max_diff(conv2d(x, k) + x, conv2d(x, fused)) <= TOL_F32

    def test_parity_mismatch(self, rng):
        """偶数核与奇数目标奇偶性不同"""
        even = ConvSpec(rng.standard_normal((2, 2, 2, 2)))
        with pytest.raises(FusionError):
            fuse_parallel([even], (3, 3))

    def test_kernel_larger_than_target(self, rng):
        """核大于目标尺寸时报错"""
        with pytest.raises(FusionError):
            fuse_parallel([random_conv(rng, 2, 2, 5)], (3, 3))

    def test_empty(self):
        """空列表报错"""
        with pytest.raises(FusionError):
            fuse_parallel([])


class TestIdentityAndBatchNorm:
    """恒等核与 BN 折叠测试"""

    def test_dirac_kernel(self, rng):
        """Dirac 核卷积不改变输入"""
        x = rng.standard_normal((1, 5, 4, 6)).astype(np.float32)
        np.testing.assert_array_equal(conv2d(x, identity_to_kernel(5)), x)

    def test_even_identity_rejected(self):
        """偶数尺寸恒等核报错"""
        with pytest.raises(FusionError):
            identity_to_kernel(2, (2, 2))

    def test_fold_batchnorm(self, rng):
        """BN 折叠前后前向一致"""
        conv = random_conv(rng, 4, 6, 3)
        bn = random_batchnorm(rng, 6)
        x = rng.standard_normal((1, 4, 8, 8)).astype(np.float32)
        folded = fold_batchnorm(conv, bn.gamma, bn.beta, bn.mean, bn.var, bn.eps)
        assert _max_diff(bn.apply(conv2d(x, conv)), conv2d(x, folded)) <= TOL_F32

    def test_fold_batchnorm_length(self, rng):
        """统计量长度与输出通道不一致时报错"""
        conv = random_conv(rng, 2, 3, 3)
        with pytest.raises(ShapeError):
            fold_batchnorm(conv, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2))


class TestLora:
    """ConvLoRA 合并测试"""

    def test_zero_y_is_exact(self, rng):
        """Y 为零时合并结果严格等于预训练权重"""
        spec = conv_lora_block(rng, 6, rank=2, zero_y=True)
        base = spec.branches[0].conv
        y_down, x_up = spec.branches[1].convs
        merged = merge_lora(base.weight, x_up.weight, y_down.weight)
        np.testing.assert_array_equal(merged, base.weight)

    def test_random_rank_two(self, rng):
        """随机 X、Y（秩 2）合并前后前向一致"""
        base = random_conv(rng, 5, 5, 3, bias=False)
        y_down = random_conv(rng, 5, 2, 3, bias=False)
        x_up = ConvSpec(rng.standard_normal((5, 2, 1, 1)).astype(np.float32))
        merged = ConvSpec.same(merge_lora(base.weight, x_up.weight, y_down.weight))
        x = rng.standard_normal((1, 5, 7, 7)).astype(np.float32)
        expected = conv2d(x, base) + conv2d(conv2d(x, y_down), x_up)
        assert _max_diff(expected, conv2d(x, merged)) <= TOL_F32

    def test_rank_mismatch(self, rng):
        """X 与 Y 的秩不一致时报错"""
        with pytest.raises(FusionError):
            merge_lora(np.zeros((4, 4, 3, 3)), np.zeros((4, 2, 1, 1)), np.zeros((3, 4, 3, 3)))


class TestFixedFilters:
    """固定滤波器测试"""

    def test_hpf_zero_sum(self):
        """HPF 各系数之和为 0，中心为 12/16"""
        hpf = fixed_filter_bank(np.float64)["hpf"]
        assert hpf.sum() == pytest.approx(0.0, abs=1e-15)
        assert hpf[1, 1] == pytest.approx(0.75)

    def test_sobel_y_is_transpose(self):
        """Sobel_y 是 Sobel_x 的转置"""
        bank = fixed_filter_bank()
        np.testing.assert_array_equal(bank["sobel_y"], bank["sobel_x"].T)

    def test_frozen_filter_counting(self, rng):
        """count_frozen 控制是否计入固定滤波核"""
        c = 4
        spec = RepBlockSpec(
            (
                ConvBranch(random_conv(rng, c, c, 3)),
                FixedFilterBranch(fixed_filter_bank()["hpf"], np.ones(c, dtype=np.float32)),
            )
        )
        conv = c * c * 9 + c
        assert rep_block_param_count(spec, count_frozen=True) == conv + c + c * 9
        assert rep_block_param_count(spec, count_frozen=False) == conv + c


class TestRepBlockSpec:
    """模块规格校验测试"""

    def test_channel_mismatch(self, rng):
        """各分支通道不一致时报错"""
        with pytest.raises(ShapeError):
            RepBlockSpec((ConvBranch(random_conv(rng, 2, 2, 3)), IdentityBranch(3)))

    def test_even_target(self, rng):
        """目标核尺寸必须为奇数"""
        with pytest.raises(FusionError):
            RepBlockSpec((IdentityBranch(2),), target=(2, 2))

    def test_unknown_constructor(self, rng):
        """未知构造器名称报错"""
        with pytest.raises(FusionError):
            build_rep_block("nonexistent", rng, 4)


class TestFusedSize:
    """融合核尺寸与参数量测试"""

    def test_pointwise_with_identity(self, rng):
        """1×1 卷积加恒等分支融合为 1×1 卷积，参数量不增加"""
        spec = RepBlockSpec((ConvBranch(random_conv(rng, 3, 3, 1)), IdentityBranch(3)))
        fused = fuse_block(spec)
        assert fused.kernel_size == (1, 1)
        assert fused.param_count == 12
        assert fused.param_count <= rep_block_param_count(spec)
        x = rng.standard_normal((1, 3, 6, 7)).astype(np.float32)
        assert _max_diff(rep_block_forward(x, spec), conv2d(x, fused)) <= TOL_F32

    def test_asymmetric_extent(self, rng):
        """1×3 与 1×1 分支融合为 1×3 卷积"""
        spec = RepBlockSpec(
            (ConvBranch(random_conv(rng, 4, 4, (1, 3))), ConvBranch(random_conv(rng, 4, 4, 1)))
        )
        fused = fuse_block(spec)
        assert fused.kernel_size == (1, 3)
        x = rng.standard_normal((1, 4, 5, 6)).astype(np.float32)
        assert _max_diff(rep_block_forward(x, spec), conv2d(x, fused)) <= TOL_F32

    @pytest.mark.parametrize(
        "branches",
        [
            (IdentityBranch(4),),
            (ScaledIdentityBranch(np.ones(4, dtype=np.float32)),),
            (FixedFilterBranch(fixed_filter_bank()["laplacian"], np.ones(4, dtype=np.float32)),),
        ],
    )
    def test_growth_rejected(self, branches):
        """融合后参数量会增加的模块在构造时报错"""
        with pytest.raises(FusionError, match="融合后参数量"):
            RepBlockSpec(branches)

    @pytest.mark.parametrize("count_frozen", [True, False])
    def test_never_grows(self, count_frozen):
        """随机模块融合后参数量不超过未融合形式"""
        rng = np.random.default_rng(31)
        for _ in range(60):
            spec = _random_mixed_spec(rng, int(rng.integers(1, 9)), np.float32)
            fused = fuse_block(spec)
            assert fused.param_count == spec.fused_param_count
            assert fused.param_count <= rep_block_param_count(spec, count_frozen=count_frozen)


class TestSeqPadding:
    """串联分支边界填充测试"""

    def test_bias_padding_matches_fused(self, rng):
        """1×1 前缀带偏置时，融合结果与偏置填充的参照前向逐像素一致"""
        c = 4
        prefix = replace(random_conv(rng, c, c, 1), bias=np.ones(c, dtype=np.float32))
        body = random_conv(rng, c, c, 3)
        spec = RepBlockSpec((SeqBranch((prefix, body)),))
        x = rng.standard_normal((1, c, 7, 6)).astype(np.float32)
        fused = conv2d(x, fuse_block(spec))
        assert _max_diff(rep_block_forward(x, spec), fused) <= TOL_F32

    def test_zero_padding_differs_on_border(self, rng):
        """逐层零填充只在边框上与融合结果不同"""
        c = 4
        prefix = replace(random_conv(rng, c, c, 1), bias=np.ones(c, dtype=np.float32))
        body = random_conv(rng, c, c, 3)
        spec = RepBlockSpec((SeqBranch((prefix, body)),))
        x = rng.standard_normal((1, c, 7, 6)).astype(np.float32)
        fused = conv2d(x, fuse_block(spec))
        zero_padded = conv2d(conv2d(x, prefix), body)
        interior = (..., slice(1, -1), slice(1, -1))
        assert _max_diff(zero_padded[interior], fused[interior]) <= TOL_F32
        assert _max_diff(zero_padded, fused) > 1e-3
