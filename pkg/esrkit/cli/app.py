"""
CLI接口模块

使用Typer实现命令行界面。
"""

from pathlib import Path
from typing import Dict, Optional

import numpy as np
import typer
import yaml
from loguru import logger
from rich.console import Console

from esrkit.cli.config_handler import init_logging, load_and_merge_config
from esrkit.cli.error_handler import EXIT_VALIDATION, cli_errors
from esrkit.cli.output import emit_json, parse_hw, parse_thresholds, render_profile
from esrkit.core.config_loader import load_config, save_config
from esrkit.core.graph import forward, fuse_graph, verify_fusion
from esrkit.core.image_io import from_tensor, read_image, to_tensor, write_image
from esrkit.core.metrics import ImagePair, format_psnr, psnr
from esrkit.core.model_io import load_model, save_model
from esrkit.core.profiler import compare_runtime, count_params, profile_model
from esrkit.core.scoring import (
    baseline_from_config,
    load_records,
    rank,
    render_table,
    reports_to_dicts,
)
from esrkit.core.span import build_reference_span
from esrkit.models.config import AppConfig, Precision

app = typer.Typer(
    name="esrkit",
    help="高效超分辨率工具箱 - 推理、重参数化融合、复杂度分析与挑战赛评分",
    add_completion=False,
)

# 融合校验使用的随机输入尺寸
VERIFY_HW = (32, 32)


def _engine_dtype(app_config: AppConfig):
    return np.float64 if app_config.engine.precision == Precision.FLOAT64 else np.float32


def _verify_input(channels: int, hw, dtype) -> np.ndarray:
    h, w = hw
    return np.random.default_rng(0).random((1, channels, h, w)).astype(dtype)


@app.command()
def build(
    out: Path = typer.Option(..., "--out", "-o", help="输出模型文件路径（.yaml）"),
    channels: int = typer.Option(32, "--channels", help="主干通道数"),
    depth: int = typer.Option(6, "--depth", help="SPAB 个数"),
    scale: int = typer.Option(4, "--scale", help="放大倍数 (2/3/4)"),
    seed: int = typer.Option(0, "--seed", help="随机种子"),
    no_rep: bool = typer.Option(False, "--no-rep", help="直接构造部署形式（不含重参数化分支）"),
    attention_bias: float = typer.Option(-0.5, "--attention-bias", help="SPAB 注意力偏置"),
    head_kernel: int = typer.Option(3, "--head-kernel", help="head 卷积核尺寸"),
    residual_upsample: bool = typer.Option(
        False, "--residual-upsample", help="附加输入图像的 nearest 上采样残差"
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="显示详细日志"),
    config_path: Optional[Path] = typer.Option(None, "--config", "-c", help="配置文件路径"),
    threads: Optional[int] = typer.Option(None, "--threads", help="引擎线程数"),
    log_file: Optional[Path] = typer.Option(None, "--log-file", help="日志文件路径"),
):
    """
    构造参考 SPAN 模型

    使用随机权重生成模型文件与权重文件，供 infer/fuse/profile/bench 使用。
    """
    init_logging(verbose, log_file)
    with cli_errors("构造模型"):
        app_config = load_and_merge_config(config_path, threads=threads)
        model = build_reference_span(
            channels=channels,
            depth=depth,
            scale=scale,
            rep=not no_rep,
            seed=seed,
            attention_bias=attention_bias,
            head_kernel=head_kernel,
            residual_upsample=residual_upsample,
            dtype=_engine_dtype(app_config),
        )
        graph_path, weights_path = save_model(model, out)
        typer.echo(f"✓ 模型已创建: {graph_path}")
        typer.echo(f"  权重: {weights_path}")
        typer.echo(f"  参数量: {count_params(model):,}")


@app.command()
def infer(
    model_path: Path = typer.Option(..., "--model", "-m", help="模型文件路径"),
    input_path: Path = typer.Option(..., "--in", "-i", help="输入低分辨率图像（PNG/PPM）"),
    output_path: Path = typer.Option(..., "--out", "-o", help="输出图像路径（.png/.ppm）"),
    fused: bool = typer.Option(False, "--fused", help="推理前先融合重参数化结构"),
    json_output: bool = typer.Option(False, "--json", help="以 JSON 输出结果"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="显示详细日志"),
    config_path: Optional[Path] = typer.Option(None, "--config", "-c", help="配置文件路径"),
    threads: Optional[int] = typer.Option(None, "--threads", help="引擎线程数"),
    log_file: Optional[Path] = typer.Option(None, "--log-file", help="日志文件路径"),
):
    """
    单张图像超分推理
    """
    init_logging(verbose, log_file)
    with cli_errors("推理"):
        app_config = load_and_merge_config(config_path, threads=threads)
        model = load_model(model_path)
        if fused:
            model = fuse_graph(model)
        img = read_image(input_path)
        y = forward(model, to_tensor(img, dtype=_engine_dtype(app_config)))
        result = from_tensor(y)
        write_image(output_path, result)
        logger.info(f"推理完成: {img.shape[1]}×{img.shape[0]} -> {result.shape[1]}×{result.shape[0]}")

        if json_output:
            emit_json(
                {
                    "model": model.name,
                    "fused": fused,
                    "input": str(input_path),
                    "output": str(output_path),
                    "input_size": [img.shape[0], img.shape[1]],
                    "output_size": [result.shape[0], result.shape[1]],
                }
            )
        else:
            typer.echo(f"✓ 已输出 {result.shape[1]}×{result.shape[0]} 图像: {output_path}")


@app.command()
def fuse(
    model_path: Path = typer.Option(..., "--model", "-m", help="模型文件路径"),
    out: Path = typer.Option(..., "--out", "-o", help="融合后模型文件路径"),
    verify: bool = typer.Option(False, "--verify", help="在随机输入上校验融合前后输出差异"),
    json_output: bool = typer.Option(False, "--json", help="以 JSON 输出结果"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="显示详细日志"),
    config_path: Optional[Path] = typer.Option(None, "--config", "-c", help="配置文件路径"),
    threads: Optional[int] = typer.Option(None, "--threads", help="引擎线程数"),
    log_file: Optional[Path] = typer.Option(None, "--log-file", help="日志文件路径"),
):
    """
    融合重参数化结构

    把多分支卷积改写为单个等价卷积，写出部署形式的模型与权重。
    --verify 时按引擎精度选用容差，差异超限则不写出文件。
    """
    init_logging(verbose, log_file)
    with cli_errors("融合模型"):
        app_config = load_and_merge_config(config_path, threads=threads)
        dtype = _engine_dtype(app_config)
        model = load_model(model_path, dtype=dtype)
        if not model.has_rep_nodes():
            logger.warning(f"模型 {model.name} 不含重参数化结构，输出与输入等价")
        fused_model = fuse_graph(model)
        result: Dict[str, float] = {}
        if verify:
            tolerance = app_config.reparam.tolerance_for(app_config.engine.precision)
            x = _verify_input(model.in_channels, VERIFY_HW, dtype)
            result["max_abs_diff"] = verify_fusion(model, fused_model, x, tolerance)
            result["tolerance"] = tolerance
        graph_path, weights_path = save_model(fused_model, out)
        before, after = count_params(model), count_params(fused_model)

        if json_output:
            emit_json(
                {
                    "model": graph_path.as_posix(),
                    "weights": weights_path.as_posix(),
                    "params_before": before,
                    "params_after": after,
                    **result,
                }
            )
        else:
            typer.echo(f"✓ 融合完成: {graph_path}")
            typer.echo(f"  参数量: {before:,} -> {after:,}")
            if verify:
                typer.echo(
                    f"  最大输出差异: {result['max_abs_diff']:.3e} (容差 {result['tolerance']:.1e})"
                )


@app.command()
def profile(
    model_path: Path = typer.Option(..., "--model", "-m", help="模型文件路径"),
    input_size: Optional[str] = typer.Option(None, "--input", help="输入尺寸 HxW，默认 256x256"),
    reps: Optional[int] = typer.Option(None, "--reps", help="计时重复次数"),
    warmup: Optional[int] = typer.Option(None, "--warmup", help="计时预热次数"),
    no_runtime: bool = typer.Option(False, "--no-runtime", help="只统计参数量与 FLOPs，不计时"),
    mac_factor: Optional[int] = typer.Option(None, "--mac-factor", help="每个 MAC 折算的 FLOPs 数 (1/2)"),
    include_elementwise: bool = typer.Option(
        False, "--include-elementwise", help="FLOPs 计入逐元素运算"
    ),
    json_output: bool = typer.Option(False, "--json", help="以 JSON 输出报告"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="显示详细日志"),
    config_path: Optional[Path] = typer.Option(None, "--config", "-c", help="配置文件路径"),
    threads: Optional[int] = typer.Option(None, "--threads", help="引擎线程数"),
    log_file: Optional[Path] = typer.Option(None, "--log-file", help="日志文件路径"),
):
    """
    模型复杂度分析

    统计参数量、FLOPs（默认 1 MAC = 1 FLOP）与 CPU 运行时间。
    """
    init_logging(verbose, log_file)
    with cli_errors("复杂度分析"):
        app_config = load_and_merge_config(
            config_path,
            threads=threads,
            input_hw=parse_hw(input_size),
            reps=reps,
            warmup=warmup,
            mac_factor=mac_factor,
        )
        profile_config = app_config.profile
        if include_elementwise:
            profile_config = profile_config.model_copy(update={"include_elementwise": True})
        model = load_model(model_path)
        report = profile_model(model, profile_config, with_runtime=not no_runtime)

        if json_output:
            emit_json(report.model_dump(mode="json"))
        else:
            render_profile(report)


@app.command("psnr")
def psnr_command(
    a: Path = typer.Option(..., "--a", help="第一张图像（超分结果）"),
    b: Path = typer.Option(..., "--b", help="第二张图像（真值）"),
    shave: Optional[int] = typer.Option(None, "--shave", help="每侧裁掉的边框像素数，默认 4"),
    mode: Optional[str] = typer.Option(None, "--mode", help="取值模式 (uint8/float)"),
    channel: Optional[str] = typer.Option(None, "--channel", help="通道约定 (rgb/y)"),
    json_output: bool = typer.Option(False, "--json", help="以 JSON 输出结果"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="显示详细日志"),
    config_path: Optional[Path] = typer.Option(None, "--config", "-c", help="配置文件路径"),
    log_file: Optional[Path] = typer.Option(None, "--log-file", help="日志文件路径"),
):
    """
    计算两张图像的 PSNR

    完全一致时输出 inf。
    """
    init_logging(verbose, log_file)
    with cli_errors("PSNR 计算"):
        metrics = load_and_merge_config(
            config_path, shave=shave, mode=mode, channel=channel
        ).metrics
        img_a, img_b = read_image(a), read_image(b)
        # uint8 模式直接在 0..255 上比较；float 模式换算到 [0, 1]
        scale = 1.0 if metrics.mode == "uint8" else 1.0 / 255.0
        x_a = img_a.transpose(2, 0, 1).astype(np.float64) * scale
        x_b = img_b.transpose(2, 0, 1).astype(np.float64) * scale
        pair = ImagePair(x_a, x_b, metrics.mode)
        value = psnr(pair, shave=metrics.shave, channel=metrics.channel)

        if json_output:
            emit_json(
                {
                    "psnr": value,
                    "shave": metrics.shave,
                    "mode": metrics.mode,
                    "channel": metrics.channel,
                }
            )
        else:
            typer.echo(format_psnr(value))


@app.command()
def score(
    csv_path: Path = typer.Option(..., "--csv", help="排行榜 CSV 文件路径"),
    baseline_runtime: Optional[float] = typer.Option(
        None, "--baseline-runtime", help="基线运行时间 (ms)，默认 22.183"
    ),
    baseline_params: Optional[float] = typer.Option(
        None, "--baseline-params", help="基线参数量 (M)，默认 0.276"
    ),
    baseline_flops: Optional[float] = typer.Option(
        None, "--baseline-flops", help="基线 FLOPs (G)，默认 16.70"
    ),
    thresholds: Optional[str] = typer.Option(
        None, "--thresholds", help="验证集,测试集 PSNR 门槛，默认 26.90,26.99"
    ),
    json_output: bool = typer.Option(False, "--json", help="以 JSON 输出结果"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="显示详细日志"),
    config_path: Optional[Path] = typer.Option(None, "--config", "-c", help="配置文件路径"),
    log_file: Optional[Path] = typer.Option(None, "--log-file", help="日志文件路径"),
):
    """
    挑战赛评分与排名

    子赛道分数 exp(2·指标/基线)，总分按 0.7/0.15/0.15 加权。
    """
    init_logging(verbose, log_file)
    with cli_errors("评分"):
        scoring = load_and_merge_config(
            config_path,
            baseline_runtime=baseline_runtime,
            baseline_params=baseline_params,
            baseline_flops=baseline_flops,
            thresholds=parse_thresholds(thresholds),
        ).scoring
        baseline = baseline_from_config(scoring)
        reports = rank(load_records(csv_path), baseline, scoring.weights)

        if json_output:
            emit_json(
                {
                    "baseline": baseline.model_dump(),
                    "weights": list(scoring.weights),
                    "rows": reports_to_dicts(reports),
                }
            )
        else:
            render_table(reports)


@app.command()
def bench(
    model_path: Path = typer.Option(..., "--model", "-m", help="模型文件路径（含重参数化结构）"),
    input_size: Optional[str] = typer.Option(None, "--input", help="输入尺寸 HxW，默认 256x256"),
    reps: Optional[int] = typer.Option(None, "--reps", help="配对计时轮数"),
    warmup: Optional[int] = typer.Option(None, "--warmup", help="预热轮数"),
    json_output: bool = typer.Option(False, "--json", help="以 JSON 输出结果"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="显示详细日志"),
    config_path: Optional[Path] = typer.Option(None, "--config", "-c", help="配置文件路径"),
    threads: Optional[int] = typer.Option(None, "--threads", help="引擎线程数"),
    log_file: Optional[Path] = typer.Option(None, "--log-file", help="日志文件路径"),
):
    """
    融合前后配对计时

    交替运行未融合与融合模型，报告运行时间、参数量与输出差异。
    输出差异超过引擎精度对应的容差时报错，不再计时。
    """
    init_logging(verbose, log_file)
    with cli_errors("配对计时"):
        app_config = load_and_merge_config(
            config_path,
            threads=threads,
            input_hw=parse_hw(input_size),
            reps=reps,
            warmup=warmup,
        )
        profile_config = app_config.profile
        dtype = _engine_dtype(app_config)
        model = load_model(model_path, dtype=dtype)
        if not model.has_rep_nodes():
            logger.warning(f"模型 {model.name} 不含重参数化结构，两次计时的是同一结构")
        fused_model = fuse_graph(model)

        h, w = profile_config.input_hw
        tolerance = app_config.reparam.tolerance_for(app_config.engine.precision)
        x = _verify_input(model.in_channels, profile_config.input_hw, dtype)
        max_abs_diff = verify_fusion(model, fused_model, x, tolerance)

        unfused_stats, fused_stats = compare_runtime(
            model,
            fused_model,
            profile_config.input_hw,
            warmup=profile_config.warmup,
            reps=profile_config.reps,
            progress=not json_output,
        )
        result = {
            "model": model.name,
            "input_size": [h, w],
            "params_unfused": count_params(model),
            "params_fused": count_params(fused_model),
            "max_abs_diff": max_abs_diff,
            "tolerance": tolerance,
            "speedup": unfused_stats.median_ms / fused_stats.median_ms,
            "unfused": unfused_stats.model_dump(exclude={"samples_ms"}),
            "fused": fused_stats.model_dump(exclude={"samples_ms"}),
        }

        if json_output:
            emit_json(result)
        else:
            console = Console()
            console.print(f"[bold]{model.name}[/bold] @ {h}×{w}, {unfused_stats.reps} 轮配对计时")
            console.print(
                f"  未融合: 中位数 {unfused_stats.median_ms:.3f} ms, 平均 {unfused_stats.mean_ms:.3f} ms, "
                f"参数量 {result['params_unfused']:,}"
            )
            console.print(
                f"  融合后: 中位数 {fused_stats.median_ms:.3f} ms, 平均 {fused_stats.mean_ms:.3f} ms, "
                f"参数量 {result['params_fused']:,}"
            )
            console.print(
                f"  加速比: {result['speedup']:.2f}×    "
                f"最大输出差异: {max_abs_diff:.3e} (容差 {tolerance:.1e})"
            )


@app.command()
def config(
    init: bool = typer.Option(False, "--init", help="初始化配置文件"),
    show: bool = typer.Option(False, "--show", help="显示当前配置"),
    config_path: Path = typer.Option(Path("config.yaml"), "--path", help="配置文件路径"),
):
    """
    配置管理命令

    初始化或显示配置文件。
    """
    init_logging(False)
    with cli_errors("配置管理"):
        if init:
            save_config(AppConfig(), config_path)
            typer.echo(f"✓ 配置文件已创建: {config_path}")
        elif show:
            app_config = load_config(config_path=config_path if config_path.exists() else None)
            typer.echo(
                yaml.safe_dump(
                    app_config.model_dump(mode="json"), sort_keys=False, allow_unicode=True
                ).rstrip()
            )
        else:
            typer.echo("请使用 --init 或 --show 选项", err=True)
            raise typer.Exit(EXIT_VALIDATION)


def main():
    """主入口函数"""
    app()


if __name__ == "__main__":
    main()
