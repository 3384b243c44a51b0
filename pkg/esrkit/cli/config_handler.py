"""
配置处理模块

负责加载配置、合并命令行参数并初始化日志与引擎线程数。
"""

from pathlib import Path
from typing import Optional, Tuple

from loguru import logger

from esrkit.core.config_loader import load_config
from esrkit.core.tensor_ops import set_num_threads
from esrkit.exceptions import ConfigurationError
from esrkit.models.config import AppConfig
from esrkit.utils.logger import setup_logger


def init_logging(verbose: bool, log_file: Optional[Path] = None) -> Optional[Path]:
    """
    初始化 CLI 日志

    默认只向 stderr 输出 WARNING 及以上，--verbose 时输出 DEBUG。
    """
    return setup_logger(
        level="DEBUG" if verbose else "WARNING",
        log_file=log_file,
        verbose=verbose,
    )


def load_and_merge_config(
    config_path: Optional[Path],
    threads: Optional[int] = None,
    shave: Optional[int] = None,
    mode: Optional[str] = None,
    channel: Optional[str] = None,
    input_hw: Optional[Tuple[int, int]] = None,
    reps: Optional[int] = None,
    warmup: Optional[int] = None,
    mac_factor: Optional[int] = None,
    baseline_runtime: Optional[float] = None,
    baseline_params: Optional[float] = None,
    baseline_flops: Optional[float] = None,
    thresholds: Optional[Tuple[float, float]] = None,
) -> AppConfig:
    """
    加载配置并合并命令行参数，随后设置引擎线程数

    命令行参数优先级最高；为None的参数不覆盖配置。

    Returns:
        合并后的配置对象

    Raises:
        ConfigurationError: 配置加载失败或覆盖值非法
    """
    app_config = load_config(config_path=config_path)

    overrides = {
        "engine": {"threads": threads},
        "metrics": {"shave": shave, "mode": mode, "channel": channel},
        "profile": {
            "input_hw": input_hw,
            "reps": reps,
            "warmup": warmup,
            "mac_factor": mac_factor,
        },
        "scoring": {
            "baseline_runtime": baseline_runtime,
            "baseline_params": baseline_params,
            "baseline_flops": baseline_flops,
        },
    }
    if thresholds is not None:
        overrides["scoring"]["psnr_val_threshold"] = thresholds[0]
        overrides["scoring"]["psnr_test_threshold"] = thresholds[1]

    data = app_config.model_dump()
    for section, values in overrides.items():
        for key, value in values.items():
            if value is not None:
                data[section][key] = value
                logger.debug(f"命令行覆盖配置 {section}.{key} = {value}")
    try:
        merged = AppConfig.from_dict(data)
    except ValueError as e:
        raise ConfigurationError(f"命令行参数非法: {e}") from e

    set_num_threads(merged.engine.threads)
    return merged
