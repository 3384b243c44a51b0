"""
错误处理模块

把库异常映射为退出码与单行诊断信息。
"""

from contextlib import contextmanager
from typing import Iterator, NoReturn

import typer
from loguru import logger

from esrkit.exceptions import (
    ConfigurationError,
    FusionError,
    GraphError,
    ImageFormatError,
    ModelFormatError,
    ShapeError,
    ValidationError,
)

EXIT_UNEXPECTED = 1
EXIT_VALIDATION = 2
EXIT_INTERRUPTED = 130


def _one_line(error: BaseException) -> str:
    return " ".join(str(error).split()) or type(error).__name__


def fail(category: str, error: BaseException) -> NoReturn:
    """
    输出单行诊断并以退出码 2 结束

    Args:
        category: 错误类别（参数/形状/格式/文件/配置）
        error: 异常对象
    """
    logger.debug(f"{type(error).__name__}: {error}")
    typer.echo(f"错误[{category}]: {_one_line(error)}", err=True)
    raise typer.Exit(EXIT_VALIDATION)


@contextmanager
def cli_errors(action: str) -> Iterator[None]:
    """
    命令执行的错误边界

    Args:
        action: 命令动作描述，用于日志

    Raises:
        typer.Exit: 校验类错误退出码 2，用户中断 130，其余异常 1
    """
    try:
        yield
    except typer.Exit:
        raise
    except KeyboardInterrupt:
        logger.warning("用户中断操作")
        typer.echo("\n操作已取消", err=True)
        raise typer.Exit(EXIT_INTERRUPTED)
    except ConfigurationError as e:
        fail("配置", e)
    except (ModelFormatError, ImageFormatError) as e:
        fail("格式", e)
    except (ShapeError, GraphError) as e:
        fail("形状", e)
    except (ValidationError, FusionError) as e:
        fail("参数", e)
    except OSError as e:
        fail("文件", e)
    except Exception as e:
        logger.exception(f"{action}失败")
        typer.echo(f"错误: {_one_line(e)}", err=True)
        raise typer.Exit(EXIT_UNEXPECTED)
