"""
CLI模块

提供命令行接口。
"""

from esrkit.cli.app import app, main

__all__ = ["app", "main"]
