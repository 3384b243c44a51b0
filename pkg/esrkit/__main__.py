"""
ESRKit 主入口模块

支持通过 python -m esrkit 运行。
"""

from esrkit.cli import app

if __name__ == "__main__":
    app()
