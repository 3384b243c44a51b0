"""
日志配置测试
"""

import pytest
from loguru import logger

from esrkit.utils.logger import setup_logger


@pytest.fixture(autouse=True)
def _remove_sinks():
    """测试结束后关闭全部日志处理器"""
    yield
    logger.remove()


class TestSetupLogger:
    """日志初始化测试"""

    def test_console_level(self, capsys):
        """控制台只输出指定级别及以上"""
        assert setup_logger(level="WARNING") is None
        logger.info("安静的消息")
        logger.warning("需要注意的消息")
        err = capsys.readouterr().err
        assert "需要注意的消息" in err
        assert "安静的消息" not in err

    def test_log_file(self, tmp_path):
        """指定日志文件时自动创建目录并返回路径"""
        path = tmp_path / "logs" / "run.log"
        assert setup_logger(level="WARNING", log_file=path) == path
        logger.info("写入文件")
        logger.debug("调试细节")
        logger.remove()
        text = path.read_text(encoding="utf-8")
        assert "日志文件已创建" in text
        assert "写入文件" in text
        assert "调试细节" not in text

    def test_verbose(self, tmp_path, capsys):
        """verbose 模式输出 DEBUG 日志"""
        path = tmp_path / "run.log"
        setup_logger(log_file=path, verbose=True)
        logger.debug("调试细节")
        logger.remove()
        assert "调试细节" in capsys.readouterr().err
        assert "调试细节" in path.read_text(encoding="utf-8")
