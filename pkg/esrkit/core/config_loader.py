"""
配置加载模块

支持从YAML文件和环境变量加载配置，并提供配置合并功能。

配置优先级（从低到高）：
1. 默认配置 (esrkit/config/default.yaml)
2. 用户配置文件 (.config.yml)
3. 命令行指定的配置文件
4. 环境变量 (ESRKIT_THREADS, ESRKIT_PRECISION)
5. 命令行参数（在CLI中处理）
"""

import os
import re
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv
from loguru import logger
from pydantic import ValidationError as PydanticValidationError

from esrkit.exceptions import ConfigurationError
from esrkit.models.config import AppConfig, EngineSettings


def load_env_file(env_path: Optional[Path] = None) -> None:
    """
    加载环境变量文件

    Args:
        env_path: .env文件路径，如果为None则自动查找
    """
    if env_path:
        load_dotenv(env_path)
        return

    project_root = find_project_root(Path.cwd())
    env_file = project_root / ".env" if project_root else None
    if env_file and env_file.exists():
        load_dotenv(env_file)
    else:
        home_env = Path.home() / ".esrkit" / ".env"
        if home_env.exists():
            load_dotenv(home_env)


def resolve_env_vars(value: Any) -> Any:
    """
    解析环境变量引用

    支持 ${VAR_NAME} 格式的环境变量引用。

    Args:
        value: 可能包含环境变量引用的值

    Returns:
        解析后的值
    """
    if isinstance(value, str):
        pattern = r"\$\{([^}]+)\}"
        for var_name in re.findall(pattern, value):
            env_value = os.getenv(var_name)
            if env_value:
                value = value.replace(f"${{{var_name}}}", env_value)
            else:
                logger.warning(f"环境变量 {var_name} 未设置")
        return value
    elif isinstance(value, dict):
        return {k: resolve_env_vars(v) for k, v in value.items()}
    elif isinstance(value, list):
        return [resolve_env_vars(item) for item in value]
    else:
        return value


def load_yaml_config(config_path: Path) -> Dict[str, Any]:
    """
    从YAML文件加载配置

    Args:
        config_path: 配置文件路径

    Returns:
        配置字典

    Raises:
        ConfigurationError: 配置文件不存在或YAML解析错误
    """
    if not config_path.exists():
        raise ConfigurationError(f"配置文件不存在: {config_path}")

    try:
        with open(config_path, encoding="utf-8") as f:
            config_dict = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"配置文件 YAML 解析失败: {config_path}: {e}") from e

    if not config_dict:
        return {}
    if not isinstance(config_dict, dict):
        raise ConfigurationError(f"配置文件顶层必须是映射: {config_path}")

    return resolve_env_vars(config_dict)


def get_default_config_path() -> Path:
    """
    获取默认配置文件路径

    Returns:
        默认配置文件路径
    """
    return Path(__file__).parent.parent / "config" / "default.yaml"


def find_project_root(start_path: Optional[Path] = None) -> Optional[Path]:
    """
    查找项目根目录

    通过查找包含 .git、pyproject.toml 或 .config.yml 的目录来确定项目根目录。

    Args:
        start_path: 起始搜索路径，如果为None则从当前工作目录开始

    Returns:
        项目根目录路径，如果找不到则返回起始目录
    """
    if start_path is None:
        start_path = Path.cwd()

    current = Path(start_path).resolve()
    markers = [".git", "pyproject.toml", ".config.yml"]

    while current != current.parent:
        for marker in markers:
            if (current / marker).exists():
                return current
        current = current.parent

    return Path(start_path).resolve()


def find_user_config_file() -> Optional[Path]:
    """
    查找用户配置文件 .config.yml

    Returns:
        配置文件路径，如果不存在则返回None
    """
    project_root = find_project_root()
    if project_root:
        config_file = project_root / ".config.yml"
        if config_file.exists():
            return config_file
    return None


def validate_config(config_dict: Dict[str, Any]) -> List[str]:
    """
    验证配置参数并返回警告列表

    只检查不会阻止运行、但大概率是误配置的取值。

    Args:
        config_dict: 配置字典

    Returns:
        警告信息列表
    """
    warnings = []

    engine = config_dict.get("engine") or {}
    threads = engine.get("threads")
    cpu_count = os.cpu_count() or 1
    if isinstance(threads, int) and threads > cpu_count:
        warnings.append(f"engine.threads={threads} 超过 CPU 核数 {cpu_count}")

    profile = config_dict.get("profile") or {}
    input_hw = profile.get("input_hw")
    if input_hw and list(input_hw) != [256, 256]:
        warnings.append(f"profile.input_hw={list(input_hw)}，挑战赛 FLOPs 约定为 256×256")
    if profile.get("mac_factor") == 2:
        warnings.append("profile.mac_factor=2，FLOPs 将与挑战赛表格的 1 MAC = 1 FLOP 约定不一致")

    metrics = config_dict.get("metrics") or {}
    shave = metrics.get("shave")
    if isinstance(shave, int) and shave != 4:
        warnings.append(f"metrics.shave={shave}，挑战赛约定裁剪 4 像素边界")

    return warnings


def load_config(
    config_path: Optional[Path] = None,
    env_file: Optional[Path] = None,
) -> AppConfig:
    """
    加载应用配置

    Args:
        config_path: 命令行指定的配置文件路径，如果为None则自动查找
        env_file: 环境变量文件路径

    Returns:
        应用配置对象

    Raises:
        ConfigurationError: 配置文件缺失、格式错误或取值非法
    """
    load_env_file(env_file)

    # 1. 加载默认配置
    default_config_path = get_default_config_path()
    if default_config_path.exists():
        merged_config = load_yaml_config(default_config_path)
        logger.debug(f"已加载默认配置: {default_config_path}")
    else:
        merged_config = {}
        logger.warning("默认配置文件不存在，使用空配置")

    # 2. 合并用户配置文件 .config.yml（未通过命令行指定时）
    if not config_path:
        user_config_file = find_user_config_file()
        if user_config_file:
            logger.info(f"发现用户配置文件: {user_config_file}")
            merged_config = _merge_dicts(merged_config, load_yaml_config(user_config_file))

    # 3. 合并命令行指定的配置文件
    if config_path:
        merged_config = _merge_dicts(merged_config, load_yaml_config(config_path))
        logger.debug(f"已合并命令行指定的配置文件: {config_path}")

    # 4. 环境变量覆盖
    env_config = _load_from_env()
    if env_config:
        merged_config = _merge_dicts(merged_config, env_config)
        logger.debug("已合并环境变量配置")

    for warning in validate_config(merged_config):
        logger.warning(f"配置警告: {warning}")

    try:
        return AppConfig.from_dict(merged_config)
    except PydanticValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first.get("loc", ()))
        raise ConfigurationError(f"配置取值非法 {location}: {first.get('msg')}") from e


def _load_from_env() -> Dict[str, Any]:
    """
    从环境变量加载配置

    支持的环境变量：ESRKIT_THREADS, ESRKIT_PRECISION

    Returns:
        配置字典
    """
    try:
        settings = EngineSettings()
    except PydanticValidationError as e:
        raise ConfigurationError(f"ESRKIT_* 环境变量取值非法: {e.errors()[0].get('msg')}") from e

    engine = settings.model_dump(exclude_none=True)
    return {"engine": engine} if engine else {}


def _merge_dicts(base: Dict, override: Dict) -> Dict:
    """
    深度合并两个字典

    Args:
        base: 基础字典
        override: 覆盖字典

    Returns:
        合并后的字典
    """
    result = base.copy()
    for key, value in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = _merge_dicts(result[key], value)
        else:
            result[key] = value
    return result


def save_config(config: AppConfig, config_path: Path) -> None:
    """
    保存配置到YAML文件

    Args:
        config: 配置对象
        config_path: 保存路径
    """
    config_path.parent.mkdir(parents=True, exist_ok=True)

    config_dict = config.model_dump(mode="json")

    with open(config_path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config_dict, f, default_flow_style=False, allow_unicode=True)

    logger.info(f"配置已保存到: {config_path}")
