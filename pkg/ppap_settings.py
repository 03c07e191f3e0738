"""
环境变量配置

CLI 启动时先 load_dotenv()，这里的函数在调用时读取环境变量，不缓存。
"""

from __future__ import annotations

import logging
import os
import sys

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(message)s"


def configure_logging(level: str | None = None) -> None:
    """按 CPPAP_LOG_LEVEL（默认 INFO）配置根 logger，输出到 stderr。"""
    name = (level or os.getenv("CPPAP_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.INFO),
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


def worker_count() -> int:
    """CPPAP_THREADS 指定的并行 worker 数，非法值回退为 1。"""
    raw = os.getenv("CPPAP_THREADS", "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        logger.warning("Ignoring non-integer CPPAP_THREADS=%r, using 1 worker", raw)
        return 1
    if value < 1:
        logger.warning("Ignoring CPPAP_THREADS=%d < 1, using 1 worker", value)
        return 1
    return value
