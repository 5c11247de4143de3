"""
advcube Logger Configuration
Console (stderr) logging through coloredlogs, optional file and JSON output
"""
import json
import logging
import os
import sys
import uuid
from datetime import datetime, timezone
from threading import Lock
from typing import Any, Dict, Optional

import coloredlogs

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


class JSONFormatter(logging.Formatter):
    """JSON formatter for structured logging, one object per line"""

    def format(self, record: logging.LogRecord) -> str:
        log_data = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }

        if record.exc_info:
            log_data["exception"] = self.formatException(record.exc_info)

        run_id = getattr(record, "run_id", None) or RunContext.get("run_id")
        if run_id:
            log_data["run_id"] = run_id
        if hasattr(record, "step"):
            log_data["step"] = record.step
        if hasattr(record, "duration_ms"):
            log_data["duration_ms"] = record.duration_ms

        return json.dumps(log_data)


class RunContext:
    """Process-wide context of the current CLI invocation"""
    _context: Dict[str, Any] = {}
    _lock = Lock()

    @classmethod
    def set(cls, key: str, value: Any):
        with cls._lock:
            cls._context[key] = value

    @classmethod
    def get(cls, key: str, default: Any = None) -> Any:
        with cls._lock:
            return cls._context.get(key, default)

    @classmethod
    def clear(cls):
        with cls._lock:
            cls._context.clear()

    @classmethod
    def new_run_id(cls) -> str:
        run_id = str(uuid.uuid4())[:8]
        cls.set("run_id", run_id)
        return run_id


def setup_logger(name: Optional[str] = None, log_file: Optional[str] = None,
                 level: str = 'INFO', json_format: bool = False) -> logging.Logger:
    """Set up logging for the pipeline (root logger by default): stderr console, optional file"""

    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir and not os.path.exists(log_dir):
            os.makedirs(log_dir, exist_ok=True)

    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, level.upper()))
    logger.handlers.clear()
    logger.propagate = False

    if json_format:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(JSONFormatter())
        logger.addHandler(console_handler)
    else:
        coloredlogs.install(
            level=level.upper(),
            logger=logger,
            fmt=LOG_FORMAT,
            datefmt=DATE_FORMAT,
            stream=sys.stderr,
        )

    if log_file:
        try:
            file_handler = logging.FileHandler(log_file, encoding='utf-8')
            file_handler.setFormatter(JSONFormatter() if json_format else
                                      logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
            logger.addHandler(file_handler)
        except Exception as e:
            logger.warning(f"Could not create log file {log_file}: {e}")

    # Reduce noise from external libraries
    for lib in ['PIL', 'matplotlib']:
        logging.getLogger(lib).setLevel(logging.WARNING)

    return logger
