import json
import logging
import sys
from datetime import datetime, timezone


class RunEventFormatter(logging.Formatter):
    """One JSON object per line, tagged [RUN]"""

    def format(self, record):
        event = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "level": record.levelname,
            "event": record.getMessage(),
            "module": record.module,
        }
        fields = getattr(record, "fields", None)
        if fields:
            event.update(fields)
        return f"[RUN] {json.dumps(event, default=str, sort_keys=True)}"


def setup_run_logger(name="run_logger"):
    logger = logging.getLogger(name)
    logger.setLevel(logging.INFO)
    logger.propagate = False

    # Avoid duplicate handlers when imported more than once
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(RunEventFormatter())
        logger.addHandler(handler)

    return logger


def log_event(event: str, **fields):
    """Structured pipeline event: stage boundaries, drop counts, checks"""
    run_logger.info(event, extra={"fields": fields})


run_logger = setup_run_logger()
