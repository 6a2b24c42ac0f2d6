import json
import logging

from services.run_logger import RunEventFormatter, log_event, run_logger, setup_run_logger


def record(message, **fields):
    rec = logging.LogRecord("run_logger", logging.INFO, __file__, 1, message, None, None)
    if fields:
        rec.fields = fields
    return rec


class TestRunEventFormatter:
    def setup_method(self):
        self.formatter = RunEventFormatter()

    def test_tagged_json_line(self):
        line = self.formatter.format(record("stage_done", stage="train", seconds=1.5))
        assert line.startswith("[RUN] ")
        event = json.loads(line[len("[RUN] "):])
        assert event["event"] == "stage_done"
        assert event["stage"] == "train"
        assert event["seconds"] == 1.5
        assert event["level"] == "INFO"

    def test_without_fields(self):
        event = json.loads(self.formatter.format(record("hello"))[6:])
        assert set(event) == {"timestamp", "level", "event", "module"}

    def test_non_json_values_are_stringified(self):
        event = json.loads(self.formatter.format(record("x", path=object()))[6:])
        assert isinstance(event["path"], str)


class TestLogEvent:
    def test_run_formatter_attached_and_no_propagation(self):
        formatters = [h.formatter for h in run_logger.handlers]
        assert any(isinstance(f, RunEventFormatter) for f in formatters)
        assert run_logger.propagate is False

    def test_setup_is_idempotent(self):
        before = list(run_logger.handlers)
        assert setup_run_logger() is run_logger
        assert run_logger.handlers == before

    def test_fields_are_attached(self, mocker):
        info = mocker.patch.object(run_logger, "info")
        log_event("drops", stage="generate", duplicate=2)
        info.assert_called_once_with("drops", extra={"fields": {"stage": "generate", "duplicate": 2}})
