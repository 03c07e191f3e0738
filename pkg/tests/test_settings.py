import logging

import pytest

from ppap_settings import configure_logging, worker_count


@pytest.mark.parametrize("raw, expected", [("", 1), ("4", 4), ("0", 1), ("many", 1)])
def test_worker_count_from_environment(monkeypatch, raw, expected):
    monkeypatch.setenv("CPPAP_THREADS", raw)
    assert worker_count() == expected


def test_log_level_from_environment(monkeypatch):
    monkeypatch.setenv("CPPAP_LOG_LEVEL", "warning")
    configure_logging()
    assert logging.getLogger().level == logging.WARNING
    configure_logging("debug")
    assert logging.getLogger().level == logging.DEBUG
    configure_logging("INFO")
