from __future__ import annotations

import pytest

from crpo_lab.core import D, ConsultationQuery, Response


def resp(producer: str, quality, query_id: str = "q1", text: str | None = None) -> Response:
    if isinstance(quality, (int, float)):
        quality = (float(quality),) * D
    return Response(query_id, text or f"reply from {producer}", producer, tuple(quality))


@pytest.fixture
def query() -> ConsultationQuery:
    return ConsultationQuery.single_turn("q1", "I have had a rash on my arm for two weeks.")


ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
