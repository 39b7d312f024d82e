import random
from datetime import date
from pathlib import Path

import pandas as pd
import pytest

from stockrater.errors import DataError, LookaheadError, NoFilings
from stockrater.fundamentals import (
    FilingRow, FundamentalsTable, Quarter, format_value, ingest_fundamentals, load_filing_rows, load_metric_definitions, render_fundamentals_html,
)

GOLDEN_HTML = Path(__file__).parent / "resources" / "fundamentals_golden.html"
AS_OF = date(2022, 7, 1)
DEFINITIONS = load_metric_definitions()

# (period_end, filing_date) per quarter, oldest first
PERIODS = [
    (date(2021, 3, 31), date(2021, 5, 1)),
    (date(2021, 6, 30), date(2021, 8, 1)),
    (date(2021, 9, 30), date(2021, 11, 1)),
    (date(2021, 12, 31), date(2022, 2, 1)),
    (date(2022, 3, 31), date(2022, 5, 1)),
    (date(2022, 6, 30), date(2022, 8, 1)),
]
VALUES = {
    "revenue": [900_000.0, 1_000_000.0, 1_050_000.0, 1_100_000.0, 1_234_567.5, 1_300_000.0],
    "net_income": [1.0, -250_000.0, 120_000.25, 0.0, 98_000.0, 5.0],
    "eps": [1.0, 1.25, 1.3, -0.5, 2.0, 3.0],
    "gross_margin": [0.4, 0.4123, 0.41, None, 0.42567, 0.5],
}


def golden_rows() -> list[FilingRow]:
    rows = []
    for metric, values in VALUES.items():
        for (period_end, filing_date), value in zip(PERIODS, values):
            if value is not None:
                rows.append(FilingRow("ACM", period_end, filing_date, metric, value))
    rows.append(FilingRow("BRC", date(2022, 3, 31), date(2022, 4, 15), "revenue", 5.0))
    return rows


def test_golden_table_matches_byte_for_byte():
    table = ingest_fundamentals(golden_rows(), "ACM", AS_OF, DEFINITIONS)
    assert render_fundamentals_html(table) == GOLDEN_HTML.read_text(encoding="utf-8")


def test_newest_four_visible_filings_are_selected():
    table = ingest_fundamentals(golden_rows(), "ACM", AS_OF, DEFINITIONS)
    assert [q.label for q in table.quarters] == ["2021 Q2", "2021 Q3", "2021 Q4", "2022 Q1"]
    assert table.max_input_date == date(2022, 5, 1)


def test_filing_after_as_of_is_excluded_even_when_the_period_ended_before():
    rows = golden_rows() + [FilingRow("ACM", date(2022, 3, 31), date(2022, 7, 1), "revenue", 777_777_777.0)]
    table = ingest_fundamentals(rows, "ACM", AS_OF, DEFINITIONS)
    assert table.quarters[-1].metrics["revenue"] == 1_234_567.5
    assert "777,777,777" not in render_fundamentals_html(table)


def test_visible_restatement_replaces_the_original_value():
    rows = golden_rows() + [FilingRow("ACM", date(2022, 3, 31), date(2022, 6, 1), "revenue", 1_200_000.0)]
    table = ingest_fundamentals(rows, "ACM", AS_OF, DEFINITIONS)
    assert table.quarters[-1].metrics["revenue"] == 1_200_000.0
    assert table.quarters[-1].filing_date == date(2022, 6, 1)


def test_missing_metric_stays_absent():
    table = ingest_fundamentals(golden_rows(), "ACM", AS_OF, DEFINITIONS)
    assert "gross_margin" not in table.quarters[2].metrics
    assert table.metrics == ["revenue", "net_income", "eps", "gross_margin"]


def test_permuted_rows_render_identically():
    rows = golden_rows()
    expected = render_fundamentals_html(ingest_fundamentals(rows, "ACM", AS_OF, DEFINITIONS))
    rng = random.Random(13)
    for _ in range(10):
        rng.shuffle(rows)
        assert render_fundamentals_html(ingest_fundamentals(rows, "ACM", AS_OF, DEFINITIONS)) == expected


def test_no_filings_before_as_of():
    with pytest.raises(NoFilings):
        ingest_fundamentals(golden_rows(), "ACM", date(2021, 5, 1), DEFINITIONS)


def test_metrics_without_definition_are_dropped():
    rows = golden_rows() + [FilingRow("ACM", date(2022, 3, 31), date(2022, 5, 1), "ebitda", 10.0)]
    table = ingest_fundamentals(rows, "ACM", AS_OF, DEFINITIONS)
    assert "ebitda" not in table.metrics


def test_table_rejects_more_than_four_quarters():
    quarters = tuple(Quarter(p, f, {"revenue": 1.0}) for p, f in PERIODS[:5])
    with pytest.raises(ValueError):
        FundamentalsTable("ACM", AS_OF, quarters, DEFINITIONS)


def test_table_rejects_undefined_metric():
    with pytest.raises(ValueError):
        FundamentalsTable("ACM", AS_OF, (Quarter(*PERIODS[0], {"ebitda": 1.0}),), DEFINITIONS)


def test_table_rejects_lookahead():
    with pytest.raises(LookaheadError):
        FundamentalsTable("ACM", AS_OF, (Quarter(*PERIODS[5], {"revenue": 1.0}),), DEFINITIONS)


def test_quarters_without_metrics_render_header_only():
    table = FundamentalsTable("ACM", AS_OF, tuple(Quarter(p, f) for p, f in PERIODS[1:3]), DEFINITIONS)
    html = render_fundamentals_html(table)
    assert "<th>2021 Q2</th><th>2021 Q3</th>" in html
    assert "<tbody>\n</tbody>" in html
    assert "<td>" not in html


@pytest.mark.parametrize(
    "value, expected",
    [
        pytest.param(None, "N/A", id="absent"),
        pytest.param(1_234_567.0, "1,234,567", id="integral"),
        pytest.param(-1_234.567, "-1,234.57", id="decimal"),
        pytest.param(0.12345, "0.1235", id="fraction"),
        pytest.param(0.0, "0", id="zero"),
    ]
)
def test_format_value(value: float | None, expected: str):
    assert format_value(value) == expected


def test_load_filing_rows(synthetic_market):
    rows = load_filing_rows(synthetic_market.fundamentals_path)
    assert len(rows) == 10 * 7 * 3
    assert rows[0] == FilingRow("ACM", date(2021, 3, 31), date(2021, 4, 30), "revenue", 1_000_000.0)


def test_load_filing_rows_requires_columns(tmp_path: Path):
    path = tmp_path / "fundamentals.csv"
    pd.DataFrame({"ticker": ["ACM"], "metric": ["revenue"], "value": [1.0]}).to_csv(path, index=False)
    with pytest.raises(DataError) as excinfo:
        load_filing_rows(path)
    assert "filing_date, period_end" in excinfo.value.message


def test_default_metric_definitions():
    assert len(DEFINITIONS) == 10
    assert list(DEFINITIONS)[:3] == ["revenue", "net_income", "eps"]
