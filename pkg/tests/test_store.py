from pathlib import Path

from pytest_mock import MockerFixture

from stockrater.store import jsonl_store


def scoped(key: str, month: str = "2022-06", text: str = "Acme raised guidance.") -> dict:
    return {"scope": "company", "key": key, "month": month, "digest": f"d-{key}-{month}", "text": text}


def test_save_scoped_keeps_the_first_write(tmp_path: Path):
    path = tmp_path / jsonl_store.SUMMARIES_FILENAME

    assert jsonl_store.save_scoped(path, scoped("ACM"))
    assert not jsonl_store.save_scoped(path, scoped("ACM", text="A later rewrite"))

    stored = jsonl_store.load_scoped(path)
    assert len(stored) == 1
    assert stored[("company", "ACM", "2022-06", "d-ACM-2022-06")]["text"] == "Acme raised guidance."


def test_save_scoped_reads_the_file_once_per_run(tmp_path: Path, mocker: MockerFixture):
    path = tmp_path / jsonl_store.SENTIMENT_FILENAME
    jsonl_store.append_records(path, [scoped("ACM")])
    load_spy = mocker.spy(jsonl_store, "load_records")

    saved = [jsonl_store.save_scoped(path, scoped(ticker, month)) for month in ("2022-06", "2022-07") for ticker in ("ACM", "BLD", "CRV")]

    assert saved == [False, True, True, True, True, True]
    assert load_spy.call_count == 1
    assert len(jsonl_store.load_records(path)) == 6


def test_save_scoped_notices_a_cleared_store(tmp_path: Path):
    path = tmp_path / jsonl_store.SUMMARIES_FILENAME
    assert jsonl_store.save_scoped(path, scoped("ACM"))

    jsonl_store.clear_store(path)

    assert jsonl_store.save_scoped(path, scoped("ACM"))
    assert len(jsonl_store.load_records(path)) == 1


def test_partial_trailing_line_is_skipped(tmp_path: Path):
    path = tmp_path / jsonl_store.SUMMARIES_FILENAME
    jsonl_store.append_records(path, [scoped("ACM")])
    with open(path, "a", encoding="utf-8") as f:
        f.write('{"scope": "company", "key": "BL')

    assert [r["key"] for r in jsonl_store.load_records(path)] == ["ACM"]
