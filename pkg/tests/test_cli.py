"""Command line behavior through click's test runner."""

import json

import pytest
import yaml
from click.testing import CliRunner

from icldst.cli import _parse_axis, main


@pytest.fixture
def runner():
    return CliRunner()


def write_config(synth_corpus, path, **overrides):
    train_path, test_path = synth_corpus
    settings = {
        "train_corpus": str(train_path),
        "test_corpus": str(test_path),
        "embed_backend": {"kind": "mock", "dimension": 256},
        "max_demos": 1,
        "output_dir": str(path.parent / "out"),
    }
    settings.update(overrides)
    path.write_text(yaml.safe_dump(settings), encoding="utf-8")
    return path


def test_version(runner):
    result = runner.invoke(main, ["--version"])
    assert result.exit_code == 0
    assert "icldst" in result.output


def test_import_command(runner, raw_dataset, tmp_path):
    out = tmp_path / "corpus"
    result = runner.invoke(
        main, ["import", "--data", str(raw_dataset), "--out-dir", str(out)]
    )
    assert result.exit_code == 0, result.output
    assert "test: 2 turns" in result.output
    assert "dev: 1 turns" in result.output
    assert "skipped 1 dialogues" in result.output
    assert (out / "test.jsonl").is_file()
    report = json.loads((out / "import_report.json").read_text(encoding="utf-8"))
    assert report["turns"]["test"] == 2
    assert report["dialogues_imported"] == 2


def test_import_strict_fails_on_errors(runner, raw_dataset, tmp_path):
    result = runner.invoke(
        main,
        [
            "import",
            "--data",
            str(raw_dataset),
            "--out-dir",
            str(tmp_path / "c"),
            "--strict",
        ],
    )
    assert result.exit_code != 0
    assert "1 dialogues failed" in result.output


def test_embed_command(runner, synth_corpus, tmp_path):
    train_path, _ = synth_corpus
    out = tmp_path / "train.emb.jsonl"
    result = runner.invoke(
        main,
        [
            "embed",
            "--corpus",
            str(train_path),
            "--out",
            str(out),
            "--dimension",
            "32",
        ],
    )
    assert result.exit_code == 0, result.output
    assert f"wrote {out}" in result.output
    header = json.loads(out.read_text(encoding="utf-8").splitlines()[0])
    assert header["dim"] == 32 and header["count"] == 50


def test_embed_service_needs_url_and_model(runner, synth_corpus, tmp_path):
    train_path, _ = synth_corpus
    result = runner.invoke(
        main,
        [
            "embed",
            "--corpus",
            str(train_path),
            "--out",
            str(tmp_path / "x.jsonl"),
            "--backend",
            "service",
        ],
    )
    assert result.exit_code != 0
    assert "--url and --model" in result.output


def test_run_command(runner, synth_corpus, tmp_path):
    config_path = write_config(synth_corpus, tmp_path / "run.yaml")
    result = runner.invoke(main, ["run", "--config", str(config_path)])
    assert result.exit_code == 0, result.output
    assert "run_id" in result.output
    assert "1.0000" in result.output
    assert (tmp_path / "out" / "records.jsonl").is_file()


def test_run_overrides_and_dry_run(runner, synth_corpus, tmp_path):
    config_path = write_config(synth_corpus, tmp_path / "run.yaml")
    out = tmp_path / "dry"
    result = runner.invoke(
        main,
        [
            "run",
            "--config",
            str(config_path),
            "--k",
            "3",
            "--limit",
            "4",
            "--output",
            str(out),
            "--dry-run",
        ],
    )
    assert result.exit_code == 0, result.output
    assert "rendered prompts for 4 samples" in result.output
    assert len(list((out / "prompts").iterdir())) == 4
    saved = json.loads((out / "config.json").read_text(encoding="utf-8"))
    assert saved["max_demos"] == 3 and saved["sample_limit"] == 4


def test_run_fails_on_backend_errors(runner, synth_corpus, tmp_path):
    config_path = write_config(
        synth_corpus,
        tmp_path / "run.yaml",
        sample_limit=2,
        parallelism=1,
        backend={
            "kind": "http_completion",
            "url": "http://127.0.0.1:9/v1/completions",
            "model": "m",
            "max_retries": 0,
            "timeout": 2.0,
        },
    )
    result = runner.invoke(main, ["run", "--config", str(config_path)])
    assert result.exit_code != 0
    assert "2 samples failed" in result.output


def test_run_missing_corpus_is_clean_error(runner, synth_corpus, tmp_path):
    config_path = write_config(synth_corpus, tmp_path / "run.yaml")
    data = yaml.safe_load(config_path.read_text(encoding="utf-8"))
    data["train_corpus"] = str(tmp_path / "gone.jsonl")
    config_path.write_text(yaml.safe_dump(data), encoding="utf-8")
    result = runner.invoke(main, ["run", "--config", str(config_path)])
    assert result.exit_code != 0
    assert "does not exist" in result.output
    assert "Traceback" not in result.output


def test_grid_command(runner, synth_corpus, tmp_path):
    config_path = write_config(
        synth_corpus, tmp_path / "grid.yaml", sample_limit=6,
        output_dir=str(tmp_path / "gridout"),
    )
    result = runner.invoke(
        main, ["grid", "--config", str(config_path), "--axis", "max_demos=1,3"]
    )
    assert result.exit_code == 0, result.output
    assert "combined results:" in result.output
    csv_lines = (
        (tmp_path / "gridout" / "combined.csv").read_text(encoding="utf-8").splitlines()
    )
    assert len(csv_lines) == 3
    assert csv_lines[0].startswith("max_demos,run_id")


def test_grid_rejects_bad_axis(runner, synth_corpus, tmp_path):
    config_path = write_config(synth_corpus, tmp_path / "grid.yaml")
    result = runner.invoke(
        main, ["grid", "--config", str(config_path), "--axis", "max_demos"]
    )
    assert result.exit_code != 0
    assert "bad --axis" in result.output


def test_parse_axis_coercion():
    assert _parse_axis("max_demos=1,3,10") == ("max_demos", [1, 3, 10])
    assert _parse_axis("speaker_tags=true,false") == ("speaker_tags", [True, False])
    assert _parse_axis("history_mode=user_only, user_agent") == (
        "history_mode",
        ["user_only", "user_agent"],
    )


def test_report_command(runner, synth_corpus, tmp_path):
    config_path = write_config(synth_corpus, tmp_path / "run.yaml", sample_limit=3)
    assert runner.invoke(main, ["run", "--config", str(config_path)]).exit_code == 0
    result = runner.invoke(main, ["report", str(tmp_path / "out")])
    assert result.exit_code == 0, result.output
    assert "out" in result.output and "1.0000" in result.output

    empty = runner.invoke(main, ["report"])
    assert empty.exit_code != 0
    assert "nothing to report" in empty.output


def test_report_grid_dir(runner, synth_corpus, tmp_path):
    config_path = write_config(
        synth_corpus, tmp_path / "grid.yaml", sample_limit=4,
        output_dir=str(tmp_path / "g"),
    )
    assert (
        runner.invoke(
            main, ["grid", "--config", str(config_path), "--axis", "max_demos=1,3"]
        ).exit_code
        == 0
    )
    result = runner.invoke(main, ["report", "--grid-dir", str(tmp_path / "g")])
    assert result.exit_code == 0, result.output
    assert "max_demos=1" in result.output
    assert "max_demos=3" in result.output


def test_repair_test_command(runner):
    result = runner.invoke(main, ["repair-test"])
    assert result.exit_code == 0, result.output
    assert "parse rate: 96/100 = 0.960" in result.output
    assert "parsed_clean: 15" in result.output

    strict = runner.invoke(main, ["repair-test", "--min-parse-rate", "0.99"])
    assert strict.exit_code != 0
    assert "below required" in strict.output


def test_repair_test_reports_divergence(runner, tmp_path):
    cases = tmp_path / "cases.jsonl"
    cases.write_text(
        json.dumps({"raw": "{}", "expected_status": "unparseable"}) + "\n",
        encoding="utf-8",
    )
    result = runner.invoke(main, ["repair-test", "--cases", str(cases)])
    assert result.exit_code != 0
    assert "diverged" in result.output
    assert "expected unparseable, got parsed_clean" in result.output
