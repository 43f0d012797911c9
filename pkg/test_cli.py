import json
from dataclasses import replace

import pandas as pd
import pytest

from app import EXIT_CONFIG, EXIT_OK, build_parser, main
from config.run_config import apply, config_hash, describe, load_run_config, parse_override
from config.settings import pager_config
from services.datasets import SyntheticSpec, gen_synthetic, save_corpus
from utils.errors import ConfigError

FAST = ["--set", "harness.bootstrap_samples=200"]


@pytest.fixture
def corpus_file(tmp_path):
    corpus = gen_synthetic(replace(SyntheticSpec.controlled(seed=5), num_conversations=2))
    return str(save_corpus(corpus, str(tmp_path / "small.jsonl")))


def only_run_dir(root, command):
    [path] = list(root.glob(f"{command}-*"))
    return path


class TestRunConfig:
    def test_layering(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("seed: 7\npager:\n  budget_k: 3\n  evictions: [fifo]\n", encoding="utf-8")
        config = load_run_config(str(path), ["pager.budget_k=4"], {"seed": 9, "pager.evictions": None})
        assert config.seed == 9
        assert config.pager.budget_k == 4
        assert config.pager.evictions == ["fifo"]

    @pytest.mark.parametrize("override", ["pager.colour=red", "pager.budget_k=0", "responder=remote",
                                          "pager.evictions=[random]", "bookmarks.format=verbose"])
    def test_rejected(self, override):
        with pytest.raises(ConfigError):
            load_run_config(None, [override])

    def test_override_values_are_yaml(self):
        assert parse_override("pager.boundaries=[fixed_5, topic_shift]") == (
            ["pager", "boundaries"], ["fixed_5", "topic_shift"])
        with pytest.raises(ConfigError):
            parse_override("budget_k")

    def test_apply_and_hash(self):
        config = load_run_config(None, ["pager.budget_k=2"])
        apply(config)
        assert pager_config.budget_k == 2
        assert config_hash(config) == config_hash(load_run_config(None, ["pager.budget_k=2"]))
        assert config_hash(config) != config_hash(load_run_config(None, ["pager.budget_k=3"]))

    def test_describe_lists_nested_keys(self):
        lines = describe()
        assert any(line.strip().startswith("pager.budget_k (5)") for line in lines)


class TestCommands:
    def test_gen(self, tmp_path):
        output = tmp_path / "controlled.jsonl"
        assert main(["gen", "--preset", "controlled", "--seed", "3", "--output", str(output),
                     "--out", str(tmp_path)]) == EXIT_OK
        assert len(output.read_text(encoding="utf-8").splitlines()) == 10

    def test_gen_invalid_range(self, tmp_path):
        code = main(["gen", "--out", str(tmp_path), "--set", "datasets.turns_min=50", "--set", "datasets.turns_max=40"])
        assert code == EXIT_CONFIG

    def test_unknown_key(self, tmp_path):
        assert main(["grid", "--out", str(tmp_path), "--set", "pager.colour=red"]) == EXIT_CONFIG

    def test_grid_then_report(self, tmp_path, corpus_file):
        code = main(["grid", "--corpus", corpus_file, "--boundaries", "fixed_10", "--evictions", "fifo,belady",
                     "--budget-k", "2", "--out", str(tmp_path)] + FAST)
        assert code == EXIT_OK
        out = only_run_dir(tmp_path, "grid")
        for name in ("results.jsonl", "grid.csv", "heatmap.csv", "decomposition.csv", "manifest.json"):
            assert (out / name).exists()
        grid = pd.read_csv(out / "grid.csv")
        assert sorted(grid["eviction"]) == ["belady", "fifo"]
        assert (grid["schema_version"] == 1).all()
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["command"] == "grid" and len(manifest["stopwords_sha256"]) == 64

        results = str(out / "results.jsonl")
        assert main(["report", results, results, "--by", "category", "--out", str(tmp_path)] + FAST) == EXIT_OK
        report_dir = only_run_dir(tmp_path, "report")
        paired = pd.read_csv(report_dir / "paired.csv")
        assert paired["delta"].iloc[0] == 0.0 and paired["p"].iloc[0] == 1.0
        assert (report_dir / "stats.csv").exists()

    def test_simulate_single_cell(self, tmp_path, corpus_file):
        code = main(["simulate", "--corpus", corpus_file, "--boundary", "topic_shift", "--eviction", "lfu",
                     "--out", str(tmp_path)] + FAST)
        assert code == EXIT_OK
        grid = pd.read_csv(only_run_dir(tmp_path, "simulate") / "grid.csv")
        assert list(zip(grid["boundary"], grid["eviction"])) == [("topic_shift", "lfu")]

    def test_ablate_formats(self, tmp_path, corpus_file):
        code = main(["ablate", "formats", "--corpus", corpus_file, "--budget-k", "1", "--out", str(tmp_path)] + FAST)
        assert code == EXIT_OK
        table = pd.read_csv(only_run_dir(tmp_path, "ablate-formats") / "formats.csv")
        assert list(table["variant"]) == ["id_only", "minimal", "medium", "structured"]

    def test_locomo_dry_run(self, tmp_path, locomo_file):
        code = main(["locomo", "--dry-run", "--locomo", locomo_file, "--methods", "all", "--out", str(tmp_path)] + FAST)
        assert code == EXIT_OK
        out = only_run_dir(tmp_path, "locomo")
        methods = pd.read_csv(out / "methods.csv")
        assert len(methods) == 6
        assert (out / "judges.csv").exists()

    def test_check_passes_on_default_corpora(self, tmp_path):
        assert main(["check", "--out", str(tmp_path)] + FAST) == EXIT_OK
        checks = pd.read_csv(only_run_dir(tmp_path, "check") / "checks.csv")
        assert list(checks["check"]) == [
            "belady_dominance", "granularity", "topology_inversion", "zero_false_positives",
            "decomposition_identity", "format_direction", "bookmark_strategies", "token_envelope",
        ]
        assert checks["passed"].all(), checks.loc[~checks["passed"], ["check", "detail"]].to_dict("records")

    def test_report_takes_at_most_two_tables(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["report", "a.jsonl", "b.jsonl", "c.jsonl", "--out", str(tmp_path)])

    def test_parser_requires_command(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])
