import json
import subprocess
import sys
from pathlib import Path

import pytest

from slac_time import config as cfg
from slac_time.cli import main

SMALL = """\
seed = 3

[paths]
out = "run"

[synth]
n_records = 3
windows_per_record = 4
switch_prob = 0.5

[encoder]
d = 8
ffn_units = 16
n_blocks = 1
n_heads = 2
max_triplets = 16

[pretrain]
max_epochs = 2

[slac]
k = 3
outer_iterations = 2
epochs_per_iteration = 2
kmeans_restarts = 3

[metrics]
k_values = [2, 3]
restarts = 3
"""


def write_config(tmp_path: Path, text: str = SMALL, name: str = "run.toml") -> Path:
    path = tmp_path / name
    path.write_text(text)
    return path


def run(config: Path, *cmd: str) -> int:
    return main([cmd[0], "--config", str(config), *cmd[1:]])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth, pretrain, cluster, metrics and report once on the small config."""
    root = tmp_path_factory.mktemp("pipe")
    config = write_config(root)
    codes = [run(config, c) for c in ("synth", "pretrain", "cluster", "metrics", "report")]
    return root / "run", codes


class TestConfig:
    def test_defaults(self):
        run_cfg = cfg.from_dict({})
        assert run_cfg.encoder.d == 48 and run_cfg.slac.k == 3
        assert run_cfg.encoder_config(8).d % run_cfg.encoder_config(8).n_heads == 0

    @pytest.mark.parametrize(
        "doc,match",
        [
            ({"slac": {"kk": 3}}, "unknown key"),
            ({"surprise": 1}, "unknown top-level"),
            ({"slac": {"k": "3"}}, "expected int"),
            ({"slac": {"k": True}}, "bool"),
            ({"synth": {"missing_rate": 1.2}}, "missing_rate"),
            ({"metrics": {"k_values": [1, 3]}}, "k_values"),
            ({"metrics": {"k_values": 3}}, "list"),
            ({"encoder": {"d": 10, "n_heads": 4}}, "divisible"),
            ({"slac": 3}, "table"),
        ],
    )
    def test_rejections(self, doc, match):
        with pytest.raises(cfg.ConfigError, match=match):
            cfg.from_dict(doc)

    def test_int_accepted_for_float(self):
        assert cfg.from_dict({"report": {"tolerance": 600}}).report.tolerance == 600.0

    def test_paths_relative_to_config(self, tmp_path):
        run_cfg = cfg.load(write_config(tmp_path, '[paths]\nout = "o"\ndata = "d/x.csv"\n'))
        assert run_cfg.out_dir == tmp_path / "o"
        assert run_cfg.resolve(run_cfg.paths.data) == tmp_path / "d" / "x.csv"
        assert run_cfg.resolve(run_cfg.paths.checkpoint, "checkpoint.json") == tmp_path / "o" / "checkpoint.json"

    def test_bad_toml(self, tmp_path):
        with pytest.raises(cfg.ConfigError):
            cfg.load(write_config(tmp_path, "seed = = 1\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(cfg.ConfigError):
            cfg.load(tmp_path / "absent.toml")

    def test_desk_config_loads(self):
        run_cfg = cfg.load(Path(__file__).parents[1] / "configs" / "desk.toml")
        assert (run_cfg.encoder.d, run_cfg.slac.outer_iterations) == (16, 25)


class TestExitCodes:
    def test_unknown_key_exit_2(self, tmp_path, capsys):
        assert run(write_config(tmp_path, "[slac]\nkay = 3\n"), "synth") == 2
        assert "kay" in capsys.readouterr().err

    def test_invalid_missing_rate_exit_2(self, tmp_path):
        assert run(write_config(tmp_path, "[synth]\nmissing_rate = 1.0\n"), "synth") == 2

    def test_missing_output_dir_created(self, tmp_path):
        config = write_config(tmp_path, SMALL.replace('out = "run"', 'out = "deep/er/run"'))
        assert run(config, "synth") == 0
        assert (tmp_path / "deep" / "er" / "run" / "data.csv").exists()

    def test_corrupt_row_exit_2_names_row(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert run(config, "synth") == 0
        data = tmp_path / "run" / "data.csv"
        lines = data.read_text().splitlines()
        lines[5] = lines[5].split(",")[0] + ",not-a-time,HR,80"
        data.write_text("\n".join(lines) + "\n")
        assert run(config, "pretrain") == 2
        assert "row 6" in capsys.readouterr().err

    def test_missing_data_exit_2(self, tmp_path):
        assert run(write_config(tmp_path), "pretrain") == 2

    def test_too_few_instances_exit_3(self, tmp_path):
        config = write_config(tmp_path, SMALL.replace("n_records = 3", "n_records = 1").replace(
            "windows_per_record = 4", "windows_per_record = 1"))
        assert run(config, "synth") == 0
        assert run(config, "pretrain") == 3

    def test_missing_checkpoint_exit_3(self, tmp_path):
        config = write_config(tmp_path)
        assert run(config, "synth") == 0
        assert run(config, "cluster") == 3

    def test_k_not_below_samples_exit_3(self, tmp_path):
        config = write_config(tmp_path, SMALL.replace("n_records = 3", "n_records = 1").replace(
            "windows_per_record = 4", "windows_per_record = 3"))
        assert run(config, "synth") == 0
        assert run(config, "cluster", "--from-random") == 3

    def test_missing_representations_exit_3(self, tmp_path):
        assert run(write_config(tmp_path), "metrics") == 3

    def test_missing_assignments_exit_3(self, tmp_path):
        config = write_config(tmp_path)
        assert run(config, "synth") == 0
        assert run(config, "report") == 3

    def test_sweep_k_at_sample_count_exit_3(self, tmp_path):
        config = write_config(tmp_path, SMALL.replace("k_values = [2, 3]", "k_values = [2, 12]"))
        for c in ("synth", "cluster"):
            assert run(config, c, *(["--from-random"] if c == "cluster" else [])) == 0
        assert run(config, "metrics") == 3


class TestPipeline:
    def test_all_commands_succeed(self, pipeline):
        _, codes = pipeline
        assert codes == [0, 0, 0, 0, 0]

    def test_outputs_present(self, pipeline):
        out, _ = pipeline
        for name in ("data.csv", "ground_truth.csv", "annotations.csv", "catalog.json", "checkpoint.json",
                     "train_log.csv", "assignments.csv", "iteration_log.csv", "representations.csv",
                     "k_sweep.csv", "timeline.csv", "frequencies.csv", "transitions.csv", "profile.json"):
            assert (out / name).exists(), name
        meta = json.loads((out / "metadata.json").read_text())
        assert set(meta) == {"synth", "pretrain", "cluster", "metrics", "report"}

    def test_train_log_has_val_column(self, pipeline):
        out, _ = pipeline
        assert (out / "train_log.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss"

    def test_iteration_log_rows(self, pipeline):
        out, _ = pipeline
        lines = (out / "iteration_log.csv").read_text().splitlines()
        assert lines[0] == "iteration,inertia,label_change_fraction,silhouette,dunn,davies_bouldin,calinski_harabasz"
        assert len(lines) == 1 + 2

    def test_assignment_range(self, pipeline):
        out, _ = pipeline
        rows = (out / "assignments.csv").read_text().splitlines()
        assert rows[0] == "record_id,window_index,state"
        assert len(rows) == 1 + 12
        assert {int(r.split(",")[2]) for r in rows[1:]} <= {0, 1, 2}

    def test_k_sweep_layout(self, pipeline):
        out, _ = pipeline
        lines = (out / "k_sweep.csv").read_text().splitlines()
        assert lines[0] == "k,silhouette,dunn,davies_bouldin,calinski_harabasz"
        assert [line.split(",")[0] for line in lines[1:]] == ["2", "3"]

    def test_report_consistency(self, pipeline):
        out, _ = pipeline
        timeline = [r.split(",") for r in (out / "timeline.csv").read_text().splitlines()[1:]]
        changes = sum(
            a[0] == b[0] and a[3] != b[3] for a, b in zip(timeline, timeline[1:])
        )
        transitions = (out / "transitions.csv").read_text().splitlines()[1:]
        assert len(transitions) == changes
        freq = (out / "frequencies.csv").read_text().splitlines()
        for row in freq[1:]:
            cells = row.split(",")
            pct = [float(c.split("(")[1].rstrip("%)")) for c in cells[2:]]
            assert abs(sum(pct) - 100) <= 0.1 + 1e-9
            assert sum(int(c.split(" ")[0]) for c in cells[2:]) == int(cells[1])

    def test_cluster_k_override(self, pipeline):
        out, _ = pipeline
        config = out.parent / "run.toml"
        target = out.parent / "k2"
        target.mkdir()
        for name in ("data.csv", "catalog.json"):
            (target / name).write_bytes((out / name).read_bytes())
        assert main(["cluster", "--config", str(config), "--k", "2", "--out", str(target)]) == 3
        (target / "checkpoint.json").write_bytes((out / "checkpoint.json").read_bytes())
        assert main(["cluster", "--config", str(config), "--k", "2", "--out", str(target)]) == 0
        states = {int(r.split(",")[2]) for r in (target / "assignments.csv").read_text().splitlines()[1:]}
        assert states == {0, 1}

    def test_report_without_annotations_unlinked(self, pipeline):
        out, _ = pipeline
        target = out.parent / "noann"
        target.mkdir()
        for name in ("data.csv", "catalog.json", "assignments.csv"):
            (target / name).write_bytes((out / name).read_bytes())
        assert main(["report", "--config", str(out.parent / "run.toml"), "--out", str(target)]) == 0
        for row in (target / "transitions.csv").read_text().splitlines()[1:]:
            assert row.endswith(",,,")

    def test_separate_pretraining_corpus(self, pipeline):
        out, _ = pipeline
        text = SMALL.replace('out = "run"', 'out = "pre"\npretrain_data = "run/data.csv"\ncatalog = "run/catalog.json"')
        config = write_config(out.parent, text, "pre.toml")
        assert main(["pretrain", "--config", str(config)]) == 0
        assert not (out.parent / "pre" / "data.csv").exists()
        assert (out.parent / "pre" / "checkpoint.json").exists()

    def test_state_names_length_checked(self, pipeline):
        out, _ = pipeline
        config = write_config(out.parent, SMALL + '\n[report]\nstate_names = ["a", "b"]\n', "names.toml")
        assert main(["report", "--config", str(config), "--out", str(out)]) == 2


class TestReproducibility:
    def test_reruns_byte_identical(self, tmp_path):
        outputs = []
        for name in ("a", "b"):
            config = write_config(tmp_path, SMALL.replace('out = "run"', f'out = "{name}"'), f"{name}.toml")
            for c in ("synth", "pretrain", "cluster", "metrics", "report"):
                assert run(config, c) == 0
            outputs.append(tmp_path / name)
        a, b = outputs
        for f in sorted(p.name for p in a.iterdir() if p.name != "metadata.json"):
            assert (a / f).read_bytes() == (b / f).read_bytes(), f

    def test_seed_flag_changes_output(self, tmp_path):
        config = write_config(tmp_path)
        assert run(config, "synth") == 0
        first = (tmp_path / "run" / "data.csv").read_bytes()
        assert run(config, "synth", "--seed", "4") == 0
        assert (tmp_path / "run" / "data.csv").read_bytes() != first

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "slac_time", "--version"], capture_output=True, text=True)
        assert proc.returncode == 0 and proc.stdout.startswith("slac-time ")
