"""Command-line interface: pipeline commands, determinism, exit codes."""

import csv

import numpy as np
import pytest

from causalmesh import cli
from causalmesh.cohort import CohortManifest

CONFIG = """\
seed: 5
out_dir: {root}/run
template:
  subdivisions: 1
data:
  dir: {root}/cohort
  n_train: 12
  n_val: 2
  n_test: 4
model:
  latent_dim: 2
  cheb_order: 3
  encoder_channels: [4, 8]
  spline_bins: 6
training:
  epochs: 2
  batch_size: 8
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.yaml"
    config.write_text(CONFIG.format(root=root))
    assert cli.main(["generate-data", "--config", str(config)]) == 0
    assert cli.main(["train", "--config", str(config)]) == 0
    return {
        "root": root,
        "config": config,
        "data": root / "cohort",
        "checkpoint": root / "run" / "checkpoint.pt",
        "subject": "s00014",  # first test-split id: 12 train + 2 val before it
    }


def read_csv(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


class TestGenerateData:
    def test_outputs_and_determinism(self, pipeline, tmp_path, capsys):
        manifest = CohortManifest.read(pipeline["data"] / "manifest.csv")
        assert [len(manifest.split(s)) for s in ("train", "val", "test")] == [12, 2, 4]
        assert (pipeline["data"] / "noise.npz").is_file()

        config = tmp_path / "again.yaml"
        config.write_text(CONFIG.format(root=tmp_path))
        assert cli.main(["generate-data", "--config", str(config)]) == 0
        out = capsys.readouterr().out.strip()
        assert out.endswith("manifest.csv")
        first = (pipeline["data"] / "manifest.csv").read_bytes()
        assert (tmp_path / "cohort" / "manifest.csv").read_bytes() == first

    def test_zero_subjects_writes_header_only(self, pipeline, tmp_path):
        config = tmp_path / "empty.yaml"
        config.write_text(CONFIG.format(root=tmp_path))
        rc = cli.main(
            ["generate-data", "--config", str(config),
             "--set", "data.n_train=0", "--set", "data.n_val=0", "--set", "data.n_test=0"]
        )
        assert rc == 0
        rows = read_csv(tmp_path / "cohort" / "manifest.csv")
        assert rows == [["id", "age", "sex", "brain_volume", "structure_volume",
                         "mesh_path", "split"]]


class TestTrain:
    def test_checkpoint_and_log(self, pipeline):
        assert pipeline["checkpoint"].is_file()
        rows = read_csv(pipeline["root"] / "run" / "training_log.csv")
        assert rows[0] == ["epoch", "elbo", "alpha", "recon", "kl", "recon_ved", "val_elbo"]
        assert [r[0] for r in rows[1:]] == ["1", "2"]
        assert all(r[6] != "" for r in rows[1:])  # val split present

    def test_resume_extends_epoch_numbering(self, pipeline):
        out2 = pipeline["root"] / "run2"
        rc = cli.main(
            ["train", "--config", str(pipeline["config"]),
             "--resume", str(pipeline["checkpoint"]),
             "--set", f"out_dir={out2}", "--set", "training.epochs=4"]
        )
        assert rc == 0
        rows = read_csv(out2 / "training_log.csv")
        assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]

    def test_resume_with_target_already_met_retrains_nothing(self, pipeline):
        out3 = pipeline["root"] / "run3"
        rc = cli.main(
            ["train", "--config", str(pipeline["config"]),
             "--resume", str(pipeline["checkpoint"]), "--set", f"out_dir={out3}"]
        )
        assert rc == 0
        original = read_csv(pipeline["root"] / "run" / "training_log.csv")
        assert read_csv(out3 / "training_log.csv") == original


class TestInference:
    def test_reconstruct(self, pipeline, capsys):
        out = pipeline["root"] / "recon"
        rc = cli.main(
            ["reconstruct", "--checkpoint", str(pipeline["checkpoint"]),
             "--data", str(pipeline["data"]), "--subject", pipeline["subject"],
             "--out", str(out)]
        )
        assert rc == 0
        stdout = capsys.readouterr().out
        assert f"recon_{pipeline['subject']}.ply" in stdout
        ved_mm = float(stdout.rsplit("ved_mm=", 1)[1])
        assert ved_mm < 1e-4  # abducted vertex noise makes reconstruction exact
        assert (out / f"recon_{pipeline['subject']}.ply").is_file()

    def test_intervene_population(self, pipeline):
        out = pipeline["root"] / "iv"
        rc = cli.main(
            ["intervene", "--checkpoint", str(pipeline["checkpoint"]),
             "--do", "a=80", "--n", "3", "--seed", "2", "--out", str(out)]
        )
        assert rc == 0
        rows = read_csv(out / "covariates.csv")
        assert rows[0] == ["id", "a", "s", "b", "v"]
        assert len(rows) == 4
        assert all(float(r[1]) == 80.0 for r in rows[1:])
        assert all((out / f"sample_{i:04d}.ply").is_file() for i in range(3))

    def test_counterfact_default_is_null(self, pipeline):
        out = pipeline["root"] / "cf0"
        rc = cli.main(
            ["counterfact", "--checkpoint", str(pipeline["checkpoint"]),
             "--data", str(pipeline["data"]), "--subject", pipeline["subject"],
             "--out", str(out)]
        )
        assert rc == 0
        rows = read_csv(out / f"trajectory_{pipeline['subject']}.csv")
        assert rows[1][0] == "null"
        assert float(rows[1][5]) < 1e-4

    def test_counterfact_multiple_dos(self, pipeline):
        out = pipeline["root"] / "cf1"
        rc = cli.main(
            ["counterfact", "--checkpoint", str(pipeline["checkpoint"]),
             "--data", str(pipeline["data"]), "--subject", pipeline["subject"],
             "--do", "a=70", "--do", "s=1 v=20", "--out", str(out)]
        )
        assert rc == 0
        rows = read_csv(out / f"trajectory_{pipeline['subject']}.csv")
        assert [r[0] for r in rows[1:]] == ["do a=70", "do s=1 v=20"]
        assert float(rows[1][1]) == 70.0
        assert float(rows[2][4]) == 20.0
        assert (out / f"cf_{pipeline['subject']}_00.ply").is_file()
        assert (out / f"cf_{pipeline['subject']}_01.ply").is_file()

    def test_export_mesh(self, pipeline):
        ply = pipeline["root"] / "export" / "template.ply"
        obj = pipeline["root"] / "export" / "subject.obj"
        assert cli.main(
            ["export-mesh", "--checkpoint", str(pipeline["checkpoint"]), "--out", str(ply)]
        ) == 0
        assert cli.main(
            ["export-mesh", "--checkpoint", str(pipeline["checkpoint"]),
             "--subject", pipeline["subject"], "--data", str(pipeline["data"]),
             "--out", str(obj)]
        ) == 0
        assert ply.is_file() and obj.is_file()
        assert obj.read_text().startswith("v ")


class TestEvaluate:
    def evaluate(self, pipeline, out, suite):
        return cli.main(
            ["evaluate", "--checkpoint", str(pipeline["checkpoint"]),
             "--data", str(pipeline["data"]), "--suite", suite,
             "--n-per-setting", "2", "--n-projection", "6", "--max-subjects", "2",
             "--out", str(out)]
        )

    def test_single_suite_regenerates_bit_identically(self, pipeline):
        out1 = pipeline["root"] / "rep1"
        out2 = pipeline["root"] / "rep2"
        assert self.evaluate(pipeline, out1, "reconstruction") == 0
        assert self.evaluate(pipeline, out2, "reconstruction") == 0
        for name in ("reconstruction.json", "reconstruction_modes.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_all_suites_write_reports(self, pipeline):
        out = pipeline["root"] / "repall"
        assert self.evaluate(pipeline, out, "all") == 0
        for name in (
            "reconstruction.json", "reconstruction_modes.csv",
            "compactness.json", "specificity.json",
            "specificity_interventions.csv", "interp_mean.ply",
            "trait_preservation.json", "trait_preservation_buckets.csv",
            "trajectory_do_a.csv", "trajectory_do_v.csv", "shape_projection.json",
        ):
            assert (out / name).is_file(), name


class TestErrors:
    def test_missing_checkpoint(self, pipeline, capsys):
        rc = cli.main(
            ["reconstruct", "--checkpoint", "/nonexistent.pt",
             "--data", str(pipeline["data"]), "--subject", "s00000"]
        )
        assert rc == 1
        assert capsys.readouterr().err.startswith("error[user]: ")

    def test_unknown_subject(self, pipeline, capsys):
        rc = cli.main(
            ["reconstruct", "--checkpoint", str(pipeline["checkpoint"]),
             "--data", str(pipeline["data"]), "--subject", "s99999"]
        )
        assert rc == 1
        assert "s99999" in capsys.readouterr().err

    def test_missing_manifest(self, pipeline, tmp_path, capsys):
        rc = cli.main(
            ["reconstruct", "--checkpoint", str(pipeline["checkpoint"]),
             "--data", str(tmp_path), "--subject", "s00000"]
        )
        assert rc == 1
        assert "manifest" in capsys.readouterr().err

    def test_bad_intervention_token(self, pipeline, capsys):
        rc = cli.main(
            ["intervene", "--checkpoint", str(pipeline["checkpoint"]), "--do", "a=-4"]
        )
        assert rc == 1
        assert capsys.readouterr().err.startswith("error[user]: ")

    def test_unknown_config_key(self, pipeline, capsys):
        rc = cli.main(
            ["train", "--config", str(pipeline["config"]), "--set", "training.lr=0.1"]
        )
        assert rc == 1
        assert "training.lr" in capsys.readouterr().err

    def test_missing_required_argument(self, capsys):
        assert cli.main(["reconstruct", "--checkpoint", "x.pt"]) == 1
        assert capsys.readouterr().err.startswith("error[user]: ")

    def test_unknown_command(self, capsys):
        assert cli.main(["frobnicate"]) == 1
        capsys.readouterr()

    def test_subject_without_data(self, pipeline, capsys):
        rc = cli.main(
            ["export-mesh", "--checkpoint", str(pipeline["checkpoint"]),
             "--subject", "s00000", "--out", "/tmp/x.ply"]
        )
        assert rc == 1
        assert "--subject requires --data" in capsys.readouterr().err

    def test_corrupt_checkpoint_is_internal_error(self, pipeline, tmp_path, capsys):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"not a checkpoint")
        rc = cli.main(
            ["reconstruct", "--checkpoint", str(bad),
             "--data", str(pipeline["data"]), "--subject", pipeline["subject"]]
        )
        assert rc == 2
        assert capsys.readouterr().err.startswith("error[internal]: ")
