"""Training loop behavior: progress, divergence recovery, checkpoints, resume."""

import numpy as np
import pytest
import torch

import causalmesh.training as training
from causalmesh.cohort import GroundTruthScm, subject_rng
from causalmesh.cvae import ElboDivergenceError, MeshCvaeConfig
from causalmesh.scm import make_model
from causalmesh.training import (
    TrainingConfig,
    TrainingDivergedError,
    derive_template,
    evaluate_elbo,
    fit_whitening,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    train_model,
)


def make_data(n, seed=0):
    scm = GroundTruthScm(subdivisions=1)
    rows = {"a": [], "s": [], "b": [], "v": [], "x": []}
    for i in range(n):
        record, mesh = scm.generate(scm.sample_noise(subject_rng(seed, i)))
        for key in ("a", "s", "b", "v"):
            rows[key].append(record[key])
        rows["x"].append(mesh.vertices)
    return {
        "a": np.array(rows["a"]),
        "s": np.array(rows["s"], dtype=np.float64),
        "b": np.array(rows["b"]),
        "v": np.array(rows["v"]),
        "x": np.stack(rows["x"]),
        "faces": scm.template().topology.faces,
    }


def fresh_model(data, seed=5):
    config = MeshCvaeConfig(latent_dim=2, cheb_order=3, encoder_channels=(4, 8))
    return make_model(derive_template(data), config, fit_whitening(data), seed=seed)


@pytest.fixture(scope="module")
def data():
    return make_data(24)


class TestConfigAndSetup:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainingConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainingConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainingConfig(lr_mesh=0.0)

    def test_derive_template(self, data):
        template = derive_template(data)
        assert np.array_equal(template.vertices, data["x"].mean(axis=0))
        assert np.array_equal(template.topology.faces, data["faces"])

    def test_fit_whitening_centers_log_intermediates(self, data):
        norms = fit_whitening(data)
        assert set(norms) == {"a", "b", "v"}
        for key in norms:
            logs = np.log(data[key])
            white = (logs - logs.mean()) / logs.std()
            got = (logs - float(norms[key].loc)) / float(norms[key].scale)
            assert np.allclose(got, white, atol=1e-6)

    def test_make_optimizer_groups(self, data):
        model = fresh_model(data)
        opt = make_optimizer(model, TrainingConfig())
        assert len(opt.param_groups) == 2
        assert opt.param_groups[0]["lr"] == 1e-3
        assert opt.param_groups[1]["lr"] == 1e-4
        n_flow = sum(
            len(list(m.parameters())) for m in (model.mech_a, model.mech_b, model.mech_v)
        )
        assert len(opt.param_groups[0]["params"]) == n_flow
        assert len(opt.param_groups[1]["params"]) == len(list(model.cvae.parameters()))


class TestTrainModel:
    def test_elbo_improves_and_log_is_complete(self, data):
        model = fresh_model(data)
        before = evaluate_elbo(model, data, seed=0)
        log = train_model(model, data, TrainingConfig(epochs=4, batch_size=8, seed=0))
        after = evaluate_elbo(model, data, seed=0)
        assert after > before
        assert [e.epoch for e in log] == [1, 2, 3, 4]
        assert log[-1].elbo > log[0].elbo
        for e in log:
            for value in (e.elbo, e.alpha, e.recon, e.kl, e.recon_ved):
                assert np.isfinite(value)
            assert e.val_elbo is None
        assert log[-1].recon_ved >= 0.0

    def test_sex_theta_fitted_by_mle(self, data):
        model = fresh_model(data)
        train_model(model, data, TrainingConfig(epochs=1, batch_size=8, seed=0))
        assert abs(float(model.mech_s.theta) - data["s"].mean()) < 1e-12

    def test_val_elbo_recorded(self, data):
        model = fresh_model(data)
        log = train_model(
            model, data, TrainingConfig(epochs=2, batch_size=8, seed=0), val_data=data
        )
        for e in log:
            assert e.val_elbo is not None and np.isfinite(e.val_elbo)

    def test_training_is_deterministic(self, data):
        logs = []
        for _ in range(2):
            model = fresh_model(data, seed=5)
            logs.append(train_model(model, data, TrainingConfig(epochs=3, batch_size=8, seed=1)))
        assert [e.elbo for e in logs[0]] == [e.elbo for e in logs[1]]
        assert [e.recon_ved for e in logs[0]] == [e.recon_ved for e in logs[1]]

    def test_divergence_restores_last_completed_epoch(self, data, monkeypatch):
        config = TrainingConfig(epochs=5, batch_size=8, seed=2)
        reference = fresh_model(data, seed=6)
        train_model(reference, data, TrainingConfig(epochs=2, batch_size=8, seed=2))

        real = training.elbo_terms
        calls = {"n": 0}
        batches_per_epoch = 24 // 8

        def explode_in_epoch_3(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] > 2 * batches_per_epoch:
                raise ElboDivergenceError("kl")
            return real(*args, **kwargs)

        monkeypatch.setattr(training, "elbo_terms", explode_in_epoch_3)
        model = fresh_model(data, seed=6)
        with pytest.raises(TrainingDivergedError) as info:
            train_model(model, data, config)
        assert info.value.epoch == 3
        assert info.value.term == "kl"
        got = model.state_dict()
        want = reference.state_dict()
        assert set(got) == set(want)
        for key in want:
            assert torch.equal(got[key], want[key]), key


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    model = fresh_model(data, seed=7)
    config = TrainingConfig(epochs=2, batch_size=8, seed=3)
    optimizer = make_optimizer(model, config)
    log = train_model(model, data, config, optimizer=optimizer)
    path = tmp_path_factory.mktemp("ckpt") / "model.pt"
    save_checkpoint(path, model, log, optimizer=optimizer)
    return model, log, path


class TestCheckpointing:
    def test_round_trip_reproduces_elbo(self, data, trained):
        model, log, path = trained
        loaded, payload = load_checkpoint(path)
        assert evaluate_elbo(loaded, data, seed=9) == pytest.approx(
            evaluate_elbo(model, data, seed=9), abs=1e-9
        )
        assert [e["epoch"] for e in payload["training_log"]] == [e.epoch for e in log]
        assert payload["training_log"][-1]["elbo"] == log[-1].elbo
        assert payload["optimizer_state"] is not None

    def test_topology_hash_checked(self, data, trained):
        model, _, path = trained
        load_checkpoint(path, expected_topology_hash=model.template.topology.hash())
        with pytest.raises(ValueError):
            load_checkpoint(path, expected_topology_hash="not-a-real-hash")

    def test_format_version_checked(self, trained, tmp_path):
        _, _, path = trained
        payload = torch.load(path, map_location="cpu", weights_only=False)
        payload["format_version"] = 999
        bad = tmp_path / "bad.pt"
        torch.save(payload, bad)
        with pytest.raises(ValueError):
            load_checkpoint(bad)

    def test_resume_continues_numbering(self, data, trained):
        model, _, path = trained
        loaded, payload = load_checkpoint(path)
        config = TrainingConfig(epochs=2, batch_size=8, seed=3)
        optimizer = make_optimizer(loaded, config)
        optimizer.load_state_dict(payload["optimizer_state"])
        more = train_model(loaded, data, config, start_epoch=2, optimizer=optimizer)
        assert [e.epoch for e in more] == [3, 4]
