"""Shared fixtures: deterministic trained bundles cached across test runs.

The desk-scale bundle (162-vertex template, 2000 training subjects) is built
once through the CLI and cached under the directory named by the
CAUSALMESH_CACHE environment variable, keyed by a hash of its run config, so
repeated test sessions skip the training cost.
"""

import hashlib
import os
import time
from pathlib import Path
from types import SimpleNamespace

import pytest
from hypothesis import HealthCheck, settings

REPO_ROOT = Path(__file__).resolve().parent.parent
os.environ.setdefault("CAUSALMESH_CACHE", str(REPO_ROOT / ".cache"))

settings.register_profile(
    "ci",
    deadline=None,
    derandomize=True,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")

from causalmesh import cli  # noqa: E402
from causalmesh.cohort import CohortManifest, load_split_arrays  # noqa: E402
from causalmesh.config import cache_dir  # noqa: E402
from causalmesh.training import load_checkpoint  # noqa: E402

DESK_CONFIG = """\
seed: 7
out_dir: {root}/run
template:
  subdivisions: 2
data:
  dir: {root}/cohort
  n_train: 2000
  n_val: 250
  n_test: 500
model:
  latent_dim: 8
  cheb_order: 6
  encoder_channels: [16, 32, 64]
  spline_bins: 8
training:
  epochs: 120
  batch_size: 64
"""

MICRO_CONFIG = """\
seed: 3
out_dir: {root}/run
template:
  subdivisions: 1
data:
  dir: {root}/cohort
  n_train: 24
  n_val: 4
  n_test: 8
model:
  latent_dim: 4
  cheb_order: 3
  encoder_channels: [8, 16]
  spline_bins: 6
training:
  epochs: 3
  batch_size: 8
"""


def _build_bundle(name: str, config_template: str) -> SimpleNamespace:
    key = hashlib.sha256(config_template.encode()).hexdigest()[:12]
    root = cache_dir() / f"{name}-{key}"
    config_path = root / "run.yaml"
    checkpoint = root / "run" / "checkpoint.pt"
    if not checkpoint.is_file():
        root.mkdir(parents=True, exist_ok=True)
        config_path.write_text(config_template.format(root=root))
        assert cli.main(["generate-data", "--config", str(config_path)]) == 0
        t0 = time.perf_counter()
        assert cli.main(["train", "--config", str(config_path)]) == 0
        (root / "train_seconds.txt").write_text(f"{time.perf_counter() - t0:.1f}\n")
    model, payload = load_checkpoint(checkpoint)
    manifest = CohortManifest.read(root / "cohort" / "manifest.csv")
    timing = root / "train_seconds.txt"
    return SimpleNamespace(
        root=root,
        config_path=config_path,
        checkpoint=checkpoint,
        data_dir=root / "cohort",
        model=model,
        payload=payload,
        manifest=manifest,
        train=load_split_arrays(manifest, "train"),
        test=load_split_arrays(manifest, "test"),
        train_seconds=float(timing.read_text()) if timing.is_file() else None,
    )


@pytest.fixture(scope="session")
def desk_bundle() -> SimpleNamespace:
    """Trained desk-scale model: 162 vertices, latent dim 8, 2000 train subjects."""
    return _build_bundle("desk", DESK_CONFIG)


@pytest.fixture(scope="session")
def micro_bundle() -> SimpleNamespace:
    """Tiny trained model (42 vertices, 24 subjects, 3 epochs) for fast plumbing tests."""
    return _build_bundle("micro", MICRO_CONFIG)
