"""Conformance against the consumer: the primary toolkit's own oracle client
drives a live sidecar process, and the sidecar's sweep CSV feeds the primary's
prompt-ranking command. Both packages talk only through the wire format and
the CSV file — no imports across the boundary in either deliverable; the
primary package here plays the role of the reference protocol peer."""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

turbvid_oracle = pytest.importorskip("turbvid.oracle")

SIDECAR = [sys.executable, "-m", "clip_oracle", "--encoder", "seeded"]


@pytest.fixture(scope="module")
def client():
    handle = turbvid_oracle.spawn_oracle(SIDECAR, timeout=120)
    yield handle
    handle.shutdown()


class TestPrimaryClientAgainstSidecar:
    def test_handshake_capabilities(self, client):
        assert client.capabilities == {"semantic", "perceptual"}
        assert client.info["version"] == "1"
        assert "preprocess" in client.info

    def test_semantic_round_trip(self, client):
        img = np.random.default_rng(0).uniform(0, 1, (16, 16, 3)).astype(np.float32)
        loss, grad = client.semantic_eval(img, "a clean and sharp natural image",
                                          "a degraded image with noise and turbulence distortion")
        assert -2.0 <= loss <= 2.0
        assert grad.shape == img.shape
        assert np.all(np.isfinite(grad))

    def test_perceptual_round_trip(self, client):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        ref = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        loss, grad = client.perceptual_eval(img, ref)
        assert loss > 0.0
        assert grad.shape == img.shape
        assert np.all(np.isfinite(grad))

    def test_attached_to_training_loop(self, client):
        from turbvid.losses import LossWeights
        from turbvid.model import ModelConfig
        from turbvid.optim import train
        from turbvid.oracle import OracleSet

        rng = np.random.default_rng(2)
        video = rng.uniform(0.2, 0.8, (2, 16, 16, 3)).astype(np.float32)
        oracles = OracleSet.from_client(client)
        cfg_weights = LossWeights(mse=1.0, ssim=0, lpips=0.1, temp=0, text=0.01)
        from turbvid.optim import TrainConfig
        model, log = train(video, video,
                           model_config=ModelConfig(t=2, h=16, w=16, q=1, qc=4, k=1,
                                                    hidden_width=16),
                           train_config=TrainConfig(iterations=4, log_every=1,
                                                    frames_per_step=1,
                                                    weights=cfg_weights),
                           oracles=oracles)
        assert len(log.records) == 4
        assert all(r.breakdown.text != 0.0 for r in log.records)
        assert all(r.breakdown.lpips != 0.0 for r in log.records)


class TestSweepFeedsPromptRanking:
    def test_sweep_csv_through_primary_cli(self, tmp_path):
        sweep_csv = tmp_path / "sweep.csv"
        subprocess.run(SIDECAR + ["sweep", "--out", str(sweep_csv), "--steps", "8"],
                       check=True, capture_output=True)
        with open(sweep_csv) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 8
        assert set(rows[0]) == {"iter", "lpips"} | {f"text{i}" for i in range(1, 7)}

        out = subprocess.run([sys.executable, "-m", "turbvid.cli", "prompts",
                              "--in", str(sweep_csv), "--json"],
                             capture_output=True, text=True, check=True)
        report = json.loads(out.stdout)
        assert len(report["ranking"]) == 6
        assert sorted(r["rank"] for r in report["ranking"]) == [1, 2, 3, 4, 5, 6]
        assert report["best"].startswith("text")
