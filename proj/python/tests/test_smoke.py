# Copyright 2026 The dplot-lab Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import math
import os

import numpy as np
import pytest

import dplot


def test_shapegrid_and_flip():
    x, y = dplot.gen_shapegrid(16, classes=4, seed=1)
    assert x.shape == (16, 3, 16, 16) and x.dtype == np.float32
    assert sorted(np.bincount(y).tolist()) == [4, 4, 4, 4]
    np.testing.assert_array_equal(dplot.flip_h(x), x[..., ::-1])


def test_corruption_identity_and_range():
    x, _ = dplot.gen_shapegrid(8, seed=2)
    np.testing.assert_array_equal(dplot.corrupt(x, "blur", 0), x)
    for kind in dplot.corruptions():
        y = dplot.corrupt(x, kind, 5, seed=3)
        assert y.min() >= 0.0 and y.max() <= 1.0
    with pytest.raises(ValueError):
        dplot.corrupt(x, "fog", 1)


def test_losses():
    assert dplot.entropy_loss(np.full((2, 4), 0.25)) == pytest.approx(math.log(4), abs=1e-9)
    a = np.array([[0.9, 0.1]])
    b = np.array([[0.8, 0.2]])
    assert dplot.sce_loss(a, b) == pytest.approx(0.45329, abs=1e-4)
    assert dplot.sce_loss(a, b) == dplot.sce_loss(b, a)


def test_thresholds():
    row = [0.89, 0.92, 1.0, 0.98, 0.49, 0.47, 0.54, 0.49, 0.30, 0.20, 0.09, 0.0]
    scaled, degenerate = dplot.minmax_scale(row)
    assert not degenerate
    assert dplot.threshold_blocks(scaled, 0.75) == [1, 2, 3, 4]
    assert dplot.threshold_blocks(scaled, 0.999) == [3]


def test_model_selection_and_adapter(tmp_path):
    model = dplot.Model(classes=4, seed=7)
    assert model.num_blocks == 6
    assert model.param_count == 174868
    x, y = dplot.gen_shapegrid(32, seed=4)
    feats, logits = model.infer(x)
    assert feats.shape == (32, 64) and logits.shape == (32, 4)

    report = dplot.select_blocks(model, x, y, gamma=0.5, batch_size=16)
    scaled = [b["scaled"] for b in report["blocks"]]
    assert len(scaled) == 6
    assert all(0.0 <= v <= 1.0 for v in scaled)
    assert report["selected"] == dplot.threshold_blocks(scaled, 0.5)

    adapter = dplot.Adapter(model, "dplot", selected_blocks=[1, 2], seed=0)
    out = adapter.step(dplot.corrupt(x, "gaussian_noise", 5, seed=1))
    assert out["predictions"].shape == (32,)
    assert np.isfinite(out["logits"]).all()
    assert adapter.steps == 1

    model.save(str(tmp_path / "ckpt"))
    again = dplot.Model.load(str(tmp_path / "ckpt"))
    np.testing.assert_array_equal(again.infer(x)[1], logits)

    with pytest.raises(ValueError):
        dplot.Adapter(model, "dplot", selected_blocks=[])


def test_config_driven_runs(tmp_path, monkeypatch):
    config = os.environ.get("DPLOT_SMOKE_CONFIG")
    if not config:
        pytest.skip("smoke configuration not provided")
    monkeypatch.chdir(tmp_path)
    err = dplot.pretrain(config)
    assert 0.0 <= err <= 1.0
    report = dplot.bench(config, {"run.methods": "source,bn1"})
    assert set(report["median_error"]) == {"source", "bn1"}
    with pytest.raises(ValueError):
        dplot.bench(config, {"adapt.alphx": 1})
