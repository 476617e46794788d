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

"""Test-time adaptation lab: block selection and paired-view adaptation."""

import json as _json

from ._core import (
    Adapter,
    ConfigError,
    FormatError,
    Model,
    NumericError,
    ShapeError,
    corrupt,
    corruptions,
    entropy_loss,
    flip_h,
    gen_shapegrid,
    minmax_scale,
    sce_loss,
    threshold_blocks,
)
from . import _core

__all__ = [
    "Adapter",
    "ConfigError",
    "FormatError",
    "Model",
    "NumericError",
    "ShapeError",
    "ablate",
    "bench",
    "corrupt",
    "corruptions",
    "entropy_loss",
    "flip_h",
    "gen_shapegrid",
    "minmax_scale",
    "pretrain",
    "sce_loss",
    "select_blocks",
    "single_sample",
    "threshold_blocks",
]


def select_blocks(model, images, labels, gamma=0.75, seed=0, epochs=1, batch_size=64, lr=1e-3):
    """Runs block selection on a clean labelled source set; returns the report as a dict."""
    return _json.loads(
        _core._select_blocks(model, images, labels, gamma, seed, epochs, batch_size, lr))


def _overrides(overrides):
    return {str(k): str(v) for k, v in (overrides or {}).items()}


def pretrain(config, overrides=None):
    """Pretrains the configured model, saves the checkpoint, returns clean validation error."""
    return _core._pretrain(str(config), _overrides(overrides))


def bench(config, overrides=None):
    return _json.loads(_core._run("bench", str(config), _overrides(overrides)))


def ablate(config, overrides=None):
    return _json.loads(_core._run("ablate", str(config), _overrides(overrides)))


def single_sample(config, overrides=None):
    return _json.loads(_core._run("single-sample", str(config), _overrides(overrides)))
