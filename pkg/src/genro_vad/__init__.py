# Copyright (c) 2025 Softwell Srl, Milano, Italy
# SPDX-License-Identifier: Apache-2.0
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

"""genro-vad - Object-centric video anomaly detection for ego-view driving clips.

The package renders synthetic driving clips with sudden braking events,
estimates their optical flow, and scores every tracked object with two
networks: a memory-augmented autoencoder that reconstructs the object's
flow and a conditional VAE that predicts its next appearance from the
past crops and the reconstructed flow. Poor reconstructions and poor
predictions both raise the anomaly score.

Main Components:
    - RunConfig: Declarative, schema-validated run configuration
    - Pipeline: The stages from data generation to the report bundle
    - RunStorage: Run directory access through fsspec
    - Exceptions: VadError hierarchy with CLI exit codes

Quick Start:
    >>> from genro_vad import Pipeline, RunConfig, RunStorage
    >>>
    >>> storage = RunStorage('/tmp/runs/demo')
    >>> pipeline = Pipeline(storage, RunConfig())
    >>> pipeline.run_all()
    >>> storage.read_json('eval/metrics.json')['rows'][0]['auroc']

Command line::

    genro-vad run-all --run-dir runs/demo
"""

__version__ = "0.1.0"

from .config import ConditionConfig, RunConfig, load_config
from .exceptions import (
    CollisionError,
    ContainerFormatError,
    DimensionError,
    GraphError,
    MissingPrerequisiteError,
    NumericDivergenceError,
    UndefinedMetricError,
    UntrainedModelError,
    VadConfigError,
    VadError,
)
from .pipeline import STAGES, Pipeline
from .scoring import ScoreWeights, TrainStats
from .storage import RunStorage

__all__ = [
    # Version
    "__version__",
    # Main classes
    "Pipeline",
    "RunConfig",
    "ConditionConfig",
    "RunStorage",
    "ScoreWeights",
    "TrainStats",
    "STAGES",
    "load_config",
    # Exceptions
    "VadError",
    "VadConfigError",
    "DimensionError",
    "MissingPrerequisiteError",
    "NumericDivergenceError",
    "GraphError",
    "CollisionError",
    "UndefinedMetricError",
    "UntrainedModelError",
    "ContainerFormatError",
]
