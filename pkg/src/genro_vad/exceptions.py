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

"""Exception classes for genro-vad.

All exceptions inherit from the VadError base class for easy catching.
Exceptions also inherit from standard Python exceptions where appropriate
so that generic handlers (``except ValueError``) keep working.

Each class carries an ``exit_code`` used by the command line interface.
"""


class VadError(Exception):
    """Base exception for all genro-vad errors.

    Examples:
        >>> try:
        ...     Pipeline(storage, config).run('score')
        ... except VadError as e:
        ...     print(f"Pipeline error: {e}")
    """

    exit_code = 1


class VadConfigError(VadError, ValueError):
    """Raised when a configuration or hyperparameter is invalid.

    Common causes:
        - Unknown keys or wrong types in a run configuration file
        - Malformed YAML/JSON configuration file
        - Convolution geometry whose output size is not an exact division
        - Non-positive learning rate
        - Calibration statistics produced under a different model hash
    """

    exit_code = 2


class DimensionError(VadError, ValueError):
    """Raised when tensor shapes are incompatible or an axis is out of range."""


class MissingPrerequisiteError(VadError, FileNotFoundError):
    """Raised when a pipeline stage needs an artifact that does not exist yet.

    The message always names the missing artifact and the stage producing it.

    Examples:
        >>> try:
        ...     Pipeline(storage, config).run('train-cvae')
        ... except MissingPrerequisiteError as e:
        ...     print(e)  # "... manifests/train-flowae.json (run 'train-flowae' first)"
    """

    exit_code = 3


class NumericDivergenceError(VadError, ArithmeticError):
    """Raised when NaN or Inf shows up in a tensor or a training loss."""

    exit_code = 4


class GraphError(VadError, RuntimeError):
    """Raised when backward is requested on a non-scalar or detached graph."""


class CollisionError(VadError, ValueError):
    """Raised when a scenario's lead-vehicle gap reaches zero."""

    exit_code = 2


class UndefinedMetricError(VadError, ValueError):
    """Raised when a metric is undefined for the given input.

    Common causes:
        - AUROC on labels of a single class
        - FPR at TPR without positive samples
        - Pixel evaluation with an empty overlap region
    """


class UntrainedModelError(VadError, RuntimeError):
    """Raised when a model is used for scoring before being trained or loaded."""

    exit_code = 3


class ContainerFormatError(VadError, ValueError):
    """Raised when a VADT tensor container is malformed."""
