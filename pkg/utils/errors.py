# Copyright 2024 The sector-ensemble authors
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

__all__ = [
    "EnsembleError",
    "MissingColumn", "MalformedRow", "EmptyFile", "NonPositivePrice",
    "DegenerateSplit", "InsufficientClassData", "InvalidDistribution",
    "SingleClassTraining", "DimensionMismatch", "NonConvergence",
    "NumericalFailure", "KTooLarge", "TooFewRecords", "EmptyTraining",
    "LengthMismatch", "InvalidK", "DegenerateFold", "MissingQuarter",
    "ConfigError", "ModelFormatError", "EmptyPredictions",
]


class EnsembleError(Exception):
    pass


# Input data

class MissingColumn(EnsembleError, ValueError):
    pass


class MalformedRow(EnsembleError, ValueError):
    pass


class EmptyFile(EnsembleError, ValueError):
    pass


class NonPositivePrice(EnsembleError, ValueError):
    pass


class DegenerateSplit(EnsembleError, ValueError):
    pass


class MissingQuarter(EnsembleError, LookupError):
    pass


# Training

class InsufficientClassData(EnsembleError, ValueError):
    pass


class SingleClassTraining(EnsembleError, ValueError):
    pass


class EmptyTraining(EnsembleError, ValueError):
    pass


class TooFewRecords(EnsembleError, ValueError):
    pass


class NonConvergence(EnsembleError):
    pass


class NumericalFailure(EnsembleError):
    """ Raised when a model cannot be fitted in a numerically sound way

    The pipeline treats this as a reason to skip the sector, not to stop.
    """
    pass


class DegenerateFold(EnsembleError):
    pass


# Arguments

class InvalidDistribution(EnsembleError, ValueError):
    pass


class DimensionMismatch(EnsembleError, ValueError):
    pass


class KTooLarge(EnsembleError, ValueError):
    pass


class LengthMismatch(EnsembleError, ValueError):
    pass


class InvalidK(EnsembleError, ValueError):
    pass


class ConfigError(EnsembleError, ValueError):
    pass


class ModelFormatError(EnsembleError, ValueError):
    pass


class EmptyPredictions(EnsembleError, ValueError):
    pass
