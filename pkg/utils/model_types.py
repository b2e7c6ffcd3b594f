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

import hashlib
import json

from learners.base import TrainedLearner
from learners.forest import ForestModel
from learners.knn import KnnCommittee
from learners.rvm import RvmModel
from learners.svm import SvmModel
from utils.committee import CommitteeModel
from utils.errors import ModelFormatError

MODEL_FORMAT = "sector-ensemble-model"
MODEL_VERSION = 1

MODEL_TYPES = {
    ForestModel.name: ForestModel,
    SvmModel.name: SvmModel,
    RvmModel.name: RvmModel,
    KnnCommittee.name: KnnCommittee,
    CommitteeModel.name: CommitteeModel,
}


def decode_learner(entry: dict) -> TrainedLearner:
    """ Rebuilds a learner from a {type, model} pair """
    model_type = entry.get("type")
    if model_type not in MODEL_TYPES:
        raise ModelFormatError(f"Unknown model type: {model_type!r}")
    try:
        return MODEL_TYPES[model_type].from_record(entry["model"])
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"Malformed {model_type} model: {e}") from e


def encode_model(model: TrainedLearner) -> dict:
    """ Wraps a fitted model in the versioned envelope """
    if model.name not in MODEL_TYPES:
        raise ModelFormatError(f"Cannot encode model type {model.name!r}")
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "type": model.name,
        "model": model.to_record(),
    }


def decode_model(document: dict) -> TrainedLearner:
    if not isinstance(document, dict) or document.get("format") != MODEL_FORMAT:
        raise ModelFormatError("Not a sector-ensemble model document")
    if document.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"Unsupported model version: {document.get('version')!r}")
    return decode_learner(document)


def canonical_json(document) -> str:
    return json.dumps(document, sort_keys=True, separators=(",", ":"), allow_nan=False)


def fingerprint(model: TrainedLearner) -> str:
    """ Double SHA-256 of the model's canonical JSON encoding """
    single_hashed = hashlib.sha256(canonical_json(encode_model(model)).encode("utf-8")).digest()
    return hashlib.sha256(single_hashed).hexdigest()


def save_model(model: TrainedLearner, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(encode_model(model), f, sort_keys=True)


def load_model(path) -> TrainedLearner:
    with open(path, encoding="utf-8") as f:
        try:
            document = json.load(f)
        except json.JSONDecodeError as e:
            raise ModelFormatError(f"{path} is not valid JSON: {e}") from e
    return decode_model(document)
