"""
Dataset CSV export/import.

One file holds every domain: header domain_id,label,f0..f{D-1}. Import
regroups rows by domain id (ascending, original row order within a
domain) and recomputes pi from the counts.
"""

import logging
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
import pandas as pd

from ..lib.datagen import DomainDataset
from ..lib.errors import NumericError, RejectedInputError
from .formats import (
    DATASET_FEATURE_PREFIX,
    DATASET_ID_COLUMN,
    DATASET_LABEL_COLUMN,
    MATRIX_FLOAT_FORMAT,
    dataset_columns,
)

logger = logging.getLogger(__name__)


def datasets_to_frame(datasets: Sequence[DomainDataset]) -> pd.DataFrame:
    if not datasets:
        raise RejectedInputError("nothing to export")
    feature_dim = datasets[0].feature_dim
    if any(d.feature_dim != feature_dim for d in datasets):
        raise RejectedInputError("all domains must share the feature dimension")
    frames = []
    for d in datasets:
        frame = pd.DataFrame(d.features, columns=dataset_columns(feature_dim)[2:])
        frame.insert(0, DATASET_LABEL_COLUMN, d.labels)
        frame.insert(0, DATASET_ID_COLUMN, d.domain_id)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def frame_to_datasets(frame: pd.DataFrame) -> List[DomainDataset]:
    if frame.empty:
        raise RejectedInputError("dataset table has no rows")
    if list(frame.columns[:2]) != [DATASET_ID_COLUMN, DATASET_LABEL_COLUMN]:
        raise RejectedInputError(f"columns must start with {DATASET_ID_COLUMN},{DATASET_LABEL_COLUMN}")
    feature_cols = list(frame.columns[2:])
    if not feature_cols or feature_cols != dataset_columns(len(feature_cols))[2:]:
        raise RejectedInputError(f"feature columns must be {DATASET_FEATURE_PREFIX}0..{DATASET_FEATURE_PREFIX}(D-1)")

    features = frame[feature_cols].to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise NumericError("dataset contains non-finite features")
    labels = frame[DATASET_LABEL_COLUMN].to_numpy()
    domain_ids = frame[DATASET_ID_COLUMN].to_numpy(dtype=np.int64)

    classification = np.issubdtype(labels.dtype, np.integer)
    if classification:
        if np.any(labels < 0):
            raise RejectedInputError("class labels must be >= 0")
        label_space = set(np.unique(labels).tolist())

    total = float(len(frame))
    datasets = []
    for domain_id in np.unique(domain_ids):
        rows = np.flatnonzero(domain_ids == domain_id)
        if classification and set(np.unique(labels[rows]).tolist()) != label_space:
            raise RejectedInputError(f"domain {domain_id} does not cover the shared label space")
        datasets.append(DomainDataset(int(domain_id), features[rows], labels[rows], rows.size / total))
    logger.debug("imported %d domains, %d rows", len(datasets), len(frame))
    return datasets


def export_datasets(datasets: Sequence[DomainDataset], path: Union[str, Path]) -> Path:
    path = Path(path)
    datasets_to_frame(datasets).to_csv(path, index=False, float_format=MATRIX_FLOAT_FORMAT, lineterminator="\n")
    return path


def import_datasets(path: Union[str, Path]) -> List[DomainDataset]:
    path = Path(path)
    if not path.exists():
        raise RejectedInputError(f"no such dataset file: {path}")
    return frame_to_datasets(pd.read_csv(path, float_precision="round_trip"))
