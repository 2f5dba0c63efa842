# data/repository.py
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd

from .models import EvalRecord, LabeledDataset, MaskedMatrix, RECORD_COLUMNS
from gapscore.utils.errors import ConfigurationError, FormatError, ModelFormatError, ParseError

logger = logging.getLogger(__name__)

NA_TOKEN = "NA"
MODEL_FORMAT = "gapscore-model"
MODEL_VERSION = 1


class DatasetRepository:
    @staticmethod
    def load_csv(path, label_column: Optional[str] = None, sentinel: Optional[float] = None) -> LabeledDataset:
        """Read a header + numeric CSV where the literal NA marks a missing cell"""
        path = Path(path)
        try:
            # header=None so that a row longer than the header is an error, not an index column
            raw = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, na_filter=False,
                              encoding="utf-8")
        except pd.errors.EmptyDataError as e:
            raise FormatError(f"{path} is empty; a header row is required") from e
        except pd.errors.ParserError as e:
            raise FormatError(f"{path} has ragged rows: {e}") from e
        if raw.iloc[0].isna().any():
            raise FormatError(f"{path} has an incomplete header row")
        frame = raw.iloc[1:].reset_index(drop=True)
        frame.columns = [str(name) for name in raw.iloc[0]]

        # short rows come back as NaN even with na_filter off
        short = frame.isna().any(axis=1).to_numpy()
        if short.any():
            row = int(np.flatnonzero(short)[0]) + 1
            raise FormatError(f"{path}: row {row} has fewer fields than the header")

        labels = None
        if label_column is not None:
            if label_column not in frame.columns:
                raise ConfigurationError(f"Label column '{label_column}' not found in {path}")
            labels = DatasetRepository._parse_labels(frame[label_column], label_column)
            frame = frame.drop(columns=[label_column])

        if frame.shape[1] == 0:
            raise FormatError(f"{path} has no feature columns")

        values = np.empty(frame.shape, dtype=float)
        mask = np.empty(frame.shape, dtype=bool)
        for j, column in enumerate(frame.columns):
            values[:, j], mask[:, j] = DatasetRepository._parse_column(frame[column], column)

        if sentinel is not None:
            hits = mask & (values == sentinel)
            if hits.any():
                logger.info(f"Mapped {int(hits.sum())} sentinel cell(s) equal to {sentinel} to NA")
            mask &= ~hits

        features = MaskedMatrix(np.where(mask, values, np.nan), mask, tuple(frame.columns))
        logger.info(f"Loaded {path}: {features.n_rows} rows, {features.n_cols} features, "
                    f"{int((~mask).sum())} missing cell(s)")
        return LabeledDataset(features=features, labels=labels, name=path.stem)

    @staticmethod
    def _parse_column(cells: pd.Series, column: str):
        missing = (cells == NA_TOKEN).to_numpy()
        numbers = pd.to_numeric(cells.where(~missing), errors="coerce").to_numpy(dtype=float)
        bad = ~missing & ~np.isfinite(numbers)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ParseError(f"Malformed number '{cells.iloc[row]}'", row=row + 1, column=column)
        return np.where(missing, np.nan, numbers), ~missing

    @staticmethod
    def _parse_labels(cells: pd.Series, column: str) -> np.ndarray:
        numbers = pd.to_numeric(cells, errors="coerce").to_numpy(dtype=float)
        bad = ~np.isin(numbers, (0.0, 1.0))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ParseError(f"Label '{cells.iloc[row]}' is not 0 or 1", row=row + 1, column=column)
        return numbers.astype(int)

    @staticmethod
    def write_csv(records: Union[Dict[str, Any], pd.DataFrame, MaskedMatrix, LabeledDataset], path,
                  label_column: str = "label") -> None:
        """Write named columns with a header; missing cells become NA"""
        if isinstance(records, LabeledDataset):
            frame = records.to_frame(label_column)
        elif isinstance(records, MaskedMatrix):
            frame = records.to_frame()
        elif isinstance(records, pd.DataFrame):
            frame = records
        else:
            lengths = {name: len(column) for name, column in records.items()}
            if len(set(lengths.values())) > 1:
                raise FormatError(f"Columns have different lengths: {lengths}")
            frame = pd.DataFrame({name: list(column) for name, column in records.items()})

        frame.to_csv(Path(path), index=False, na_rep=NA_TOKEN, lineterminator="\n")
        logger.debug(f"Wrote {len(frame)} row(s) to {path}")


class ModelRepository:
    @staticmethod
    def _model_classes():
        from gapscore.services.egmm_service import EgmmModel
        from gapscore.services.iforest_service import IsolationForest
        from gapscore.services.loda_service import LodaModel

        return {cls.ALGORITHM: cls for cls in (IsolationForest, LodaModel, EgmmModel)}

    @staticmethod
    def save(model, path) -> None:
        document = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "algorithm": model.ALGORITHM,
            "model": model.to_dict(),
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f)
        logger.info(f"Saved {model.ALGORITHM} model to {path}")

    @staticmethod
    def load(path):
        try:
            with open(path, encoding="utf-8") as f:
                document = json.load(f)
        except json.JSONDecodeError as e:
            raise ModelFormatError(f"{path} is not a JSON model file: {e}") from e

        if not isinstance(document, dict) or document.get("format") != MODEL_FORMAT:
            raise ModelFormatError(f"{path} is not a {MODEL_FORMAT} document")
        if document.get("version") != MODEL_VERSION:
            raise ModelFormatError(f"{path} has unsupported version {document.get('version')}")

        classes = ModelRepository._model_classes()
        algorithm = document.get("algorithm")
        if algorithm not in classes:
            raise ModelFormatError(f"{path} names unknown algorithm '{algorithm}'")
        try:
            return classes[algorithm].from_dict(document["model"])
        except (KeyError, TypeError, ValueError) as e:
            raise ModelFormatError(f"{path} has a malformed {algorithm} model: {e}") from e


class ResultRepository:
    @staticmethod
    def write_records(records: List[EvalRecord], path) -> None:
        frame = pd.DataFrame([record.to_dict() for record in records], columns=RECORD_COLUMNS)
        DatasetRepository.write_csv(frame, path)
        logger.info(f"Wrote {len(records)} evaluation record(s) to {path}")

    @staticmethod
    def read_records(path) -> List[EvalRecord]:
        frame = pd.read_csv(path, dtype={"dataset": str, "seed": "uint64"})
        missing = [c for c in RECORD_COLUMNS if c not in frame.columns]
        if missing:
            raise FormatError(f"{path} lacks result column(s) {missing}")
        return [EvalRecord.from_dict(row) for row in frame.to_dict(orient="records")]


dataset_repo = DatasetRepository()
model_repo = ModelRepository()
result_repo = ResultRepository()


def load_csv(path, label_column: Optional[str] = None, sentinel: Optional[float] = None) -> LabeledDataset:
    return dataset_repo.load_csv(path, label_column=label_column, sentinel=sentinel)


def write_csv(records, path) -> None:
    dataset_repo.write_csv(records, path)
