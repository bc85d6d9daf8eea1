import logging
import re
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from earcp_lab.core.config import settings
from earcp_lab.core.errors import IngestionError
from earcp_lab.models.schemas import TaskMode
from earcp_lab.services.metrics import write_csv

logger = logging.getLogger(__name__)

TARGET_ID = "target"
INGEST_SIMPLEX_TOLERANCE = 1e-6

# (step, M x d predictions, target)
IngestedStep = Tuple[int, np.ndarray, np.ndarray]

READ_OPTIONS = {"dtype": str, "keep_default_na": False, "skip_blank_lines": False, "engine": "python"}

def stream_header(d: int) -> List[str]:
    return ["step", "expert_id"] + [f"p_{j}" for j in range(d)]

def _parser_error(e: pd.errors.ParserError) -> IngestionError:
    match = re.search(r"line (\d+)", str(e))
    return IngestionError(f"malformed row: {e}", line=int(match.group(1)) if match else None)

def _read_header(path: Path) -> List[str]:
    try:
        return list(pd.read_csv(path, nrows=0, **READ_OPTIONS).columns)
    except FileNotFoundError:
        raise IngestionError(f"no such file: {path}") from None
    except pd.errors.EmptyDataError:
        raise IngestionError("file is empty", line=1) from None
    except pd.errors.ParserError as e:
        raise _parser_error(e) from e

def _read_chunks(path: Path, chunk_rows: int) -> Iterator[pd.DataFrame]:
    """Data rows in frames of at most chunk_rows, so memory stays bounded for large M"""
    try:
        with pd.read_csv(path, chunksize=chunk_rows, **READ_OPTIONS) as reader:
            for chunk in reader:
                yield chunk
    except pd.errors.ParserError as e:
        raise _parser_error(e) from e

def _check_simplex(row: np.ndarray, line: int, what: str) -> None:
    if np.any(row < -INGEST_SIMPLEX_TOLERANCE) or abs(row.sum() - 1.0) > INGEST_SIMPLEX_TOLERANCE:
        raise IngestionError(f"{what} is off the probability simplex (sum={row.sum():.12g})", line=line)

class _StepGroup:
    """Rows collected for the step currently being read"""

    def __init__(self, step: int, line: int):
        self.step = step
        self.line = line
        self.rows: dict = {}
        self.target: Optional[np.ndarray] = None

    def finish(self, m: int) -> IngestedStep:
        missing = [i for i in range(m) if i not in self.rows]
        if missing:
            raise IngestionError(f"step {self.step} has no rows for experts {missing}", line=self.line)
        if self.target is None:
            raise IngestionError(f"step {self.step} has no target row", line=self.line)
        return self.step, np.array([self.rows[i] for i in range(m)]), self.target

def ingest_csv(path: Union[str, Path], mode: TaskMode, m: int, d: Optional[int] = None,
               chunk_rows: int = settings.INGEST_CHUNK_ROWS) -> Iterator[IngestedStep]:
    """Read an interleaved long-format expert stream.

    Header: step,expert_id,p_0..p_{d-1}. Each step holds one row per expert id in
    [0, m) and one row whose expert_id is "target". Steps never decrease. The file
    is parsed chunk_rows rows at a time; a step may span chunks.
    """
    path = Path(path)
    try:
        yield from _ingest_steps(path, mode, m, d, chunk_rows)
    except IngestionError as e:
        logger.error(f"Failed to ingest stream {path}: {e}")
        raise
    logger.info(f"Ingested stream {path} (M={m})")

def _ingest_steps(path: Path, mode: TaskMode, m: int, d: Optional[int], chunk_rows: int) -> Iterator[IngestedStep]:
    columns = _read_header(path)
    inferred = len(columns) - 2
    if inferred < 1 or columns != stream_header(inferred):
        raise IngestionError(f"header must be step,expert_id,p_0..p_(d-1), got {','.join(columns)}", line=1)
    if d is not None and inferred != d:
        raise IngestionError(f"header declares d = {inferred}, expected {d}", line=1)

    group: Optional[_StepGroup] = None
    line = 1
    for frame in _read_chunks(path, chunk_rows):
        # a missing trailing field shows up as NaN even with keep_default_na off
        short_rows = frame.isna().any(axis=1).to_numpy()
        cells = frame[columns[2:]].to_numpy(dtype=object)
        steps = pd.to_numeric(frame["step"], errors="coerce").to_numpy(dtype=np.float64)
        expert_ids = frame["expert_id"].str.strip().to_numpy()

        for index in range(len(frame)):
            line += 1
            if short_rows[index]:
                raise IngestionError(f"expected {len(columns)} columns", line=line)
            step_value = steps[index]
            if not np.isfinite(step_value) or step_value != int(step_value) or step_value < 1:
                raise IngestionError(f"step must be a positive integer, got {frame['step'].iat[index]!r}", line=line)
            step = int(step_value)
            try:
                row = np.array([float(cell) for cell in cells[index]])
            except ValueError:
                raise IngestionError(f"unparseable number in {list(cells[index])}", line=line) from None
            if not np.all(np.isfinite(row)):
                raise IngestionError("non-finite number", line=line)

            if group is not None and step < group.step:
                raise IngestionError(f"step decreased from {group.step} to {step}", line=line)
            if group is None or step > group.step:
                if group is not None:
                    yield group.finish(m)
                group = _StepGroup(step, line)
            group.line = line

            expert_id = expert_ids[index]
            if expert_id == TARGET_ID:
                if group.target is not None:
                    raise IngestionError(f"duplicate target row for step {step}", line=line)
                if mode == TaskMode.CLASSIFICATION:
                    _check_simplex(row, line, "target")
                group.target = row.copy()
                continue
            try:
                expert = int(expert_id)
            except ValueError:
                raise IngestionError(f"expert_id must be an integer or '{TARGET_ID}', got {expert_id!r}", line=line) from None
            if not 0 <= expert < m:
                raise IngestionError(f"expert_id {expert} outside [0, {m})", line=line)
            if expert in group.rows:
                raise IngestionError(f"duplicate row for expert {expert} at step {step}", line=line)
            if mode == TaskMode.CLASSIFICATION:
                _check_simplex(row, line, f"prediction of expert {expert}")
            group.rows[expert] = row.copy()

    if group is not None:
        yield group.finish(m)

def write_stream_csv(path: Union[str, Path], steps: Iterable[IngestedStep]) -> Path:
    """Export a stream in the ingestion format"""
    rows = []
    d = None
    for step, predictions, target in steps:
        matrix = np.asarray(predictions, dtype=np.float64)
        d = matrix.shape[1]
        for i, prediction in enumerate(matrix):
            rows.append([step, str(i)] + list(prediction))
        rows.append([step, TARGET_ID] + list(np.asarray(target, dtype=np.float64)))
    if d is None:
        raise IngestionError("cannot export an empty stream")
    path = write_csv(pd.DataFrame(rows, columns=stream_header(d)), path)
    logger.info(f"Wrote stream {path} ({len(rows)} rows)")
    return path
