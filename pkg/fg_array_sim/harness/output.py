"""
Result files: comma-separated tables with a `#` header block, JSONL traces.

Floats are written with repr() so identical runs give identical bytes.
"""

import csv
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from loguru import logger

from .. import __version__
from ..tuning import TuningTrace
from .config import ExperimentConfig, config_hash


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, Enum):
        return str(value.value)
    return str(value)


def header_lines(experiment: str, config: ExperimentConfig) -> List[str]:
    seed = "none" if config.seed is None else str(config.seed)
    return [
        f"# fg-array-sim {__version__}",
        f"# experiment: {experiment}",
        f"# config-hash: {config_hash(config)}",
        f"# seed: {seed}",
    ]


class OutputDir:
    """
    Writes the files of one experiment run under a common directory.

    Example:
        >>> out = OutputDir(Path("results/tune"), "tune", config)
        >>> out.table("summary", ["row", "col"], [[0, 0]])
    """

    def __init__(self, root: Path, experiment: str, config: ExperimentConfig):
        self.root = Path(root)
        self.experiment = experiment
        self.config = config
        self.files: List[Path] = []
        self.root.mkdir(parents=True, exist_ok=True)

    def table(self, name: str, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
        path = self.root / f"{name}.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            for line in header_lines(self.experiment, self.config):
                fh.write(line + "\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([format_value(v) for v in row])
        self.files.append(path)
        logger.info(f"Wrote {path} ({len(rows)} rows)")
        return path

    def trace(self, name: str, trace: TuningTrace) -> Path:
        path = trace.write_jsonl(self.root / "traces" / f"{name}.jsonl")
        self.files.append(path)
        return path


def read_table(path: Path) -> Tuple[Dict[str, str], List[str], List[Dict[str, str]]]:
    """
    Parse a table written by OutputDir.table().

    Returns:
        (metadata from the `#` block, column names, rows as dicts of strings)
    """
    meta: Dict[str, str] = {}
    body: List[str] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#") and not body:
            text = line[1:].strip()
            if ":" in text:
                key, value = text.split(":", 1)
                meta[key.strip()] = value.strip()
            else:
                meta["tool"] = text
        else:
            body.append(line)
    reader = csv.reader(body)
    columns: Optional[List[str]] = next(reader, None)
    if columns is None:
        return meta, [], []
    return meta, columns, [dict(zip(columns, row)) for row in reader]
