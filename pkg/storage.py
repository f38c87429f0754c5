"""
Local JSON storage for experiment documents: checkpoints, metric reports,
ablation tables and attention maps
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from config import Config

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def write_json(path: PathLike, document: Any) -> bool:
    """Write one JSON document; returns False (and logs) on I/O failure"""
    try:
        path = Path(path)
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f, indent=2, ensure_ascii=False, default=str)
        return True
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        return False


def read_json(path: PathLike) -> Optional[Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        return None
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Error reading {path}: {e}")
        return None


class ExperimentStorage:
    """Documents stored as `<storage_dir>/<doc_id>.json`"""

    def __init__(self, storage_dir: Optional[PathLike] = None):
        self.storage_dir = Path(storage_dir or Config.RUNS_DIR)
        self.storage_dir.mkdir(parents=True, exist_ok=True)

    def path_for(self, doc_id: str) -> Path:
        return self.storage_dir / f"{doc_id}.json"

    def save_document(self, doc_id: str, document: Dict[str, Any]) -> bool:
        ok = write_json(self.path_for(doc_id), document)
        if ok:
            logger.info(f"💾 Saved {doc_id} to {self.storage_dir}")
        return ok
