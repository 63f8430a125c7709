import json
import os
import tempfile
import logging
from datetime import datetime, timezone
from typing import Any, Dict, Optional, Type, TypeVar

import numpy as np
from pydantic import BaseModel, ValidationError

from config import get_settings
from schemas import ArtifactMeta, CanvasSidecar
from .exceptions import ArtifactError

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)


def make_meta(command: str, seed: Optional[int] = None, config: Optional[Dict[str, Any]] = None) -> ArtifactMeta:
    return ArtifactMeta(
        command=command,
        seed=seed,
        config=config or {},
        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )


class FileService:
    def __init__(self, workspace: Optional[str] = None):
        self.workspace = workspace or get_settings().workspace

        self.scenarios_dir = os.path.join(self.workspace, "scenarios")
        self.artifacts_dir = os.path.join(self.workspace, "artifacts")
        self.runs_dir = os.path.join(self.workspace, "runs")
        self.frontiers_dir = os.path.join(self.workspace, "frontiers")
        self._create_directories()

    def _create_directories(self):
        """Create the workspace layout"""
        os.makedirs(self.scenarios_dir, exist_ok=True)
        os.makedirs(self.artifacts_dir, exist_ok=True)
        os.makedirs(self.runs_dir, exist_ok=True)
        os.makedirs(self.frontiers_dir, exist_ok=True)

    def path(self, kind: str, name: str) -> str:
        directory = {
            "scenarios": self.scenarios_dir,
            "artifacts": self.artifacts_dir,
            "runs": self.runs_dir,
            "frontiers": self.frontiers_dir,
        }.get(kind)
        if directory is None:
            raise ArtifactError(f"unknown workspace area '{kind}'")
        return os.path.join(directory, name)

    def _write_atomic(self, path: str, data: bytes):
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
            os.replace(tmp_path, path)
        except OSError as e:
            if os.path.exists(tmp_path):
                os.remove(tmp_path)
            raise ArtifactError(f"could not write {path}: {str(e)}")
        logger.debug(f"Wrote {path} ({len(data)} bytes)")

    def save_model(self, path: str, model: BaseModel) -> str:
        self._write_atomic(path, model.model_dump_json(by_alias=True, indent=2).encode("utf-8"))
        logger.info(f"Saved {type(model).__name__} to {path}")
        return path

    def load_model(self, path: str, model_cls: Type[M]) -> M:
        if not os.path.exists(path):
            raise ArtifactError(f"file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                return model_cls.model_validate_json(f.read())
        except ValidationError as e:
            raise ArtifactError(f"{path} is not a valid {model_cls.__name__}",
                                details={"errors": e.errors(include_url=False, include_context=False)})

    def save_json(self, path: str, data: Any) -> str:
        self._write_atomic(path, json.dumps(data, indent=2).encode("utf-8"))
        logger.info(f"Saved JSON to {path}")
        return path

    def load_json(self, path: str) -> Any:
        if not os.path.exists(path):
            raise ArtifactError(f"file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise ArtifactError(f"{path} is not valid JSON: {str(e)}")

    def save_csv(self, path: str, text: str, meta: Optional[ArtifactMeta] = None) -> str:
        """CSV body plus a `.meta.json` sidecar describing how it was produced"""
        self._write_atomic(path, text.encode("utf-8"))
        if meta is not None:
            self._write_atomic(path + ".meta.json", meta.model_dump_json(indent=2).encode("utf-8"))
        logger.info(f"Saved CSV to {path}")
        return path

    def load_text(self, path: str) -> str:
        if not os.path.exists(path):
            raise ArtifactError(f"file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return f.read()

    def save_canvas(self, path: str, canvas_id: int, pixels: np.ndarray) -> str:
        """Raw row-major buffer with a JSON sidecar giving its geometry"""
        pixels = np.ascontiguousarray(pixels)
        height, width = pixels.shape[:2]
        channels = 1 if pixels.ndim == 2 else pixels.shape[2]
        sidecar = CanvasSidecar(canvas_id=canvas_id, width=width, height=height,
                                dtype=str(pixels.dtype), channels=channels)
        self._write_atomic(path, pixels.tobytes())
        self._write_atomic(path + ".json", sidecar.model_dump_json(indent=2).encode("utf-8"))
        return path
