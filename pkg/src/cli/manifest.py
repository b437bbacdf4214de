"""
Run manifests: the reproducibility record written next to a command's outputs.
"""
import json
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import Field

from src.shared.domain.base import ValueObject

MANIFEST_FILE = "run_manifest.json"


class RunManifest(ValueObject):
    """
    Command, inputs, outputs and every resolved option of one run.

    No timestamps or host details are recorded, so re-running a command with
    the same manifest writes the same manifest.
    """
    command: str
    config_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    inputs: List[str] = Field(default_factory=list)
    outputs: List[str] = Field(default_factory=list)
    seed: Optional[int] = None
    options: Dict[str, Any] = Field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    def write(self, directory: Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / MANIFEST_FILE
        path.write_text(self.to_json())
        return path

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        return cls.model_validate_json(Path(path).read_text())
