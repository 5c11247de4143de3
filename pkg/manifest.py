"""
Run Manifests
Every CLI invocation records its command, configs, seed, input and output hashes
"""
import logging
import os
from typing import Dict, List, Optional, Sequence

from pydantic import BaseModel, Field

from config import APP_VERSION
from utils import PipelineError, load_json, save_json, sha256_file

logger = logging.getLogger(__name__)


class ArtifactRecord(BaseModel):
    path: str
    sha256: str


class RunManifest(BaseModel):
    command: str
    argv: List[str] = Field(default_factory=list)
    config_paths: Dict[str, str] = Field(default_factory=dict)
    seed: Optional[int] = None
    input_hashes: Dict[str, str] = Field(default_factory=dict)
    outputs: List[ArtifactRecord] = Field(default_factory=list)
    tool_version: str = APP_VERSION


def _hash_existing(paths: Sequence[str]) -> Dict[str, str]:
    hashes = {}
    for path in paths:
        if path and os.path.isfile(path):
            hashes[path] = sha256_file(path)
    return hashes


def build_manifest(command: str, argv: Sequence[str], config_paths: Dict[str, str], seed: Optional[int],
                   inputs: Sequence[str], outputs: Sequence[str]) -> RunManifest:
    """Manifest of a finished command; every output must exist"""
    missing = [p for p in outputs if not os.path.isfile(p)]
    if missing:
        raise PipelineError(f"outputs missing when writing the manifest: {missing}")
    config_paths = {k: v for k, v in config_paths.items() if v}
    return RunManifest(
        command=command,
        argv=list(argv),
        config_paths=config_paths,
        seed=seed,
        input_hashes=_hash_existing(list(inputs) + list(config_paths.values())),
        outputs=[ArtifactRecord(path=p, sha256=sha256_file(p)) for p in sorted(set(outputs))],
    )


def manifest_path_for(out_path: str, command: str) -> str:
    """<dir of the outputs>/<command>.manifest.json"""
    directory = out_path if os.path.isdir(out_path) else (os.path.dirname(out_path) or '.')
    return os.path.join(directory, f"{command}.manifest.json")


def write_manifest(manifest: RunManifest, path: str) -> str:
    if not save_json(manifest.model_dump(), path):
        raise PipelineError(f"could not write manifest {path}")
    logger.info(f"MANIFEST: {len(manifest.outputs)} outputs recorded in {path}")
    return path


def load_manifest(path: str) -> RunManifest:
    data = load_json(path)
    if data is None:
        raise PipelineError(f"manifest not found: {path}")
    return RunManifest.model_validate(data)


def verify_manifest(manifest: RunManifest) -> List[str]:
    """Paths whose current content hash differs from the recorded one"""
    changed = []
    for record in manifest.outputs:
        if not os.path.isfile(record.path) or sha256_file(record.path) != record.sha256:
            changed.append(record.path)
    return changed
