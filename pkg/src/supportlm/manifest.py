"""Run manifests: enough provenance to re-execute any run bit-identically.

Every CLI run writes a manifest next to its artifacts: the command, the full
resolved configuration, seeds, hashes of every input file, and the produced
output paths. Re-running the recorded argv against the same inputs must
reproduce every CSV byte for byte (emitted tables never embed timestamps).
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .hashutil import file_sha256

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seeds: dict
    input_hashes: dict
    outputs: list[str]
    tool_version: str = __version__
    wall_clock_s: float = 0.0


def hash_inputs(paths: dict[str, str | Path]) -> dict[str, str]:
    return {name: file_sha256(p) for name, p in sorted(paths.items())}


def save_manifest(manifest: RunManifest, out_dir) -> Path:
    path = Path(out_dir) / MANIFEST_NAME
    path.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> RunManifest:
    data = json.loads(Path(path).read_text())
    return RunManifest(**data)


def find_manifests(root) -> list[Path]:
    return sorted(Path(root).rglob(MANIFEST_NAME))


class RunRecorder:
    """Collects outputs while a subcommand runs, then writes the manifest."""

    def __init__(self, command: str, argv: list[str], out_dir, config: dict, seeds: dict):
        self.command = command
        self.argv = list(argv)
        self.out_dir = Path(out_dir)
        self.config = config
        self.seeds = seeds
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self._t0 = time.monotonic()

    def add_input(self, name: str, path) -> None:
        self.inputs[name] = file_sha256(path)

    def add_output(self, path) -> Path:
        p = Path(path)
        rel = p.relative_to(self.out_dir) if p.is_relative_to(self.out_dir) else p
        self.outputs.append(str(rel))
        return p

    def finish(self) -> Path:
        manifest = RunManifest(
            command=self.command,
            argv=self.argv,
            config=self.config,
            seeds=self.seeds,
            input_hashes=dict(sorted(self.inputs.items())),
            outputs=sorted(self.outputs),
            wall_clock_s=round(time.monotonic() - self._t0, 3),
        )
        return save_manifest(manifest, self.out_dir)
