from typing import Callable, Dict, Iterable, List, Optional, TypeVar
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
import hashlib
import json
import logging
import threading

import pandas as pd

from .config import RunConfig
from .errors import ConfigError, DataError, DependencyError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

MANIFEST = "manifest.json"
TIMING = "timing.json"
PARTIAL_SUFFIX = ".partial"


def file_hash(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class RunState:
    """Process-wide run state: output directory, artifact registry and manifest"""

    def __init__(self):
        self.config: Optional[RunConfig] = None
        # stage -> artifact name -> sha256 of the committed file
        self.outputs: Dict[str, Dict[str, str]] = {}
        self.timing: Dict[str, float] = {}
        self._pending: Dict[str, List[str]] = {}
        self._write_lock = threading.Lock()

    _instance = None
    _lock = threading.Lock()

    @classmethod
    def get_instance(cls):
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = cls()
        return cls._instance

    @classmethod
    def reset(cls):
        with cls._lock:
            cls._instance = None

    # ===== CONFIGURATION =====
    def configure(self, config: RunConfig) -> "RunState":
        self.config = config
        self.output_dir.mkdir(parents=True, exist_ok=True)
        previous = self._read_manifest()
        self.outputs = previous.get('outputs', {}) if previous.get('config_hash') == config.config_hash() else {}
        self.timing = {}
        self._pending = {}
        return self

    @property
    def output_dir(self) -> Path:
        if self.config is None:
            raise ConfigError("run state used before configure()")
        return self.config.output_dir

    @property
    def threads(self) -> int:
        return self.config.effective_threads() if self.config is not None else 1

    # ===== ARTIFACTS =====
    def path(self, name: str) -> Path:
        return self.output_dir / name

    def require(self, stage: str, name: str) -> Path:
        """Path of a committed upstream artifact.

        A missing file is a DependencyError. A file that the current
        configuration never committed, or whose content changed after the
        commit, is a DataError naming the stage that has to be rerun.
        """
        path = self.path(name)
        if not path.exists():
            raise DependencyError(stage, name)
        producer = next((s for s, hashes in self.outputs.items() if name in hashes), None)
        if producer is None:
            recorded = self._read_manifest().get('outputs', {})
            stale = next((s for s, hashes in recorded.items() if name in hashes), "unknown")
            raise DataError(f"stage '{stage}' needs {name}, but it is stale: stage '{stale}' wrote it "
                            f"under a different configuration")
        if file_hash(path) != self.outputs[producer][name]:
            raise DataError(f"stage '{stage}' needs {name}, but it changed after stage '{producer}' committed it")
        return path

    def require_input(self, stage: str, name: str) -> Path:
        value = getattr(self.config.paths, name)
        if value is None:
            raise DependencyError(stage, f"paths.{name}")
        return Path(value)

    def _staging(self, stage: str, name: str) -> Path:
        with self._write_lock:
            self._pending.setdefault(stage, [])
            if name not in self._pending[stage]:
                self._pending[stage].append(name)
        return self.path(name + PARTIAL_SUFFIX)

    def write_frame(self, stage: str, name: str, frame: pd.DataFrame, float_format: str = "%.17g"):
        frame.to_csv(self._staging(stage, name), index=False, float_format=float_format)

    def write_json(self, stage: str, name: str, payload):
        with open(self._staging(stage, name), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=True)
            fh.write("\n")

    def read_json(self, stage: str, name: str):
        with open(self.require(stage, name), "r", encoding="utf-8") as fh:
            return json.load(fh)

    def read_frame(self, stage: str, name: str) -> pd.DataFrame:
        return pd.read_csv(self.require(stage, name))

    def commit(self, stage: str) -> Dict[str, str]:
        """Promote a finished stage's .partial files and record their hashes"""
        hashes = {}
        for name in sorted(self._pending.pop(stage, [])):
            final = self.path(name)
            self.path(name + PARTIAL_SUFFIX).replace(final)
            hashes[name] = file_hash(final)
        self.outputs.setdefault(stage, {}).update(hashes)
        logger.info(f"[PIPELINE] {stage}: committed {len(hashes)} artifact(s)")
        return hashes

    def abandon(self, stage: str) -> List[str]:
        """Leave a failed stage's outputs behind as .partial files"""
        left = [name + PARTIAL_SUFFIX for name in self._pending.pop(stage, [])]
        if left:
            logger.warning(f"[PIPELINE] {stage}: partial outputs kept: {', '.join(left)}")
        return left

    # ===== MANIFEST =====
    def input_hashes(self) -> Dict[str, str]:
        hashes = {}
        for name in ('quotes', 'exposures', 'fires', 'returns'):
            value = getattr(self.config.paths, name)
            if value is not None and Path(value).exists():
                hashes[name] = file_hash(Path(value))
        return hashes

    def manifest(self) -> dict:
        return {
            'config_hash': self.config.config_hash(),
            'seed': self.config.seed,
            'inputs': self.input_hashes(),
            'outputs': {stage: dict(sorted(h.items())) for stage, h in sorted(self.outputs.items())},
        }

    def _read_manifest(self) -> dict:
        path = self.path(MANIFEST)
        if not path.exists():
            return {}
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            logger.warning(f"[PIPELINE] unreadable {MANIFEST} ignored")
            return {}

    def write_manifest(self) -> dict:
        manifest = self.manifest()
        self.path(MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.path(TIMING).write_text(json.dumps(self.timing, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return manifest

    # ===== PARALLEL MAP =====
    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
        """Order-preserving map over independent tasks on the configured worker count"""
        items = list(items)
        if self.threads == 1 or len(items) < 2:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))
