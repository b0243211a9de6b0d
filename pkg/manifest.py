"""Run manifests: what produced an artifact directory, and on which host."""

import glob
import hashlib
import json
import os
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime

import psutil

from config import config_dict

MANIFEST_FILE = "run_manifest.json"
CODE_DIR = os.path.dirname(os.path.abspath(__file__))


@dataclass
class RunManifest:
    command: str
    config_hash: str
    data_fingerprint: str
    seeds: list
    code_version: str
    started: str
    finished: str = ""
    outputs: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    host: dict = field(default_factory=dict)


def host_snapshot():
    memory = psutil.virtual_memory()
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "cpu_count": psutil.cpu_count(logical=True),
        "memory_gb": round(memory.total / (1024 ** 3), 1),
        "memory_percent": memory.percent,
    }


def config_hash(*instances):
    payload = json.dumps(config_dict(*instances), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def file_fingerprint(*paths):
    """sha256 over the bytes of files, or of every file under directories."""
    digest = hashlib.sha256()
    for path in paths:
        if path is None:
            continue
        if os.path.isdir(path):
            files = sorted(p for p in glob.glob(os.path.join(path, "**", "*"), recursive=True)
                           if os.path.isfile(p) and os.path.basename(p) != MANIFEST_FILE)
        elif os.path.exists(path):
            files = [path]
        else:
            raise FileNotFoundError(f"Cannot fingerprint missing path {path}")
        for name in files:
            digest.update(os.path.relpath(name, path).encode("utf-8"))
            with open(name, "rb") as f:
                digest.update(f.read())
    return digest.hexdigest()[:16]


def code_version():
    return file_fingerprint(*sorted(glob.glob(os.path.join(CODE_DIR, "*.py"))))


def start_manifest(command, configs, data_paths, seeds, started=None):
    started = started or datetime.now()
    return RunManifest(
        command=command,
        config_hash=config_hash(*configs),
        data_fingerprint=file_fingerprint(*data_paths),
        seeds=list(seeds),
        code_version=code_version(),
        started=started.isoformat(timespec="seconds"),
        config=json.loads(json.dumps(config_dict(*configs), default=str)),
        host=host_snapshot(),
    )


def write_manifest(out_dir, manifest, outputs):
    """Stamp the finish time and write ``run_manifest.json`` (one per directory)."""
    manifest.finished = datetime.now().isoformat(timespec="seconds")
    manifest.outputs = sorted(os.path.relpath(p, out_dir) for p in outputs)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, MANIFEST_FILE)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(asdict(manifest), f, indent=2, sort_keys=True)
    return path


def read_manifest(out_dir):
    path = os.path.join(out_dir, MANIFEST_FILE)
    if not os.path.exists(path):
        raise FileNotFoundError(f"No run manifest at {path}")
    with open(path, "r", encoding="utf-8") as f:
        return RunManifest(**json.load(f))
