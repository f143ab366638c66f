"""Run manifests: which configuration produced which artifacts, and how long it took."""
import json
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Dict, List

from .exceptions import CheckpointError
from .version import VERSION


@dataclass
class RunManifest(object):
    command: str
    config_checksum: str
    seed: int
    code_version: str = VERSION
    artifacts: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    notices: List[str] = field(default_factory=list)

    def add_artifact(self, name, path):
        if name in self.artifacts:
            raise ValueError(u'artifact {name} is already recorded'.format(name=name))
        self.artifacts[name] = str(path)

    def notice(self, message):
        self.notices.append(message)

    @contextmanager
    def timed(self, name):
        started = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = time.perf_counter() - started

    def write(self, path):
        directory = os.path.dirname(str(path))
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(str(path), 'w') as manifest_file:
            json.dump(asdict(self), manifest_file, indent=2, sort_keys=True)
        return path

    @classmethod
    def read(cls, path):
        try:
            with open(str(path)) as manifest_file:
                data = json.load(manifest_file)
        except (OSError, ValueError) as e:
            raise CheckpointError(u'cannot read manifest {path}: {error}'.format(path=path, error=e))
        return cls(**data)


def manifest_path(out_dir, command):
    return os.path.join(str(out_dir), '{command}-manifest.json'.format(command=command))
