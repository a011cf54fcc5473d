"""Locations of the data files bundled with the package."""

from __future__ import annotations

from importlib import resources
from pathlib import Path


def data_dir() -> Path:
    return Path(str(resources.files("scanmux") / "data"))


def bundled_registry() -> Path:
    return data_dir() / "registry"


def bundled_taxonomy() -> Path:
    return data_dir() / "taxonomy.yaml"


def bundled_release_index() -> Path:
    return data_dir() / "solc-releases.txt"


def sarif_schema_path() -> Path:
    return data_dir() / "sarif-2.1.0-subset.schema.json"
