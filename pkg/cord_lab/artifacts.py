"""
Small writers for run artifacts. Any OS failure surfaces as ArtifactIOError
carrying the path.
"""
import csv
from pathlib import Path

from .exceptions import ArtifactIOError


def write_csv(path, fieldnames, rows):
    """Write dict rows under a fixed header, '\\n' line endings"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('w', encoding='utf-8', newline='') as handle:
            writer = csv.DictWriter(handle, fieldnames=fieldnames, lineterminator='\n')
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    except OSError as e:
        raise ArtifactIOError(path, f"cannot write csv ({e.strerror or e})") from e
    return path


def read_csv(path):
    path = Path(path)
    try:
        with path.open(encoding='utf-8', newline='') as handle:
            return list(csv.DictReader(handle))
    except OSError as e:
        raise ArtifactIOError(path, f"cannot read csv ({e.strerror or e})") from e


def write_text(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding='utf-8')
    except OSError as e:
        raise ArtifactIOError(path, f"cannot write file ({e.strerror or e})") from e
    return path
