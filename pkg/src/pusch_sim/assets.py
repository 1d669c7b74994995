"""Access to the data files shipped inside the package."""
import hashlib
import json
from importlib import resources

from .debug import log
from .errors import AssetError

#: Directory (inside the package) holding every data file.
DATA_DIR = 'data'


def _data_path(*parts):
    path = resources.files('pusch_sim') / DATA_DIR
    for part in parts:
        path = path / part
    return path


def read_bytes(*parts):
    """Read a packaged data file as bytes."""
    path = _data_path(*parts)
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise AssetError(f'missing data file {"/".join(parts)}') from None


def read_sidecar(*parts):
    """Read the JSON sidecar describing a packaged data file."""
    return json.loads(read_bytes(*parts).decode('utf-8'))


def sha256(data):
    return hashlib.sha256(data).hexdigest()


def verify_checksum(data, expected, name):
    """Raise :class:`AssetError` unless ``data`` hashes to ``expected``."""
    actual = sha256(data)
    if actual != expected:
        raise AssetError(
            f'checksum mismatch for {name}: expected {expected}, '
            f'got {actual}'
        )
    log('%s verified (%s)', name, actual[:12])
    return actual


def parse_csv_rows(data, name, n_fields):
    """Split a small numeric CSV into rows of floats.

    The first line is a header and is skipped. Blank lines are ignored.
    A line with the wrong number of fields raises :class:`AssetError`.
    """
    lines = data.decode('utf-8').splitlines()
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(',')
        if len(fields) != n_fields:
            raise AssetError(
                f'dimension mismatch in {name}: line {lineno} has '
                f'{len(fields)} fields, expected {n_fields}'
            )
        try:
            rows.append(tuple(float(f) for f in fields))
        except ValueError:
            raise AssetError(
                f'malformed number in {name} at line {lineno}'
            ) from None
    return rows
