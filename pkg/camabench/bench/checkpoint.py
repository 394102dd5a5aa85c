"""Parameter-store persistence.

Layout: a ``CAMA-CKPT v1`` header line, one JSON manifest line
``{"groups": [...], "entries": [{"name", "group", "shape"}], "meta": {...}}``,
then the entries as little-endian float64, row-major, in manifest order.
"""
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from camabench.errors import FormatError, ShapeError
from camabench.ndgrad import ParameterStore

logger = logging.getLogger(__name__)

MAGIC = 'CAMA-CKPT'
VERSION = 1
HEADER = f'{MAGIC} v{VERSION}\n'.encode()

PathLike = Union[str, Path]


def save_checkpoint(store: ParameterStore, path: PathLike, meta: Optional[Mapping[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = [
        {'name': name, 'group': group, 'shape': list(store[name].shape)}
        for group, names in store.groups.items()
        for name in names
    ]
    manifest = {'groups': list(store.groups), 'entries': entries, 'meta': dict(meta or {})}
    tmp = path.with_name(path.name + '.tmp')
    with open(tmp, 'wb') as handle:
        handle.write(HEADER)
        handle.write(json.dumps(manifest).encode() + b'\n')
        for entry in entries:
            handle.write(np.ascontiguousarray(store[entry['name']], dtype='<f8').tobytes())
    os.replace(tmp, path)
    logger.debug('saved %d parameter arrays to %s', len(entries), path)
    return path


def load_checkpoint(path: PathLike) -> Tuple[ParameterStore, Dict[str, Any]]:
    """Parse a whole checkpoint; nothing is returned unless every entry is complete."""
    path = Path(path)
    with open(path, 'rb') as handle:
        raw = handle.read()
    header, _, rest = raw.partition(b'\n')
    parts = header.decode(errors='replace').split()
    if len(parts) != 2 or parts[0] != MAGIC:
        raise FormatError(f'{path}: not a checkpoint file')
    if parts[1] != f'v{VERSION}':
        raise FormatError(f'{path}: checkpoint version {parts[1]} is not supported (expected v{VERSION})')
    manifest_line, sep, payload = rest.partition(b'\n')
    if not sep:
        raise FormatError(f'{path}: truncated manifest')
    try:
        manifest = json.loads(manifest_line)
        entries = manifest['entries']
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f'{path}: unreadable manifest') from e

    sizes = [int(np.prod(entry['shape'], dtype=np.int64)) for entry in entries]
    expected = 8 * sum(sizes)
    if len(payload) != expected:
        raise FormatError(f'{path}: expected {expected} payload bytes, found {len(payload)}')
    values = np.frombuffer(payload, dtype='<f8').astype(np.float64)

    store = ParameterStore()
    offset = 0
    for entry, size in zip(entries, sizes):
        store.add(entry['name'], entry['group'], values[offset:offset + size].reshape(entry['shape']))
        offset += size
    return store, manifest.get('meta', {})


def check_compatible(target: ParameterStore, loaded: ParameterStore) -> None:
    """ShapeError naming the first entry of `target` that `loaded` lacks or shapes differently."""
    for name in target:
        if name not in loaded:
            raise ShapeError(name, target[name].shape, (), 'entry missing from checkpoint')
        if loaded[name].shape != target[name].shape:
            raise ShapeError(name, target[name].shape, loaded[name].shape, 'checkpoint entry')
        if loaded.group_of(name) != target.group_of(name):
            raise FormatError(f'Entry "{name}" belongs to group "{loaded.group_of(name)}", expected "{target.group_of(name)}"')
    extra = [name for name in loaded if name not in target]
    if extra:
        raise FormatError(f'Checkpoint holds entries the model does not know: {extra[:5]}')


def load_into(path: PathLike, template: ParameterStore) -> Tuple[ParameterStore, Dict[str, Any]]:
    loaded, meta = load_checkpoint(path)
    check_compatible(template, loaded)
    return loaded, meta


def checkpoint_roundtrip(model, path: PathLike):
    """Save `model` (anything with `.params` and `.spec`) and load it back as a new instance."""
    save_checkpoint(model.params, path)
    store, _ = load_into(path, model.params)
    return type(model)(model.spec, store)
