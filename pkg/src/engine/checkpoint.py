"""Checkpoint directories: ``index.json`` plus a raw ``tensors.bin``.

Each record in the index names one array with its shape, dtype and byte
range in ``tensors.bin``. Arrays are stored little-endian.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from src.utils.config_utils import save_json
from src.utils.errors import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
INDEX_FILE = 'index.json'
TENSOR_FILE = 'tensors.bin'
_DTYPES = {'float32': '<f4', 'float64': '<f8'}


@dataclass
class Checkpoint:
    params: dict
    first_moments: dict = field(default_factory=dict)
    second_moments: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_checkpoint(checkpoint, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    offset = 0
    groups = (('param', checkpoint.params), ('adam_m', checkpoint.first_moments),
              ('adam_v', checkpoint.second_moments))
    with open(directory / TENSOR_FILE, 'wb') as f:
        for kind, arrays in groups:
            for name in sorted(arrays):
                array = np.asarray(arrays[name])
                dtype = array.dtype.name
                if dtype not in _DTYPES:
                    raise CheckpointError(f"cannot store {name} with dtype {dtype}")
                blob = array.astype(_DTYPES[dtype]).tobytes()
                f.write(blob)
                records.append({'kind': kind, 'name': name, 'shape': list(array.shape),
                                'dtype': dtype, 'offset': offset, 'nbytes': len(blob)})
                offset += len(blob)
    save_json({'format_version': CHECKPOINT_FORMAT_VERSION, 'records': records, 'meta': checkpoint.meta},
              directory / INDEX_FILE)
    logger.info("Wrote checkpoint %s (%d records)", directory, len(records))


def load_checkpoint(directory):
    directory = Path(directory)
    try:
        with open(directory / INDEX_FILE, 'r') as f:
            index = json.load(f)
        with open(directory / TENSOR_FILE, 'rb') as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise CheckpointError(f"incomplete checkpoint in {directory}: {e.filename}")
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint index in {directory}: {e}")
    if index.get('format_version') != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {index.get('format_version')}")

    checkpoint = Checkpoint(params={}, meta=index.get('meta', {}))
    targets = {'param': checkpoint.params, 'adam_m': checkpoint.first_moments,
               'adam_v': checkpoint.second_moments}
    for record in index['records']:
        start, nbytes = record['offset'], record['nbytes']
        if start + nbytes > len(blob):
            raise CheckpointError(f"record {record['name']} runs past the end of {TENSOR_FILE}")
        array = np.frombuffer(blob, dtype=_DTYPES[record['dtype']], count=nbytes // np.dtype(
            _DTYPES[record['dtype']]).itemsize, offset=start)
        targets[record['kind']][record['name']] = array.astype(record['dtype']).reshape(record['shape'])
    return checkpoint
