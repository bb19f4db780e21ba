import csv
import json
import logging
import os

import numpy as np
import torch

from utils.errors import ConfigError

logger = logging.getLogger('locality.files')

CHECKPOINT_FORMAT = 'expert-locality-checkpoint'
CHECKPOINT_VERSION = 1
CHECKPOINT_KINDS = ('moe', 'predictor')

_DTYPES = {
    'float64': torch.float64,
    'float32': torch.float32,
    'int64': torch.int64,
}


class OutputFile:
    def __init__(self, path):
        self.path = path
        self.name = self._remove_extension(path)

    def _remove_extension(self, file_path):
        filename = os.path.split(file_path)[-1]
        return ''.join(filename.split('.')[:-1])

    def exists(self):
        return os.path.exists(self.path)


def encode_tensor(tensor):
    tensor = torch.as_tensor(tensor).detach().cpu()
    dtype = str(tensor.dtype).replace('torch.', '')

    if dtype not in _DTYPES:
        raise ConfigError(f'Cannot serialize tensors of dtype {dtype}')

    return {'shape': list(tensor.shape), 'dtype': dtype, 'data': tensor.reshape(-1).tolist()}


def decode_tensor(record):
    dtype = _DTYPES[record.get('dtype', 'float64')]
    return torch.tensor(record['data'], dtype=dtype).reshape(record['shape'])


def encode_state(obj):
    """Nested optimizer/scheduler state to JSON-safe values; tensors become tagged records."""
    if isinstance(obj, torch.Tensor):
        return {'__tensor__': encode_tensor(obj)}
    elif isinstance(obj, dict):
        return {str(k): encode_state(v) for k, v in obj.items()}
    elif isinstance(obj, (list, tuple)):
        return [encode_state(v) for v in obj]
    elif isinstance(obj, np.generic):
        return obj.item()

    return obj


def decode_state(obj):
    if isinstance(obj, dict):
        if '__tensor__' in obj:
            return decode_tensor(obj['__tensor__'])

        return {k: decode_state(v) for k, v in obj.items()}
    elif isinstance(obj, list):
        return [decode_state(v) for v in obj]

    return obj


class OutputRepo:
    """An output directory holding the run's artifacts."""

    def __init__(self, base_path):
        if not base_path:
            raise ConfigError('Output directory must be set')

        self.base_path = base_path

        if not os.path.exists(self.base_path):
            os.makedirs(self.base_path)

        self.files = [OutputFile(os.path.join(self.base_path, f)) for f in sorted(os.listdir(self.base_path))]


    def create_file_path(self, filename):
        return os.path.join(self.base_path, filename)


    def add_file(self, filename):
        existing = self.find(OutputFile(self.create_file_path(filename)).name)
        if existing is not None:
            return existing

        fo = OutputFile(self.create_file_path(filename=filename))
        self.files.append(fo)

        return fo


    def find(self, name) -> object:
        return next((f for f in self.files if f.name == name), None)


    def require(self, filename):
        file_path = self.create_file_path(filename)

        if not os.path.exists(file_path):
            raise ConfigError(f'Required file {file_path} not found')

        return file_path


    def list_files(self) -> list:
        return self.files


    def write_json(self, filename, obj):
        fo = self.add_file(filename)
        logger.info(f'Saving json to {fo.path}')

        with open(fo.path, 'w', encoding='utf-8') as f:
            json.dump(obj, f, indent=4, ensure_ascii=False)

        return fo


    def read_json(self, filename):
        path = self.require(filename)
        logger.info(f'Loading json from {path}')

        with open(path, 'r', encoding='utf-8') as json_txt:
            return json.load(json_txt)


    def write_jsonl(self, filename, records):
        fo = self.add_file(filename)
        count = 0

        with open(fo.path, 'w', encoding='utf-8') as f:
            for record in records:
                f.write(json.dumps(record, ensure_ascii=False))
                f.write('\n')
                count += 1

        logger.info(f'Saved {count} records to {fo.path}')
        return fo


    def read_jsonl(self, filename):
        with open(self.require(filename), 'r', encoding='utf-8') as f:
            return [json.loads(line) for line in f if line.strip()]


    def write_csv(self, filename, rows, columns):
        fo = self.add_file(filename)

        with open(fo.path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction='ignore')
            writer.writeheader()
            writer.writerows(rows)

        logger.info(f'Saved {len(rows)} rows to {fo.path}')
        return fo


    def read_csv(self, filename):
        with open(self.require(filename), 'r', encoding='utf-8', newline='') as f:
            return list(csv.DictReader(f))


    def save_checkpoint(self, filename, kind, config, module, extra=None):
        if kind not in CHECKPOINT_KINDS:
            raise ConfigError(f'Unknown checkpoint kind {kind!r}, expected one of {CHECKPOINT_KINDS}')

        document = {
            'format': CHECKPOINT_FORMAT,
            'version': CHECKPOINT_VERSION,
            'kind': kind,
            'config': config,
            'params': {name: encode_tensor(t) for name, t in module.state_dict().items()},
            'extra': encode_state(extra or {}),
        }
        return self.write_json(filename, document)


    def load_checkpoint(self, filename, kind):
        document = self.read_json(filename)

        if document.get('format') != CHECKPOINT_FORMAT or document.get('version') != CHECKPOINT_VERSION:
            raise ConfigError(f'{filename} is not a version {CHECKPOINT_VERSION} checkpoint')

        if document['kind'] != kind:
            raise ConfigError(f'{filename} holds a {document["kind"]} checkpoint, expected {kind}')

        params = {name: decode_tensor(record) for name, record in document['params'].items()}
        return document['config'], params, decode_state(document['extra'])
