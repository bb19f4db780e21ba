import logging
from collections import Counter

from commands.pipeline import DATASET_FILE
from utils.data import generate_dataset, split_dataset

logger = logging.getLogger('locality.commands')


def cmd_gen_data(cfg, repo):
    sequences = generate_dataset(cfg.data)
    train_set, val_set = split_dataset(sequences, val_fraction=cfg.val_fraction)
    repo.write_jsonl(DATASET_FILE, (s.to_record() for s in sequences))

    topics = Counter(s.topic for s in sequences)
    summary = {
        'sequences': len(sequences),
        'train': len(train_set),
        'val': len(val_set),
        'topics': {str(k): v for k, v in sorted(topics.items())},
    }
    print(f'Wrote {len(sequences)} sequences ({len(train_set)} train / {len(val_set)} val) '
          f'to {repo.create_file_path(DATASET_FILE)}')
    return summary
