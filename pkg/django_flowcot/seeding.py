import hashlib

import torch

STREAMS = ('init', 'retrospective', 'data_order', 'task')


def derive_seed(root, stream):
    """Split the root seed into an independent, reproducible seed per named stream."""
    digest = hashlib.sha256(u'{root}:{stream}'.format(root=root, stream=stream).encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little') & (2 ** 63 - 1)


def make_generator(root, stream):
    return torch.Generator().manual_seed(derive_seed(root, stream))
