import numpy as np

# stream tags keep derived generators for different purposes independent
TAGS = {
    "data": 1,
    "public": 2,
    "partition": 3,
    "client-init": 4,
    "encoder-init": 5,
    "pretrain": 6,
    "sample-clients": 7,
    "batches": 8,
    "zo": 9,
    "probe": 10,
}


def derive_rng(seed, purpose, *keys):
    """Generator for ``purpose`` under ``seed``; extra integer keys index sub-streams."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), TAGS[purpose], *map(int, keys)]))
