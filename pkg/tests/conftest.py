import numpy as np
import pytest

from pinf.model import ModelConfig
from pinf.rasterizer import BoundingBox, FixationRecord
from pinf.trainer import DatasetSplit

TINY_MODEL = ModelConfig(image_size=16, channels=(2, 3), latent_dim=4, label_count=2, hidden=8)


def make_tiny_split(n=24, n_annotated=6, size=16, k=2, seed=0) -> DatasetSplit:
    """Small random dataset with a weak planted brightness cue per class."""
    rng = np.random.default_rng(seed)
    images = rng.random((n, 1, size, size)) * 0.4 + 0.3
    labels = (rng.random((n, k)) < 0.5).astype(float)
    for i in range(n):
        for c in range(k):
            if labels[i, c]:
                r = 2 + 5 * c
                images[i, 0, r : r + 4, r : r + 4] += 0.3
    images = np.clip(images, 0.0, 1.0)
    n_val = max(2, n // 6)
    n_train = n - 2 * n_val
    fixations = {}
    boxes = {}
    for i in range(n_annotated):
        recs = []
        bxs = []
        for c in range(k):
            if labels[i, c]:
                r = 2 + 5 * c
                recs.append(FixationRecord(r + 2, r + 2, 0.4))
                bxs.append(BoundingBox(r, r, r + 3, r + 3, c))
        recs.append(FixationRecord(int(rng.integers(0, size)), int(rng.integers(0, size)), 0.15))
        fixations[i] = recs
        boxes[i] = bxs
    return DatasetSplit(
        images=images,
        labels=labels,
        train_ids=np.arange(0, n_train),
        val_ids=np.arange(n_train, n_train + n_val),
        test_ids=np.arange(n_train + n_val, n),
        annotated_ids=np.arange(0, n_annotated),
        fixations=fixations,
        boxes=boxes,
    )


@pytest.fixture
def tiny_split():
    return make_tiny_split()
