from dataclasses import dataclass

import numpy as np


@dataclass
class Dataset:
    """Features plus integer class labels (classification) or real targets."""

    X: np.ndarray
    y: np.ndarray
    n_classes: int = 0  # 0 means regression
    split: str = "train"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.n_classes:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
                raise ValueError(f"labels outside [0, {self.n_classes})")
        else:
            self.y = np.asarray(self.y, dtype=np.float64)
        if len(self.X) != len(self.y):
            raise ValueError("features and labels differ in length")

    def __len__(self):
        return len(self.y)

    @property
    def is_classification(self):
        return self.n_classes > 0

    def subset(self, idx, split=None):
        return Dataset(self.X[idx], self.y[idx], self.n_classes, split or self.split)

    def split_off(self, fraction, seed):
        """Deterministically split into (kept, held_out) with ``fraction`` held out.

        The permutation depends only on (seed, n).
        """
        if not 0.0 < fraction < 1.0:
            raise ValueError("split fraction must lie in (0, 1)")
        n = len(self)
        perm = split_permutation(seed, n)
        n_out = max(1, int(round(fraction * n)))
        return self.subset(np.sort(perm[n_out:]), "train"), self.subset(np.sort(perm[:n_out]), "val")


def split_permutation(seed, n):
    gen = np.random.Generator(np.random.Philox(key=(int(seed) & 0xFFFFFFFFFFFFFFFF) | (n << 64)))
    return gen.permutation(n)
