"""In-memory torch dataset over a synthesized (or converted) PNG+JSON dataset."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch.utils.data import Dataset

from .encoding import EncodingParams, encode_targets
from .landmarks import AnnotatedImage, SkeletonGraph, mirror_landmarks
from .phantom import DatasetManifest, load_sample


def load_split(root: Path, split: str, limit: int = 0) -> list[AnnotatedImage]:
    manifest = DatasetManifest.load(root)
    ids = {"train": manifest.train, "val": manifest.val}[split]
    if limit:
        ids = ids[:limit]
    return [load_sample(root, sid) for sid in ids]


class LandmarkDataset(Dataset):
    """Images plus encoded targets, with on-the-fly flip and noise augmentation.

    Targets for the original and mirrored orientation are encoded once up
    front; augmentation never adds samples, it only alters what each index
    returns on a given draw.
    """

    def __init__(self, samples: list[AnnotatedImage], skeleton: SkeletonGraph, enc: EncodingParams,
                 augment: bool = False, flip_prob: float = 0.5, noise_max: float = 0.05, seed: int = 0):
        self.samples = samples
        self.augment = augment
        self.flip_prob = flip_prob
        self.noise_max = noise_max
        self.rng = np.random.default_rng(seed)
        self.items = []
        for a in samples:
            variants = [a, mirror_landmarks(a)] if augment and flip_prob > 0 else [a]
            encoded = []
            for v in variants:
                t = encode_targets(v, skeleton, enc)
                encoded.append((np.ascontiguousarray(v.pixels, dtype=np.float32), t.heatmaps, t.paf, t.mask))
            self.items.append(encoded)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        variants = self.items[idx]
        k = 0
        if self.augment and len(variants) > 1 and self.rng.random() < self.flip_prob:
            k = 1
        img, hm, paf, mask = variants[k]
        if self.augment and self.noise_max > 0:
            sigma = self.rng.uniform(0.0, self.noise_max)
            img = np.clip(img + self.rng.normal(0.0, sigma, img.shape).astype(np.float32), 0.0, 1.0)
        return (torch.from_numpy(np.ascontiguousarray(img))[None], torch.from_numpy(hm),
                torch.from_numpy(paf), torch.from_numpy(mask))
