"""Zero-padded, masked batches of variable-length proteins."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PaddedBatch:
    features: np.ndarray  # [B, channels, L_max], zero beyond each protein's length
    mask: np.ndarray  # [B, L_max] bool, prefix of True
    labels: np.ndarray  # [B] int, -1 where unknown
    ids: list

    @property
    def lengths(self):
        return self.mask.sum(axis=1)

    def __len__(self):
        return len(self.ids)


def pad_batch(proteins, length=None):
    """Stack proteins into one batch padded at the tail to ``length`` (default: longest)."""
    proteins = list(proteins)
    if not proteins:
        raise ValueError("cannot pad an empty batch")
    lengths = [p.features.shape[0] for p in proteins]
    width = max(lengths) if length is None else length
    if width < max(lengths):
        raise ValueError(f"pad length {width} shorter than longest member {max(lengths)}")
    channels = proteins[0].features.shape[1]
    feats = np.zeros((len(proteins), channels, width))
    mask = np.zeros((len(proteins), width), dtype=bool)
    for i, (p, n) in enumerate(zip(proteins, lengths)):
        if p.features.shape[1] != channels:
            raise ValueError(f"protein {p.id!r} has {p.features.shape[1]} channels, expected {channels}")
        feats[i, :, :n] = p.features.T
        mask[i, :n] = True
    labels = np.array([-1 if p.label is None else p.label for p in proteins], dtype=np.int64)
    return PaddedBatch(feats, mask, labels, [p.id for p in proteins])
