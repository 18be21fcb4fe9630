"""Synthetic paired image/text data with class-prototype structure.

Each class owns an image prototype vector and a short sequence of token
prototype vectors derived from it; a pair is (prototype + noise, token
prototypes + noise) from the same class. Labels exist on the generation
side only: evaluation uses them to score predictions, and the supervised
pretraining phase may consume them, but the contrastive trainer never sees
them (the pairing itself is the supervision).

Text enters the models as token sequences [n, n_tokens, dim] that are
mean-pooled to single vectors before the text tower; prompts for zero-shot
scoring are the noiseless token prototypes themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ShapeError

N_TOKENS = 4
TOKEN_SPREAD = 0.25  # scale of the fixed per-token offsets around the class prototype


def mean_pool(tokens: np.ndarray) -> np.ndarray:
    """[n, T, d] token sequences -> [n, d] averaged vectors."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 3:
        raise ShapeError(f"token array must be [n, T, d], got {tokens.shape}")
    return tokens.mean(axis=1)


@dataclass
class SyntheticPairSet:
    num_classes: int
    images: np.ndarray        # [m, dim]
    tokens: np.ndarray        # [m, T, dim]
    labels: np.ndarray        # [m]; generation-side only
    noise: float
    seed: int
    image_protos: np.ndarray  # [C, dim]
    token_protos: np.ndarray  # [C, T, dim]

    @property
    def size(self) -> int:
        return self.images.shape[0]

    @property
    def input_dim(self) -> int:
        return self.images.shape[1]

    def pooled_texts(self) -> np.ndarray:
        return mean_pool(self.tokens)

    def prompts(self) -> np.ndarray:
        """Noiseless class token sequences, the zero-shot candidates."""
        return self.token_protos.copy()

    def pooled_prompts(self) -> np.ndarray:
        return mean_pool(self.token_protos)

    def fresh_pairs(self, n: int, stream: int):
        """New (images, tokens, labels) from the same prototypes.

        stream selects an independent draw; the dataset itself used stream
        0, so pass >= 1 for held-out splits.
        """
        rng = nm.Rng(self.seed).split("pairs", stream)
        labels = np.arange(n) % self.num_classes
        images, tokens = _draw_pairs(rng, self.image_protos, self.token_protos,
                                     labels, self.noise)
        return images, tokens, labels

    def save(self, path: str):
        np.savez(
            path,
            images=self.images,
            tokens=self.tokens,
            labels=self.labels,
            image_protos=self.image_protos,
            token_protos=self.token_protos,
            meta=np.array([float(self.num_classes), self.noise,
                           float(self.seed)], dtype=np.float64),
        )

    @classmethod
    def load(cls, path: str) -> "SyntheticPairSet":
        with np.load(path, allow_pickle=False) as z:
            meta = z["meta"]
            return cls(
                num_classes=int(meta[0]),
                images=z["images"],
                tokens=z["tokens"],
                labels=z["labels"],
                noise=float(meta[1]),
                seed=int(meta[2]),
                image_protos=z["image_protos"],
                token_protos=z["token_protos"],
            )


def _draw_pairs(rng: nm.Rng, image_protos: np.ndarray, token_protos: np.ndarray,
                labels: np.ndarray, noise: float):
    n = labels.shape[0]
    dim = image_protos.shape[1]
    t = token_protos.shape[1]
    images = image_protos[labels] + noise * rng.split("img").normal((n, dim))
    tokens = token_protos[labels] + noise * rng.split("txt").normal((n, t, dim))
    return images, tokens


def gen_data(classes: int, size: int, input_dim: int, noise: float,
             seed: int, n_tokens: int = N_TOKENS) -> SyntheticPairSet:
    """Balanced class-prototype pairs; bitwise deterministic in seed."""
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if size < classes:
        raise ConfigError(f"size {size} < classes {classes}")
    if noise < 0.0:
        raise ConfigError(f"noise must be >= 0, got {noise}")
    if input_dim < 1 or n_tokens < 1:
        raise ConfigError("input_dim and n_tokens must be >= 1")
    rng = nm.Rng(seed)
    image_protos = rng.split("protos", "img").normal((classes, input_dim))
    token_protos = (image_protos[:, None, :]
                    + TOKEN_SPREAD * rng.split("protos", "txt").normal(
                        (classes, n_tokens, input_dim)))
    labels = np.arange(size) % classes
    images, tokens = _draw_pairs(rng.split("pairs", 0), image_protos,
                                 token_protos, labels, noise)
    return SyntheticPairSet(
        num_classes=classes,
        images=images,
        tokens=tokens,
        labels=labels,
        noise=noise,
        seed=seed,
        image_protos=image_protos,
        token_protos=token_protos,
    )


class GapSource:
    """Adapter feeding the gap probe: iid class draws, pooled text vectors."""

    def __init__(self, dataset: SyntheticPairSet):
        self._d = dataset

    def sample_pairs(self, rng: nm.Rng, n: int):
        labels = rng.split("labels").integers(0, self._d.num_classes, n)
        images, tokens = _draw_pairs(rng.split("pair"), self._d.image_protos,
                                     self._d.token_protos, labels,
                                     self._d.noise)
        return images, mean_pool(tokens)

    def sample_texts(self, rng: nm.Rng, n: int):
        labels = rng.split("labels").integers(0, self._d.num_classes, n)
        _, tokens = _draw_pairs(rng.split("text"), self._d.image_protos,
                                self._d.token_protos, labels, self._d.noise)
        return mean_pool(tokens)


def as_gap_source(dataset: SyntheticPairSet) -> GapSource:
    return GapSource(dataset)
