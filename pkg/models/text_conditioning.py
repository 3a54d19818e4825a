"""
Text embedding providers and classifier-free-guidance conditioning dropout
"""

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

logger = logging.getLogger(__name__)

MAX_LEN = 64
DEFAULT_DROPOUT_P = 0.1

# Final hidden-state width per provider
PROVIDER_DIMS: Dict[str, int] = {
    "hash": 64,
    "flan-t5-small": 512,
    "flan-t5-base": 768,
    "flan-t5-large": 1024,
}


class TextProviderUnavailable(RuntimeError):
    """Pretrained provider cannot serve an embedding"""


@dataclass
class TextEmbedding:
    tokens: np.ndarray
    provider_id: str

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        if self.tokens.ndim != 2:
            raise ValueError(f"Text embedding must be L×D, got shape {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError(f"Text embedding from '{self.provider_id}' has non-finite values")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


def _token_seed(token: str, seed: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{token}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _caption_key(caption: str) -> str:
    return hashlib.sha256(caption.encode("utf-8")).hexdigest()


def _truncate(tokens: List[str], max_len: int, provider_id: str) -> List[str]:
    if len(tokens) > max_len:
        logger.warning(f"Caption has {len(tokens)} tokens, truncating to {max_len} ({provider_id})")
        return tokens[:max_len]
    return tokens


class HashTextProvider:
    """Hermetic provider: each lowercase token maps to a fixed seeded vector"""

    def __init__(self, dim: int = PROVIDER_DIMS["hash"], seed: int = 0, max_len: int = MAX_LEN):
        self.dim = dim
        self.seed = seed
        self.max_len = max_len
        self.provider_id = "hash"
        self._token_cache: Dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        if token not in self._token_cache:
            rng = np.random.Generator(np.random.PCG64(_token_seed(token, self.seed)))
            self._token_cache[token] = (rng.standard_normal(self.dim) / np.sqrt(self.dim)).astype(np.float32)
        return self._token_cache[token]

    def __call__(self, caption: str) -> TextEmbedding:
        tokens = _truncate(caption.lower().split(), self.max_len, self.provider_id)
        return TextEmbedding(np.stack([self._token_vector(t) for t in tokens]), self.provider_id)


class CachedTextProvider:
    """
    Serves pretrained final hidden states from an embedding cache directory

    The cache maps sha256(caption) -> '<key>.npy' holding an L×D array, so
    training runs need no live language model.
    """

    def __init__(self, cache_dir: Union[str, Path], provider_id: str = "flan-t5-small", max_len: int = MAX_LEN):
        if provider_id not in PROVIDER_DIMS or provider_id == "hash":
            raise ValueError(f"Unknown pretrained provider '{provider_id}'")
        self.cache_dir = Path(cache_dir)
        self.provider_id = provider_id
        self.dim = PROVIDER_DIMS[provider_id]
        self.max_len = max_len
        if not self.cache_dir.is_dir():
            raise TextProviderUnavailable(
                f"Embedding cache {self.cache_dir} not found for '{provider_id}'; "
                f"use text_provider='hash' for hermetic runs"
            )

    def __call__(self, caption: str) -> TextEmbedding:
        path = self.cache_dir / f"{_caption_key(caption)}.npy"
        if not path.exists():
            raise TextProviderUnavailable(
                f"No cached '{self.provider_id}' embedding for caption {caption!r} in {self.cache_dir}; "
                f"fall back to text_provider='hash'"
            )
        tokens = np.load(path)
        if tokens.ndim != 2 or tokens.shape[1] != self.dim:
            raise TextProviderUnavailable(
                f"Cached embedding {path.name} has shape {tokens.shape}, expected L×{self.dim}"
            )
        if tokens.shape[0] > self.max_len:
            logger.warning(f"Cached embedding has {tokens.shape[0]} tokens, truncating to {self.max_len}")
            tokens = tokens[: self.max_len]
        return TextEmbedding(tokens, self.provider_id)


def write_cached_embedding(cache_dir: Union[str, Path], caption: str, tokens: np.ndarray) -> Path:
    """Store one L×D hidden-state sequence in an embedding cache"""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{_caption_key(caption)}.npy"
    np.save(path, np.asarray(tokens, dtype=np.float32))
    return path


def get_text_provider(provider_id: str = "hash", cache_dir: Optional[Union[str, Path]] = None,
                      dim: Optional[int] = None, seed: int = 0):
    """
    Build a text provider from its config id

    Args:
        provider_id (str): 'hash' or a cached Flan-T5 variant
        cache_dir: Embedding cache for pretrained providers
        dim (int): Embedding width for the hash provider
        seed (int): Hash provider seed

    Returns:
        Callable[[str], TextEmbedding]: Provider
    """
    if provider_id == "hash":
        return HashTextProvider(dim=dim or PROVIDER_DIMS["hash"], seed=seed)
    if cache_dir is None:
        raise TextProviderUnavailable(
            f"Provider '{provider_id}' needs an embedding cache directory; fall back to 'hash'"
        )
    return CachedTextProvider(cache_dir, provider_id)


def embed(caption: str, provider) -> TextEmbedding:
    """
    Embed a caption with a loaded provider

    Args:
        caption (str): Non-empty caption
        provider: Provider returned by get_text_provider

    Returns:
        TextEmbedding: L×D hidden-state sequence
    """
    if not isinstance(caption, str) or not caption.strip():
        raise ValueError("Caption must be a non-empty string")
    return provider(caption)


def null_embedding(dim: int, length: int = 1) -> TextEmbedding:
    """All-zero sequence standing for 'no prompt'"""
    return TextEmbedding(np.zeros((length, dim), dtype=np.float32), "null")


def cfg_dropout(emb: TextEmbedding, p: float, rng: np.random.Generator) -> TextEmbedding:
    """
    Replace the embedding with the null embedding with probability p

    Args:
        emb (TextEmbedding): Caption embedding
        p (float): Drop probability in [0,1]
        rng (np.random.Generator): Random stream

    Returns:
        TextEmbedding: emb or the null embedding
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"Dropout probability must lie in [0,1], got {p}")
    if rng.random() < p:
        return null_embedding(emb.dim, emb.length)
    return emb


def stack_embeddings(embeddings: Sequence[TextEmbedding]) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Pad a batch of sequences to the longest one

    Returns:
        Tuple[torch.Tensor, torch.Tensor]: tokens B×L×D and padding mask B×L (True = padding)
    """
    if not embeddings:
        raise ValueError("Empty embedding batch")
    dims = {e.dim for e in embeddings}
    if len(dims) != 1:
        raise ValueError(f"Mixed embedding widths in batch: {sorted(dims)}")
    max_len = max(e.length for e in embeddings)
    dim = dims.pop()

    tokens = np.zeros((len(embeddings), max_len, dim), dtype=np.float32)
    mask = np.ones((len(embeddings), max_len), dtype=bool)
    for i, e in enumerate(embeddings):
        tokens[i, : e.length] = e.tokens
        mask[i, : e.length] = False
    return torch.from_numpy(tokens), torch.from_numpy(mask)
