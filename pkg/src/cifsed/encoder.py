"""Token sequence encoders.

The workhorse is a small hash-bucketed embedding encoder whose rows are
mixed with a mean-pooled context vector, giving every token a context
dependent representation without a pretrained backbone. Pretrained
backends plug in behind the same ``SequenceEncoder`` interface.
"""

from __future__ import annotations

import abc
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .seeding import rng_from
from .serialize import state_from_payload, state_to_payload

# Reserved vocabulary ids for prompt control tokens; hashed tokens start above.
RESERVED_IDS: dict[str, int] = {"[mask]": 1, "[SEP]": 2, "[mask*]": 3}
NUM_RESERVED = 8


@dataclass(frozen=True)
class EncoderConfig:
    hidden_size: int = 16
    vocab_size: int = 4096
    max_len: int = 128

    def __post_init__(self) -> None:
        if self.hidden_size <= 0 or self.vocab_size <= NUM_RESERVED or self.max_len <= 0:
            raise ValueError("encoder config values must be positive (vocab above reserved range)")

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> "EncoderConfig":
        """Named profiles: ``toy`` (H=16) for desk-scale runs, ``full`` (H=768)
        matching the dimensionality of a pretrained-backbone deployment."""
        if profile == "toy":
            base = {"hidden_size": 16, "vocab_size": 4096, "max_len": 128}
        elif profile == "full":
            base = {"hidden_size": 768, "vocab_size": 8192, "max_len": 128}
        else:
            raise ValueError(f"unknown encoder profile {profile!r}")
        base.update(overrides)
        return cls(**base)


class SequenceEncoder(abc.ABC):
    """Interface for pluggable encoders: tokens in, one H-dim row per token
    out, plus a parameter handle for fine-tuning. Concrete pretrained
    backends (e.g. a transformer adapter) implement this outside the core
    package."""

    @property
    @abc.abstractmethod
    def hidden_size(self) -> int: ...

    @abc.abstractmethod
    def encode(self, tokens: Sequence[str]) -> torch.Tensor:
        """Return a (len(tokens), hidden_size) matrix."""

    @abc.abstractmethod
    def trainable_parameters(self) -> list[torch.Tensor]: ...


def token_id(token: str, vocab_size: int) -> int:
    """Stable hash bucket for a token; reserved control tokens get fixed ids."""
    if token in RESERVED_IDS:
        return RESERVED_IDS[token]
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    bucket = int.from_bytes(digest[:8], "big") % (vocab_size - NUM_RESERVED)
    return NUM_RESERVED + bucket


class HashedContextEncoder(nn.Module, SequenceEncoder):
    """Hashed word embeddings with a mean-pooled context mixer.

    Each output row is ``e_j + tanh([e_j ; mean(e)] @ W + b)``: the raw
    embedding plus a bounded correction computed from the token together
    with the sequence context, so emissions downstream are not purely
    lexical. With zero mixer weights the output equals the raw embeddings.
    """

    def __init__(self, config: EncoderConfig, seed: int):
        super().__init__()
        self.config = config
        self.seed = seed
        h = config.hidden_size
        rng = rng_from(seed, "encoder-init")
        scale = 1.0 / np.sqrt(h)
        self.embedding = nn.Parameter(
            torch.from_numpy(rng.normal(0.0, scale, size=(config.vocab_size, h)))
        )
        self.mix_weight = nn.Parameter(
            torch.from_numpy(rng.normal(0.0, scale / 2.0, size=(2 * h, h)))
        )
        self.mix_bias = nn.Parameter(torch.zeros(h, dtype=torch.float64))

    @property
    def hidden_size(self) -> int:
        return self.config.hidden_size

    def token_ids(self, tokens: Sequence[str]) -> torch.Tensor:
        return torch.tensor(
            [token_id(t, self.config.vocab_size) for t in tokens], dtype=torch.long
        )

    def encode(self, tokens: Sequence[str]) -> torch.Tensor:
        if len(tokens) == 0:
            raise ValueError("cannot encode an empty token sequence")
        if len(tokens) > self.config.max_len:
            raise ValueError(
                f"sequence of {len(tokens)} tokens exceeds max length "
                f"{self.config.max_len}; refusing to truncate"
            )
        e = self.embedding[self.token_ids(tokens)]
        context = e.mean(dim=0, keepdim=True).expand(e.shape[0], -1)
        mixed = torch.tanh(torch.cat([e, context], dim=1) @ self.mix_weight + self.mix_bias)
        return e + mixed

    forward = encode

    def trainable_parameters(self) -> list[torch.Tensor]:
        return list(self.parameters())

    def save(self, path: str | Path) -> None:
        payload = {
            "format_version": 1,
            "config": asdict(self.config),
            "seed": self.seed,
            "state": state_to_payload(dict(self.state_dict())),
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "HashedContextEncoder":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        enc = cls(EncoderConfig(**payload["config"]), seed=payload["seed"])
        enc.load_state_dict(state_from_payload(payload["state"]))
        return enc


def init_encoder(config: EncoderConfig, seed: int) -> HashedContextEncoder:
    """Reproducible encoder construction; identical seeds give identical params."""
    return HashedContextEncoder(config, seed)
