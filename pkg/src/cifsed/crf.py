"""Prototype-amortized linear-chain CRF.

Emission scores are dot products between query token embeddings and label
prototypes; transition scores are Gaussian per label pair, with mean and
log-variance generated from the prototype pair and realized through
reparameterized Monte Carlo samples so gradients reach the generator.
Partition functions, token marginals, and sequence losses run in log space
and stay differentiable; Viterbi decoding is an exact numpy DP.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import O_LABEL, label_space
from .seeding import rng_from

logger = logging.getLogger(__name__)

_warned_missing: set[tuple[str, ...]] = set()


def _check_finite(name: str, tensor: torch.Tensor) -> None:
    if not torch.isfinite(tensor).all():
        raise ValueError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class LabelSpace:
    """Ordered BIO label list with index lookups."""

    labels: tuple[str, ...]

    @classmethod
    def for_classes(cls, classes: Sequence[str]) -> "LabelSpace":
        return cls(tuple(label_space(classes)))

    @cached_property
    def index_of(self) -> dict[str, int]:
        return {lab: i for i, lab in enumerate(self.labels)}

    def index(self, label: str) -> int:
        try:
            return self.index_of[label]
        except KeyError:
            raise ValueError(f"label {label!r} outside label space") from None

    def ids(self, labels: Sequence[str]) -> torch.Tensor:
        return torch.tensor([self.index(lab) for lab in labels], dtype=torch.long)

    def onehot(self, labels: Sequence[str]) -> torch.Tensor:
        out = torch.zeros(len(labels), len(self.labels), dtype=torch.float64)
        out[torch.arange(len(labels)), self.ids(labels)] = 1.0
        return out

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class PrototypeSet:
    space: LabelSpace
    vectors: torch.Tensor  # (L, H)
    missing: tuple[str, ...] = ()


def compute_prototypes(
    embeddings: Sequence[torch.Tensor],
    labels: Sequence[Sequence[str]],
    space: LabelSpace,
) -> PrototypeSet:
    """Mean embedding of all support tokens per label.

    Labels without any support token back off to the same class's B-
    prototype if present, else to the O prototype (last resort: the global
    token mean); the backoff is logged once per label set.
    """
    if not embeddings:
        raise ValueError("support set is empty")
    all_emb = torch.cat([e for e in embeddings], dim=0)
    ids = torch.cat([space.ids(labs) for labs in labels], dim=0)
    if all_emb.shape[0] != ids.shape[0]:
        raise ValueError("embedding rows and labels misaligned")
    n_labels = len(space)
    sums = torch.zeros(n_labels, all_emb.shape[1], dtype=all_emb.dtype).index_add(
        0, ids, all_emb
    )
    counts = torch.bincount(ids, minlength=n_labels)
    o_idx = space.index(O_LABEL)
    global_mean = all_emb.mean(dim=0)

    rows: list[torch.Tensor] = []
    missing: list[str] = []
    for li, lab in enumerate(space.labels):
        if counts[li] > 0:
            rows.append(sums[li] / counts[li])
            continue
        missing.append(lab)
        fallback = None
        if lab.startswith("I-"):
            b_idx = space.index_of.get("B-" + lab[2:])
            if b_idx is not None and counts[b_idx] > 0:
                fallback = sums[b_idx] / counts[b_idx]
        if fallback is None:
            fallback = sums[o_idx] / counts[o_idx] if counts[o_idx] > 0 else global_mean
        rows.append(fallback)
    if missing:
        key = tuple(missing)
        if key not in _warned_missing:
            _warned_missing.add(key)
            logger.warning(
                "no support tokens for labels %s; backing off to B-/O prototypes",
                ", ".join(missing),
            )
    vectors = torch.stack(rows, dim=0)
    _check_finite("prototypes", vectors)
    return PrototypeSet(space=space, vectors=vectors, missing=tuple(missing))


def emission_scores(query_embeddings: torch.Tensor, prototypes: PrototypeSet) -> torch.Tensor:
    """Dot-product similarity between each query token and each prototype."""
    if query_embeddings.shape[1] != prototypes.vectors.shape[1]:
        raise ValueError("embedding width does not match prototype width")
    return query_embeddings @ prototypes.vectors.T


class TransitionGenerator(nn.Module):
    """Maps an ordered prototype pair to the mean and log-variance of the
    Gaussian transition score for that label pair."""

    def __init__(self, hidden_size: int, seed: int):
        super().__init__()
        self.hidden_size = hidden_size
        rng = rng_from(seed, "transition-init")
        h = hidden_size
        self.w1 = nn.Parameter(
            torch.from_numpy(rng.normal(0.0, 1.0 / np.sqrt(2 * h), size=(2 * h, h)))
        )
        self.b1 = nn.Parameter(torch.zeros(h, dtype=torch.float64))
        self.w2 = nn.Parameter(
            torch.from_numpy(rng.normal(0.0, 0.1 / np.sqrt(h), size=(h, 2)))
        )
        # start with small transition variance so early training is stable
        self.b2 = nn.Parameter(torch.tensor([0.0, -2.0], dtype=torch.float64))

    def forward(self, prototypes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        n_labels = prototypes.shape[0]
        a = prototypes[:, None, :].expand(n_labels, n_labels, -1)
        b = prototypes[None, :, :].expand(n_labels, n_labels, -1)
        hidden = torch.tanh(torch.cat([a, b], dim=2) @ self.w1 + self.b1)
        out = hidden @ self.w2 + self.b2
        return out[..., 0], out[..., 1]


@dataclass
class TransitionSamples:
    """Reparameterized Monte Carlo draws of the transition score matrix."""

    matrices: torch.Tensor  # (R, L, L), graph-connected to mu / log_sigma
    noise: torch.Tensor  # (R, L, L) standard normal record


def transitions_from_noise(
    mu: torch.Tensor, log_sigma: torch.Tensor, noise: torch.Tensor
) -> torch.Tensor:
    """Reparameterization: T = mu + exp(log_sigma) * eps."""
    return mu + torch.exp(log_sigma) * noise


def sample_transitions(
    mu: torch.Tensor,
    log_sigma: torch.Tensor,
    sample_count: int,
    rng: np.random.Generator,
) -> TransitionSamples:
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    _check_finite("transition mean", mu)
    _check_finite("transition log-variance", log_sigma)
    eps = torch.from_numpy(
        rng.standard_normal((sample_count, *mu.shape)).astype(np.float64)
    )
    return TransitionSamples(
        matrices=transitions_from_noise(mu, log_sigma, eps), noise=eps
    )


def _as_batched(transitions: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if transitions.dim() == 2:
        return transitions[None], True
    if transitions.dim() == 3:
        return transitions, False
    raise ValueError("transitions must be (L, L) or (R, L, L)")


def forward_log_partition(
    emissions: torch.Tensor, transitions: torch.Tensor
) -> torch.Tensor:
    """log sum over all label paths of exp(path score), by the forward
    recursion in log space. Accepts one (L, L) matrix or a batch (R, L, L)."""
    _check_finite("emissions", emissions)
    _check_finite("transitions", transitions)
    batch, single = _as_batched(transitions)
    n = emissions.shape[0]
    alpha = emissions[0][None, :].expand(batch.shape[0], -1)
    for t in range(1, n):
        alpha = torch.logsumexp(alpha[:, :, None] + batch, dim=1) + emissions[t][None, :]
    out = torch.logsumexp(alpha, dim=1)
    return out[0] if single else out


def gold_path_score(
    emissions: torch.Tensor, transitions: torch.Tensor, gold_ids: torch.Tensor
) -> torch.Tensor:
    batch, single = _as_batched(transitions)
    n = emissions.shape[0]
    em = emissions[torch.arange(n), gold_ids].sum()
    tr = batch[:, gold_ids[:-1], gold_ids[1:]].sum(dim=1)
    out = em + tr
    return out[0] if single else out


def sequence_nll(
    emissions: torch.Tensor, transitions: torch.Tensor, gold_ids: torch.Tensor
) -> torch.Tensor:
    """Negative log-likelihood of the gold path, averaged over transition
    samples (the Monte Carlo approximation of the integral)."""
    if gold_ids.min() < 0 or gold_ids.max() >= emissions.shape[1]:
        raise ValueError("gold labels outside label space")
    log_z = forward_log_partition(emissions, transitions)
    score = gold_path_score(emissions, transitions, gold_ids)
    return (log_z - score).mean()


def token_marginals(emissions: torch.Tensor, transitions: torch.Tensor) -> torch.Tensor:
    """Per-token posterior over labels from forward-backward, averaged over
    the transition samples; each row sums to one."""
    _check_finite("emissions", emissions)
    _check_finite("transitions", transitions)
    batch, _ = _as_batched(transitions)
    n, n_labels = emissions.shape
    r = batch.shape[0]

    alphas = [emissions[0][None, :].expand(r, n_labels)]
    for t in range(1, n):
        alphas.append(
            torch.logsumexp(alphas[-1][:, :, None] + batch, dim=1) + emissions[t][None, :]
        )
    betas = [torch.zeros(r, n_labels, dtype=emissions.dtype)] * n
    betas = list(betas)
    for t in range(n - 2, -1, -1):
        incoming = batch + (emissions[t + 1][None, :] + betas[t + 1])[:, None, :]
        betas[t] = torch.logsumexp(incoming, dim=2)
    log_z = torch.logsumexp(alphas[-1], dim=1)  # (R,)
    per_sample = torch.stack(
        [alphas[t] + betas[t] - log_z[:, None] for t in range(n)], dim=0
    )  # (n, R, L)
    return torch.exp(per_sample).mean(dim=1)


def viterbi_decode(emissions: torch.Tensor, transitions: torch.Tensor) -> list[int]:
    """Highest-scoring label path; ties break toward the lower label index
    at every backpointer, so decoding is deterministic."""
    _check_finite("emissions", emissions)
    _check_finite("transitions", transitions)
    if transitions.dim() != 2:
        raise ValueError("viterbi decoding uses a single transition matrix")
    e = emissions.detach().cpu().numpy()
    t_mat = transitions.detach().cpu().numpy()
    n, n_labels = e.shape
    delta = e[0].copy()
    back = np.zeros((n, n_labels), dtype=np.int64)
    for t in range(1, n):
        scores = delta[:, None] + t_mat  # (prev, cur)
        back[t] = np.argmax(scores, axis=0)
        delta = scores[back[t], np.arange(n_labels)] + e[t]
    best = int(np.argmax(delta))
    path = [best]
    for t in range(n - 1, 0, -1):
        best = int(back[t][best])
        path.append(best)
    path.reverse()
    return path


def path_score(
    emissions: torch.Tensor, transitions: torch.Tensor, path: Sequence[int]
) -> float:
    """Score of an explicit label path under one transition matrix."""
    ids = torch.tensor(list(path), dtype=torch.long)
    return float(gold_path_score(emissions, transitions, ids))
