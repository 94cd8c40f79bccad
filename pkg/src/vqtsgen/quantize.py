"""Codebook storage, nearest-code quantization, and stochastic quantization.

Latent maps are arrays shaped [..., d, N]: d-dimensional code vectors at N
positions (leading batch dims optional). Token arrays drop the d axis.

Distances are evaluated in float64 via explicit differences so the argmin
decision agrees bit-for-bit with a brute-force scan of the codebook.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class Codebook:
    """K learnable d-dimensional code vectors with EMA update state."""

    def __init__(self, num_codes: int, dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        if num_codes < 1 or dim < 1:
            raise ValueError("codebook needs num_codes >= 1 and dim >= 1")
        self.num_codes = num_codes
        self.dim = dim
        self.codes = rng.normal(0.0, 0.5, size=(num_codes, dim)).astype(dtype)
        self.ema_counts = np.ones(num_codes, dtype=np.float64)
        self.ema_sums = self.codes.astype(np.float64).copy()
        self.usage = np.zeros(num_codes, dtype=np.int64)

    # -- geometry -----------------------------------------------------------
    # Rows layout [..., N, d] is the internal primitive; the column-layout
    # [..., d, N] API wraps it with a moveaxis.

    def _flat_rows(self, z_rows: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
        z_rows = np.asarray(z_rows)
        if z_rows.shape[-1] != self.dim:
            raise ValueError(f"latent dim {z_rows.shape[-1]} != codebook dim {self.dim}")
        lead = z_rows.shape[:-1]
        return z_rows.reshape(-1, self.dim).astype(np.float64), lead

    def _sq_distances(self, flat: np.ndarray) -> np.ndarray:
        diff = flat[:, None, :] - self.codes.astype(np.float64)[None, :, :]
        return np.einsum("mkd,mkd->mk", diff, diff)

    def quantize_rows(self, z_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        flat, lead = self._flat_rows(z_rows)
        tokens = np.argmin(self._sq_distances(flat), axis=1)
        zq = self.codes[tokens].reshape(*lead, self.dim)
        return zq.astype(np.asarray(z_rows).dtype, copy=False), tokens.reshape(lead)

    def quantize(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest code per position ([..., d, N]); ties go to the smallest index."""
        zq_rows, tokens = self.quantize_rows(np.moveaxis(np.asarray(z), -2, -1))
        return np.moveaxis(zq_rows, -1, -2), tokens

    def lookup_rows(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.num_codes):
            raise ValueError("token index out of codebook range")
        return self.codes[tokens]

    def lookup(self, tokens: np.ndarray) -> np.ndarray:
        return np.moveaxis(self.lookup_rows(tokens), -1, -2)

    def distances_rows(self, z_rows: np.ndarray) -> np.ndarray:
        """Euclidean distance per position to every code -> [..., N, K] (float64)."""
        flat, lead = self._flat_rows(z_rows)
        return np.sqrt(np.maximum(self._sq_distances(flat), 0.0)).reshape(*lead, self.num_codes)

    def euclidean_distances(self, z: np.ndarray) -> np.ndarray:
        return self.distances_rows(np.moveaxis(np.asarray(z), -2, -1))

    def svq_probabilities(self, z: np.ndarray, tau: float) -> np.ndarray:
        """Per-position softmax of negative Euclidean distance / tau -> [..., N, K]."""
        return svq_probabilities_from_distances(self.euclidean_distances(z), tau)

    def stochastic_quantize(self, z: np.ndarray, tau: float,
                            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Sample a code per position from the SVQ distribution at temperature tau."""
        tokens = svq_sample_from_distances(self.euclidean_distances(z), tau, rng)
        zq = self.codes[tokens]
        return np.moveaxis(zq, -1, -2).astype(np.asarray(z).dtype, copy=False), tokens

    # -- learning -------------------------------------------------------------

    def ema_update_rows(self, z_rows: np.ndarray, tokens: np.ndarray,
                        decay: float = 0.99, dead_threshold: float = 0.01,
                        rng: np.random.Generator | None = None) -> None:
        """Move codes toward their assigned latents by exponential moving average.

        Codes with no assignments keep their value (sums and counts decay
        together); codes whose EMA count falls below dead_threshold are
        reinitialized from random batch vectors when an rng is supplied.
        """
        flat, _ = self._flat_rows(z_rows)
        tok = np.asarray(tokens).reshape(-1)
        batch_counts = np.bincount(tok, minlength=self.num_codes).astype(np.float64)
        batch_sums = np.zeros((self.num_codes, self.dim), dtype=np.float64)
        np.add.at(batch_sums, tok, flat)
        self.usage += batch_counts.astype(np.int64)
        self.ema_counts = decay * self.ema_counts + (1.0 - decay) * batch_counts
        self.ema_sums = decay * self.ema_sums + (1.0 - decay) * batch_sums
        live = self.ema_counts > 1e-12
        new_codes = np.where(live[:, None],
                             self.ema_sums / np.where(live, self.ema_counts, 1.0)[:, None],
                             self.codes.astype(np.float64))
        self.codes = new_codes.astype(self.codes.dtype)
        if rng is not None:
            dead = np.flatnonzero(self.ema_counts < dead_threshold)
            if dead.size:
                picks = rng.integers(0, flat.shape[0], size=dead.size)
                self.codes[dead] = flat[picks].astype(self.codes.dtype)
                self.ema_counts[dead] = 1.0
                self.ema_sums[dead] = flat[picks]

    def ema_update(self, z: np.ndarray, tokens: np.ndarray, decay: float = 0.99,
                   dead_threshold: float = 0.01,
                   rng: np.random.Generator | None = None) -> None:
        self.ema_update_rows(np.moveaxis(np.asarray(z), -2, -1), tokens,
                             decay=decay, dead_threshold=dead_threshold, rng=rng)

    # -- persistence -----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "codes": self.codes,
            "ema_counts": self.ema_counts,
            "ema_sums": self.ema_sums,
            "usage": self.usage,
        }

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.codes = np.ascontiguousarray(arrays["codes"], dtype=self.codes.dtype)
        self.ema_counts = np.ascontiguousarray(arrays["ema_counts"], dtype=np.float64)
        self.ema_sums = np.ascontiguousarray(arrays["ema_sums"], dtype=np.float64)
        self.usage = np.ascontiguousarray(arrays["usage"], dtype=np.int64)
        self.num_codes, self.dim = self.codes.shape


def svq_probabilities_from_distances(dist: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax over negative distances; last axis indexes codes."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    scores = -np.asarray(dist, dtype=np.float64) / tau
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


def svq_sample_from_distances(dist: np.ndarray, tau: float,
                              rng: np.random.Generator) -> np.ndarray:
    """Categorical token draw per position from a precomputed distance table."""
    probs = svq_probabilities_from_distances(dist, tau)
    lead = probs.shape[:-1]
    flat = probs.reshape(-1, probs.shape[-1])
    cdf = np.cumsum(flat, axis=1)
    u = rng.random((flat.shape[0], 1))
    return np.minimum((u > cdf).sum(axis=1), flat.shape[1] - 1).reshape(lead)


def svq_distribution(z_n: np.ndarray, codebook: Codebook, tau: float) -> np.ndarray:
    """SVQ probabilities for a single d-dimensional latent vector."""
    z_row = np.asarray(z_n, dtype=np.float64).reshape(1, -1)
    return svq_probabilities_from_distances(codebook.distances_rows(z_row), tau)[0]


def distribution_entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats; zero-probability terms contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def quantize_straight_through(ze_rows: ad.Tensor, codebook: Codebook,
                              commitment: float = 0.25) -> tuple[ad.Tensor, np.ndarray, ad.Tensor]:
    """Training bridge on rows-layout latents [B, N, d]: nearest-code values
    flow forward, gradients skip to the encoder, and a commitment term pulls
    encoder outputs toward their codes."""
    zq_data, tokens = codebook.quantize_rows(ze_rows.data)
    commit = ad.mul(ad.mse_loss(ze_rows, ad.Tensor(zq_data)), commitment)
    zq_st = ad.add(ze_rows, ad.Tensor(zq_data - ze_rows.data))
    return zq_st, tokens, commit
