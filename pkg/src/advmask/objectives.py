"""Contrastive, binarization and sparsity losses, and their min-max composition."""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class ObjectiveConfig:
    temperature: float = 0.1
    binarize_gamma: float = 25.0
    sparse_weight: float = 0.1
    penalty_clamp: float = 1e3
    include_positive: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.binarize_gamma <= 0:
            raise ValueError("binarize_gamma must be > 0")
        if self.sparse_weight < 0:
            raise ValueError("sparse_weight must be >= 0")
        if self.penalty_clamp < 1:
            raise ValueError("penalty_clamp must be >= 1 (the unclamped minimum)")

    def to_dict(self) -> dict:
        return asdict(self)


def _normalize_rows(z: Tensor, name: str) -> Tensor:
    norms = np.linalg.norm(z.data, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"{name}: row {int(np.argmin(norms))} has zero norm; cosine similarity undefined")
    return z / T.sqrt((z * z).sum(axis=1, keepdims=True))


def ntxent_loss(z: Tensor, z_aug: Tensor, temperature: float = 0.1, include_positive: bool = False) -> Tensor:
    """Mean over anchors of ``-log(exp(s_ii) / sum_{j != i} exp(s_ij))``, ``s = cos / temperature``.

    ``z[i]`` and ``z_aug[i]`` embed the clean and augmented view of sample ``i``.
    With ``include_positive`` the denominator also carries ``j == i`` (canonical NT-Xent).
    """
    if z.shape != z_aug.shape or z.ndim != 2:
        raise ShapeError("ntxent_loss", z.shape, z_aug.shape)
    B = z.shape[0]
    if B < 2:
        raise ValueError("ntxent_loss needs a batch of at least 2 (one negative per anchor)")
    sim = T.matmul(_normalize_rows(z, "z"), T.transpose(_normalize_rows(z_aug, "z_aug"))) * (1.0 / temperature)
    eye = np.eye(B, dtype=z.dtype)
    positive = (sim * eye).sum(axis=1)
    # cosine <= 1, so shifting by 1/temperature keeps exp bounded
    shift = 1.0 / temperature
    weights = np.ones((B, B), dtype=z.dtype) if include_positive else 1 - eye
    denom = T.log((T.exp(sim - shift) * weights).sum(axis=1)) + shift
    return (denom - positive).mean()


def soft_binarize(m: Tensor, gamma: float = 25.0) -> Tensor:
    """Push mask values toward 0/1 with a steep sigmoid centred at 0.5."""
    return T.sigmoid((m - 0.5) * gamma)


def sparse_penalty(m: Tensor, clamp: float = 1e3) -> Tensor:
    """``1 / sin(pi * mean_t m)`` per mask, clamped at ``clamp``, averaged over batch and masks."""
    frac = m.mean(axis=-1)
    s = T.clip(T.sin(frac * np.pi), 1.0 / clamp, None)
    return (1.0 / s).mean()


def apply_adversarial_mask(x: Tensor, m: Tensor, gamma: float, rng: np.random.Generator | None = None,
                           index: int | None = None) -> Tensor:
    """Binarize generator masks and apply them to ``x``.

    ``x`` is ``[B, leads, D]`` (or unbatched ``[leads, D]``) and ``m`` is ``[B, N, D]``.
    With ``N < leads`` a single mask index (``index`` or drawn from ``rng``) is used
    for the whole batch and broadcast over leads; with ``N == leads`` mask ``n``
    multiplies lead ``n``.
    """
    unbatched = x.ndim == 2
    if unbatched:
        x, m = x.reshape(1, *x.shape), m.reshape(1, *m.shape)
    B, leads, D = x.shape
    N = m.shape[1]
    if m.shape != (B, N, D):
        raise ShapeError("apply_adversarial_mask", x.shape, m.shape)
    if N > leads:
        raise ValueError(f"{N} masks for {leads} leads; at most one mask per lead")
    if N == leads:
        out = x * soft_binarize(m, gamma)
    else:
        if index is None:
            if rng is None:
                raise ValueError("need rng or index to pick a mask")
            index = int(rng.integers(N))
        out = x * soft_binarize(m[:, index : index + 1, :], gamma)
    return out.reshape(leads, D) if unbatched else out


@contextlib.contextmanager
def frozen(*paramsets):
    """Temporarily stop gradients into the given parameter sets."""
    saved = [(t, t.requires_grad) for ps in paramsets for t in ps.params.values()]
    for t, _ in saved:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag


def encoder_loss(x: Tensor, encoder, projector, mask_model, rng: np.random.Generator | None,
                 config: ObjectiveConfig = ObjectiveConfig(), *, index: int | None = None,
                 masks: Tensor | None = None, post=None, clean: Tensor | None = None,
                 mode: str = "train") -> Tensor:
    """Contrastive loss on (x, masked x) with the mask generator held fixed.

    ``masks`` overrides the generator output; ``post`` is an optional
    differentiable transform applied after masking and ``clean`` replaces
    ``x`` as the unmasked view (both used for compound chains).
    """
    if masks is None:
        with T.no_grad():
            masks = mask_model(x, "frozen")
    x_aug = apply_adversarial_mask(x, masks.detach(), config.binarize_gamma, rng, index)
    if post is not None:
        x_aug = post(x_aug)
    z = projector(encoder(x if clean is None else clean, mode))
    z_aug = projector(encoder(x_aug, mode))
    return ntxent_loss(z, z_aug, config.temperature, config.include_positive)


def adversary_terms(x: Tensor, encoder, projector, mask_model, rng: np.random.Generator | None,
                    config: ObjectiveConfig = ObjectiveConfig(), *, index: int | None = None, post=None,
                    clean: Tensor | None = None, mode: str = "train", encoder_mode: str = "frozen"):
    """Return ``(L_SSL, L_sparse)`` with gradients reaching only the mask generator.

    The encoder runs with batch statistics but leaves its running buffers alone.
    """
    with frozen(encoder.params, projector.params):
        with T.no_grad():
            z = projector(encoder(x if clean is None else clean, encoder_mode))
        m = mask_model(x, mode)
        x_aug = apply_adversarial_mask(x, m, config.binarize_gamma, rng, index)
        if post is not None:
            x_aug = post(x_aug)
        z_aug = projector(encoder(x_aug, encoder_mode))
        l_ssl = ntxent_loss(z, z_aug, config.temperature, config.include_positive)
        l_sparse = sparse_penalty(m, config.penalty_clamp)
    return l_ssl, l_sparse


def adversary_loss(x: Tensor, encoder, projector, mask_model, rng: np.random.Generator | None,
                   config: ObjectiveConfig = ObjectiveConfig(), **kwargs) -> Tensor:
    """``-(L_SSL - alpha * L_sparse)``: minimizing it maximizes the contrastive loss under the sparsity penalty."""
    l_ssl, l_sparse = adversary_terms(x, encoder, projector, mask_model, rng, config, **kwargs)
    return l_sparse * config.sparse_weight - l_ssl
