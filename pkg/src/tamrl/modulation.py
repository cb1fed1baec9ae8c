"""Task encoding, FiLM parameter generation and modulated base networks.

The pipeline for one task is::

    z      = bilstm_encode(encoder, [x; y] rows of the support set)
    tau_s  = W_s z + b_s                      (one linear map per site s)
    gamma_s, beta_s = first / second half of tau_s
    base'  = base with  gamma_s * a_s + beta_s  inserted at every site s

Two base architectures are provided. :class:`MlpBase` has one site per layer
(applied to the affine output before the relu). :class:`SeqBase` is the
sequence-to-sequence model ``x -> f_d -> FiLM -> LSTM -> FiLM -> linear``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError
from .networks import (
    BiLstmParams,
    LinearParams,
    LstmParams,
    MlpParams,
    bilstm_encode,
    init_params,
    linear_backward,
    linear_forward,
    lstm_backward,
    lstm_forward,
    mlp_backward,
    mlp_forward,
)
from .numcore import SeededRng


@dataclass
class FilmSite:
    tag: str
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape:
            raise ShapeError(f"site {self.tag}: gamma {self.gamma.shape} vs beta {self.beta.shape}")

    @property
    def width(self) -> int:
        return self.gamma.shape[-1]


def film_apply(site: FilmSite, h: np.ndarray) -> np.ndarray:
    """``gamma * h + beta`` on the last axis of ``h``."""
    if h.shape[-1] != site.width:
        raise ShapeError(f"site {site.tag} has width {site.width}, activation has {h.shape[-1]}")
    return site.gamma * h + site.beta


def identity_sites(specs: Sequence[tuple[str, int]]) -> list[FilmSite]:
    return [FilmSite(tag, np.ones(w), np.zeros(w)) for tag, w in specs]


# --------------------------------------------------------------------------
# base networks


@dataclass
class MlpBase:
    mlp: MlpParams

    kind = "mlp"

    def site_specs(self) -> list[tuple[str, int]]:
        return [(f"mlp-layer-{l}", w) for l, w in enumerate(self.mlp.sizes[1:])]

    @property
    def input_size(self) -> int:
        return self.mlp.sizes[0]

    def forward(self, x: np.ndarray, film=None):
        """``x (R, P, D)`` -> ``(R, P)``; ``film`` is a list of ``(gamma, beta)``."""
        y, cache = mlp_forward(self.mlp, x, film)
        return y[..., 0], cache

    def backward(self, cache, dy: np.ndarray):
        dp, _, dfilm = mlp_backward(self.mlp, cache, dy[..., None])
        return MlpBase(dp), dfilm


@dataclass
class _SeqCache:
    x: np.ndarray
    u: np.ndarray
    lstm: object
    hs: np.ndarray
    hm: np.ndarray
    film: list | None


@dataclass
class SeqBase:
    fd: LinearParams
    lstm: LstmParams
    out: LinearParams

    kind = "lstm"

    def site_specs(self) -> list[tuple[str, int]]:
        return [("lstm-input", self.lstm.input_size), ("lstm-hidden", self.lstm.hidden)]

    @property
    def input_size(self) -> int:
        return self.fd.W.shape[1]

    def forward(self, x: np.ndarray, film=None):
        """``x (R, L, D)`` -> ``(R, L)``."""
        if x.ndim != 3:
            raise ShapeError(f"sequence base expects (R, L, D) drivers, got {x.shape}")
        u = linear_forward(self.fd, x)
        um = u
        if film is not None:
            (g1, b1), _ = film
            um = g1[:, None, :] * u + b1[:, None, :]
        hs, lc = lstm_forward(self.lstm, um)
        hm = hs
        if film is not None:
            _, (g2, b2) = film
            hm = g2[:, None, :] * hs + b2[:, None, :]
        y = linear_forward(self.out, hm)[..., 0]
        return y, _SeqCache(x, u, lc, hs, hm, film)

    def backward(self, cache: _SeqCache, dy: np.ndarray):
        dout, dhm = linear_backward(self.out, cache.hm, dy[..., None])
        dfilm = None
        dhs = dhm
        if cache.film is not None:
            (g1, b1), (g2, b2) = cache.film
            dg2 = _reduce_rows((dhm * cache.hs).sum(axis=1), g2)
            db2 = _reduce_rows(dhm.sum(axis=1), b2)
            dhs = dhm * g2[:, None, :]
        dlstm, dum = lstm_backward(self.lstm, cache.lstm, dhs)
        du = dum
        if cache.film is not None:
            dg1 = _reduce_rows((dum * cache.u).sum(axis=1), g1)
            db1 = _reduce_rows(dum.sum(axis=1), b1)
            du = dum * g1[:, None, :]
            dfilm = [(dg1, db1), (dg2, db2)]
        dfd, _ = linear_backward(self.fd, cache.x, du)
        return SeqBase(dfd, dlstm, dout), dfilm


def _reduce_rows(g: np.ndarray, like: np.ndarray) -> np.ndarray:
    if like.shape[0] == 1 and g.shape[0] != 1:
        return g.sum(axis=0, keepdims=True)
    return g


def init_mlp_base(sizes: Sequence[int], rng: SeededRng) -> MlpBase:
    return MlpBase(init_params("mlp", sizes, rng))


def init_seq_base(n_drivers: int, hidden: int, rng: SeededRng, input_width: int | None = None) -> SeqBase:
    din = hidden if input_width is None else input_width
    return SeqBase(
        init_params("linear", (n_drivers, din), rng),
        init_params("lstm", (din, hidden), rng),
        init_params("linear", (hidden, 1), rng),
    )


# --------------------------------------------------------------------------
# generator


@dataclass
class GeneratorParams:
    layers: list[LinearParams]
    tags: list[str]

    @property
    def widths(self) -> list[int]:
        return [l.W.shape[0] // 2 for l in self.layers]


def init_generator(site_specs, z_dim: int, rng: SeededRng, identity_bias: bool = True) -> GeneratorParams:
    """One linear map ``z -> [gamma; beta]`` per site.

    With ``identity_bias`` the gamma half of each bias starts at 1, so a fresh
    generator modulates close to the identity and a pretrained base keeps
    working at the start of joint training.
    """
    layers = []
    for _, w in site_specs:
        lin = init_params("linear", (z_dim, 2 * w), rng)
        if identity_bias:
            lin.b[:w] = 1.0
        layers.append(lin)
    return GeneratorParams(layers, [t for t, _ in site_specs])


def generate_modulation(gen: GeneratorParams, z: np.ndarray) -> list[FilmSite]:
    """Map embedding(s) ``z`` (``(H_z,)`` or ``(E, H_z)``) to per-site FiLM pairs."""
    sites = []
    for tag, lin in zip(gen.tags, gen.layers):
        if z.shape[-1] != lin.W.shape[1]:
            raise ShapeError(f"generator expects embeddings of size {lin.W.shape[1]}, got {z.shape}")
        tau = linear_forward(lin, z)
        d = lin.W.shape[0] // 2
        sites.append(FilmSite(tag, tau[..., :d], tau[..., d:]))
    return sites


def generator_backward(gen: GeneratorParams, z: np.ndarray, dfilm) -> tuple[GeneratorParams, np.ndarray]:
    """Gradients of the generator and of ``z`` given per-site ``(dgamma, dbeta)``."""
    grads = []
    dz = np.zeros_like(z)
    for lin, (dg, db) in zip(gen.layers, dfilm):
        dtau = np.concatenate([dg, db], axis=-1)
        gl, dzi = linear_backward(lin, z, dtau)
        grads.append(gl)
        dz = dz + dzi
    return GeneratorParams(grads, list(gen.tags)), dz


# --------------------------------------------------------------------------
# encoder and modulated base


def encode_task(enc: BiLstmParams, support: np.ndarray) -> np.ndarray:
    """Embedding of a support set given as ``[x; y]`` rows.

    ``support`` is one window ``(T, D)`` or several ``(S, T, D)``; several
    windows are encoded independently and their embeddings averaged.
    """
    support = np.asarray(support, dtype=np.float64)
    if support.size == 0 or support.shape[-2] == 0:
        raise ShapeError("empty support set")
    if support.ndim == 2:
        z, _ = bilstm_encode(enc, support)
        return z
    z, _ = bilstm_encode(enc, support)
    return z.mean(axis=0)


@dataclass
class ModulatedBase:
    """A base network with FiLM transforms inserted at its sites."""

    base: MlpBase | SeqBase
    sites: list[FilmSite]

    def film(self):
        pairs = []
        for s in self.sites:
            g, b = s.gamma, s.beta
            if g.ndim == 1:
                g, b = g[None, :], b[None, :]
            pairs.append((g, b))
        return pairs

    def forward(self, x: np.ndarray):
        return self.base.forward(x, self.film())

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]


def modulate_base(base: MlpBase | SeqBase, sites: Sequence[FilmSite]) -> ModulatedBase:
    specs = base.site_specs()
    if len(sites) != len(specs):
        raise ShapeError(f"{base.kind} base has {len(specs)} modulation sites, got {len(sites)}")
    for (tag, width), s in zip(specs, sites):
        if s.tag != tag or s.width != width:
            raise ShapeError(f"site mismatch: base expects {tag}[{width}], got {s.tag}[{s.width}]")
    return ModulatedBase(base, list(sites))


def export_embeddings(path: str | Path, ids: Iterable[str], z: np.ndarray, extra: dict[str, Sequence] | None = None,
                      header: str | None = None) -> None:
    """Write ``entity_id, [extra columns], z_0 .. z_{H-1}`` rows for external projection."""
    z = np.atleast_2d(z)
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity_id", *extra.keys(), *(f"z_{k}" for k in range(z.shape[1]))])
        for r, eid in enumerate(ids):
            w.writerow([eid, *(col[r] for col in extra.values()), *(repr(float(v)) for v in z[r])])
