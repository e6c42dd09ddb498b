"""Latent-confounder learners.

``IvaeModel`` conditions both the prior and the approximate posterior on the
user proxy; ``VaeModel`` is the proxy-free ablation with a standard normal
prior. Both decode the exposure vector with a factorized Bernoulli MLP and
are trained by maximizing a single-sample reparameterized ELBO.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import check_tensor_order
from .errors import CheckpointError, ConfigError, DataError, DimensionError, NumericError
from .numerics import (
    PROB_EPS,
    Adam,
    DiagonalGaussian,
    MlpParams,
    RngStream,
    clamp_logvar,
    init_mlp,
    kl_diag_gaussians,
    kl_diag_gaussians_grad,
    mlp_backward,
    mlp_forward,
    sigmoid,
)


@dataclass
class ConfounderConfig:
    latent_dim: int = 2
    hidden: tuple[int, ...] = (128, 128)
    lr: float = 1e-3
    weight_decay: float = 1e-6
    batch_size: int = 256
    epochs: int = 300
    patience: int = 10
    val_fraction: float = 0.1


@dataclass
class TrainLog:
    epoch: list[int] = field(default_factory=list)
    elbo: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    recon: list[float] = field(default_factory=list)
    val_elbo: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def rows(self):
        for k in range(len(self.epoch)):
            yield self.epoch[k], self.elbo[k], self.kl[k], self.recon[k]


@dataclass
class ElboResult:
    value: float  # mean ELBO over the batch
    kl: float
    recon: float
    grads: list[np.ndarray]  # d(mean ELBO) / d params, aligned with model.arrays()


class _LatentModel:
    kind = ""
    net_names: tuple[str, ...] = ()

    def __init__(self, nets: dict[str, MlpParams], num_items: int, proxy_dim: int, latent_dim: int):
        self.nets = nets
        self.num_items = num_items
        self.proxy_dim = proxy_dim
        self.latent_dim = latent_dim
        if self.nets["decoder"].out_dim != num_items:
            raise DimensionError("decoder output must have one unit per item")

    # -- parameters ---------------------------------------------------------

    def arrays(self) -> list[np.ndarray]:
        out = []
        for name in self.net_names:
            out.extend(self.nets[name].arrays())
        return out

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.nets = {k: v.copy() for k, v in self.nets.items()}
        return new

    def load_arrays(self, arrays: list[np.ndarray]) -> None:
        for dst, src in zip(self.arrays(), arrays):
            dst[...] = src

    def to_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name in self.net_names:
            net = self.nets[name]
            for k, (w, b) in enumerate(zip(net.weights, net.biases)):
                out.append((f"{name}.W{k}", w))
                out.append((f"{name}.b{k}", b))
        return out

    @classmethod
    def from_tensors(cls, tensors, kind=None):
        found = [name for name, _ in tensors]
        table = dict(tensors)
        nets = {}
        for name in cls.net_names:
            layers = sum(1 for t in found if t.startswith(f"{name}.W"))
            if layers == 0:
                raise CheckpointError(f"checkpoint lacks network {name!r}")
            nets[name] = MlpParams(
                [table[f"{name}.W{k}"].copy() for k in range(layers)],
                [table[f"{name}.b{k}"].ravel().copy() for k in range(layers)],
            )
        model = object.__new__(cls)
        decoder = nets["decoder"]
        enc = nets["enc_mean"]
        _LatentModel.__init__(
            model,
            nets,
            num_items=decoder.out_dim,
            proxy_dim=enc.in_dim - decoder.out_dim,
            latent_dim=decoder.in_dim,
        )
        check_tensor_order(found, [n for n, _ in model.to_tensors()])
        return model

    # -- building blocks ----------------------------------------------------

    def encoder_input(self, a, w) -> np.ndarray:
        raise NotImplementedError

    def _prior_params(self, w, n_rows: int):
        """Returns (mean, logvar, caches) of the prior for each row."""
        raise NotImplementedError

    def _check_inputs(self, a, w):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if a.shape[1] != self.num_items:
            raise DimensionError(f"exposure vector length {a.shape[1]} != {self.num_items} items")
        if self.proxy_dim:
            if w is None:
                raise DimensionError("this model needs proxy features")
            w = np.atleast_2d(np.asarray(w, dtype=np.float64))
            if w.shape != (a.shape[0], self.proxy_dim):
                raise DimensionError(f"proxy shape {w.shape} != {(a.shape[0], self.proxy_dim)}")
        return a, w

    def _encode_raw(self, a, w):
        x = self.encoder_input(a, w)
        mean, c_mean = mlp_forward(self.nets["enc_mean"], x, return_cache=True)
        raw, c_lv = mlp_forward(self.nets["enc_logvar"], x, return_cache=True)
        logvar, mask = clamp_logvar(raw)
        return x, mean, logvar, mask, c_mean, c_lv

    def encode(self, a, w=None) -> DiagonalGaussian:
        """Approximate posterior q(z | a, w) for one user or a batch."""
        single = np.ndim(a) == 1
        a, w = self._check_inputs(a, w)
        _, mean, logvar, *_ = self._encode_raw(a, w)
        if single:
            mean, logvar = mean[0], logvar[0]
        return DiagonalGaussian(mean, np.exp(logvar))

    def prior(self, w=None, n_rows: int = 1) -> DiagonalGaussian:
        if w is not None:
            w = np.atleast_2d(np.asarray(w, dtype=np.float64))
            n_rows = w.shape[0]
        mean, logvar, _ = self._prior_params(w, n_rows)
        return DiagonalGaussian(mean, np.exp(logvar))

    def decode(self, z) -> np.ndarray:
        """Per-item exposure probabilities, clamped away from 0 and 1."""
        return np.clip(sigmoid(mlp_forward(self.nets["decoder"], z)), PROB_EPS, 1.0 - PROB_EPS)

    def posterior_mean(self, a, w=None) -> np.ndarray:
        return self.encode(a, w).mean

    # -- objective ----------------------------------------------------------

    def elbo(self, a, w=None, rng: Optional[RngStream] = None, noise=None) -> ElboResult:
        """Single-sample ELBO averaged over the rows of ``a`` and its gradient.

        Pass ``noise`` (standard-normal, shape (rows, latent_dim)) to freeze
        the reparameterization draw; otherwise it is drawn from ``rng``.
        """
        a, w = self._check_inputs(a, w)
        n_rows = a.shape[0]
        if noise is None:
            if rng is None:
                raise ValueError("elbo needs either rng or noise")
            noise = rng.normal((n_rows, self.latent_dim))
        noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))

        x, q_mean, q_logvar, q_mask, c_qm, c_qlv = self._encode_raw(a, w)
        p_mean, p_logvar, p_cache = self._prior_params(w, n_rows)
        std = np.exp(0.5 * q_logvar)
        z = q_mean + std * noise

        logits, c_dec = mlp_forward(self.nets["decoder"], z, return_cache=True)
        probs_raw = sigmoid(logits)
        probs = np.clip(probs_raw, PROB_EPS, 1.0 - PROB_EPS)
        recon_rows = (a * np.log(probs) + (1.0 - a) * np.log1p(-probs)).sum(axis=1)
        kl_rows = kl_diag_gaussians(DiagonalGaussian(q_mean, np.exp(q_logvar)), DiagonalGaussian(p_mean, np.exp(p_logvar)))
        value = recon_rows - kl_rows
        if not np.all(np.isfinite(value)):
            raise NumericError("non-finite ELBO")

        scale = 1.0 / n_rows
        inside = (probs_raw > PROB_EPS) & (probs_raw < 1.0 - PROB_EPS)
        d_logits = scale * (a - probs_raw) * inside
        dec_grads, d_z = mlp_backward(self.nets["decoder"], z, d_logits, cache=c_dec)

        k_qm, k_qlv, k_pm, k_plv = kl_diag_gaussians_grad(q_mean, q_logvar, p_mean, p_logvar)
        d_qm = d_z - scale * k_qm
        d_qlv = (d_z * noise * 0.5 * std - scale * k_qlv) * q_mask
        d_pm = -scale * k_pm
        d_plv = -scale * k_plv

        grads = {
            "enc_mean": mlp_backward(self.nets["enc_mean"], x, d_qm, cache=c_qm)[0],
            "enc_logvar": mlp_backward(self.nets["enc_logvar"], x, d_qlv, cache=c_qlv)[0],
            "decoder": dec_grads,
        }
        grads.update(self._prior_backward(w, d_pm, d_plv, p_cache))
        flat = []
        for name in self.net_names:
            flat.extend(grads[name].arrays())
        return ElboResult(float(value.mean()), float(kl_rows.mean()), float(recon_rows.mean()), flat)

    def _prior_backward(self, w, d_mean, d_logvar, cache) -> dict:
        return {}


class IvaeModel(_LatentModel):
    """Proxy-conditioned prior N(mu_w(w), v_w(w)) and posterior q(z | a, w)."""

    kind = "ivae"
    net_names = ("prior_mean", "prior_logvar", "enc_mean", "enc_logvar", "decoder")

    def __init__(self, num_items: int, proxy_dim: int, latent_dim: int = 2, hidden=(128, 128), rng: Optional[RngStream] = None):
        if proxy_dim < 1:
            raise DimensionError("IvaeModel needs at least one proxy feature")
        rng = rng or RngStream(0, "ivae-init")
        hidden = list(hidden)
        enc_in = num_items + proxy_dim
        nets = {
            "prior_mean": init_mlp([proxy_dim, *hidden, latent_dim], rng.substream("prior_mean")),
            "prior_logvar": init_mlp([proxy_dim, *hidden, latent_dim], rng.substream("prior_logvar")),
            "enc_mean": init_mlp([enc_in, *hidden, latent_dim], rng.substream("enc_mean")),
            "enc_logvar": init_mlp([enc_in, *hidden, latent_dim], rng.substream("enc_logvar")),
            "decoder": init_mlp([latent_dim, *hidden[::-1], num_items], rng.substream("decoder")),
        }
        super().__init__(nets, num_items, proxy_dim, latent_dim)

    def encoder_input(self, a, w):
        return np.concatenate([a, w], axis=1)

    def _prior_params(self, w, n_rows):
        if w is None:
            raise DimensionError("IvaeModel prior needs proxy features")
        mean, c_m = mlp_forward(self.nets["prior_mean"], w, return_cache=True)
        raw, c_lv = mlp_forward(self.nets["prior_logvar"], w, return_cache=True)
        logvar, mask = clamp_logvar(raw)
        return mean, logvar, (c_m, c_lv, mask)

    def _prior_backward(self, w, d_mean, d_logvar, cache):
        c_m, c_lv, mask = cache
        return {
            "prior_mean": mlp_backward(self.nets["prior_mean"], w, d_mean, cache=c_m)[0],
            "prior_logvar": mlp_backward(self.nets["prior_logvar"], w, d_logvar * mask, cache=c_lv)[0],
        }


class VaeModel(_LatentModel):
    """Standard normal prior, posterior q(z | a); proxies are accepted and ignored."""

    kind = "vae"
    net_names = ("enc_mean", "enc_logvar", "decoder")

    def __init__(self, num_items: int, proxy_dim: int = 0, latent_dim: int = 2, hidden=(128, 128), rng: Optional[RngStream] = None):
        rng = rng or RngStream(0, "vae-init")
        hidden = list(hidden)
        nets = {
            "enc_mean": init_mlp([num_items, *hidden, latent_dim], rng.substream("enc_mean")),
            "enc_logvar": init_mlp([num_items, *hidden, latent_dim], rng.substream("enc_logvar")),
            "decoder": init_mlp([latent_dim, *hidden[::-1], num_items], rng.substream("decoder")),
        }
        super().__init__(nets, num_items, 0, latent_dim)

    def _check_inputs(self, a, w):
        return super()._check_inputs(a, None)

    def encoder_input(self, a, w):
        return a

    def _prior_params(self, w, n_rows):
        zeros = np.zeros((n_rows, self.latent_dim))
        return zeros, zeros.copy(), None


def make_confounder_model(kind: str, num_items: int, proxy_dim: int, config: ConfounderConfig, rng: RngStream):
    if kind == "ivae":
        return IvaeModel(num_items, proxy_dim, config.latent_dim, config.hidden, rng)
    if kind == "vae":
        return VaeModel(num_items, proxy_dim, config.latent_dim, config.hidden, rng)
    raise ConfigError(f"unknown confounder model {kind!r}")


def _exposure_and_proxy(dataset):
    if isinstance(dataset, tuple):
        a, w = dataset
    else:
        a, w = dataset.exposure, dataset.proxy_matrix()
    a = np.asarray(a, dtype=np.float64)
    w = np.zeros((a.shape[0], 0)) if w is None else np.asarray(w, dtype=np.float64)
    return a, w


def _holdout(n_users: int, fraction: float, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    n_val = int(round(fraction * n_users))
    if n_val < 1 or n_val >= n_users:
        return np.arange(n_users), np.arange(0)
    perm = rng.substream("holdout").permutation(n_users)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train_confounder(model, dataset, config: ConfounderConfig, rng: RngStream):
    """Maximize the mean ELBO by minibatch Adam.

    ``dataset`` is a :class:`~idcf.data.Dataset` or an ``(exposure, proxy)``
    pair. A seed-derived fraction of users is held out; training stops when
    their ELBO (under a fixed noise draw) has not improved for
    ``config.patience`` epochs, and the best parameters are restored.
    """
    a, w = _exposure_and_proxy(dataset)
    if a.shape[0] == 0:
        raise DataError("cannot train a confounder model on zero users")
    w_in = w if model.proxy_dim else None
    train_idx, val_idx = _holdout(a.shape[0], config.val_fraction, rng)
    opt = Adam(model.arrays(), lr=config.lr, weight_decay=config.weight_decay)
    log = TrainLog()
    val_noise = rng.substream("val-noise").normal((len(val_idx), model.latent_dim))

    def val_score():
        if len(val_idx) == 0:
            return float("nan")
        sub_w = None if w_in is None else w_in[val_idx]
        return model.elbo(a[val_idx], sub_w, noise=val_noise).value

    best_val, best_arrays, stale = -np.inf, None, 0
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        order = train_idx[rng.substream("shuffle", epoch).permutation(len(train_idx))]
        noise_rng = rng.substream("noise", epoch)
        tot = np.zeros(3)
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo : lo + config.batch_size]
            res = model.elbo(a[batch], None if w_in is None else w_in[batch], rng=noise_rng)
            opt.step([-g for g in res.grads])
            tot += len(batch) * np.array([res.value, res.kl, res.recon])
        tot /= len(order)
        val = val_score()
        log.epoch.append(epoch)
        log.elbo.append(float(tot[0]))
        log.kl.append(float(tot[1]))
        log.recon.append(float(tot[2]))
        log.val_elbo.append(val)
        log.seconds.append(time.perf_counter() - start)
        if len(val_idx) == 0:
            continue
        if val > best_val:
            best_val, best_arrays, stale = val, [x.copy() for x in model.arrays()], 0
            log.best_epoch = epoch
        else:
            stale += 1
            if 0 < config.patience <= stale:
                break
    if best_arrays is not None:
        model.load_arrays(best_arrays)
    else:
        log.best_epoch = len(log.epoch)
    return model, log


def mean_elbo(model, dataset, rng: RngStream) -> float:
    a, w = _exposure_and_proxy(dataset)
    return model.elbo(a, w if model.proxy_dim else None, rng=rng).value


@dataclass
class UserConfounders:
    """Per-user posterior table used by the feedback stage."""

    mean: np.ndarray  # (m, d)
    var: np.ndarray  # (m, d)

    @classmethod
    def from_model(cls, model, dataset) -> "UserConfounders":
        a, w = _exposure_and_proxy(dataset)
        g = model.encode(a, w if model.proxy_dim else None)
        return cls(np.atleast_2d(g.mean), np.atleast_2d(g.var))

    @property
    def num_users(self) -> int:
        return self.mean.shape[0]

    @property
    def dim(self) -> int:
        return self.mean.shape[1]
