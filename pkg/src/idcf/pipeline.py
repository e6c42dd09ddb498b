"""Two-stage training for each method, with grid search on validation data.

Methods:

* ``idcf``   iVAE confounder (prior conditioned on the proxy) + FeedbackModel
* ``idcf-w`` VAE confounder (no proxy) + FeedbackModel
* ``mf``     plain matrix factorization
* ``mf-wf``  matrix factorization with user features
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .confounder import ConfounderConfig, TrainLog, UserConfounders, make_confounder_model, train_confounder
from .errors import ConfigError
from .feedback import BaselineModel, FeedbackConfig, FeedbackLog, FeedbackModel, train_feedback
from .numerics import RngStream

METHODS = ("idcf", "idcf-w", "mf", "mf-wf")
CONFOUNDER_KIND = {"idcf": "ivae", "idcf-w": "vae"}

LR_GRID = (1e-3, 5e-4, 1e-4, 5e-5, 1e-5)
WD_GRID = (1e-5, 1e-6)


@dataclass
class GridRow:
    stage: str
    lr: float
    weight_decay: float
    score: float
    selected: bool = False


@dataclass
class TrainedMethod:
    method: str
    seed: int
    feedback: object
    confounder: Optional[object] = None
    confounders: Optional[UserConfounders] = None
    confounder_log: Optional[TrainLog] = None
    feedback_log: Optional[FeedbackLog] = None
    grid: list[GridRow] = field(default_factory=list)


def _grid(lrs, wds):
    return list(itertools.product(lrs, wds))


def _confounder_score(model, dataset, config: ConfounderConfig, log: TrainLog, rng: RngStream) -> float:
    """Validation ELBO when users were held out, else full-data ELBO under a
    fixed noise draw."""
    if log.val_elbo and np.isfinite(log.val_elbo[-1]):
        best = log.best_epoch - 1 if log.best_epoch else len(log.val_elbo) - 1
        return float(log.val_elbo[best])
    a, w = dataset.exposure, dataset.proxy_matrix()
    noise = rng.substream("score-noise").normal((a.shape[0], model.latent_dim))
    return model.elbo(a, w if model.proxy_dim else None, noise=noise).value


def fit_confounder(kind: str, dataset, config: ConfounderConfig, seed: int, lrs=None, wds=None):
    """Train one confounder model per (lr, wd) pair and keep the best-scoring one."""
    rng = RngStream(seed, f"confounder-{kind}")
    lrs = lrs or (config.lr,)
    wds = wds or (config.weight_decay,)
    proxy_dim = dataset.proxy_matrix().shape[1]
    if kind == "ivae" and proxy_dim == 0:
        raise ConfigError("idcf needs user features (user_features.tsv)")
    best, rows = None, []
    for lr, wd in _grid(lrs, wds):
        cfg = replace(config, lr=lr, weight_decay=wd)
        model = make_confounder_model(kind, dataset.num_items, proxy_dim, cfg, rng.substream("init"))
        model, log = train_confounder(model, dataset, cfg, rng.substream("train"))
        score = _confounder_score(model, dataset, cfg, log, rng)
        rows.append(GridRow("confounder", lr, wd, score))
        if best is None or score > best[0]:
            best = (score, model, log, len(rows) - 1)
    rows[best[3]].selected = True
    return best[1], best[2], rows


def _new_feedback_model(method: str, dataset, config: FeedbackConfig, latent_dim: int, rng: RngStream):
    m, n = dataset.num_users, dataset.num_items
    if method in CONFOUNDER_KIND:
        return FeedbackModel(m, n, latent_dim, config.embed_dim, rng)
    if method == "mf":
        return BaselineModel(m, n, config.embed_dim, None, rng)
    if method == "mf-wf":
        feats = dataset.proxy_matrix()
        if feats.shape[1] == 0:
            raise ConfigError("mf-wf needs user features (user_features.tsv)")
        return BaselineModel(m, n, config.embed_dim, feats, rng)
    raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def fit_feedback(method: str, dataset, confounders, config: FeedbackConfig, seed: int, latent_dim: int = 2, lrs=None, wds=None):
    rng = RngStream(seed, "feedback")
    lrs = lrs or (config.lr,)
    wds = wds or (config.weight_decay,)
    best, rows = None, []
    for lr, wd in _grid(lrs, wds):
        cfg = replace(config, lr=lr, weight_decay=wd)
        model = _new_feedback_model(method, dataset, cfg, latent_dim, rng.substream("init"))
        model, log = train_feedback(model, confounders, dataset, cfg, rng.substream("train"))
        score = max(log.val_ndcg) if log.val_ndcg else -log.loss[-1]
        rows.append(GridRow("feedback", lr, wd, float(score)))
        if best is None or score > best[0]:
            best = (score, model, log, len(rows) - 1)
    rows[best[3]].selected = True
    return best[1], best[2], rows


def train_method(
    method: str,
    dataset,
    seed: int,
    confounder_config: Optional[ConfounderConfig] = None,
    feedback_config: Optional[FeedbackConfig] = None,
    lrs=None,
    wds=None,
    conf_lrs=None,
    conf_wds=None,
) -> TrainedMethod:
    """Stage 1 (confounder, skipped for the MF baselines) then stage 2.

    ``lrs``/``wds`` are the stage-2 grid; the stage-1 grid defaults to the
    same values unless ``conf_lrs``/``conf_wds`` are given. Omitted grids
    fall back to the single values in the stage configs.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    ccfg = confounder_config or ConfounderConfig()
    fcfg = feedback_config or FeedbackConfig()
    out = TrainedMethod(method, seed, feedback=None)
    if method in CONFOUNDER_KIND:
        model, log, rows = fit_confounder(
            CONFOUNDER_KIND[method], dataset, ccfg, seed, conf_lrs or lrs, conf_wds or wds
        )
        out.confounder, out.confounder_log = model, log
        out.confounders = UserConfounders.from_model(model, dataset)
        out.grid.extend(rows)
    out.feedback, out.feedback_log, rows = fit_feedback(method, dataset, out.confounders, fcfg, seed, ccfg.latent_dim, lrs, wds)
    out.grid.extend(rows)
    return out
