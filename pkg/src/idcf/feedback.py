"""Feedback models on top of a learned confounder.

``FeedbackModel`` scores a pair as ``e_u.e_i + b_u + b_i + z_u.c_i`` where
``z_u`` is the user's latent confounder: sampled from the posterior while
training and replaced by the posterior mean at inference. ``BaselineModel``
is plain MF, optionally with a learned projection of user features added to
the user embedding (MF-WF).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .confounder import UserConfounders
from .data import check_tensor_order
from .errors import CheckpointError, ColdStartError, DataError, DimensionError, NumericError
from .numerics import Adam, RngStream, sigmoid


@dataclass
class FeedbackConfig:
    embed_dim: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-6
    batch_size: int = 256
    epochs: int = 100
    patience: int = 10
    positive_threshold: float = 4.0
    select_k: int = 5
    mc_samples: int = 0  # >0 averages the sigmoid over posterior draws at inference


@dataclass
class FeedbackLog:
    epoch: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    val_ndcg: list[float] = field(default_factory=list)
    best_epoch: int = 0


def _embed_init(rng: RngStream, shape) -> np.ndarray:
    return 0.1 * rng.normal(shape)


class _MatrixFactorization:
    kind = ""
    tensor_names: tuple[str, ...] = ()

    num_users: int
    num_items: int

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in self.tensor_names]

    def trainable(self) -> list[np.ndarray]:
        return self.arrays()

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        for name in self.tensor_names:
            setattr(new, name, getattr(self, name).copy())
        return new

    def load_arrays(self, arrays):
        for dst, src in zip(self.arrays(), arrays):
            dst[...] = src

    def to_tensors(self):
        return [(name, getattr(self, name)) for name in self.tensor_names]

    def _check_ids(self, users, items):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.num_users):
            raise ColdStartError(f"unknown user id (model has {self.num_users} users)")
        if items.size and (items.min() < 0 or items.max() >= self.num_items):
            raise ColdStartError(f"unknown item id (model has {self.num_items} items)")
        return users, items

    def base_score(self, users, items) -> np.ndarray:
        users, items = self._check_ids(users, items)
        eu = self._user_vectors(users)
        return np.einsum("ij,ij->i", eu, self.item_emb[items]) + self.user_bias[users] + self.item_bias[items]

    def _user_vectors(self, users):
        return self.user_emb[users]


class FeedbackModel(_MatrixFactorization):
    kind = "feedback"
    tensor_names = ("user_emb", "item_emb", "conf_emb", "user_bias", "item_bias")

    def __init__(self, num_users: int, num_items: int, latent_dim: int, embed_dim: int = 8, rng: Optional[RngStream] = None):
        rng = rng or RngStream(0, "feedback-init")
        self.num_users, self.num_items, self.latent_dim = num_users, num_items, latent_dim
        self.user_emb = _embed_init(rng.substream("user_emb"), (num_users, embed_dim))
        self.item_emb = _embed_init(rng.substream("item_emb"), (num_items, embed_dim))
        self.conf_emb = _embed_init(rng.substream("conf_emb"), (num_items, latent_dim))
        self.user_bias = np.zeros(num_users)
        self.item_bias = np.zeros(num_items)

    @classmethod
    def from_tensors(cls, tensors, kind=None):
        check_tensor_order([n for n, _ in tensors], list(cls.tensor_names))
        t = dict(tensors)
        model = object.__new__(cls)
        model.user_emb, model.item_emb, model.conf_emb = t["user_emb"].copy(), t["item_emb"].copy(), t["conf_emb"].copy()
        model.user_bias, model.item_bias = t["user_bias"].ravel().copy(), t["item_bias"].ravel().copy()
        model.num_users, model.num_items = model.user_emb.shape[0], model.item_emb.shape[0]
        model.latent_dim = model.conf_emb.shape[1]
        if model.conf_emb.shape[0] != model.num_items or model.user_bias.size != model.num_users:
            raise CheckpointError("inconsistent feedback checkpoint shapes")
        return model

    def score(self, users, items, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.latent_dim:
            raise DimensionError(f"confounder dimension {z.shape[1]} != {self.latent_dim}")
        return self.base_score(users, items) + np.einsum("ij,ij->i", z, self.conf_emb[np.asarray(items)])

    def loss_and_grads(self, users, items, targets, z):
        """Mean BCE of sigmoid(score) against binary targets, with gradients
        aligned to :meth:`arrays`."""
        users, items = self._check_ids(users, items)
        s = self.score(users, items, z)
        loss, g = _bce(s, targets)
        eu, ei = self.user_emb[users], self.item_emb[items]
        grads = [np.zeros_like(x) for x in self.arrays()]
        np.add.at(grads[0], users, g[:, None] * ei)
        np.add.at(grads[1], items, g[:, None] * eu)
        np.add.at(grads[2], items, g[:, None] * z)
        np.add.at(grads[3], users, g)
        np.add.at(grads[4], items, g)
        return loss, grads


class BaselineModel(_MatrixFactorization):
    """Plain MF (kind ``mf``) or MF with user features (kind ``mf-wf``).

    For MF-WF the user vector is ``e_u + feat_u @ P``; the feature matrix is
    stored with the model and is not trained.
    """

    def __init__(self, num_users: int, num_items: int, embed_dim: int = 8, user_features=None, rng: Optional[RngStream] = None):
        rng = rng or RngStream(0, "mf-init")
        self.num_users, self.num_items = num_users, num_items
        self.user_emb = _embed_init(rng.substream("user_emb"), (num_users, embed_dim))
        self.item_emb = _embed_init(rng.substream("item_emb"), (num_items, embed_dim))
        self.user_bias = np.zeros(num_users)
        self.item_bias = np.zeros(num_items)
        if user_features is None:
            self.kind = "mf"
            self.tensor_names = ("user_emb", "item_emb", "user_bias", "item_bias")
        else:
            feats = np.asarray(user_features, dtype=np.float64)
            if feats.shape[0] != num_users:
                raise DimensionError("one feature row per user required")
            self.kind = "mf-wf"
            self.tensor_names = ("user_emb", "item_emb", "user_bias", "item_bias", "feat_proj", "user_feat")
            self.feat_proj = _embed_init(rng.substream("feat_proj"), (feats.shape[1], embed_dim))
            self.user_feat = feats.copy()

    @classmethod
    def from_tensors(cls, tensors, kind="mf"):
        names = [n for n, _ in tensors]
        t = dict(tensors)
        model = object.__new__(cls)
        model.kind = kind
        model.tensor_names = ("user_emb", "item_emb", "user_bias", "item_bias")
        if kind == "mf-wf":
            model.tensor_names += ("feat_proj", "user_feat")
        check_tensor_order(names, list(model.tensor_names))
        for name in model.tensor_names:
            setattr(model, name, t[name].copy())
        model.user_bias = model.user_bias.ravel()
        model.item_bias = model.item_bias.ravel()
        model.num_users, model.num_items = model.user_emb.shape[0], model.item_emb.shape[0]
        return model

    def trainable(self):
        return self.arrays()[:5] if self.kind == "mf-wf" else self.arrays()

    def _user_vectors(self, users):
        if self.kind == "mf-wf":
            return self.user_emb[users] + self.user_feat[users] @ self.feat_proj
        return self.user_emb[users]

    def score(self, users, items, z=None) -> np.ndarray:
        return self.base_score(users, items)

    def loss_and_grads(self, users, items, targets, z=None):
        users, items = self._check_ids(users, items)
        s = self.base_score(users, items)
        loss, g = _bce(s, targets)
        eu, ei = self._user_vectors(users), self.item_emb[items]
        grads = [np.zeros_like(x) for x in self.trainable()]
        np.add.at(grads[0], users, g[:, None] * ei)
        np.add.at(grads[1], items, g[:, None] * eu)
        np.add.at(grads[2], users, g)
        np.add.at(grads[3], items, g)
        if self.kind == "mf-wf":
            grads[4] = self.user_feat[users].T @ (g[:, None] * ei)
        return loss, grads


def _bce(scores: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean logistic loss and its gradient w.r.t. the scores."""
    y = np.asarray(targets, dtype=np.float64)
    # log(1 + exp(-s)) for y=1, log(1 + exp(s)) for y=0
    loss = np.logaddexp(0.0, scores) - y * scores
    if not np.all(np.isfinite(loss)):
        raise NumericError("non-finite feedback loss")
    return float(loss.mean()), (sigmoid(scores) - y) / len(scores)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def score_train(model, u, i, z_sample) -> float:
    """f1(u, i) + f2(z, i) for one pair (no link function)."""
    return float(model.score([u], [i], np.atleast_2d(z_sample))[0])


def predict(model, confounders: Optional[UserConfounders], users, items, mc_samples: int = 0, rng: Optional[RngStream] = None):
    """Predicted probability of positive feedback.

    With a confounder table the posterior mean is plugged into the score;
    ``mc_samples > 0`` instead averages the sigmoid over posterior draws.
    """
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    items = np.atleast_1d(np.asarray(items, dtype=np.int64))
    if not isinstance(model, FeedbackModel):
        return sigmoid(model.score(users, items))
    if confounders is None:
        raise DataError("a FeedbackModel needs the user confounder table")
    if users.size and users.max() >= confounders.num_users:
        raise ColdStartError("user has no confounder posterior")
    model._check_ids(users, items)
    if mc_samples <= 0:
        return sigmoid(model.score(users, items, confounders.mean[users]))
    rng = rng or RngStream(0, "predict")
    base = model.base_score(users, items)
    loading = model.conf_emb[items]
    # one draw per user and sample, shared by all of that user's items
    uniq, inv = np.unique(users, return_inverse=True)
    mean, std = confounders.mean[uniq], np.sqrt(confounders.var[uniq])
    acc = np.zeros(len(users))
    for _ in range(mc_samples):
        z = mean + std * rng.normal((len(uniq), confounders.dim))
        acc += sigmoid(base + np.einsum("ij,ij->i", z[inv], loading))
    return acc / mc_samples


def rank_items(model, confounders, u: int, candidates, **kwargs) -> list[int]:
    """Candidates by descending predicted score; ties go to the lower item id."""
    cands = np.asarray(list(candidates), dtype=np.int64)
    if cands.size == 0:
        raise DataError("no candidate items to rank")
    scores = predict(model, confounders, np.full(cands.size, u), cands, **kwargs)
    order = np.lexsort((cands, -scores))
    return cands[order].tolist()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _binary(ratings, threshold: float) -> np.ndarray:
    return (np.asarray(ratings) >= threshold).astype(np.float64)


def train_feedback(model, confounders: Optional[UserConfounders], dataset, config: FeedbackConfig, rng: RngStream):
    """Minimize BCE on the biased training records by minibatch Adam.

    For a :class:`FeedbackModel` the user's confounder is drawn afresh from
    its posterior each time a pair is visited. Early stopping watches
    NDCG@``select_k`` on the validation split; the best epoch is restored.
    """
    from .evaluation import ranking_metrics

    users, items, ratings = dataset.split("train")
    if len(users) == 0:
        raise DataError("no training records")
    needs_z = isinstance(model, FeedbackModel)
    if needs_z and confounders is None:
        raise DataError("missing confounder model for the feedback stage")
    y = _binary(ratings, config.positive_threshold)
    opt = Adam(model.trainable(), lr=config.lr, weight_decay=config.weight_decay)
    log = FeedbackLog()
    val = dataset.split("valid")
    best, best_arrays, stale = -np.inf, None, 0
    for epoch in range(1, config.epochs + 1):
        perm = rng.substream("shuffle", epoch).permutation(len(users))
        z_all = None
        if needs_z:
            eps = rng.substream("z-sample", epoch).normal((len(users), confounders.dim))
            pu = users[perm]
            z_all = confounders.mean[pu] + np.sqrt(confounders.var[pu]) * eps
        total = 0.0
        for lo in range(0, len(perm), config.batch_size):
            sel = perm[lo : lo + config.batch_size]
            z = None if z_all is None else z_all[lo : lo + config.batch_size]
            loss, grads = model.loss_and_grads(users[sel], items[sel], y[sel], z)
            opt.step(grads)
            total += loss * len(sel)
        log.epoch.append(epoch)
        log.loss.append(total / len(perm))
        if len(val[0]) == 0:
            continue
        score = ranking_metrics(model, confounders, val, [config.select_k], config.positive_threshold).mean("ndcg", config.select_k)
        log.val_ndcg.append(score)
        if score > best:
            best, best_arrays, stale = score, [x.copy() for x in model.arrays()], 0
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


def training_loss(model, confounders, dataset, threshold: float = 4.0) -> float:
    """Mean BCE over the training records with the posterior mean plugged in."""
    users, items, ratings = dataset.split("train")
    z = confounders.mean[users] if isinstance(model, FeedbackModel) else None
    return model.loss_and_grads(users, items, _binary(ratings, threshold), z)[0]
