"""Synthetic confounded recommendation data.

Users carry a 2-d confounder drawn from a five-component Gaussian mixture
whose component is the (observed) categorical proxy. The confounder drives
both which items get exposed and how items are rated; ratings on a random
15-item slate per user form the unbiased evaluation data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .numerics import RngStream, leaky_relu, sigmoid

LATENT_DIM = 2
PROXY_LEVELS = 5
COMPONENT_RADIUS = 2.0
COMPONENT_STD = 0.5
FEEDBACK_NOISE = 0.1
UNBIASED_PER_USER = 15
VALID_FRACTION = 0.30


@dataclass(frozen=True)
class SynthConfig:
    num_users: int = 2000
    num_items: int = 300
    alpha: float = 0.1
    beta: float = 2.0
    gamma: float = 0.0
    embed_dim: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.num_users < 1 or self.num_items < 1:
            raise ConfigError("num_users and num_items must be >= 1")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError("alpha must lie in [0, 1]")
        if self.beta < 0 or self.gamma < 0:
            raise ConfigError("beta and gamma must be non-negative")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")


@dataclass
class SynthGroundTruth:
    z: np.ndarray  # (m, 2)
    w: np.ndarray  # (m,) levels 1..5
    mixing: np.ndarray = None  # (2, 2)
    item_conf: np.ndarray = None  # (n, 2)
    user_emb: np.ndarray = None  # (m, k)
    item_emb: np.ndarray = None  # (n, k)
    exposure_prob: np.ndarray = None
    exposure: np.ndarray = None  # (m, n) uint8
    scores: np.ndarray = None
    ratings: np.ndarray = None  # (m, n) in 1..5


@dataclass
class DatasetBundle:
    """Biased (exposed) training records and the unbiased slate split into
    validation and test. Record arrays are parallel: users, items, ratings."""

    num_users: int
    num_items: int
    train: tuple[np.ndarray, np.ndarray, np.ndarray]
    valid: tuple[np.ndarray, np.ndarray, np.ndarray]
    test: tuple[np.ndarray, np.ndarray, np.ndarray]
    proxy: np.ndarray
    truth: SynthGroundTruth = field(repr=False, default=None)
    config: SynthConfig = None


def component_means() -> np.ndarray:
    """Mixture means for proxy levels 1..5, evenly spaced on a circle."""
    levels = np.arange(1, PROXY_LEVELS + 1)
    angle = 2.0 * np.pi * levels / PROXY_LEVELS
    return COMPONENT_RADIUS * np.stack([np.cos(angle), np.sin(angle)], axis=1)


def sample_confounders(config: SynthConfig, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Returns (z, w): z is (m, 2), w holds levels in 1..5."""
    r = rng.substream("confounders")
    w = r.integers(1, PROXY_LEVELS + 1, size=config.num_users)
    noise = r.normal((config.num_users, LATENT_DIM))
    z = component_means()[w - 1] + COMPONENT_STD * noise
    return z, w


def exposure_probability(config: SynthConfig, truth: SynthGroundTruth, noise: np.ndarray) -> np.ndarray:
    logits = leaky_relu(truth.z @ truth.mixing @ truth.item_conf.T) + config.gamma * noise
    return config.alpha * sigmoid(logits)


def sample_exposure(config: SynthConfig, truth: SynthGroundTruth, rng: RngStream) -> np.ndarray:
    """Bernoulli exposures. Uses one uniform per pair so that runs differing
    only in alpha are coupled draw-for-draw."""
    r = rng.substream("exposure")
    shape = (config.num_users, config.num_items)
    noise = r.normal(shape)
    u = r.uniform(size=shape)
    prob = exposure_probability(config, truth, noise)
    truth.exposure_prob = prob
    return (u < prob).astype(np.uint8)


def quantile_bins(scores: np.ndarray, bins: int = 5) -> np.ndarray:
    """Map scores to 1..bins by population quantile. Tied scores share their
    mid-rank, so a constant population lands in the median bin."""
    flat = np.asarray(scores, dtype=np.float64).ravel()
    n = flat.size
    if n == 0:
        return np.zeros(np.shape(scores), dtype=np.int64)
    ordered = np.sort(flat)
    lo = np.searchsorted(ordered, flat, side="left")
    hi = np.searchsorted(ordered, flat, side="right") - 1
    mid = 0.5 * (lo + hi)
    out = np.floor(bins * (mid + 0.5) / n).astype(np.int64) + 1
    return np.minimum(out, bins).reshape(np.shape(scores))


def feedback_scores(config: SynthConfig, truth: SynthGroundTruth, noise: np.ndarray) -> np.ndarray:
    return truth.user_emb @ truth.item_emb.T + config.beta * (truth.z @ truth.item_conf.T) + FEEDBACK_NOISE * noise


def sample_feedback(config: SynthConfig, truth: SynthGroundTruth, rng: RngStream) -> np.ndarray:
    """Full counterfactual rating table in 1..5."""
    r = rng.substream("feedback")
    noise = r.normal((config.num_users, config.num_items))
    truth.scores = feedback_scores(config, truth, noise)
    return quantile_bins(truth.scores)


def make_splits(config: SynthConfig, truth: SynthGroundTruth, rng: RngStream) -> DatasetBundle:
    if config.num_items < UNBIASED_PER_USER:
        raise ConfigError(f"num_items must be at least {UNBIASED_PER_USER} for the unbiased slate")
    m, n = config.num_users, config.num_items
    r = rng.substream("splits")

    tu, ti = np.nonzero(truth.exposure)
    train = (tu.astype(np.int64), ti.astype(np.int64), truth.ratings[tu, ti].astype(np.int64))

    slate_users = np.repeat(np.arange(m), UNBIASED_PER_USER)
    slate_items = np.concatenate(
        [np.sort(r.generator.choice(n, UNBIASED_PER_USER, replace=False)) for _ in range(m)]
    )
    total = slate_users.size
    n_valid = int(round(VALID_FRACTION * total))
    is_valid = np.zeros(total, dtype=bool)
    is_valid[r.permutation(total)[:n_valid]] = True

    def take(mask):
        u, i = slate_users[mask], slate_items[mask]
        return u, i, truth.ratings[u, i].astype(np.int64)

    return DatasetBundle(
        num_users=m,
        num_items=n,
        train=train,
        valid=take(is_valid),
        test=take(~is_valid),
        proxy=truth.w.copy(),
        truth=truth,
        config=config,
    )


def generate(config: SynthConfig) -> DatasetBundle:
    """The whole bundle as a pure function of the config."""
    rng = RngStream(config.seed, "synthgen")
    z, w = sample_confounders(config, rng)
    params = rng.substream("parameters")
    truth = SynthGroundTruth(z=z, w=w)
    truth.mixing = params.uniform(-1.0, 1.0, size=(LATENT_DIM, LATENT_DIM))
    truth.item_conf = params.normal((config.num_items, LATENT_DIM))
    truth.user_emb = params.normal((config.num_users, config.embed_dim))
    truth.item_emb = params.normal((config.num_items, config.embed_dim))
    truth.exposure = sample_exposure(config, truth, rng)
    truth.ratings = sample_feedback(config, truth, rng)
    return make_splits(config, truth, rng)
