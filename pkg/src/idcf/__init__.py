"""Deconfounded recommendation with proxy-identified latent confounders."""

from .confounder import ConfounderConfig, IvaeModel, UserConfounders, VaeModel, train_confounder
from .data import Dataset, load_checkpoint, load_dataset, save_checkpoint, write_dataset
from .errors import IdcfError
from .evaluation import evaluate_model, mcc, ndcg_at_k, recall_at_k, welch_t_test
from .feedback import BaselineModel, FeedbackConfig, FeedbackModel, predict, rank_items, train_feedback
from .identify import DiscreteScenario, adjusted_outcome, feasible_interval_no_proxy, solve_with_proxy
from .pipeline import METHODS, train_method
from .synthgen import SynthConfig, generate

__version__ = "0.1.0"
