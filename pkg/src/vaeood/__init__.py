"""Variational-autoencoder likelihoods for outlier detection, with bias correction,
contrast normalization and ensemble-variance scores."""

from .data import Dataset
from .metrics import LabeledScores, auprc, auroc, fpr_at_tpr
from .scoring import Ensemble, ScoreRecord, score_batch
from .vae import VaeConfig, VaeModel, iwae_ll, load_checkpoint, save_checkpoint, train
from .visible import CatCorrectionTable, build_cat_correction, cb_log_pdf, cb_perfect_recon

__all__ = [
    "CatCorrectionTable", "Dataset", "Ensemble", "LabeledScores", "ScoreRecord", "VaeConfig", "VaeModel",
    "auprc", "auroc", "build_cat_correction", "cb_log_pdf", "cb_perfect_recon", "fpr_at_tpr", "iwae_ll",
    "load_checkpoint", "save_checkpoint", "score_batch", "train",
]
