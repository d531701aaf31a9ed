"""Scikit-learn style wrapper around the network, trainer and evaluator."""
from __future__ import annotations

import dataclasses
from typing import List, Optional

import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .augment import AugConfig
from .cocodata import build_vocab
from .losses import LossWeights
from .metrics import MetricReport
from .network import ModelConfig, MultiTaskNet
from .trainer import (
    EvalConfig,
    OptimizerConfig,
    Prediction,
    TrainConfig,
    build_optimizer,
    evaluate_all,
    predict_images,
    train,
)
from .validation import check_images, check_samples


class MultiTaskEstimator(BaseEstimator):
    """Detection, instance and semantic segmentation, and captioning from one network.

    ``fit`` takes a list of :class:`~mtl_vision.core.Sample`; ``predict`` takes
    RGB images of any size and returns :class:`~mtl_vision.trainer.Prediction`
    objects in the coordinates of each input image.
    """

    def __init__(self, width=0.25, depth=0.33, num_protos=32, dec_layers=2, dec_heads=4, dec_dim=128,
                 dec_ffn=256, max_caption_len=32, semantic_mode="single", implicit=True,
                 l_ie=1e-4, l_td=1e-4, weight_decay=0.01, total_steps=1000, final_lr_fraction=0.0,
                 batch_size=8, target_size=640, augment: Optional[AugConfig] = None,
                 w_det=1.0, w_mask=1.0, w_sem=1.0, w_cap=1.0, min_freq=5,
                 conf_threshold=0.001, iou_threshold=0.65, caption_mode="greedy", beam_width=3,
                 seed=0):
        self.width = width
        self.depth = depth
        self.num_protos = num_protos
        self.dec_layers = dec_layers
        self.dec_heads = dec_heads
        self.dec_dim = dec_dim
        self.dec_ffn = dec_ffn
        self.max_caption_len = max_caption_len
        self.semantic_mode = semantic_mode
        self.implicit = implicit
        self.l_ie = l_ie
        self.l_td = l_td
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.final_lr_fraction = final_lr_fraction
        self.batch_size = batch_size
        self.target_size = target_size
        self.augment = augment
        self.w_det = w_det
        self.w_mask = w_mask
        self.w_sem = w_sem
        self.w_cap = w_cap
        self.min_freq = min_freq
        self.conf_threshold = conf_threshold
        self.iou_threshold = iou_threshold
        self.caption_mode = caption_mode
        self.beam_width = beam_width
        self.seed = seed

    def _eval_config(self) -> EvalConfig:
        return EvalConfig(self.conf_threshold, self.iou_threshold, caption_mode=self.caption_mode,
                          beam_width=self.beam_width, batch_size=self.batch_size)

    def fit(self, X, y=None):
        samples = check_samples(X, require_captions=self.w_cap > 0)
        self.vocab_ = build_vocab([c for s in samples for c in s.captions], self.min_freq)
        cfg = ModelConfig(width=self.width, depth=self.depth, num_protos=self.num_protos,
                          vocab_size=len(self.vocab_), dec_layers=self.dec_layers, dec_heads=self.dec_heads,
                          dec_dim=self.dec_dim, dec_ffn=self.dec_ffn, max_caption_len=self.max_caption_len,
                          semantic_mode=self.semantic_mode, implicit=self.implicit)
        torch.manual_seed(self.seed)
        self.model_ = MultiTaskNet(cfg)
        opt_cfg = OptimizerConfig(self.l_ie, self.l_td, self.weight_decay, self.total_steps,
                                  self.final_lr_fraction)
        aug = dataclasses.replace(self.augment or AugConfig(), target_size=self.target_size)
        self.optimizer_ = build_optimizer(self.model_, opt_cfg)
        self.history_ = train(self.model_, samples, self.vocab_, aug, opt_cfg,
                              LossWeights(self.w_det, self.w_mask, self.w_sem, self.w_cap),
                              TrainConfig(self.batch_size, 0, self.max_caption_len), seed=self.seed,
                              optimizer=self.optimizer_)
        return self

    def predict(self, X) -> List[Prediction]:
        check_is_fitted(self, "model_")
        images = check_images(X)
        return predict_images(self.model_, images, self.vocab_, self._eval_config(), self.target_size,
                              self.max_caption_len)

    def evaluate(self, X) -> MetricReport:
        check_is_fitted(self, "model_")
        samples = check_samples(X)
        return evaluate_all(self.model_, samples, self.vocab_, self._eval_config(), self.target_size,
                            self.max_caption_len)

    def score(self, X, y=None) -> float:
        """Box AP on ``X``."""
        return self.evaluate(X).box_ap
