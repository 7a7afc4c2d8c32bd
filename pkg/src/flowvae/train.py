"""Training loops: one optimization step for the flow autoencoder, one for
the confidence-mask network against a frozen autoencoder, and a Trainer
that adds batching, augmentation, validation, early stopping, and metric
history with checkpoint resumption."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .autodiff import Tape, backward
from .checkpoint import save_checkpoint
from .faces import FacePairSet, hflip_augment, split_identities
from .losses import (flow_coherence_loss, mask_cross_entropy, prior_loss,
                     reconstruction_loss, soft_confidence_label, total_loss)
from .model import FVAE, reparameterize
from .optim import AdamState, adam_step, clip_gradients


def train_step(model: FVAE, optimizer: AdamState, batch_s: np.ndarray,
               batch_t: np.ndarray, rng: Optional[np.random.Generator]) -> dict:
    """One forward/backward/update pass over a batch of (source, target)."""
    cfg = model.config
    params = model.fvae_parameters()
    for p in params:
        p.zero_grad()
    bs = np.asarray(batch_s, dtype=np.float32)
    bt = np.asarray(batch_t, dtype=np.float32)
    with Tape() as tape:
        mu, lv = model.encode(bt, train=True)
        z = reparameterize(mu, lv, rng=rng)
        flow, warped = model.decode(bs, z, train=True)
        recon = reconstruction_loss(bt, warped)
        prior = prior_loss(mu, lv)
        coherence = flow_coherence_loss(flow, bt, cfg.weights)
        total = total_loss(recon, prior, coherence, cfg.weights)
    backward(tape, total, params)
    grads = clip_gradients({p.name: p.grad for p in params}, cfg.clip_threshold)
    adam_step(params, grads, optimizer)
    return {"recon": recon.item(), "prior": prior.item(),
            "coherence": coherence.item(), "total": total.item()}


def train_mask_step(model: FVAE, optimizer: AdamState, batch_s: np.ndarray,
                    batch_t: np.ndarray) -> dict:
    """One mask-network update against the frozen autoencoder."""
    cfg = model.config
    bs = np.asarray(batch_s, dtype=np.float32)
    bt = np.asarray(batch_t, dtype=np.float32)
    mu, _ = model.encode_np(bt)
    _, warped = model.decode_np(bs, mu)
    label = soft_confidence_label(bt, warped, cfg.weights.beta).data
    params = model.mask_parameters()
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        mask = model.predict_mask(bs, mu, train=True)
        loss = mask_cross_entropy(label, mask)
    if not np.isfinite(loss.item()):
        raise ValueError("mask loss is not finite")
    backward(tape, loss, params)
    grads = clip_gradients({p.name: p.grad for p in params}, cfg.clip_threshold)
    adam_step(params, grads, optimizer)
    return {"mask_loss": loss.item()}


class Trainer:
    """Drives training with a single seeded RNG stream so fixed-seed runs
    are bit-reproducible and checkpoint resumption continues the exact
    trajectory."""

    def __init__(self, model: FVAE, train_pairs: FacePairSet,
                 val_pairs: Optional[FacePairSet] = None):
        cfg = model.config
        self.model = model
        self.config = cfg
        if val_pairs is None:
            fit_ids, val_ids = split_identities(train_pairs.identities(), cfg.seed)
            if not val_ids:
                fit_ids, val_ids = fit_ids, []
            fit = [p for p in train_pairs.pairs if p.identity in set(fit_ids)]
            val = [p for p in train_pairs.pairs if p.identity in set(val_ids)]
            self.train_pairs = FacePairSet(fit)
            self.val_pairs = FacePairSet(val)
        else:
            self.train_pairs = train_pairs
            self.val_pairs = val_pairs
        self.rng = np.random.default_rng(np.random.PCG64(cfg.seed))
        self.optimizer = AdamState(lr=cfg.lr, beta1=cfg.adam_beta1,
                                   beta2=cfg.adam_beta2, eps=cfg.adam_eps)
        self.mask_optimizer = AdamState(lr=cfg.lr, beta1=cfg.adam_beta1,
                                        beta2=cfg.adam_beta2, eps=cfg.adam_eps)
        self.step = 0
        self.mask_step = 0
        self.best_val = float("inf")
        self.evals_since_improve = 0
        self.stopped_early = False
        self.history: list[dict] = []
        self.mask_history: list[dict] = []

    # ----- state round-trip -----

    def trainer_state(self) -> dict:
        return {"best_val": self.best_val,
                "evals_since_improve": self.evals_since_improve,
                "stopped_early": self.stopped_early,
                "mask_step": self.mask_step}

    def restore(self, state: dict) -> None:
        self.step = state["step"]
        if state.get("fvae_adam") is not None:
            self.optimizer = state["fvae_adam"]
        if state.get("mask_adam") is not None:
            self.mask_optimizer = state["mask_adam"]
        if state.get("rng") is not None:
            self.rng.bit_generator.state = state["rng"]
        t = state.get("trainer") or {}
        self.best_val = t.get("best_val", float("inf"))
        self.evals_since_improve = t.get("evals_since_improve", 0)
        self.stopped_early = t.get("stopped_early", False)
        self.mask_step = t.get("mask_step", 0)

    def save(self, path) -> None:
        save_checkpoint(self.model, path, step=self.step,
                        fvae_opt=self.optimizer, mask_opt=self.mask_optimizer,
                        rng_state=self.rng.bit_generator.state,
                        trainer_state=self.trainer_state())

    # ----- batching -----

    def _sample_batch(self, pairs: FacePairSet) -> tuple[np.ndarray, np.ndarray]:
        idx = self.rng.integers(0, len(pairs), size=self.config.batch_size)
        ss, tt = [], []
        for i in idx:
            p = hflip_augment(pairs.pairs[int(i)], self.rng)
            ss.append(p.source)
            tt.append(p.target)
        return np.stack(ss), np.stack(tt)

    # ----- evaluation -----

    def evaluate(self, pairs: FacePairSet) -> float:
        """Mean total loss over a pair set in inference mode with eps = 0."""
        if len(pairs) == 0:
            return float("nan")
        cfg = self.config
        total = 0.0
        for start in range(0, len(pairs), cfg.batch_size):
            chunk = pairs.pairs[start:start + cfg.batch_size]
            bs = np.stack([p.source for p in chunk])
            bt = np.stack([p.target for p in chunk])
            mu, lv = self.model.encode(bt, train=False)
            flow, warped = self.model.decode(bs, mu, train=False)
            recon = reconstruction_loss(bt, warped)
            prior = prior_loss(mu, lv)
            coherence = flow_coherence_loss(flow, bt, cfg.weights)
            val = total_loss(recon, prior, coherence, cfg.weights)
            total += val.item() * len(chunk)
        return total / len(pairs)

    # ----- loops -----

    def train_fvae(self, max_steps: Optional[int] = None,
                   checkpoint_path=None) -> None:
        cfg = self.config
        limit = cfg.max_steps if max_steps is None else max_steps
        while self.step < limit and not self.stopped_early:
            bs, bt = self._sample_batch(self.train_pairs)
            metrics = train_step(self.model, self.optimizer, bs, bt, self.rng)
            self.step += 1
            row = {"step": self.step, **metrics, "val_total": None}
            if cfg.eval_interval and self.step % cfg.eval_interval == 0 \
                    and len(self.val_pairs):
                val = self.evaluate(self.val_pairs)
                row["val_total"] = val
                if val < self.best_val - 1e-9:
                    self.best_val = val
                    self.evals_since_improve = 0
                else:
                    self.evals_since_improve += 1
                    if self.evals_since_improve >= cfg.patience:
                        self.stopped_early = True
            self.history.append(row)
            if checkpoint_path and cfg.checkpoint_interval \
                    and self.step % cfg.checkpoint_interval == 0:
                self.save(checkpoint_path)

    def train_mask(self, steps: Optional[int] = None,
                   pairs: Optional[FacePairSet] = None) -> None:
        limit = self.config.mask_steps if steps is None else steps
        source = pairs if pairs is not None else self.train_pairs
        for _ in range(limit):
            bs, bt = self._sample_batch(source)
            metrics = train_mask_step(self.model, self.mask_optimizer, bs, bt)
            self.mask_step += 1
            self.mask_history.append({"step": self.mask_step, **metrics})
