"""Objectives, schedules, Adam, source pretraining and adversarial adaptation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .corpus import EOS_ID, DialogueAct, Example
from .critics import (DomainExample, dc_head_names, dc_loss, sc_loss, sc_names,
                      similarity_pairs)
from .evaluation import bleu, rerank, slot_error_rate
from .generator import (Candidate, Gaussian, Model, approximate_posterior, beam_search,
                        encode_da, encode_utterance, generator_names, make_context, prior,
                        project_latent, sample_latent, save_checkpoint, sequence_log_prob,
                        shared_names)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    d_h: int = 80
    d_z: int = 16
    beam_width: int = 10
    keep_dropout: float = 0.70
    lr: float = 0.001
    lr_decay: float = 0.95
    decay_start_epochs: int = 5
    num_steps: int = 8600
    kl_anneal_steps: int = 2000
    K: int = 10
    k: int = 3
    M: int = 1
    max_epochs: int = 30
    patience: int = 3
    max_len: int = 40
    penalty_weight: float = 1.0
    init_scale: float = 0.08
    use_dc: bool = True
    use_sc: bool = True
    seed: int = 1

    def __post_init__(self):
        for name in ("d_h", "d_z", "beam_width", "lr", "num_steps", "kl_anneal_steps", "K",
                     "k", "M", "max_epochs", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if not 0.0 < self.keep_dropout <= 1.0:
            raise ValueError("TrainConfig.keep_dropout must lie in (0, 1]")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("TrainConfig.lr_decay must lie in (0, 1]")


# --- objectives and schedules -------------------------------------------------

def kl_gaussians(q: Gaussian, p: Gaussian) -> Node:
    """KL(q || p) for diagonal Gaussians given as (mu, log_var)."""
    if q.mu.shape != p.mu.shape:
        raise ad.ShapeError(f"kl_gaussians: dimension mismatch {q.mu.shape} vs {p.mu.shape}")
    diff = ad.sub(q.mu, p.mu)
    num = ad.add(ad.exp(q.log_var), ad.square(diff))
    ratio = ad.mul(num, ad.exp(ad.scale(p.log_var, -1.0)))
    terms = ad.add(ad.sub(p.log_var, q.log_var), ratio)
    return ad.scale(ad.sub(ad.sum_(terms), ad.constant(float(q.mu.shape[0]))), 0.5)


def kl_anneal_weight(step: int, anneal_steps: int) -> float:
    return min(1.0, step / anneal_steps)


def grl_lambda(step: int, num_steps: int) -> float:
    p = float(step) / num_steps
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0


def lr_at_epoch(cfg: TrainConfig, epoch: int, decay_start: int | None = None) -> float:
    start = cfg.decay_start_epochs if decay_start is None else decay_start
    return cfg.lr * cfg.lr_decay ** max(0, epoch - start)


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Node], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> None:
    """Bias-corrected Adam, in place. Step counts are kept per parameter."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.value.shape:
            raise ad.ShapeError(f"adam: gradient shape {g.shape} for {name} of {p.value.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
            state.t[name] = 0
        t = state.t[name] + 1
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        state.m[name], state.v[name], state.t[name] = m, v, t
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def gradients(loss: Node, params: dict[str, Node], names: Sequence[str]) -> dict[str, np.ndarray]:
    grads = ad.grad_of(loss, [params[n] for n in names])
    return dict(zip(names, grads))


def target_ids(model: Model, ex: Example) -> list[int]:
    return model.vocab.ids(ex.tokens) + [EOS_ID]


@dataclass
class VAELoss:
    total: Node
    kl: Node
    recon: Node
    kl_weight: float


def vae_loss(model: Model, da: DialogueAct, ids: Sequence[int], step: int, cfg: TrainConfig,
             rng: np.random.Generator | None = None, eps=None, train: bool = True) -> VAELoss:
    """Annealed negative lower bound: w * KL(q || p) - log p(y | z, d), one posterior sample.

    ``ids`` excludes EOS. Pass ``eps`` (and ``train=False``) for a
    deterministic graph.
    """
    params = model.params
    keep = cfg.keep_dropout if train else 1.0
    enc_d = encode_da(da, model.vocab, params, keep, rng)
    enc_y = encode_utterance(ids, params, keep, rng)
    post = approximate_posterior(enc_d.pooled, enc_y.pooled, params)
    pri = prior(enc_d.pooled, params)
    recon_terms = []
    for _ in range(cfg.M):
        e = rng.standard_normal(model.cfg.d_z) if eps is None else eps
        ctx = make_context(project_latent(sample_latent(post, e), params), enc_d, params)
        recon_terms.append(sequence_log_prob(ctx, list(ids) + [EOS_ID], params, keep, rng))
    recon = ad.scale(ad.add_n(recon_terms), -1.0 / cfg.M)
    kl = kl_gaussians(post, pri)
    w = kl_anneal_weight(step, cfg.kl_anneal_steps)
    return VAELoss(ad.add(ad.scale(kl, w), recon), kl, recon, w)


# --- logs ---------------------------------------------------------------------

@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, **rec) -> None:
        self.records.append({k: (round(float(v), 12) if isinstance(v, (float, np.floating)) else v)
                             for k, v in rec.items()})

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


# --- generation and evaluation ------------------------------------------------

def overgenerate(model: Model, da: DialogueAct, cfg: TrainConfig, width: int | None = None,
                 lexicon=None) -> list[Candidate]:
    """Beam search K candidates, then re-rank by slot coverage."""
    cands = beam_search(da, model.vocab, model.params, width or cfg.K, cfg.max_len)
    return rerank(cands, da, cfg.penalty_weight, lexicon)


def evaluate_model(model: Model, data: Sequence[Example], cfg: TrainConfig,
                   lexicon=None) -> tuple[float, float]:
    """(BLEU, ERR%) of the top re-ranked candidate over ``data``."""
    hyps = []
    for ex in data:
        cands = overgenerate(model, ex.da, cfg, cfg.beam_width, lexicon)
        hyps.append(list(cands[0].tokens) if cands else [])
    refs = [list(ex.tokens) for ex in data]
    return bleu(hyps, refs), slot_error_rate(zip(hyps, [ex.da for ex in data]), lexicon)


def _rngs(seed: int) -> dict[str, np.random.Generator]:
    names = ("order", "noise", "source", "critic")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {n: p.value.copy() for n, p in model.params.items()}


def _restore(model: Model, snap: dict[str, np.ndarray]) -> None:
    for n, v in snap.items():
        model.params[n].value = v.copy()


@dataclass
class Trainer:
    """Owns the optimiser states, step counters and log of one training run."""
    model: Model
    cfg: TrainConfig
    log: TrainLog = field(default_factory=TrainLog)
    gen_opt: AdamState = field(default_factory=AdamState)
    dc_opt: AdamState = field(default_factory=AdamState)
    sc_opt: AdamState = field(default_factory=AdamState)
    gen_steps: int = 0
    dc_steps: int = 0
    dc_seen: dict = field(default_factory=lambda: {"source": 0, "target": 0, "generated": 0})

    def __post_init__(self):
        self.rngs = _rngs(self.cfg.seed)
        self.gen_names = generator_names(self.model.params)
        self.shared = shared_names(self.model.params)
        self.dc_names = dc_head_names(self.model.params)
        self.sc_names = sc_names(self.model.params)

    # single optimiser steps
    def generator_step(self, ex: Example, lr: float, phase: str) -> float:
        out = vae_loss(self.model, ex.da, self.model.vocab.ids(ex.tokens), self.gen_steps,
                       self.cfg, self.rngs["noise"])
        grads = gradients(out.total, self.model.params, self.gen_names)
        adam_step(self.model.params, grads, self.gen_opt, lr)
        self.gen_steps += 1
        self.log.append(step=self.gen_steps, phase=phase, kind="G", total=float(out.total.value),
                        kl=float(out.kl.value), recon=float(out.recon.value),
                        kl_weight=out.kl_weight)
        return float(out.total.value)

    def dc_step(self, batch: Sequence[DomainExample], lr: float) -> float:
        """DC head descends its loss; shared encoder/posterior get the reversed gradient.

        The reversed gradient is applied through the generator's Adam state, so
        its size is judged against the generator's own gradient history.
        """
        lam = grl_lambda(self.dc_steps, self.cfg.num_steps)
        loss = dc_loss(batch, self.model.vocab, self.model.params, lam)
        grads = gradients(loss, self.model.params, self.dc_names + self.shared)
        adam_step(self.model.params, {n: grads[n] for n in self.dc_names}, self.dc_opt, lr)
        adam_step(self.model.params, {n: grads[n] for n in self.shared}, self.gen_opt, lr)
        self.dc_steps += 1
        for ex in batch:
            self.dc_seen[ex.label] += 1
        self.log.append(step=self.gen_steps, phase="adapt", kind="D", dc_loss=float(loss.value),
                        lambda_p=lam)
        return float(loss.value)

    def sc_step(self, pairs, lr: float) -> float:
        loss = sc_loss(pairs, self.model.params)
        grads = gradients(loss, self.model.params, self.sc_names)
        adam_step(self.model.params, grads, self.sc_opt, lr)
        self.log.append(step=self.gen_steps, phase="adapt", kind="S", sc_loss=float(loss.value))
        return float(loss.value)


def _run_epochs(trainer: Trainer, train: Sequence[Example], valid: Sequence[Example],
                epoch_fn, decay_start: int, checkpoint_path=None, lexicon=None) -> Model:
    """Epoch loop with lr decay and early stopping on validation BLEU."""
    cfg, model = trainer.cfg, trainer.model
    best_bleu, best_snap, bad = -1.0, _snapshot(model), 0
    for epoch in range(cfg.max_epochs):
        lr = lr_at_epoch(cfg, epoch, decay_start)
        order = trainer.rngs["order"].permutation(len(train))
        for i in order:
            epoch_fn(train[int(i)], lr)
        if not valid:
            best_snap = _snapshot(model)
            continue
        v_bleu, v_err = evaluate_model(model, valid, cfg, lexicon)
        trainer.log.append(step=trainer.gen_steps, phase="valid", kind="V", epoch=epoch,
                           bleu=v_bleu, err=v_err, lr=lr)
        log.info("epoch %d lr %.6f valid BLEU %.4f ERR %.2f", epoch, lr, v_bleu, v_err)
        if v_bleu > best_bleu:
            best_bleu, best_snap, bad = v_bleu, _snapshot(model), 0
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model)
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    _restore(model, best_snap)
    return model


def pretrain_source(model: Model, train: Sequence[Example], valid: Sequence[Example],
                    cfg: TrainConfig, trainer: Trainer | None = None, checkpoint_path=None,
                    lexicon=None) -> Model:
    """Fit the variational generator on source pairs; keep the best-validation-BLEU weights."""
    if not train:
        raise ValueError("pretrain_source: empty training set")
    trainer = trainer or Trainer(model, cfg)
    return _run_epochs(trainer, train, valid,
                       lambda ex, lr: trainer.generator_step(ex, lr, "pretrain"),
                       cfg.decay_start_epochs, checkpoint_path, lexicon)


def adapt_iteration(trainer: Trainer, ex_t: Example, source: Sequence[Example], lr: float) -> None:
    """One target example's pass through the adversarial procedure."""
    cfg, model = trainer.cfg, trainer.model
    vocab = model.vocab
    ex_s = source[int(trainer.rngs["source"].integers(len(source)))]
    y_t, y_s = tuple(vocab.ids(ex_t.tokens)), tuple(vocab.ids(ex_s.tokens))
    if cfg.use_dc:
        trainer.dc_step([DomainExample(ex_s.da, y_s, "source"),
                         DomainExample(ex_t.da, y_t, "target")], lr)
    trainer.generator_step(ex_t, lr, "adapt")
    if cfg.use_sc:
        trainer.sc_step(similarity_pairs(y_t, y_s), lr)
    if not (cfg.use_dc or cfg.use_sc):
        return
    cands = overgenerate(model, ex_t.da, cfg, cfg.K)
    kept = [c for c in cands if c.ids][:cfg.k]
    for c in kept:
        if cfg.use_dc:
            trainer.dc_step([DomainExample(ex_t.da, tuple(c.ids), "generated")], lr)
        if cfg.use_sc:
            pairs = similarity_pairs(y_t, y_s, [c.ids])[1:]
            trainer.sc_step(pairs, lr)


def adapt(model: Model | None, source: Sequence[Example], target: Sequence[Example],
          valid: Sequence[Example], cfg: TrainConfig, trainer: Trainer | None = None,
          checkpoint_path=None, lexicon=None) -> Model:
    """Adversarial adaptation from a pretrained model to the target domain."""
    if model is None:
        raise ValueError("adapt: a pretrained model is required")
    if not target:
        return model
    if not source:
        raise ValueError("adapt: empty source set")
    trainer = trainer or Trainer(model, cfg)
    return _run_epochs(trainer, target, valid,
                       lambda ex, lr: adapt_iteration(trainer, ex, source, lr),
                       cfg.decay_start_epochs, checkpoint_path, lexicon)


def model_kwargs(cfg: TrainConfig) -> dict:
    return {"d_h": cfg.d_h, "d_z": cfg.d_z, "init_scale": cfg.init_scale}


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
