"""Desk-scale adaptation experiment on the synthetic two-domain task."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .corpus import build_vocab
from .generator import Model
from .synthetic import RESTAURANT, make_corpus, two_domain_task
from .training import (TrainConfig, Trainer, adapt, evaluate_model, model_kwargs,
                       pretrain_source)

CONDITIONS = ("scratch", "adapt", "adapt+sc+dc")


@dataclass
class RunResult:
    seed: int
    condition: str
    bleu: float
    err: float
    seconds: float


def trend_config(**overrides) -> TrainConfig:
    base = dict(d_h=32, d_z=8, keep_dropout=1.0, lr=0.003, max_epochs=12, patience=3,
                decay_start_epochs=5, kl_anneal_steps=1000, beam_width=5, K=5, k=3, max_len=30)
    base.update(overrides)
    return TrainConfig(**base)


def run_seed(seed: int, cfg: TrainConfig, pretrain_cfg: TrainConfig | None = None,
             n_source: int = 200, n_target: int = 20) -> list[RunResult]:
    """All three conditions for one seed; the two adapted runs share one pretraining.

    Reported seconds for adapted conditions include the shared pretraining time.
    """
    task = two_domain_task(seed, n_source=n_source, n_target=n_target)
    vocab = build_vocab([ex for split in task.values() for ex in split])
    pcfg = pretrain_cfg or cfg
    test = task["target_test"]
    results = []

    t0 = time.perf_counter()
    scratch = Model.create(vocab, seed, **model_kwargs(cfg))
    pretrain_source(scratch, task["target"], task["target_valid"],
                    dataclasses.replace(pcfg, seed=seed))
    b, e = evaluate_model(scratch, test, cfg)
    results.append(RunResult(seed, "scratch", b, e, time.perf_counter() - t0))

    t0 = time.perf_counter()
    base = Model.create(vocab, seed, **model_kwargs(cfg))
    pretrain_source(base, task["source"], task["source_valid"], dataclasses.replace(pcfg, seed=seed))
    t_pre = time.perf_counter() - t0

    for name, use in (("adapt", False), ("adapt+sc+dc", True)):
        t0 = time.perf_counter()
        model = base.copy()
        acfg = dataclasses.replace(cfg, seed=seed, use_dc=use, use_sc=use)
        adapt(model, task["source"], task["target"], task["target_valid"], acfg, Trainer(model, acfg))
        b, e = evaluate_model(model, test, cfg)
        results.append(RunResult(seed, name, b, e, t_pre + time.perf_counter() - t0))
    return results


def summarize(results: list[RunResult]) -> dict[str, dict[str, float]]:
    out = {}
    for cond in CONDITIONS:
        rs = [r for r in results if r.condition == cond]
        out[cond] = {"bleu": float(np.median([r.bleu for r in rs])),
                     "err": float(np.median([r.err for r in rs])),
                     "max_seconds": max(r.seconds for r in rs)}
    return out


@dataclass
class SmokeResult:
    steps: int
    bleu: float
    err: float
    seconds: float


def overfit_smoke(seed: int = 0, max_steps: int = 2000, eval_every: int = 100,
                  n_pairs: int = 10, **overrides) -> SmokeResult:
    """Fit a handful of pairs until beam search reproduces them.

    Training visits the pairs in a seeded shuffled order; every
    ``eval_every`` steps the corpus is decoded and scored against itself.
    Stops at BLEU >= 0.99 with ERR 0, or after ``max_steps``.
    """
    base = dict(d_h=32, d_z=8, keep_dropout=1.0, lr=0.003, beam_width=5, max_len=30, seed=seed)
    base.update(overrides)
    cfg = TrainConfig(**base)
    data = make_corpus(RESTAURANT, n_pairs, seed, "source")
    model = Model.create(build_vocab(data), seed, **model_kwargs(cfg))
    trainer = Trainer(model, cfg)
    t0 = time.perf_counter()
    order: list[int] = []
    b, e = 0.0, float("inf")
    for step in range(1, max_steps + 1):
        if not order:
            order = [int(i) for i in trainer.rngs["order"].permutation(len(data))]
        trainer.generator_step(data[order.pop()], cfg.lr, "smoke")
        if step % eval_every == 0:
            b, e = evaluate_model(model, data, cfg)
            if b >= 0.99 and e == 0.0:
                return SmokeResult(step, b, e, time.perf_counter() - t0)
    return SmokeResult(max_steps, b, e, time.perf_counter() - t0)
