"""Variational generator: BiLSTM encoder, Gaussian inferers, VRALSTM decoder.

Parameters live in one flat ``dict[str, Node]``. Generator names are
prefixed ``enc.``, ``post.``, ``prior.`` and ``dec.``; the critics add
``sc.`` and ``dc.`` entries to the same store (see :mod:`vdanlg.critics`).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .corpus import (BOS_ID, EOS_ID, DialogueAct, Vocab, act_token, slot_token,
                     value_token)

Params = dict[str, Node]

CKPT_MAGIC = b"VDANLG-CKPT\n"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_h: int = 80
    d_z: int = 16
    d_e: int | None = None  # defaults to d_h so the decoder weight is square
    d_emb: int | None = None
    dc_hidden: int = 64
    init_scale: float = 0.08

    @property
    def de(self) -> int:
        return self.d_h if self.d_e is None else self.d_e

    @property
    def demb(self) -> int:
        return self.d_h if self.d_emb is None else self.d_emb


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    V, h, z, e, m, k = cfg.vocab_size, cfg.d_h, cfg.d_z, cfg.de, cfg.demb, cfg.dc_hidden
    shapes = {"enc.emb": (V, m)}
    for d in ("fwd", "bwd"):
        shapes[f"enc.{d}.W"] = (4 * h, m + h)
        shapes[f"enc.{d}.b"] = (4 * h,)
    shapes.update({
        "post.Wz": (z, 2 * h), "post.bz": (z,),
        "post.Wmu": (z, z), "post.bmu": (z,),
        "post.Wsig": (z, z), "post.bsig": (z,),
        "prior.Wz": (z, h), "prior.bz": (z,),
        "prior.Wmu": (z, z), "prior.bmu": (z,),
        "prior.Wsig": (z, z), "prior.bsig": (z,),
        "dec.We": (e, z), "dec.be": (e,),
        "dec.emb": (V, m),
        "dec.att.W": (h, h), "dec.att.U": (h, h), "dec.att.v": (h,),
        # gate weight over [h_e; d_t; h_{t-1}; y_t]
        "dec.W": (4 * h, e + h + h + m),
        "dec.Wout": (V, h), "dec.bout": (V,),
        # text similarity critic: second BiLSTM and head
        "sc.emb": (V, m),
    })
    for d in ("fwd", "bwd"):
        shapes[f"sc.{d}.W"] = (4 * h, m + h)
        shapes[f"sc.{d}.b"] = (4 * h,)
    shapes.update({
        "sc.w": (1, 2 * h), "sc.b": (1,),
        # domain critic head over [h_D; h_Y; mu]
        "dc.W1": (k, 2 * h + z), "dc.b1": (k,),
        "dc.W2": (k, k), "dc.b2": (k,),
        "dc.Wout": (3, k), "dc.bout": (3,),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int | np.random.Generator) -> Params:
    rng = np.random.default_rng(seed)
    s = cfg.init_scale
    return {name: ad.parameter(rng.uniform(-s, s, size=shape), name=name)
            for name, shape in param_shapes(cfg).items()}


def zero_params(cfg: ModelConfig) -> Params:
    return {name: ad.parameter(np.zeros(shape), name=name)
            for name, shape in param_shapes(cfg).items()}


def generator_names(params: Params) -> list[str]:
    return [n for n in params if n.split(".")[0] in ("enc", "post", "prior", "dec")]


def shared_names(params: Params) -> list[str]:
    """Encoder and posterior parameters, shared with the domain critic."""
    return [n for n in params if n.split(".")[0] in ("enc", "post")]


# --- encoder -----------------------------------------------------------------

@dataclass
class EncoderOutput:
    states: list[Node]
    matrix: Node  # (L, d_h) stack of states
    pooled: Node


def lstm_step(x: Node, h: Node, c: Node, W: Node, b: Node) -> tuple[Node, Node]:
    d = h.value.shape[0]
    z = ad.add(ad.matmul(W, ad.concat([x, h])), b)
    i = ad.sigmoid(ad.slice_(z, 0, d))
    f = ad.sigmoid(ad.slice_(z, d, 2 * d))
    o = ad.sigmoid(ad.slice_(z, 2 * d, 3 * d))
    g = ad.tanh(ad.slice_(z, 3 * d, 4 * d))
    c = ad.add(ad.mul(f, c), ad.mul(i, g))
    return ad.mul(o, ad.tanh(c)), c


def encode_sequence(embeds: Sequence[Node], params: Params, prefix: str = "enc") -> EncoderOutput:
    """BiLSTM over embedded inputs; states are forward + backward, pooled by mean."""
    if not embeds:
        raise ValueError("encode_sequence: empty sequence")
    d = params[f"{prefix}.fwd.b"].value.shape[0] // 4
    zero = ad.constant(np.zeros(d))
    L = len(embeds)
    fwd: list[Node] = []
    h, c = zero, zero
    for t in range(L):
        h, c = lstm_step(embeds[t], h, c, params[f"{prefix}.fwd.W"], params[f"{prefix}.fwd.b"])
        fwd.append(h)
    bwd: list[Node] = [zero] * L
    h, c = zero, zero
    for t in reversed(range(L)):
        h, c = lstm_step(embeds[t], h, c, params[f"{prefix}.bwd.W"], params[f"{prefix}.bwd.b"])
        bwd[t] = h
    states = [ad.add(a, b) for a, b in zip(fwd, bwd)]
    matrix = ad.stack(states)
    return EncoderOutput(states, matrix, ad.mean_pool(matrix))


def embed_tokens(ids: Sequence[int], table: Node, keep: float = 1.0,
                 rng: np.random.Generator | None = None) -> list[Node]:
    train = keep < 1.0
    return [ad.dropout(ad.take_row(table, i), keep, rng, train) for i in ids]


def embed_da(da: DialogueAct, vocab: Vocab, table: Node, keep: float = 1.0,
             rng: np.random.Generator | None = None) -> list[Node]:
    """Act element followed by one element per slot: emb(slot name) + emb(value)."""
    train = keep < 1.0
    elems = [ad.take_row(table, vocab.id(act_token(da.act_type)))]
    for name, value in da.slots:
        elems.append(ad.add(ad.take_row(table, vocab.id(slot_token(name))),
                            ad.take_row(table, vocab.id(value_token(value)))))
    return [ad.dropout(e, keep, rng, train) for e in elems]


def encode_da(da: DialogueAct, vocab: Vocab, params: Params, keep: float = 1.0,
              rng=None) -> EncoderOutput:
    return encode_sequence(embed_da(da, vocab, params["enc.emb"], keep, rng), params, "enc")


def encode_utterance(ids: Sequence[int], params: Params, keep: float = 1.0,
                     rng=None, prefix: str = "enc") -> EncoderOutput:
    return encode_sequence(embed_tokens(ids, params[f"{prefix}.emb"], keep, rng), params, prefix)


# --- inferer -----------------------------------------------------------------

@dataclass
class Gaussian:
    mu: Node
    log_var: Node


def _gaussian_head(x: Node, params: Params, prefix: str) -> Gaussian:
    hz = ad.relu(ad.add(ad.matmul(params[f"{prefix}.Wz"], x), params[f"{prefix}.bz"]))
    mu = ad.add(ad.matmul(params[f"{prefix}.Wmu"], hz), params[f"{prefix}.bmu"])
    lv = ad.add(ad.matmul(params[f"{prefix}.Wsig"], hz), params[f"{prefix}.bsig"])
    return Gaussian(mu, lv)


def approximate_posterior(h_D: Node, h_Y: Node, params: Params) -> Gaussian:
    return _gaussian_head(ad.concat([h_D, h_Y]), params, "post")


def prior(h_D: Node, params: Params) -> Gaussian:
    return _gaussian_head(h_D, params, "prior")


def sample_latent(g: Gaussian, eps) -> Node:
    """Reparameterised draw mu + exp(0.5 log_var) * eps."""
    eps = ad.as_node(eps)
    return ad.add(g.mu, ad.mul(ad.exp(ad.scale(g.log_var, 0.5)), eps))


def project_latent(h_z: Node, params: Params) -> Node:
    return ad.relu(ad.add(ad.matmul(params["dec.We"], h_z), params["dec.be"]))


# --- decoder -----------------------------------------------------------------

@dataclass
class DecoderState:
    h: Node
    c: Node
    step: int = 0


@dataclass
class DecodeContext:
    """Per-DA quantities fixed across decoding steps."""
    h_e: Node
    slots: Node  # (L, d_h) DA encoder states
    slots_proj: Node  # slots @ U_a, computed once


def make_context(h_e: Node, da_enc: EncoderOutput, params: Params) -> DecodeContext:
    return DecodeContext(h_e, da_enc.matrix, ad.matmul(da_enc.matrix, params["dec.att.U"]))


def attend_da(h_prev: Node, ctx: DecodeContext, params: Params) -> Node:
    """Additive attention: e_i = v . tanh(W_a h_{t-1} + U_a h_i), d_t = sum_i alpha_i h_i.

    ``dec.att.U`` is stored transposed, (d_h, d_a), so ``slots @ U`` projects every row.
    """
    q = ad.matmul(params["dec.att.W"], h_prev)
    e = ad.matmul(ad.tanh(ad.add_rowwise(ctx.slots_proj, q)), params["dec.att.v"])
    alpha = ad.softmax(e)
    return ad.matmul(alpha, ctx.slots)


def initial_state(params: Params) -> DecoderState:
    d = params["dec.Wout"].value.shape[1]
    z = ad.constant(np.zeros(d))
    return DecoderState(z, z, 0)


def decode_step(y_emb: Node, ctx: DecodeContext, state: DecoderState,
                params: Params) -> tuple[DecoderState, Node]:
    """One VRALSTM step. Returns the next state and the output logits."""
    d = state.h.value.shape[0]
    d_t = attend_da(state.h, ctx, params)
    z = ad.matmul(params["dec.W"], ad.concat([ctx.h_e, d_t, state.h, y_emb]))
    i = ad.sigmoid(ad.slice_(z, 0, d))
    f = ad.sigmoid(ad.slice_(z, d, 2 * d))
    o = ad.sigmoid(ad.slice_(z, 2 * d, 3 * d))
    g = ad.tanh(ad.slice_(z, 3 * d, 4 * d))
    c = ad.add(ad.mul(f, state.c), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    logits = ad.add(ad.matmul(params["dec.Wout"], h), params["dec.bout"])
    return DecoderState(h, c, state.step + 1), logits


def output_distribution(logits: Node) -> Node:
    return ad.softmax(logits)


def sequence_log_prob(ctx: DecodeContext, target_ids: Sequence[int], params: Params,
                      keep: float = 1.0, rng=None) -> Node:
    """Teacher-forced sum of log p(y_t | y_<t, z, d); ``target_ids`` must end with EOS."""
    if not target_ids or target_ids[-1] != EOS_ID:
        raise ValueError("sequence_log_prob: target must be terminated by EOS")
    V = params["dec.Wout"].value.shape[0]
    for t in target_ids:
        if not 0 <= t < V:
            raise ValueError(f"sequence_log_prob: token id {t} outside vocabulary of size {V}")
    inputs = [BOS_ID] + list(target_ids[:-1])
    state = initial_state(params)
    losses = []
    for y_in, y_out in zip(embed_tokens(inputs, params["dec.emb"], keep, rng), target_ids):
        state, logits = decode_step(y_in, ctx, state, params)
        losses.append(ad.softmax_cross_entropy(logits, y_out))
    return ad.scale(ad.add_n(losses), -1.0)


# --- beam search -------------------------------------------------------------

@dataclass
class Candidate:
    ids: tuple[int, ...]  # emitted tokens, EOS excluded
    log_prob: float
    truncated: bool = False
    tokens: tuple[str, ...] = ()
    missing: int = 0
    redundant: int = 0
    score: float = 0.0
    beam_rank: int = 0

    @property
    def length(self) -> int:
        """Number of scored steps; EOS counts as a token."""
        return len(self.ids) + (0 if self.truncated else 1)

    @property
    def norm_log_prob(self) -> float:
        return self.log_prob / max(self.length, 1)


def decode_context(da: DialogueAct, vocab: Vocab, params: Params) -> DecodeContext:
    """Decoding-time context: h_z is the prior mean."""
    enc = encode_da(da, vocab, params)
    pr = prior(enc.pooled, params)
    return make_context(project_latent(pr.mu, params), enc, params)


def _log_probs(logits: Node) -> np.ndarray:
    v = logits.value
    z = v - v.max()
    return z - np.log(np.exp(z).sum())


def beam_search(da: DialogueAct, vocab: Vocab, params: Params, width: int = 10,
                max_len: int = 40, ctx: DecodeContext | None = None) -> list[Candidate]:
    """Length-expanding beam over cumulative log-probability.

    Hypotheses emitting EOS retire; the search stops when no live hypothesis
    remains or ``max_len`` is reached. Returns up to ``width`` finished
    candidates sorted by length-normalised log-probability, or the truncated
    live hypotheses (flagged) if nothing finished.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    with ad.no_grad():
        if ctx is None:
            ctx = decode_context(da, vocab, params)
        table = params["dec.emb"]
        live = [((), 0.0, initial_state(params))]
        finished: list[Candidate] = []
        for _ in range(max_len):
            expansions = []
            for ids, lp, state in live:
                prev = ids[-1] if ids else BOS_ID
                nstate, logits = decode_step(ad.take_row(table, prev), ctx, state, params)
                step_lp = _log_probs(logits)
                for tok in range(step_lp.shape[0]):
                    expansions.append((lp + step_lp[tok], ids, tok, nstate))
            # stable: ties keep hypothesis order, then token order
            order = sorted(range(len(expansions)), key=lambda j: -expansions[j][0])[:width]
            live = []
            for j in order:
                lp, ids, tok, nstate = expansions[j]
                if tok == EOS_ID:
                    finished.append(Candidate(ids, float(lp)))
                else:
                    live.append((ids + (tok,), lp, nstate))
            if not live:
                break
            # a live hypothesis can finish no higher than lp / max_len, since
            # log-probs only fall; stop once none can enter the top ``width``
            if len(finished) >= width:
                kth = sorted((c.norm_log_prob for c in finished), reverse=True)[width - 1]
                if max(lp for _, lp, _ in live) / max_len < kth:
                    break
        if finished:
            out = finished
        else:
            out = [Candidate(ids, float(lp), truncated=True) for ids, lp, _ in live]
        out.sort(key=lambda c: -c.norm_log_prob)
        out = out[:width]
        for rank, cand in enumerate(out):
            cand.tokens = tuple(vocab.decode(cand.ids))
            cand.beam_rank = rank
        return out


def greedy_decode(da: DialogueAct, vocab: Vocab, params: Params, max_len: int = 40,
                  ctx: DecodeContext | None = None) -> Candidate:
    with ad.no_grad():
        if ctx is None:
            ctx = decode_context(da, vocab, params)
        state = initial_state(params)
        prev, ids, total = BOS_ID, [], 0.0
        for _ in range(max_len):
            state, logits = decode_step(ad.take_row(params["dec.emb"], prev), ctx, state, params)
            lp = _log_probs(logits)
            tok = int(np.argmax(lp))
            total += lp[tok]
            if tok == EOS_ID:
                return Candidate(tuple(ids), float(total), tokens=tuple(vocab.decode(ids)))
            ids.append(tok)
            prev = tok
        return Candidate(tuple(ids), float(total), truncated=True, tokens=tuple(vocab.decode(ids)))


# --- model bundle and checkpoints ----------------------------------------------

@dataclass
class Model:
    cfg: ModelConfig
    vocab: Vocab
    params: Params = field(default_factory=dict)

    @classmethod
    def create(cls, vocab: Vocab, seed: int, **kw) -> "Model":
        cfg = ModelConfig(vocab_size=len(vocab), **kw)
        return cls(cfg, vocab, init_params(cfg, seed))

    def copy(self) -> "Model":
        return Model(self.cfg, self.vocab,
                     {n: ad.parameter(p.value.copy(), name=n) for n, p in self.params.items()})


def save_checkpoint(path: str | Path, model: Model, extra: dict | None = None) -> None:
    """Header (JSON) + row-major little-endian float64 blocks, in header order."""
    names = list(model.params)
    header = {
        "version": CKPT_VERSION,
        "d_h": model.cfg.d_h, "d_z": model.cfg.d_z, "d_e": model.cfg.de,
        "model_config": asdict(model.cfg),
        "vocab_hash": model.vocab.hash(),
        "vocab": list(model.vocab.tokens),
        "params": [[n, list(model.params[n].value.shape)] for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].value, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CKPT_MAGIC)
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    header = json.loads(data[off:off + n].decode("utf-8"))
    off += n
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    vocab = Vocab(tuple(header["vocab"]))
    if vocab.hash() != header["vocab_hash"]:
        raise CheckpointError(f"{path}: vocabulary hash mismatch")
    cfg = ModelConfig(**header["model_config"])
    params: Params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        params[name] = ad.parameter(arr.astype(np.float64), name=name)
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after parameter blocks")
    return Model(cfg, vocab, params), header.get("extra", {})
