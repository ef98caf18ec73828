"""The Read-Answer-Check network.

Pipeline for one batch:

1. **Read**: word embeddings are projected to ``d_c`` and passed through
   ``read_layers`` self-attention blocks, giving question tokens ``X``.
2. **Answer**: region features (plus optional coordinate embeddings) are
   projected to ``d_c`` and refined by ``answer_layers`` question-guided
   blocks, giving image tokens ``Y``. The answer token ``A`` is the (masked)
   mean of ``[X, Y]``.
3. **Check**: ``Z = [A, X, Y]`` runs through ``check_layers`` gated unified
   self-attention blocks. Row 0 of each layer's output is that layer's
   answer; the answers are averaged per channel and fed to a linear
   classifier.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (AttentionTrace, BlockParams, GateParams, _Params,
                        question_guided_block, self_attention_block,
                        unified_self_attention_block)
from .errors import ConfigError, ShapeError, UsageError, ValidationError


@dataclass
class LinearParams(_Params):
    w: T.Tensor
    b: T.Tensor

    @classmethod
    def zeros(cls, d_in, d_out, dtype):
        return cls(T.Tensor(np.zeros((d_in, d_out), dtype), requires_grad=True),
                   T.Tensor(np.zeros(d_out, dtype), requires_grad=True))

    @property
    def size(self):
        return self.w.size + self.b.size


class AracModel:
    """Parameters and wiring of the full network for one :class:`ModelConfig`.

    Parameters start at zero; call :func:`init_parameters` (or pass ``seed``)
    before training.
    """

    def __init__(self, config, seed=None):
        config.validate()
        self.config = config
        c = config
        dt = np.dtype(c.dtype)
        self.dtype = dt
        self.word_proj = LinearParams.zeros(c.word_emb_dim, c.d_c, dt)
        self.image_proj = LinearParams.zeros(c.image_feat_dim, c.d_c, dt)
        block = lambda: BlockParams.zeros(c.d_c, c.heads, dt, c.ln_eps)
        self.read = [block() for _ in range(c.read_layers)]
        self.answer = [block() for _ in range(c.answer_layers)]
        self.check = [block() for _ in range(c.check_layers)]
        self.gate = ([GateParams.zeros(c.d_c, c.gate_pool, c.gate_pool, dt) for _ in range(c.check_layers)]
                     if c.use_gate else [])
        self.classifier = LinearParams.zeros(c.d_c, c.n_answers, dt)
        self.pos_question = None
        self.pos_image = None
        if c.positional_encoding in ("question", "both"):
            self.pos_question = T.Tensor(np.zeros((c.n_q_max, c.d_c), dt), requires_grad=True)
        if c.positional_encoding in ("image", "both"):
            width = c.image_feat_dim // 4
            self.pos_image = [LinearParams.zeros(1, width, dt) for _ in range(4)]
        if seed is not None:
            init_parameters(self, seed)

    # -- parameter access ----------------------------------------------------

    def named_parameters(self):
        yield from self.word_proj.named_parameters("word_proj.")
        yield from self.image_proj.named_parameters("image_proj.")
        for group in ("read", "answer", "check", "gate"):
            for i, p in enumerate(getattr(self, group)):
                yield from p.named_parameters(f"{group}.{i}.")
        yield from self.classifier.named_parameters("classifier.")
        if self.pos_question is not None:
            yield "pos_question.table", self.pos_question
        if self.pos_image is not None:
            for i, p in enumerate(self.pos_image):
                yield from p.named_parameters(f"pos_image.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ConfigError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ConfigError(f"parameter {name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr.astype(self.dtype, copy=True)
            p.grad = None

    # -- forward -------------------------------------------------------------

    def _check_batch(self, batch):
        c = self.config
        b, n_q, w = batch.question.shape
        _, n_i, f = batch.image.shape
        if w != c.word_emb_dim or f != c.image_feat_dim:
            raise ShapeError(f"batch feature widths ({w}, {f}) vs config "
                             f"({c.word_emb_dim}, {c.image_feat_dim})")
        if n_q > c.n_q_max or n_i > c.n_i_max:
            raise ShapeError(f"batch has {n_q} words / {n_i} regions, config allows "
                             f"{c.n_q_max} / {c.n_i_max}")
        if batch.image.shape[0] != b or batch.question_mask.shape != (b, n_q) \
                or batch.image_mask.shape != (b, n_i):
            raise ShapeError("batch masks or batch sizes are inconsistent")

    def encode(self, batch, stages=None):
        """Run Read and Answer; return ``(X, Y, q_mask, i_mask)`` (masks ``None`` when off).

        With a ``stages`` dict the per-layer attention weights land in
        ``stages["read"]`` and ``stages["answer"]``.
        """
        self._check_batch(batch)
        c = self.config
        q_mask = batch.question_mask if c.use_masking else None
        i_mask = batch.image_mask if c.use_masking else None
        pos = positional_embeddings(self, n_question=batch.question.shape[1],
                                    box_coords=batch.boxes)
        x = linear_params(T.Tensor(batch.question, dtype=self.dtype), self.word_proj)
        if "question" in pos:
            x = T.add(x, T.expand(pos["question"], x.shape))
        read_w, answer_w = [], []
        for blk in self.read:
            x, w = self_attention_block(x, q_mask, blk)
            read_w.append(w)
        img = T.Tensor(batch.image, dtype=self.dtype)
        if "image" in pos:
            img = T.add(img, pos["image"])
        y = linear_params(img, self.image_proj)
        for blk in self.answer:
            y, w = question_guided_block(y, x, q_mask, blk)
            answer_w.append(w)
        if stages is not None:
            stages["read"], stages["answer"] = read_w, answer_w
        return x, y, q_mask, i_mask

    def forward(self, batch, trace=False):
        """Return ``(logits [B, n_answers], AttentionTrace or None)``."""
        c = self.config
        stages = {} if trace else None
        x, y, q_mask, i_mask = self.encode(batch, stages)
        z = T.concat([x, y], axis=1)
        mask = None if q_mask is None else np.concatenate([q_mask, i_mask], axis=1)
        n_q, n_i = x.shape[1], y.shape[1]
        tr = AttentionTrace(stages=stages, question=(0, n_q - 1), image=(n_q, n_q + n_i - 1)) if trace else None
        n_ans = 0
        if c.use_answer_token:
            a = answer_token(z, mask)
            z = T.concat([a, z], axis=1)
            if mask is not None:
                mask = np.concatenate([np.ones((mask.shape[0], 1), bool), mask], axis=1)
            n_ans = 1
            if tr is not None:
                tr.answer = (0, 0)
                tr.question = (1, n_q)
                tr.image = (n_q + 1, n_q + n_i)
        answers = []
        for i, blk in enumerate(self.check):
            gate = self.gate[i] if c.use_gate else None
            z, w = unified_self_attention_block(z, mask, blk, gate, (n_ans, n_q, n_i))
            if tr is not None:
                tr.layers.append(w)
            if c.use_answer_token:
                answers.append(z[:, 0:1, :])
            else:
                answers.append(answer_token(z, mask))
        pooled = T.reshape(a, (a.shape[0], c.d_c)) if not answers else pool_answers(answers)
        return linear_params(pooled, self.classifier), tr

    __call__ = forward


def linear_params(x, p):
    return T.linear(x, p.w, p.b)


def answer_token(z_qi, mask=None):
    """Mean over the token axis of ``[B, n, d_c]``; masked positions excluded."""
    if z_qi.shape[1] < 1:
        raise ShapeError("answer_token needs at least one token")
    if mask is None:
        return T.mean(z_qi, axis=1, keepdims=True)
    return T.masked_mean(z_qi, mask, axis=1)


def pool_answers(answers):
    """Per-channel mean of the per-layer ``[B, 1, d_c]`` answers, returned as ``[B, d_c]``."""
    if not answers:
        raise UsageError("pool_answers needs at least one answer")
    stacked = T.concat(list(answers), axis=1)
    return T.mean(stacked, axis=1)


def positional_embeddings(model, n_question=None, box_coords=None):
    """Additive positional terms keyed by ``"question"`` / ``"image"``.

    The question term is the first ``n_question`` rows of a learned
    ``[n_q_max, d_c]`` table, added after the word projection. The image term
    maps each of the four box coordinates through its own affine map to
    ``image_feat_dim / 4`` features and concatenates them, to be added to the
    raw region features. Only the configured terms are present.
    """
    out = {}
    if model.pos_question is not None and n_question is not None:
        out["question"] = model.pos_question[0:n_question, :]
    if model.pos_image is not None and box_coords is not None:
        coords = np.asarray(box_coords)
        if coords.ndim != 3 or coords.shape[-1] != 4:
            raise ShapeError(f"box coordinates must be [B, n, 4], got {coords.shape}")
        if coords.size and (coords.min() < 0 or coords.max() > 1):
            raise ValidationError("box coordinates must be normalized to [0, 1]")
        coords = T.Tensor(coords, dtype=model.dtype)
        out["image"] = T.concat([linear_params(coords[:, :, i:i + 1], p)
                                 for i, p in enumerate(model.pos_image)], axis=-1)
    return out


def count_parameters(model):
    """``{group: count}`` over top-level parameter groups plus ``"total"``."""
    counts = {}
    for name, p in model.named_parameters():
        group = name.split(".", 1)[0]
        counts[group] = counts.get(group, 0) + p.size
    counts["total"] = sum(counts.values())
    return counts


def init_parameters(model, seed):
    """Xavier-uniform weights, zero biases, unit LayerNorm gains; reproducible per seed."""
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        if name.endswith("gamma"):
            p.data = np.ones(p.shape, model.dtype)
        elif p.ndim == 1:
            p.data = np.zeros(p.shape, model.dtype)
        else:
            fan_in, fan_out = p.shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            p.data = rng.uniform(-a, a, size=p.shape).astype(model.dtype)
        p.grad = None
