"""Attention building blocks.

* :func:`multi_head_attention` - scaled dot-product attention over ``heads``
  subspaces with an output projection.
* :func:`question_guided_block` - image tokens query question keys/values,
  followed by residual + LayerNorm and a ReLU feed-forward sublayer (post-norm).
* :func:`self_attention_block` - the same block with a single input stream.
* :func:`unified_self_attention_block` - self-attention over the concatenated
  ``[answer, question, image]`` sequence, optionally behind a
  :func:`bilinear_self_gate`.

Parameters are plain dataclasses of :class:`~arac.tensor.Tensor`; every block
is a pure function of its inputs and parameters.
"""
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError

MASK_LOGIT = -1e9


class _Params:
    def named_parameters(self, prefix=""):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, T.Tensor):
                yield prefix + f.name, v
            elif isinstance(v, _Params):
                yield from v.named_parameters(f"{prefix}{f.name}.")


@dataclass
class MhaParams(_Params):
    w_q: T.Tensor
    b_q: T.Tensor
    w_k: T.Tensor
    b_k: T.Tensor
    w_v: T.Tensor
    b_v: T.Tensor
    w_o: T.Tensor
    b_o: T.Tensor
    heads: int = 8

    @property
    def d_c(self):
        return self.w_q.shape[0]

    @classmethod
    def zeros(cls, d_c, heads, dtype=np.float64):
        if heads < 1 or d_c % heads:
            raise ConfigError(f"d_c={d_c} is not divisible by heads={heads}")
        w = lambda: T.Tensor(np.zeros((d_c, d_c), dtype), requires_grad=True)
        b = lambda: T.Tensor(np.zeros(d_c, dtype), requires_grad=True)
        return cls(w(), b(), w(), b(), w(), b(), w(), b(), heads)


@dataclass
class BlockParams(_Params):
    attn: MhaParams
    ffn_w1: T.Tensor
    ffn_b1: T.Tensor
    ffn_w2: T.Tensor
    ffn_b2: T.Tensor
    ln1_gamma: T.Tensor
    ln1_beta: T.Tensor
    ln2_gamma: T.Tensor
    ln2_beta: T.Tensor
    eps: float = 1e-5

    @classmethod
    def zeros(cls, d_c, heads, dtype=np.float64, eps=1e-5):
        p = lambda *s: T.Tensor(np.zeros(s, dtype), requires_grad=True)
        one = lambda: T.Tensor(np.ones(d_c, dtype), requires_grad=True)
        return cls(MhaParams.zeros(d_c, heads, dtype),
                   p(d_c, 2 * d_c), p(2 * d_c), p(2 * d_c, d_c), p(d_c),
                   one(), p(d_c), one(), p(d_c), eps)


@dataclass
class GateParams(_Params):
    m: T.Tensor
    kernel: int = 8
    stride: int = 8

    @classmethod
    def zeros(cls, d_c, kernel=8, stride=8, dtype=np.float64):
        if d_c % kernel:
            raise ConfigError(f"d_c={d_c} is not divisible by gate pool kernel {kernel}")
        d_p = (d_c - kernel) // stride + 1
        return cls(T.Tensor(np.zeros((d_p, d_p), dtype), requires_grad=True), kernel, stride)


@dataclass
class AttentionTrace:
    """Attention weights of a stack of unified layers.

    ``layers[l]`` has shape ``[B, heads, n, n]`` (rows are queries). The
    partition gives inclusive ``(lo, hi)`` row ranges per modality; ``answer``
    is ``None`` when no answer token was prepended. ``stages`` holds the
    weights of the earlier stacks (``"read"``, ``"answer"``), which are not
    part of the exported JSON.
    """
    layers: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)
    answer: tuple = None
    question: tuple = None
    image: tuple = None

    def answer_row(self, layer, sample=0):
        """``[heads, n]`` attention of the answer token in one layer."""
        if self.answer is None:
            raise ConfigError("trace has no answer token row")
        return self.layers[layer][sample, :, self.answer[0], :]

    def to_dict(self, sample=0):
        partition = {"answer": [] if self.answer is None else [self.answer[0]],
                     "question": list(self.question), "image": list(self.image)}
        out = []
        for l, w in enumerate(self.layers):
            heads = []
            for h in range(w.shape[1]):
                mat = w[sample, h]
                heads.append({
                    "head": h,
                    "weights": mat.tolist(),
                    "answer_row": None if self.answer is None else mat[self.answer[0]].tolist(),
                })
            out.append({"layer": l, "heads": heads, "partition": partition})
        return {"layers": out}


def _key_bias(key_mask, n_k, dtype):
    if key_mask is None:
        return None
    key_mask = np.asarray(key_mask, dtype=bool)
    if key_mask.ndim != 2 or key_mask.shape[1] != n_k:
        raise ShapeError(f"key mask {key_mask.shape} does not match {n_k} keys")
    return np.where(key_mask, 0.0, MASK_LOGIT).astype(dtype)[:, None, None, :]


def _split_heads(x, heads):
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def multi_head_attention(q, k, v, key_mask, params):
    """Multi-head attention; returns ``(output [B, n_q, d_c], weights [B, h, n_q, n_k])``.

    Masked keys get ``MASK_LOGIT`` added to their logits, which underflows to
    an exact zero weight after the max-subtracted softmax.
    """
    heads = params.heads
    d_c = q.shape[-1]
    if d_c % heads:
        raise ConfigError(f"d_c={d_c} is not divisible by heads={heads}")
    if k.shape != v.shape or k.shape[0] != q.shape[0] or k.shape[-1] != d_c:
        raise ShapeError(f"attention inputs q {q.shape}, k {k.shape}, v {v.shape}")
    b, n_q, _ = q.shape
    zq = _split_heads(T.linear(q, params.w_q, params.b_q), heads)
    zk = _split_heads(T.linear(k, params.w_k, params.b_k), heads)
    zv = _split_heads(T.linear(v, params.w_v, params.b_v), heads)
    logits = T.scale(T.matmul(zq, T.transpose(zk, (0, 1, 3, 2))), 1.0 / np.sqrt(d_c // heads))
    bias = _key_bias(key_mask, k.shape[1], logits.dtype)
    if bias is not None:
        logits = T.add_constant(logits, bias)
    weights = T.softmax(logits)
    ctx = T.reshape(T.transpose(T.matmul(weights, zv), (0, 2, 1, 3)), (b, n_q, d_c))
    return T.linear(ctx, params.w_o, params.b_o), weights.data


def feed_forward(x, params):
    h = T.relu(T.linear(x, params.ffn_w1, params.ffn_b1))
    return T.linear(h, params.ffn_w2, params.ffn_b2)


def question_guided_block(image, question, q_mask, params):
    """Cross-attention block: ``image`` is the query, ``question`` both key and value.

    Returns ``(output [B, n_I, d_c], weights)``.
    """
    attn, weights = multi_head_attention(image, question, question, q_mask, params.attn)
    out1 = T.layer_norm(T.add(attn, image), params.ln1_gamma, params.ln1_beta, params.eps)
    out = T.layer_norm(T.add(feed_forward(out1, params), out1),
                       params.ln2_gamma, params.ln2_beta, params.eps)
    return out, weights


def self_attention_block(x, mask, params):
    return question_guided_block(x, x, mask, params)


def bilinear_self_gate(z, gate):
    """Scale every token by ``sigmoid(p^T M p)`` where ``p`` is its avg-pooled feature."""
    d_c = z.shape[-1]
    if d_c % gate.kernel:
        raise ConfigError(f"d_c={d_c} is not divisible by gate pool kernel {gate.kernel}")
    zp = T.avg_pool_lastdim(z, gate.kernel, gate.stride)
    if gate.m.shape != (zp.shape[-1],) * 2:
        raise ConfigError(f"gate weight {gate.m.shape} does not match pooled width {zp.shape[-1]}")
    score = T.sum(T.mul(T.matmul(zp, gate.m), zp), axis=-1, keepdims=True)
    return T.mul(z, T.expand(T.sigmoid(score), z.shape))


def unified_self_attention_block(z, mask, params, gate=None, partition=None):
    """Gated self-attention over the fused ``[A, X, Y]`` sequence.

    ``partition`` is an optional ``(n_answer, n_question, n_image)`` triple
    checked against the token count.
    """
    if partition is not None and sum(partition) != z.shape[1]:
        raise ConfigError(f"partition {tuple(partition)} does not cover {z.shape[1]} tokens")
    if gate is not None:
        z = bilinear_self_gate(z, gate)
    return self_attention_block(z, mask, params)
