"""Tensor primitives and the loss functions built on them.

Everything runs in double precision on the CPU. Probabilities are floored at
``PROB_FLOOR`` before any logarithm so that KL and cross-entropy stay finite.
"""
import math

import torch
import torch.nn.functional as F

from .exceptions import (EmptyMaskError, InvalidDistributionError, NonFiniteError, NonScalarLossError, ShapeError,
                         SupportMismatchError, TokenRangeError)

DTYPE = torch.float64
PROB_FLOOR = 1e-12
SUM_TOLERANCE = 1e-9
INIT_STD = 0.02


def as_tensor(data, requires_grad=False):
    tensor = torch.as_tensor(data, dtype=DTYPE).clone()
    tensor.requires_grad_(requires_grad)
    return tensor


def check_finite(tensor, what='tensor'):
    if not bool(torch.isfinite(tensor).all()):
        raise NonFiniteError(u'{what} contains NaN or Inf values'.format(what=what))
    return tensor


def normal_init_(tensor, generator, std=INIT_STD):
    with torch.no_grad():
        tensor.copy_(torch.randn(tuple(tensor.shape), generator=generator, dtype=tensor.dtype) * std)
    return tensor


class Distribution(object):
    """Probabilities whose trailing axis sums to one for every slice."""

    def __init__(self, probs, tolerance=SUM_TOLERANCE):
        if probs.dim() == 0 or probs.shape[-1] == 0:
            raise ShapeError(u'a distribution needs a nonempty trailing axis, got shape {shape}'.format(
                shape=tuple(probs.shape)))
        with torch.no_grad():
            if not bool(torch.isfinite(probs).all()):
                raise NonFiniteError(u'probabilities contain NaN or Inf values')
            if bool((probs < 0).any()):
                raise InvalidDistributionError(u'probabilities must be nonnegative')
            if probs.numel():
                error = (probs.sum(-1) - 1).abs().max().item()
                if error > tolerance:
                    raise InvalidDistributionError(
                        u'probabilities must sum to 1 along the last axis (max error {error:.3g})'.format(error=error))
        self.probs = probs

    @property
    def support_size(self):
        return self.probs.shape[-1]

    @property
    def shape(self):
        return tuple(self.probs.shape)

    def log(self):
        return torch.log(self.probs.clamp_min(PROB_FLOOR))

    def __getitem__(self, index):
        return Distribution(self.probs[index])

    def __repr__(self):
        return 'Distribution(shape={shape})'.format(shape=self.shape)


def matmul(a, b):
    inner_b = b.shape[-2] if b.dim() > 1 else (b.shape[0] if b.dim() == 1 else None)
    if a.dim() == 0 or inner_b is None or a.shape[-1] != inner_b:
        raise ShapeError(u'cannot multiply tensors of shapes {a} and {b}'.format(a=tuple(a.shape), b=tuple(b.shape)))
    try:
        return torch.matmul(a, b)
    except RuntimeError:
        raise ShapeError(u'cannot multiply tensors of shapes {a} and {b}'.format(a=tuple(a.shape), b=tuple(b.shape)))


def softmax(logits, axis=-1):
    check_finite(logits, 'logits')
    if logits.dim() == 0 or not -logits.dim() <= axis < logits.dim():
        raise ShapeError(u'axis {axis} is invalid for logits of shape {shape}'.format(
            axis=axis, shape=tuple(logits.shape)))
    # torch.softmax subtracts the slice maximum before exponentiating
    probs = torch.softmax(logits, dim=axis)
    if axis % logits.dim() != logits.dim() - 1:
        probs = probs.movedim(axis, -1)
    return Distribution(probs)


def entropy(dist):
    return -(dist.probs * dist.log()).sum(-1)


def masked_mean(values, mask=None):
    if mask is None:
        if values.numel() == 0:
            raise EmptyMaskError(u'cannot average an empty tensor')
        return values.mean()
    mask = torch.as_tensor(mask)
    if tuple(mask.shape) != tuple(values.shape):
        raise ShapeError(u'mask shape {mask} does not match values shape {values}'.format(
            mask=tuple(mask.shape), values=tuple(values.shape)))
    weights = mask.to(values.dtype)
    count = weights.sum()
    if count.item() == 0:
        raise EmptyMaskError(u'every position is masked out')
    return (values * weights).sum() / count


def _check_support(q, p):
    if q.support_size != p.support_size:
        raise SupportMismatchError(u'support sizes differ: {q} against {p}'.format(q=q.support_size, p=p.support_size))
    if q.shape != p.shape:
        raise ShapeError(u'distribution shapes differ: {q} against {p}'.format(q=q.shape, p=p.shape))


def kl_divergence(q, p, mask=None):
    """KL(q || p), summed over the support and averaged over the remaining positions."""
    _check_support(q, p)
    per_position = (q.probs * (q.log() - p.log())).sum(-1)
    return masked_mean(per_position, mask)


def reverse_kl(q, p, mask=None):
    return kl_divergence(p, q, mask)


def adaptive_kl(q, p, mask=None, head_mass=0.5):
    """Blend of forward and reverse KL weighted by where q and p disagree.

    The teacher support is split into a head (the most probable tokens that
    together reach ``head_mass``) and a tail. Forward KL is weighted by the share
    of the absolute gap that falls in the head, reverse KL by the tail share.
    """
    _check_support(q, p)
    sorted_q, order = torch.sort(q.probs, dim=-1, descending=True)
    sorted_p = torch.gather(p.probs, -1, order)
    head = (torch.cumsum(sorted_q, -1) - sorted_q) < head_mass
    gap = (sorted_q - sorted_p).abs().detach()
    gap_head = (gap * head).sum(-1)
    gap_total = gap.sum(-1)
    head_weight = torch.where(gap_total > 0, gap_head / gap_total.clamp_min(PROB_FLOOR),
                              torch.full_like(gap_total, 0.5))
    forward = (q.probs * (q.log() - p.log())).sum(-1)
    reverse = (p.probs * (p.log() - q.log())).sum(-1)
    return masked_mean(head_weight * forward + (1 - head_weight) * reverse, mask)


def cross_entropy(p, targets, mask=None):
    """Mean negative log-probability of ``targets`` over the unmasked positions."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    if tuple(targets.shape) != p.shape[:-1]:
        raise ShapeError(u'targets of shape {targets} do not match distribution shape {dist}'.format(
            targets=tuple(targets.shape), dist=p.shape))
    if targets.numel() and (targets.min().item() < 0 or targets.max().item() >= p.support_size):
        raise TokenRangeError(u'target indices must lie in [0, {size})'.format(size=p.support_size))
    picked = p.log().gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return masked_mean(-picked, mask)


def grad(loss, params):
    """Reverse-mode gradients of a scalar ``loss`` for a mapping of named tensors.

    Parameters the loss does not reach get an all-zero gradient.
    """
    if loss.dim() != 0:
        raise NonScalarLossError(u'loss must be a scalar, got shape {shape}'.format(shape=tuple(loss.shape)))
    params = dict(params)
    gradients = {name: torch.zeros_like(tensor) for name, tensor in params.items()}
    wanted = [(name, tensor) for name, tensor in params.items() if tensor.requires_grad]
    if wanted and loss.requires_grad:
        computed = torch.autograd.grad(loss, [tensor for _, tensor in wanted], allow_unused=True, retain_graph=True)
        for (name, _), gradient in zip(wanted, computed):
            if gradient is not None:
                gradients[name] = gradient
    return gradients


def layer_norm(x, weight=None, bias=None, eps=1e-5):
    try:
        return F.layer_norm(x, x.shape[-1:], weight, bias, eps)
    except RuntimeError as e:
        raise ShapeError(u'layer norm over shape {shape} failed: {error}'.format(shape=tuple(x.shape), error=e))


def causal_mask(length):
    """Boolean (length, length) mask, True where a query would see a later key."""
    return torch.ones(length, length, dtype=torch.bool).triu(diagonal=1)


def attention(query, key, value, num_heads=1, causal=True):
    """Scaled dot-product attention over already projected queries, keys and values.

    Inputs are (..., length, dim); heads are split from the last axis.
    """
    dim = query.shape[-1]
    if key.shape[-1] != dim or value.shape[-1] != dim or key.shape[:-1] != value.shape[:-1]:
        raise ShapeError(u'attention got query {q}, key {k} and value {v}'.format(
            q=tuple(query.shape), k=tuple(key.shape), v=tuple(value.shape)))
    if dim % num_heads:
        raise ShapeError(u'dimension {dim} does not split into {heads} heads'.format(dim=dim, heads=num_heads))
    query_length, key_length = query.shape[-2], key.shape[-2]
    if causal and query_length != key_length:
        raise ShapeError(u'causal attention needs equal lengths, got {q} and {k}'.format(q=query_length, k=key_length))
    head_dim = dim // num_heads

    def split(tensor):
        return tensor.reshape(*tensor.shape[:-1], num_heads, head_dim).transpose(-3, -2)

    scores = torch.matmul(split(query), split(key).transpose(-2, -1)) / math.sqrt(head_dim)
    if causal:
        scores = scores.masked_fill(causal_mask(query_length), float('-inf'))
    weights = torch.softmax(scores, dim=-1)
    attended = torch.matmul(weights, split(value))
    return attended.transpose(-3, -2).reshape(*query.shape[:-1], dim)


def feed_forward(x, weight_in, bias_in, weight_out, bias_out):
    """Two affine maps with a GELU between them; weights are (out, in) like ``nn.Linear``."""
    if weight_in.shape[-1] != x.shape[-1] or weight_out.shape[-1] != weight_in.shape[0]:
        raise ShapeError(u'feed-forward weights {w_in} and {w_out} do not fit input {x}'.format(
            w_in=tuple(weight_in.shape), w_out=tuple(weight_out.shape), x=tuple(x.shape)))
    return F.linear(F.gelu(F.linear(x, weight_in, bias_in)), weight_out, bias_out)


def init_linear_(linear, generator, std=INIT_STD):
    normal_init_(linear.weight, generator, std)
    if linear.bias is not None:
        with torch.no_grad():
            linear.bias.zero_()
    return linear


def zero_linear_(linear):
    with torch.no_grad():
        linear.weight.zero_()
        if linear.bias is not None:
            linear.bias.zero_()
    return linear
