"""Prediction, pairwise ranking loss, the combined objective and Adam."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .encoders import ViewRepresentations
from .errors import DimensionMismatch, NonFiniteLoss

__all__ = [
    "final_representations",
    "score_pairs",
    "bpr_loss",
    "total_loss",
    "xavier_init",
    "Adam",
]


def final_representations(reps: ViewRepresentations):
    """Concatenate ``[structural | collaborative]`` for users and
    ``[structural | collaborative + semantic]`` for items."""
    if reps.zu_g.shape[1] != reps.zu_c.shape[1] or reps.zi_g.shape[1] != reps.zi_c.shape[1]:
        raise DimensionMismatch("view representations disagree on width")
    zu = ad.concat([reps.zu_g, reps.zu_c], axis=1)
    zi = ad.concat([reps.zi_g, ad.add(reps.zi_c, reps.zi_s)], axis=1)
    return zu, zi


def score_pairs(zu, zi, users, items) -> ad.Var:
    """Inner-product scores for aligned ``users[k], items[k]`` pairs."""
    return ad.rowdot(ad.take(zu, users), ad.take(zi, items))


def bpr_loss(pos_scores, neg_scores) -> ad.Var:
    """Mean of ``-log sigmoid(pos - neg)`` over the batch."""
    return ad.scale(ad.mean(ad.log_sigmoid(ad.sub(pos_scores, neg_scores))), -1.0)


def total_loss(bpr, l_local, l_global, alpha: float, beta: float, lam: float, reg=0.0):
    """``bpr + beta * (alpha * local + (1 - alpha) * global) + lam * reg``.

    Works on ``Var`` or plain floats.  Raises :class:`NonFiniteLoss` on NaN/Inf.
    """
    contrast = ad.add(ad.scale(ad.as_var(l_local), alpha), ad.scale(ad.as_var(l_global), 1.0 - alpha))
    out = ad.add(ad.add(ad.as_var(bpr), ad.scale(contrast, beta)), ad.scale(ad.as_var(reg), lam))
    if not np.all(np.isfinite(out.value)):
        parts = {"bpr": bpr, "local": l_local, "global": l_global, "reg": reg}
        detail = ", ".join(f"{k}={float(ad.as_var(v).value):.6g}" for k, v in parts.items())
        raise NonFiniteLoss(f"non-finite objective ({detail})")
    if isinstance(bpr, ad.Var) or isinstance(l_local, ad.Var) or isinstance(l_global, ad.Var):
        return out
    return float(out.value)


def xavier_init(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform on ``+-sqrt(6 / (fan_in + fan_out))``; ``shape = (fan_out, fan_in)``."""
    fan_out, fan_in = shape[0], shape[1] if len(shape) > 1 else 1
    if fan_out < 1 or fan_in < 1:
        raise ValueError(f"xavier_init needs positive dimensions, got {shape}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Adam:
    """Adam with bias correction over a dict of named arrays (updated in place)."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict, lr=None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            if g.shape != p.shape:
                raise DimensionMismatch(f"gradient for {name}: {g.shape} vs {p.shape}")
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
