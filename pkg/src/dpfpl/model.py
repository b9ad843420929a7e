"""Frozen toy vision-language encoders and the prompt-conditioned classifier.

The text encoder is a frozen one-hidden-layer network over the flattened
token sequence ``[p_1, ..., p_b, c_j]`` (class token at the end)::

    h_j = tanh(W_p vec(p) + W_c c_j),   f_j = normalize(W_o h_j)

Images pass through a frozen linear map and are L2-normalised.  Class
probabilities are the softmax of cosine similarities divided by ``tau``.
Gradients are analytic, per example, with respect to the full prompt
``p = p_global + p_local``; factor gradients follow by the chain rule.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .factorization import FactoredPrompt
from .numeric import RngStream


@dataclass(frozen=True)
class FrozenEncoders:
    text_proj: np.ndarray  # hidden x (b*d + e); prompt block first
    text_out: np.ndarray  # d x hidden
    image_proj: np.ndarray  # d x m
    class_embeds: np.ndarray  # C x e
    temperature: float
    prompt_shape: tuple[int, int]

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        for name in ("text_proj", "text_out", "image_proj", "class_embeds"):
            getattr(self, name).setflags(write=False)

    @property
    def num_classes(self) -> int:
        return self.class_embeds.shape[0]

    @property
    def prompt_block(self) -> np.ndarray:
        b, d = self.prompt_shape
        return self.text_proj[:, : b * d]

    @property
    def class_block(self) -> np.ndarray:
        b, d = self.prompt_shape
        return self.text_proj[:, b * d :]


def build_encoders(
    b: int,
    d: int,
    e: int,
    m: int,
    num_classes: int,
    rng: RngStream,
    temperature: float = 0.01,
    hidden: int | None = None,
) -> FrozenEncoders:
    """Draw frozen encoder weights from a seeded Gaussian."""
    hidden = d if hidden is None else hidden
    w_p = rng.normal((hidden, b * d), scale=1.0 / np.sqrt(b * d))
    w_c = rng.normal((hidden, e), scale=1.0 / np.sqrt(e))
    w_o = rng.normal((d, hidden), scale=1.0 / np.sqrt(hidden))
    w_i = rng.normal((d, m), scale=1.0 / np.sqrt(m))
    cls = rng.normal((num_classes, e))
    return FrozenEncoders(np.hstack([w_p, w_c]), w_o, w_i, cls, float(temperature), (b, d))


@dataclass
class PromptState:
    p_global: np.ndarray
    p_local: np.ndarray

    def __post_init__(self):
        if self.p_global.shape != self.p_local.shape:
            raise ValueError(
                f"global/local prompt shapes differ: {self.p_global.shape} vs {self.p_local.shape}"
            )

    @property
    def combined(self) -> np.ndarray:
        return self.p_global + self.p_local


def _text_forward(prompt: np.ndarray, enc: FrozenEncoders):
    if prompt.shape != enc.prompt_shape:
        raise ValueError(f"prompt shape {prompt.shape} != encoder prompt shape {enc.prompt_shape}")
    shift = enc.prompt_block @ prompt.reshape(-1)
    pre = enc.class_embeds @ enc.class_block.T + shift  # C x hidden
    h = np.tanh(pre)
    t = h @ enc.text_out.T  # C x d
    norms = np.linalg.norm(t, axis=1)
    return t / norms[:, None], h, norms


def text_features(prompt: np.ndarray, enc: FrozenEncoders) -> np.ndarray:
    """Unit text features for every class, shape ``C x d``."""
    return _text_forward(np.asarray(prompt, dtype=np.float64), enc)[0]


def text_feature(prompt: np.ndarray, class_id: int, enc: FrozenEncoders) -> np.ndarray:
    if not 0 <= class_id < enc.num_classes:
        raise ValueError(f"unknown class id {class_id} (C={enc.num_classes})")
    return text_features(prompt, enc)[class_id]


def image_features(x: np.ndarray, enc: FrozenEncoders) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = x @ enc.image_proj.T
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _as_prompt(prompts) -> np.ndarray:
    if isinstance(prompts, PromptState):
        return prompts.combined
    return np.asarray(prompts, dtype=np.float64)


def logits(prompts, enc: FrozenEncoders, image_feat: np.ndarray) -> np.ndarray:
    feats = text_features(_as_prompt(prompts), enc)
    return np.atleast_2d(image_feat) @ feats.T / enc.temperature


def predict_proba(prompts, enc: FrozenEncoders, image_feat: np.ndarray, classes=None) -> np.ndarray:
    """Class probabilities; ``classes`` restricts the softmax to a label subset."""
    z = logits(prompts, enc, image_feat)
    if classes is not None:
        z = z[:, np.asarray(classes)]
    p = softmax(z, axis=1)
    return p[0] if np.ndim(image_feat) == 1 else p


def accuracy(prompts, enc: FrozenEncoders, x: np.ndarray, y: np.ndarray, classes=None) -> float:
    """Top-1 accuracy, optionally with predictions restricted to ``classes``."""
    if len(y) == 0:
        return float("nan")
    z = logits(prompts, enc, image_features(x, enc))
    if classes is None:
        pred = z.argmax(axis=1)
    else:
        classes = np.asarray(classes)
        pred = classes[z[:, classes].argmax(axis=1)]
    return float(np.mean(pred == np.asarray(y)))


@dataclass
class LossGrads:
    loss: float  # batch mean cross-entropy
    losses: np.ndarray  # per example
    grad_prompt: np.ndarray  # n x b x d, d loss_n / d p (= grad w.r.t. p_global)
    grad_u: np.ndarray | None  # n x b x k
    grad_v: np.ndarray | None  # n x k x d

    @property
    def grad_global(self) -> np.ndarray:
        return self.grad_prompt


def prompt_loss_and_grads(prompt: np.ndarray, enc: FrozenEncoders, x: np.ndarray, y: np.ndarray):
    """Per-example cross-entropy and its gradient w.r.t. the full prompt."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty batch")
    feats, h, norms = _text_forward(prompt, enc)
    g = image_features(x, enc)
    n = len(y)
    cos = g @ feats.T  # n x C
    logp = log_softmax(cos / enc.temperature, axis=1)
    losses = -logp[np.arange(n), y]
    resid = np.exp(logp)
    resid[np.arange(n), y] -= 1.0
    # d loss_n / d t_j = resid[n,j] / (tau |t_j|) * (g_n - f_j cos[n,j])
    coeff = resid / (enc.temperature * norms[None, :])
    d_t = coeff[:, :, None] * (g[:, None, :] - cos[:, :, None] * feats[None, :, :])
    d_pre = (d_t @ enc.text_out) * (1.0 - h * h)[None, :, :]
    grad = d_pre.sum(axis=1) @ enc.prompt_block
    return losses, grad.reshape((n,) + enc.prompt_shape)


def loss_and_grads(
    prompts: PromptState,
    factored: FactoredPrompt | None,
    enc: FrozenEncoders,
    batch,
    residual: bool = True,
) -> LossGrads:
    """Forward with ``p_global + (u v [+ r])`` and per-example gradients.

    With ``factored=None`` the local prompt enters as is and no factor
    gradients are produced.  ``r`` is treated as a constant, so
    ``grad_u = G v^T`` and ``grad_v = u^T G`` for each example gradient ``G``.
    """
    x, y = batch
    if factored is None:
        local = prompts.p_local
    else:
        local = factored.recompose(residual)
    losses, grad = prompt_loss_and_grads(prompts.p_global + local, enc, x, y)
    grad_u = grad_v = None
    if factored is not None:
        grad_u = grad @ factored.v.T
        grad_v = np.einsum("bk,nbd->nkd", factored.u, grad)
    return LossGrads(float(losses.mean()), losses, grad, grad_u, grad_v)


def pretrained_class_means(
    enc: FrozenEncoders,
    rng: RngStream,
    image_dim: int,
    alignment: float = 0.7,
    ref_std: float = 1.0,
    scale: float = 1.0,
) -> np.ndarray:
    """Class means for a population the frozen backbone partially "knows".

    A hidden reference prompt fixes one text feature per class; each class
    mean mixes the image-space preimage of that feature (weight
    ``alignment``) with a random direction, then is rescaled to norm
    ``scale * sqrt(image_dim)``.  ``alignment=0`` gives plain random means.
    """
    if not 0 <= alignment <= 1:
        raise ValueError(f"alignment must be in [0, 1], got {alignment}")
    ref = rng.normal(enc.prompt_shape, scale=ref_std)
    direct = text_features(ref, enc) @ np.linalg.pinv(enc.image_proj).T
    direct /= np.linalg.norm(direct, axis=1, keepdims=True)
    rand = rng.normal(direct.shape)
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    mix = alignment * direct + (1.0 - alignment) * rand
    mix /= np.linalg.norm(mix, axis=1, keepdims=True)
    return mix * (scale * np.sqrt(image_dim))
