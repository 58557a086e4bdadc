"""Logo style transfer: content, Gram-style and total-variation losses with
hand-written gradients through a small fixed convolutional feature extractor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_media import ShapeError, as_image


class OptimizationError(RuntimeError):
    pass


# -- convolution primitives ------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    """3x3, stride 1, zero pad 1 over the last two axes.

    ``C x ... x H x W`` -> ``(C*9) x (... * H * W)``; any middle axes (a batch)
    are carried along.
    """
    c, (h, w) = x.shape[0], x.shape[-2:]
    xp = np.zeros(x.shape[:-2] + (h + 2, w + 2), dtype=x.dtype)
    xp[..., 1:-1, 1:-1] = x
    cols = np.empty((c, 3, 3) + x.shape[1:], dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = xp[..., dy:dy + h, dx:dx + w]
    return cols.reshape(c * 9, -1)


@dataclass
class _LayerCache:
    active: np.ndarray
    in_shape: tuple


class FeatureExtractor:
    """conv3x3(3->8) + ReLU, conv3x3(8->16) + ReLU; weights fixed by ``seed``.

    Both post-ReLU maps are returned as the layer set. For an ``H x W`` input
    they have shapes ``8 x H x W`` and ``16 x H x W``.
    """

    channels = (3, 8, 16)

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        self._fwd = []
        self._bwd = []
        for cin, cout in zip(self.channels[:-1], self.channels[1:]):
            std = np.sqrt(2.0 / (cin * 9))
            wt = rng.normal(0.0, std, size=(cout, cin, 3, 3))
            b = rng.normal(0.0, 0.05, size=cout)
            for a in (wt, b):
                a.setflags(write=False)
            self.weights.append(wt)
            self.biases.append(b)
            self._fwd.append(wt.reshape(cout, -1))
            # input gradient of a same-padded correlation is a correlation of the
            # output gradient with the spatially flipped, channel-transposed kernel
            self._bwd.append(np.ascontiguousarray(
                wt[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(cin, -1))

    def forward(self, img, keep_cache: bool = False):
        x = as_image(img)
        if x.shape[0] != self.channels[0]:
            raise ShapeError(f"extractor expects {self.channels[0]} channels, got {x.shape[0]}")
        return self._forward(x, keep_cache)

    def _forward(self, x: np.ndarray, keep_cache: bool = False):
        """Channel-first input ``C x ... x H x W`` (middle axes are a batch)."""
        feats, caches = [], []
        for wmat, b in zip(self._fwd, self.biases):
            pre = (wmat @ _im2col(x) + b[:, None]).reshape((-1,) + x.shape[1:])
            if keep_cache:
                caches.append(_LayerCache(pre > 0, x.shape))
            x = np.maximum(pre, 0.0)
            feats.append(x)
        return (feats, caches) if keep_cache else feats

    def backward(self, caches, grads_out) -> np.ndarray:
        """Input gradient given d(loss)/d(feature) for every layer (None = zero)."""
        g = None
        for i in reversed(range(len(caches))):
            cache = caches[i]
            gi = grads_out[i]
            if gi is not None:
                g = gi if g is None else g + gi
            if g is None:
                continue
            g = g * cache.active
            g = (self._bwd[i] @ _im2col(g)).reshape(cache.in_shape)
        if g is None:
            g = np.zeros(caches[0].in_shape)
        return g


_DEFAULT_EXTRACTOR: FeatureExtractor | None = None


def default_extractor() -> FeatureExtractor:
    global _DEFAULT_EXTRACTOR
    if _DEFAULT_EXTRACTOR is None:
        _DEFAULT_EXTRACTOR = FeatureExtractor(seed=0)
    return _DEFAULT_EXTRACTOR


def extract_features(img, extractor: FeatureExtractor | None = None) -> list[np.ndarray]:
    return (extractor or default_extractor()).forward(img)


# -- losses ------------------------------------------------------------------------

def gram(feat: np.ndarray) -> np.ndarray:
    c, h, w = feat.shape
    f = feat.reshape(c, h * w)
    return f @ f.T / (c * h * w)


def _gram_backward(feat: np.ndarray, d_gram: np.ndarray) -> np.ndarray:
    c, h, w = feat.shape
    f = feat.reshape(c, h * w)
    return ((d_gram + d_gram.T) @ f / (c * h * w)).reshape(c, h, w)


def _batch_gram(feat: np.ndarray) -> np.ndarray:
    """``C x B x H x W`` -> ``B x C x C``."""
    c, nb = feat.shape[:2]
    m = feat.reshape(c, nb, -1).transpose(1, 0, 2)
    return m @ m.transpose(0, 2, 1) / (c * m.shape[2])


def _batch_gram_backward(feat: np.ndarray, d_gram: np.ndarray) -> np.ndarray:
    c, nb = feat.shape[:2]
    m = feat.reshape(c, nb, -1).transpose(1, 0, 2)
    g = (d_gram + d_gram.transpose(0, 2, 1)) @ m / (c * m.shape[2])
    return g.transpose(1, 0, 2).reshape(feat.shape)


def _layers(layers, n):
    return range(n) if layers is None else layers


def content_loss(l, ls, extractor=None, layers=None) -> float:
    l, ls = as_image(l), as_image(ls)
    if l.shape != ls.shape:
        raise ShapeError(f"{l.shape} vs {ls.shape}")
    ext = extractor or default_extractor()
    fa, fb = ext.forward(l), ext.forward(ls)
    return float(sum(np.sum((fa[k] - fb[k]) ** 2) / fa[k].size for k in _layers(layers, len(fa))))


def style_loss(ls, xv, extractor=None, layers=None) -> float:
    ext = extractor or default_extractor()
    fa, fb = ext.forward(ls), ext.forward(xv)
    total = 0.0
    for k in _layers(layers, len(fa)):
        ck = fa[k].shape[0]
        total += np.sum((gram(fb[k]) - gram(fa[k])) ** 2) / ck ** 2
    return float(total)


def tv_loss(ls) -> float:
    ls = as_image(ls)
    return float(np.sum(np.diff(ls, axis=1) ** 2) + np.sum(np.diff(ls, axis=2) ** 2))


def _batch_tv(x: np.ndarray) -> np.ndarray:
    return (np.sum(np.diff(x, axis=-2) ** 2, axis=(1, 2, 3))
            + np.sum(np.diff(x, axis=-1) ** 2, axis=(1, 2, 3)))


def tv_grad(ls) -> np.ndarray:
    ls = as_image(ls)
    return _tv_grad(ls)


def _tv_grad(x: np.ndarray) -> np.ndarray:
    g = np.zeros_like(x)
    dv = np.diff(x, axis=-2)
    dh = np.diff(x, axis=-1)
    g[..., 1:, :] += 2 * dv
    g[..., :-1, :] -= 2 * dv
    g[..., :, 1:] += 2 * dh
    g[..., :, :-1] -= 2 * dh
    return g


@dataclass(frozen=True)
class StyleWeights:
    content: float = 1.0
    style: float = 1e4
    tv: float = 1e-3

    def __post_init__(self):
        vals = (self.content, self.style, self.tv)
        if min(vals) < 0 or max(vals) == 0:
            raise ValueError("style weights must be non-negative and not all zero")


class BatchStyleObjective:
    """Independent weighted losses for ``B`` (logo, style image) pairs, evaluated
    together. Logos share one shape; style images may differ in size.

    Target features and Grams are computed once at construction.
    """

    def __init__(self, logos, style_imgs, weights: StyleWeights = StyleWeights(),
                 extractor: FeatureExtractor | None = None, layers=None):
        self.ext = extractor or default_extractor()
        logos = [as_image(l) for l in logos]
        if not logos or len(logos) != len(style_imgs):
            raise ValueError("need one style image per logo and at least one pair")
        if len({l.shape for l in logos}) != 1:
            raise ShapeError("logos in a batch must share one shape")
        self.logos = np.stack(logos)
        self.weights = weights
        self.layers = list(_layers(layers, len(self.ext.weights)))
        self.content_targets = self.ext._forward(self.logos.transpose(1, 0, 2, 3))
        per_pair = [[gram(f) for f in self.ext.forward(s)] for s in style_imgs]
        self.style_grams = [np.stack(g) for g in zip(*per_pair)]

    def evaluate(self, x: np.ndarray, need_grad: bool = True):
        """Per-pair loss parts (arrays of length B) and, optionally, the gradient."""
        if x.shape != self.logos.shape:
            raise ShapeError(f"{x.shape} vs logos {self.logos.shape}")
        w = self.weights
        feats, caches = self.ext._forward(x.transpose(1, 0, 2, 3), keep_cache=True)
        nb = x.shape[0]
        dfeat = [None] * len(feats)
        content, style = np.zeros(nb), np.zeros(nb)
        for k in self.layers:
            fk = feats[k]
            ck = fk.shape[0]
            size = fk[:, 0].size
            diff = fk - self.content_targets[k]
            content += np.sum(diff ** 2, axis=(0, 2, 3)) / size
            gdiff = self.style_grams[k] - _batch_gram(fk)
            style += np.sum(gdiff ** 2, axis=(1, 2)) / ck ** 2
            if need_grad:
                g = 2.0 * w.content * diff / size
                if w.style:
                    g = g + _batch_gram_backward(fk, -2.0 * w.style * gdiff / ck ** 2)
                dfeat[k] = g
        tv = _batch_tv(x)
        total = w.content * content + w.style * style + w.tv * tv
        parts = {"content": content, "style": style, "tv": tv, "total": total}
        if not need_grad:
            return parts, None
        grad = self.ext.backward(caches, dfeat).transpose(1, 0, 2, 3) + w.tv * _tv_grad(x)
        return parts, grad


class StyleObjective:
    """Weighted total loss for one (logo, style image) pair, with gradient."""

    def __init__(self, logo, style_img, weights: StyleWeights = StyleWeights(),
                 extractor: FeatureExtractor | None = None, layers=None):
        self.logo = as_image(logo)
        self.weights = weights
        self._batch = BatchStyleObjective([self.logo], [style_img], weights, extractor, layers)

    def parts(self, ls) -> dict:
        return self._evaluate(ls, need_grad=False)[0]

    def value(self, ls) -> float:
        return self.parts(ls)["total"]

    def value_and_grad(self, ls):
        parts, grad = self._evaluate(ls, need_grad=True)
        return parts["total"], grad

    def _evaluate(self, ls, need_grad: bool):
        ls = as_image(ls)
        if ls.shape != self.logo.shape:
            raise ShapeError(f"{ls.shape} vs logo {self.logo.shape}")
        parts, grad = self._batch.evaluate(ls[None], need_grad)
        return {k: float(v[0]) for k, v in parts.items()}, None if grad is None else grad[0]


def loss_gradients(l, ls, xv, extractor=None, layers=None) -> dict:
    """Separate analytic gradients of the three losses with respect to ``ls``."""
    out = {}
    for name, wts in (("content", StyleWeights(1.0, 0.0, 0.0)),
                      ("style", StyleWeights(0.0, 1.0, 0.0)),
                      ("tv", StyleWeights(0.0, 0.0, 1.0))):
        out[name] = StyleObjective(l, xv, wts, extractor, layers).value_and_grad(ls)[1]
    return out


def stylize_logos(logos, style_imgs, weights: StyleWeights = StyleWeights(), iters: int = 200,
                  lr: float = 0.05, extractor=None, layers=None,
                  history: list | None = None) -> list[np.ndarray]:
    """Projected gradient descent on the logo pixels, starting from the logos.

    Pairs are optimised independently but evaluated as one batch. Each output
    is the iterate with the lowest total loss seen for its pair (never worse
    than the starting logo). ``history`` receives one loss array per iteration.
    """
    if iters < 1 or lr <= 0:
        raise ValueError("iters must be >= 1 and lr > 0")
    obj = BatchStyleObjective(logos, style_imgs, weights, extractor, layers)
    x = obj.logos.copy()
    best_x, best_loss = x.copy(), np.full(len(x), np.inf)
    for i in range(iters + 1):
        parts, grad = obj.evaluate(x)
        loss = parts["total"]
        if not np.all(np.isfinite(loss)) or not np.all(np.isfinite(grad)):
            raise OptimizationError(f"non-finite loss at iteration {i}")
        if history is not None:
            history.append(loss.copy())
        better = loss < best_loss
        best_loss[better] = loss[better]
        best_x[better] = x[better]
        if i == iters:
            break
        x = np.clip(x - lr * grad, 0.0, 1.0)
    return list(best_x)


def stylize_logo(l, xv, weights: StyleWeights = StyleWeights(), iters: int = 200,
                 lr: float = 0.05, extractor=None, layers=None,
                 history: list | None = None) -> np.ndarray:
    """Single-pair form of :func:`stylize_logos`; ``history`` gets float losses."""
    hist = [] if history is not None else None
    out = stylize_logos([l], [xv], weights, iters, lr, extractor, layers, hist)[0]
    if history is not None:
        history.extend(float(h[0]) for h in hist)
    return out
