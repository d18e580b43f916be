"""Content-side item representations: text and image.

Word vectors come from a from-scratch skip-gram model with negative
sampling over the listing corpus.  A small convolutional classifier over
frozen word vectors predicts the listing category, and its penultimate
activation is the text representation.  A deep feed-forward tower maps
pluggable image feature vectors into the word-vector space by regressing
onto title embeddings, so image vectors and text vectors live in comparable
spaces.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from marketrec.nn import (
    Conv1D,
    Dense,
    max_over_time,
    max_over_time_backward,
    mse,
    sgd_step,
    sigmoid,
    softmax_cross_entropy,
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class ItemContent:
    """Static listing attributes used by the content models."""

    item_id: str
    category: str
    postcode: str
    title: str
    description: str = ""
    image_feature: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.item_id:
            raise ValueError("item_id must be non-empty")
        if not self.category:
            raise ValueError(f"item {self.item_id}: category must be non-empty")
        if self.image_feature is not None:
            arr = np.asarray(self.image_feature, dtype=np.float64)
            if arr.ndim != 1:
                raise ValueError(f"item {self.item_id}: image feature must be a vector")
            object.__setattr__(self, "image_feature", arr)

    def tokens(self) -> list[str]:
        return tokenize(self.title) + tokenize(self.description)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on every non-alphanumeric run."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class WordEmbeddings:
    """Token -> dense vector table from skip-gram training."""

    vocab: dict[str, int]
    vectors: np.ndarray
    training_loss: tuple[float, ...] = field(default=())

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def get(self, token: str) -> np.ndarray | None:
        idx = self.vocab.get(token)
        return None if idx is None else self.vectors[idx]


def sgns_objective(
    center: np.ndarray, outputs: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Skip-gram negative-sampling loss for one center word.

    ``outputs`` stacks the context row and the negative rows; ``labels`` is 1
    for the true context, 0 for negatives.  Returns (loss, grad_center,
    grad_outputs).
    """
    scores = outputs @ center
    probs = sigmoid(scores)
    eps = 1e-12
    loss = float(-np.sum(labels * np.log(probs + eps) + (1 - labels) * np.log(1 - probs + eps)))
    dscores = probs - labels
    return loss, outputs.T @ dscores, np.outer(dscores, center)


def train_word_embeddings(
    corpus: Sequence[Sequence[str]],
    dim: int = 32,
    window: int = 4,
    negatives: int = 5,
    epochs: int = 5,
    lr: float = 0.05,
    min_count: int = 1,
    seed: int = 0,
) -> WordEmbeddings:
    """Skip-gram with negative sampling over tokenized sentences.

    The vocabulary keeps tokens with at least ``min_count`` occurrences,
    ordered by descending count (ties alphabetical) so indices are stable.
    Negatives are drawn from the unigram distribution raised to 3/4.
    """
    if not corpus:
        raise ValueError("word2vec corpus is empty")
    if dim < 1 or window < 1 or negatives < 1 or epochs < 1:
        raise ValueError("dim, window, negatives, and epochs must all be >= 1")
    counts: dict[str, int] = {}
    for sent in corpus:
        for tok in sent:
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    if not kept:
        raise ValueError(f"no tokens reach min_count={min_count}")
    vocab = {t: i for i, t in enumerate(kept)}
    V = len(vocab)
    rng = np.random.default_rng(seed)
    # both sides start random: a zero output matrix stalls separation on
    # small corpora because every token then follows the same mean trajectory
    w_in = rng.uniform(-0.5 / dim, 0.5 / dim, size=(V, dim))
    w_out = rng.uniform(-0.5 / dim, 0.5 / dim, size=(V, dim))
    freq = np.array([counts[t] for t in kept], dtype=np.float64) ** 0.75
    cum = np.cumsum(freq / freq.sum())
    encoded = [[vocab[t] for t in sent if t in vocab] for sent in corpus]
    losses = []
    for _ in range(epochs):
        epoch_loss = 0.0
        n_steps = 0
        for sent in encoded:
            for pos, center in enumerate(sent):
                lo = max(0, pos - window)
                hi = min(len(sent), pos + window + 1)
                for ctx_pos in range(lo, hi):
                    if ctx_pos == pos:
                        continue
                    context = sent[ctx_pos]
                    negs = np.searchsorted(cum, rng.random(negatives))
                    rows = np.concatenate([[context], negs[negs != context]])
                    labels = np.zeros(len(rows))
                    labels[0] = 1.0
                    v = w_in[center]
                    outs = w_out[rows]
                    loss, dv, douts = sgns_objective(v, outs, labels)
                    w_in[center] -= lr * dv
                    w_out[rows] -= lr * douts
                    epoch_loss += loss
                    n_steps += 1
        if n_steps == 0:
            raise ValueError("corpus has no trainable skip-gram pairs")
        losses.append(epoch_loss / n_steps)
    # small-corpus skip-gram vectors share one dominant mean direction that
    # swamps cosine structure; removing it exposes the topical geometry
    if V > 1:
        w_in = w_in - w_in.mean(axis=0)
    return WordEmbeddings(vocab=vocab, vectors=w_in, training_loss=tuple(losses))


def title_embedding(title: str, embeddings: WordEmbeddings) -> np.ndarray:
    """Mean vector of the title's known tokens; zero vector if none are known."""
    rows = [embeddings.vectors[embeddings.vocab[t]] for t in tokenize(title) if t in embeddings.vocab]
    if not rows:
        return np.zeros(embeddings.dim)
    return np.mean(rows, axis=0)


class TextEncoder:
    """Convolutional category classifier whose hidden layer doubles as the
    text representation.

    Token vectors stay frozen; parallel convolutions of several widths are
    max-pooled over time, concatenated, and pushed through a dense hidden
    layer (the representation) and a softmax output layer.
    """

    def __init__(
        self,
        embeddings: WordEmbeddings,
        categories: Sequence[str],
        widths: Sequence[int] = (2, 3, 4),
        n_filters: int = 16,
        repr_dim: int = 32,
        rng: np.random.Generator | None = None,
    ):
        if len(categories) < 2:
            raise ValueError(f"need at least 2 categories, got {list(categories)}")
        if len(set(categories)) != len(categories):
            raise ValueError("categories must be unique")
        self.embeddings = embeddings
        self.categories = tuple(categories)
        self.widths = tuple(widths)
        self.n_filters = n_filters
        self.repr_dim = repr_dim
        rng = rng if rng is not None else np.random.default_rng(0)
        d = embeddings.dim
        self.convs = [Conv1D(w, n_filters, d, activation="relu", rng=rng) for w in self.widths]
        self.hidden = Dense(n_filters * len(self.widths), repr_dim, "relu", rng)
        self.out = Dense(repr_dim, len(self.categories), "identity", rng)

    @property
    def category_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.categories)}

    def token_matrix(self, text_tokens: Iterable[str]) -> np.ndarray:
        """Known-token vectors stacked (T, d), zero-padded to the widest filter."""
        rows = [
            self.embeddings.vectors[self.embeddings.vocab[t]]
            for t in text_tokens
            if t in self.embeddings.vocab
        ]
        min_len = max(self.widths)
        while len(rows) < min_len:
            rows.append(np.zeros(self.embeddings.dim))
        return np.stack(rows)

    def _forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, list]:
        pooled_parts = []
        pool_meta = []
        for conv in self.convs:
            fmap = conv.forward(x)
            pooled, arg = max_over_time(fmap)
            pooled_parts.append(pooled)
            pool_meta.append((arg, fmap.shape[0]))
        feats = np.concatenate(pooled_parts)
        rep = self.hidden.forward(feats)
        logits = self.out.forward(rep)
        return rep, logits, pool_meta

    def representation(self, item: ItemContent) -> np.ndarray:
        rep, _, _ = self._forward(self.token_matrix(item.tokens()))
        return rep

    def predict(self, item: ItemContent) -> str:
        _, logits, _ = self._forward(self.token_matrix(item.tokens()))
        return self.categories[int(np.argmax(logits))]

    def _zero_grads(self) -> None:
        for conv in self.convs:
            conv.zero_grads()
        self.hidden.zero_grads()
        self.out.zero_grads()

    def _train_step_loss(self, x: np.ndarray, label: int) -> float:
        """Forward + backward on one example; gradients accumulate in layers."""
        _, logits, pool_meta = self._forward(x)
        loss, dlogits = softmax_cross_entropy(logits, label)
        drep = self.out.backward(dlogits)
        dfeats = self.hidden.backward(drep)
        f = self.n_filters
        for k, conv in enumerate(self.convs):
            arg, t_len = pool_meta[k]
            dpooled = dfeats[k * f : (k + 1) * f]
            conv.backward(max_over_time_backward(dpooled, arg, t_len))
        return loss

    def _sgd(self, lr: float, l2: float) -> None:
        for conv in self.convs:
            sgd_step(conv.params, conv.grads, lr, l2)
        sgd_step(self.hidden.params, self.hidden.grads, lr, l2)
        sgd_step(self.out.params, self.out.grads, lr, l2)


def train_category_classifier(
    items: Sequence[ItemContent],
    embeddings: WordEmbeddings,
    widths: Sequence[int] = (2, 3, 4),
    n_filters: int = 16,
    repr_dim: int = 32,
    epochs: int = 15,
    lr: float = 0.03,
    l2: float = 0.0,
    seed: int = 0,
) -> TextEncoder:
    """Fit the convolutional category classifier with per-item SGD."""
    if not items:
        raise ValueError("no items to train the classifier on")
    categories = tuple(sorted({it.category for it in items}))
    if len(categories) < 2:
        raise ValueError(f"need at least 2 distinct categories, got {categories}")
    rng = np.random.default_rng(seed)
    enc = TextEncoder(embeddings, categories, widths, n_filters, repr_dim, rng)
    cat_index = enc.category_index
    mats = [enc.token_matrix(it.tokens()) for it in items]
    labels = [cat_index[it.category] for it in items]
    order = np.arange(len(items))
    losses = []
    for _ in range(epochs):
        rng.shuffle(order)
        total = 0.0
        for k in order:
            enc._zero_grads()
            total += enc._train_step_loss(mats[k], labels[k])
            enc._sgd(lr, l2)
        losses.append(total / len(items))
    enc.training_loss = tuple(losses)  # type: ignore[attr-defined]
    return enc


def text_representation(item: ItemContent, encoder: TextEncoder) -> np.ndarray:
    """Penultimate classifier activation for the item's title + description."""
    return encoder.representation(item)


class ImageEncoder:
    """Seven dense layers mapping an image feature vector into word space.

    ReLU between layers, linear output.  The input is whatever upstream
    feature extractor the caller plugs in; nothing here assumes a particular
    one beyond the configured dimension.
    """

    N_LAYERS = 7

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        hidden_dim: int = 64,
        rng: np.random.Generator | None = None,
    ):
        if in_dim < 1 or out_dim < 1 or hidden_dim < 1:
            raise ValueError("image tower dims must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [in_dim] + [hidden_dim] * (self.N_LAYERS - 1) + [out_dim]
        self.layers = [
            Dense(dims[i], dims[i + 1], "relu" if i < self.N_LAYERS - 1 else "identity", rng)
            for i in range(self.N_LAYERS)
        ]
        self.in_dim = in_dim
        self.out_dim = out_dim

    def encode(self, feature: np.ndarray) -> np.ndarray:
        x = np.asarray(feature, dtype=np.float64)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def _zero_grads(self) -> None:
        for layer in self.layers:
            layer.zero_grads()

    def _backward(self, grad_out: np.ndarray) -> np.ndarray:
        g = grad_out
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def _sgd(self, lr: float, l2: float) -> None:
        for layer in self.layers:
            sgd_step(layer.params, layer.grads, lr, l2)


def train_image_tower(
    items: Sequence[ItemContent],
    embeddings: WordEmbeddings,
    hidden_dim: int = 64,
    epochs: int = 60,
    lr: float = 0.01,
    l2: float = 0.0,
    batch_size: int = 16,
    seed: int = 0,
) -> ImageEncoder:
    """Regress image features onto title embeddings with mini-batch SGD.

    Only items carrying an image feature participate.  The learned map drags
    image vectors into the same space as the text vectors, so both can be
    attended over jointly downstream.
    """
    with_img = [it for it in items if it.image_feature is not None]
    if not with_img:
        raise ValueError("no items have image features")
    dims = {it.image_feature.shape[0] for it in with_img}
    if len(dims) != 1:
        raise ValueError(f"inconsistent image feature dims: {sorted(dims)}")
    rng = np.random.default_rng(seed)
    enc = ImageEncoder(dims.pop(), embeddings.dim, hidden_dim, rng)
    X = np.stack([it.image_feature for it in with_img])
    T = np.stack([title_embedding(it.title, embeddings) for it in with_img])
    order = np.arange(len(with_img))
    losses = []
    for _ in range(epochs):
        rng.shuffle(order)
        total = 0.0
        for s in range(0, len(order), batch_size):
            batch = order[s : s + batch_size]
            enc._zero_grads()
            pred = enc.encode(X[batch])
            loss, dpred = mse(pred, T[batch])
            enc._backward(dpred)
            enc._sgd(lr, l2)
            total += loss * len(batch)
        losses.append(total / len(with_img))
    enc.training_loss = tuple(losses)  # type: ignore[attr-defined]
    return enc


def image_representation(item: ItemContent, encoder: ImageEncoder) -> np.ndarray | None:
    """Image-space vector for the item, or None when it has no image feature."""
    if item.image_feature is None:
        return None
    return encoder.encode(item.image_feature)
