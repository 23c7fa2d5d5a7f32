"""Tokenizer, text conditioning encoder and a toy contrastive (CLIP-style) trainer."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    Adam,
    ConfigError,
    Rng,
    Tensor,
    avg_pool2x,
    concat,
    conv2d,
    cross_entropy,
    embed,
    l2_normalize,
    linear,
    matmul,
    silu,
)

PAD, UNK = "<pad>", "<unk>"
KEYWORD = "cnh3000"
SEQ_LEN = 8


class Vocab:
    """Dense token -> id map. Ids 0 and 1 are PAD and UNK; the style keyword is always present."""

    def __init__(self, tokens: list[str] | None = None):
        base = [PAD, UNK, KEYWORD]
        self.tokens: list[str] = []
        self.ids: dict[str, int] = {}
        for tok in base + list(tokens or []):
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.ids:
            self.ids[token] = len(self.tokens)
            self.tokens.append(token)
        return self.ids[token]

    @classmethod
    def from_captions(cls, captions) -> "Vocab":
        words = sorted({w for c in captions for w in c.lower().split()})
        return cls(words)

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.ids.get(token, 1)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens = Path(path).read_text(encoding="utf-8").split("\n")[:-1]
        return cls.from_list(tokens)

    @classmethod
    def from_list(cls, tokens: list[str]) -> "Vocab":
        if tokens[:2] != [PAD, UNK]:
            raise ConfigError("vocabulary must start with <pad>, <unk>")
        v = cls.__new__(cls)
        v.tokens = list(tokens)
        v.ids = {t: i for i, t in enumerate(tokens)}
        if len(v.ids) != len(v.tokens):
            raise ConfigError("duplicate tokens in vocabulary")
        return v


def tokenize(caption: str, vocab: Vocab, length: int = SEQ_LEN) -> list[int]:
    ids = [vocab[w] for w in caption.lower().split()][:length]
    return ids + [0] * (length - len(ids))


def detokenize(ids, vocab: Vocab) -> str:
    return " ".join(vocab.tokens[i] for i in ids if i != 0)


@dataclass
class TextEncoderParams:
    table: Tensor
    mix_weight: Tensor | None = None
    mix_bias: Tensor | None = None

    @property
    def cond_dim(self) -> int:
        return self.table.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        out = {"text.table": self.table}
        if self.mix_weight is not None:
            out["text.mix.weight"] = self.mix_weight
            out["text.mix.bias"] = self.mix_bias
        return out

    @classmethod
    def from_tensors(cls, tensors: dict) -> "TextEncoderParams":
        def get(k):
            v = tensors.get(k)
            return None if v is None else Tensor(getattr(v, "data", v))

        return cls(get("text.table"), get("text.mix.weight"), get("text.mix.bias"))


def init_text_encoder(vocab_size: int, cond_dim: int, seed: int = 0, mixing: bool = False) -> TextEncoderParams:
    rng = Rng(seed)
    table = Tensor(rng.normal((vocab_size, cond_dim)), requires_grad=True)
    if not mixing:
        return TextEncoderParams(table)
    w = Tensor(rng.truncated_normal((cond_dim, cond_dim), 0.02), requires_grad=True)
    b = Tensor(np.zeros(cond_dim, dtype=np.float32), requires_grad=True)
    return TextEncoderParams(table, w, b)


def encode_text(ids, params: TextEncoderParams) -> Tensor:
    """L x cond_dim conditioning sequence for token ``ids``."""
    h = embed(ids, params.table)
    if params.mix_weight is not None:
        h = h + linear(h, params.mix_weight, params.mix_bias)
    return h


def clip_contrastive_loss(img_emb: Tensor, txt_emb: Tensor, temperature: float = 0.07) -> Tensor:
    """Symmetric cross-entropy over the cosine-similarity matrix, diagonal as targets."""
    n = img_emb.shape[0]
    if n < 2:
        raise ConfigError(f"contrastive loss needs N >= 2 pairs, got {n}")
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if img_emb.shape != txt_emb.shape:
        raise ConfigError(f"embedding shapes differ: {img_emb.shape} vs {txt_emb.shape}")
    logits = matmul(l2_normalize(img_emb, 1), l2_normalize(txt_emb, 1).T) * (1.0 / temperature)
    targets = np.arange(n)
    return (cross_entropy(logits, targets) + cross_entropy(logits.T, targets)) * 0.5


# -- toy CLIP -------------------------------------------------------------------


@dataclass
class ImageTowerParams:
    tensors: dict[str, Tensor]


def init_image_tower(embed_dim: int, in_channels: int = 1, seed: int = 0) -> ImageTowerParams:
    rng = Rng(seed)

    def w(*shape, std=0.1):
        return Tensor(rng.truncated_normal(shape, std), requires_grad=True)

    def z(*shape):
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    return ImageTowerParams(
        {
            "conv1.weight": w(8, in_channels, 3, 3, std=0.3),
            "conv1.bias": z(8),
            "conv2.weight": w(16, 8, 3, 3),
            "conv2.bias": z(16),
            "conv3.weight": w(32, 16, 3, 3),
            "conv3.bias": z(32),
            "proj.weight": w(embed_dim, 32 * 4 * 4),
            "proj.bias": z(embed_dim),
        }
    )


def encode_image(x: Tensor, tower: ImageTowerParams) -> Tensor:
    """1 x d embedding of a C x 32 x 32 image."""
    p = tower.tensors
    h = silu(conv2d(avg_pool2x(x), p["conv1.weight"], p["conv1.bias"], padding=1))
    h = silu(conv2d(avg_pool2x(h), p["conv2.weight"], p["conv2.bias"], padding=1))
    h = silu(conv2d(avg_pool2x(h), p["conv3.weight"], p["conv3.bias"], padding=1))
    return linear(h.reshape(1, -1), p["proj.weight"], p["proj.bias"])


def encode_caption(ids, text: TextEncoderParams, proj_w: Tensor) -> Tensor:
    """1 x d pooled caption embedding: mean of non-PAD token embeddings, then a projection."""
    ids = [i for i in ids if i != 0] or [0]
    h = embed(ids, text.table).mean(axis=0, keepdims=True)
    return linear(h, proj_w)


@dataclass
class ToyClip:
    text: TextEncoderParams
    text_proj: Tensor
    image: ImageTowerParams
    vocab: Vocab
    losses: list[float] = field(default_factory=list)

    def embed_images(self, images: list[Tensor]) -> np.ndarray:
        return np.concatenate([encode_image(x, self.image).data for x in images])

    def embed_captions(self, captions: list[str]) -> np.ndarray:
        return np.concatenate(
            [encode_caption(tokenize(c, self.vocab), self.text, self.text_proj).data for c in captions]
        )


def train_toy_clip(
    pairs: list[tuple[Tensor, str]],
    epochs: int = 30,
    lr: float = 3e-3,
    embed_dim: int = 32,
    temperature: float = 0.07,
    batch_size: int = 8,
    seed: int = 0,
) -> ToyClip:
    """Train a small CNN image tower and an embedding text tower with the contrastive loss.

    Batches are drawn so that no caption repeats inside a batch; repeated
    captions would otherwise appear as false negatives.
    """
    vocab = Vocab.from_captions(c for _, c in pairs)
    text = init_text_encoder(len(vocab), embed_dim, seed=seed)
    rng = Rng(seed)
    proj = Tensor(rng.truncated_normal((embed_dim, embed_dim), 0.2), requires_grad=True)
    image = init_image_tower(embed_dim, in_channels=pairs[0][0].shape[0], seed=seed + 1)
    params = {"text.table": text.table, "text.proj": proj, **{f"img.{k}": v for k, v in image.tensors.items()}}
    opt = Adam(params)
    model = ToyClip(text, proj, image, vocab)

    by_caption: dict[str, list[int]] = {}
    for i, (_, c) in enumerate(pairs):
        by_caption.setdefault(c, []).append(i)
    captions = sorted(by_caption)
    per_batch = min(batch_size, len(captions))
    if per_batch < 2:
        raise ConfigError("toy CLIP needs at least two distinct captions")
    steps_per_epoch = max(1, len(pairs) // per_batch)
    token_cache = {c: tokenize(c, vocab) for c in captions}

    for _ in range(epochs):
        for _ in range(steps_per_epoch):
            order = np.argsort(rng.uniform((len(captions),)))[:per_batch]
            chosen = [captions[j] for j in order]
            idx = [by_caption[c][rng.randint(0, len(by_caption[c]))] for c in chosen]
            img = concat([encode_image(pairs[i][0], image) for i in idx], axis=0)
            txt = concat([encode_caption(token_cache[c], text, proj) for c in chosen], axis=0)
            loss = clip_contrastive_loss(img, txt, temperature)
            loss.backward()
            opt.step(lr)
            model.losses.append(loss.item())
    return model


def retrieval_at_1(model: ToyClip, images: list[Tensor], captions: list[str], candidates: list[str]) -> float:
    """Fraction of images whose highest-cosine candidate caption is their own."""
    ie = model.embed_images(images)
    te = model.embed_captions(candidates)
    ie = ie / np.linalg.norm(ie, axis=1, keepdims=True)
    te = te / np.linalg.norm(te, axis=1, keepdims=True)
    best = np.argmax(ie @ te.T, axis=1)
    return float(np.mean([candidates[b] == c for b, c in zip(best, captions)]))
