"""A small pre-LN transformer encoder used as the frozen backbone.

The encoder is pre-trained briefly with masked-token recovery on a synthetic
Markov-chain corpus, then frozen. Prompt tuning only ever sees it through
:func:`classify`, which differentiates with respect to the input embeddings
and never with respect to the encoder weights.

Input convention: the last ``max_seq`` rows of an input are token rows and
receive the learned positional embeddings; any rows before them are prompt
rows and are position-free.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .errors import CompatibilityError, DataError, ShapeError

MASK_ID = 0


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    ffn_width: int = 64
    vocab_size: int = 64
    max_seq: int = 16
    n_classes: int = 3
    seed: int = 0
    # a layer norm over a width-2 row is sign-valued, so tiny widths may drop it
    final_norm: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ShapeError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.max_seq < 2:
            raise ShapeError(f"max_seq must be >= 2, got {self.max_seq}")


def init_weights(cfg: EncoderConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    d, f = cfg.d_model, cfg.ffn_width

    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))

    w = {
        "tok_emb": rng.normal(0.0, 1.0, size=(cfg.vocab_size, d)),
        "pos_emb": rng.normal(0.0, 0.1, size=(cfg.max_seq, d)),
    }
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        w[p + "ln1.g"], w[p + "ln1.b"] = np.ones((1, d)), np.zeros((1, d))
        for k in ("wq", "wk", "wv", "wo"):
            w[p + k] = dense(d, d)
        w[p + "ln2.g"], w[p + "ln2.b"] = np.ones((1, d)), np.zeros((1, d))
        w[p + "w1"], w[p + "b1"] = dense(d, f), np.zeros((1, f))
        w[p + "w2"], w[p + "b2"] = dense(f, d), np.zeros((1, d))
    w["lnf.g"], w["lnf.b"] = np.ones((1, d)), np.zeros((1, d))
    w["head"] = dense(d, cfg.n_classes)
    return w


def encode(weights, cfg: EncoderConfig, x):
    """Final-layer hidden states, shape ``(batch, rows, d)``.

    ``weights`` values may be arrays (frozen) or tracked ``Var``s (pretraining).
    """
    x = ad.lift(x)
    batch, rows, d = x.shape
    m = cfg.max_seq
    if d != cfg.d_model:
        raise ShapeError(f"input width {d} does not match d_model={cfg.d_model}")
    if rows < m:
        raise ShapeError(f"input has {rows} rows, need at least max_seq={m}")
    pos = weights["pos_emb"]
    if rows > m:
        pos = ad.concat([np.zeros((rows - m, d)), pos], axis=0)
    h = ad.add(x, pos)
    heads, dh = cfg.n_heads, d // cfg.n_heads
    scale = 1.0 / math.sqrt(dh)

    def split(t):
        return ad.transpose(ad.reshape(t, (batch, rows, heads, dh)), (0, 2, 1, 3))

    for i in range(cfg.n_layers):
        p = f"layer{i}."
        a = ad.layer_norm(h, weights[p + "ln1.g"], weights[p + "ln1.b"])
        q = split(ad.matmul(a, weights[p + "wq"]))
        k = split(ad.matmul(a, weights[p + "wk"]))
        v = split(ad.matmul(a, weights[p + "wv"]))
        att = ad.softmax(ad.matmul(q, ad.transpose(k)) * scale, axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (batch, rows, d))
        h = ad.add(h, ad.matmul(ctx, weights[p + "wo"]))
        f = ad.layer_norm(h, weights[p + "ln2.g"], weights[p + "ln2.b"])
        f = ad.relu(ad.add(ad.matmul(f, weights[p + "w1"]), weights[p + "b1"]))
        h = ad.add(h, ad.add(ad.matmul(f, weights[p + "w2"]), weights[p + "b2"]))
    if not cfg.final_norm:
        return h
    return ad.layer_norm(h, weights["lnf.g"], weights["lnf.b"])


class FrozenEncoder:
    """Immutable encoder weights plus the classification readout."""

    def __init__(self, cfg: EncoderConfig, weights: dict[str, np.ndarray]):
        self.cfg = cfg
        self.weights = {}
        for k, v in weights.items():
            arr = np.array(v, dtype=np.float64)
            arr.flags.writeable = False
            self.weights[k] = arr

    @property
    def embedding_table(self) -> np.ndarray:
        return self.weights["tok_emb"]

    def embed(self, tokens) -> np.ndarray:
        """Frozen input embeddings ``E`` for token ids of shape ``(batch, m)``."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.shape[1] != self.cfg.max_seq:
            raise ShapeError(f"token rows {tokens.shape[1]} != max_seq {self.cfg.max_seq}")
        return self.weights["tok_emb"][tokens]

    def logits(self, x, n_classes: int | None = None):
        """Mean-pooled class logits for input embeddings ``(batch, rows, d)``."""
        n = n_classes or self.cfg.n_classes
        h = encode(self.weights, self.cfg, x)
        return ad.matmul(ad.mean(h, axis=1), self.weights["head"][:, :n])

    def fingerprint(self) -> str:
        return checkpoint.content_hash(b"".join(
            np.ascontiguousarray(self.weights[k]).tobytes() for k in sorted(self.weights)))

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = sorted(self.weights)
        digest = checkpoint.save(directory / "weights.bin", {"kind": "encoder"},
                                 {k: self.weights[k] for k in names})
        manifest = {"config": asdict(self.cfg), "content_hash": digest,
                    "layers": {k: list(self.weights[k].shape) for k in names}}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "FrozenEncoder":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise CompatibilityError(f"no encoder manifest in {directory}")
        manifest = json.loads(manifest_path.read_text())
        header, arrays = checkpoint.load(directory / "weights.bin")
        if header["content_hash"] != manifest["content_hash"]:
            raise CompatibilityError("encoder manifest and weights disagree")
        return cls(EncoderConfig(**manifest["config"]), arrays)


def classify(enc: FrozenEncoder, input_embedding, label, n_classes: int | None = None):
    """Logits and mean cross-entropy for one example or a batch.

    ``input_embedding`` is ``(rows, d)`` or ``(batch, rows, d)``; gradients
    reach it (and hence the prompt rows) but never the encoder weights.
    """
    x = input_embedding
    single = (x.value if isinstance(x, ad.Var) else np.asarray(x)).ndim == 2
    if single:
        x = ad.reshape(x, (1,) + tuple(np.shape(x.value if isinstance(x, ad.Var) else x)))
    logits = enc.logits(x, n_classes)
    loss = ad.cross_entropy(logits, np.atleast_1d(label))
    if single:
        logits = ad.reshape(logits, (logits.shape[-1],))
    if not isinstance(input_embedding, ad.Var):
        return logits.value, float(loss.value.reshape(()))
    return logits, loss


# -- synthetic corpus and masked-token pretraining ------------------------------


def markov_corpus(cfg: EncoderConfig, n_sequences: int, seed: int, branching: int = 3):
    """Token sequences from a seeded sparse first-order Markov chain over ids 1..V-1."""
    rng = np.random.default_rng(seed)
    v = cfg.vocab_size
    chain_rng = np.random.default_rng(cfg.seed + 7919)
    successors = np.stack([chain_rng.choice(np.arange(1, v), size=branching, replace=False)
                           for _ in range(v)])
    probs = chain_rng.dirichlet(np.ones(branching), size=v)
    seqs = np.empty((n_sequences, cfg.max_seq), dtype=np.int64)
    seqs[:, 0] = rng.integers(1, v, size=n_sequences)
    for t in range(1, cfg.max_seq):
        prev = seqs[:, t - 1]
        u = rng.random(n_sequences)
        choice = (u[:, None] > np.cumsum(probs[prev], axis=1)).sum(axis=1)
        choice = np.minimum(choice, branching - 1)
        seqs[:, t] = successors[prev, choice]
    return seqs


def _mask(tokens, rng, rate=0.15):
    mask = rng.random(tokens.shape) < rate
    none = ~mask.any(axis=1)
    mask[none, rng.integers(0, tokens.shape[1], size=none.sum())] = True
    corrupted = np.where(mask, MASK_ID, tokens)
    return corrupted, mask


def _mlm_logits(weights, cfg, corrupted, mask):
    x = ad.embedding(weights["tok_emb"], corrupted)
    h = encode(weights, cfg, x)
    bi, pi = np.nonzero(mask)
    picked = ad.getitem(h, (bi, pi))
    return ad.matmul(picked, ad.transpose(weights["tok_emb"]))


def masked_token_accuracy(weights, cfg: EncoderConfig, tokens, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    corrupted, mask = _mask(tokens, rng)
    logits = ad.unwrap(_mlm_logits(weights, cfg, corrupted, mask))
    return float((logits.argmax(axis=1) == tokens[mask]).mean())


def pretrain_encoder(cfg: EncoderConfig, corpus, steps: int, batch_size: int = 32,
                     lr: float = 3e-3, seed: int | None = None) -> FrozenEncoder:
    """Masked-token pretraining with Adam, then freeze."""
    corpus = np.asarray(corpus)
    if corpus.size == 0 or corpus.ndim != 2:
        raise DataError("pretraining corpus is empty")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    weights = init_weights(cfg)
    trainable = [k for k in weights if k != "head"]
    m1 = {k: np.zeros_like(weights[k]) for k in trainable}
    m2 = {k: np.zeros_like(weights[k]) for k in trainable}
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(corpus), size=batch_size)
        tokens = corpus[idx]
        corrupted, mask = _mask(tokens, rng)
        tape = ad.Tape()
        tracked = {k: tape.param(k, weights[k]) if k in trainable else weights[k]
                   for k in weights}
        loss = ad.cross_entropy(_mlm_logits(tracked, cfg, corrupted, mask), tokens[mask])
        grads = tape.backward(loss)
        for k in trainable:
            g = grads[k]
            m1[k] = 0.9 * m1[k] + 0.1 * g
            m2[k] = 0.999 * m2[k] + 0.001 * g * g
            mhat = m1[k] / (1 - 0.9 ** step)
            vhat = m2[k] / (1 - 0.999 ** step)
            weights[k] = weights[k] - lr * mhat / (np.sqrt(vhat) + 1e-8)
    return FrozenEncoder(cfg, weights)
