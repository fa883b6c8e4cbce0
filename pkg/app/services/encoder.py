"""
Causal-attention sequence encoder in plain numpy with hand-written gradients.

Layout of one input row: position 0 is the CLS token, positions 1..L are the
events of a window. Event rows attend causally to events only, the CLS row
attends to every valid token. Two heads read the final encodings: a
next-item softmax over SKUs from the event rows and a binary classifier from
the CLS row.
"""
import hashlib
import logging
import math
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from ..exceptions import DataError
from ..schemas.catalog import Catalog, InteractionEvent, LabeledSequence
from ..schemas.config import EncoderConfig
from .tokenizer import NUMERIC_FEATURES, TokenBatch, Tokenizer

logger = logging.getLogger(__name__)

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


# ---------------------------------------------------------------- primitives


def layer_norm(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gain + bias, (xhat, inv)


def layer_norm_backward(dy, gain, cache):
    xhat, inv = cache
    d = xhat.shape[-1]
    dgain = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbias = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * gain
    dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dgain, dbias


def gelu(x):
    t = np.tanh(GELU_C * (x + GELU_A * x**3))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)


def softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def attention_mask(valid: np.ndarray) -> np.ndarray:
    """
    Boolean (B, T, T) mask; `valid` is (B, T) with the CLS slot at column 0.

    Event row i may see event columns 1..i, the CLS row sees every valid
    column. Padding rows see themselves so no row is fully masked.
    """
    B, T = valid.shape
    causal = np.tril(np.ones((T, T), dtype=bool))
    causal[:, 0] = False
    causal[0, :] = True
    allowed = causal[None, :, :] & valid[:, None, :]
    allowed |= np.eye(T, dtype=bool)[None, :, :] & ~valid[:, :, None]
    return allowed


def next_item_loss(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over positions with a next event (target >= 0)."""
    valid = targets >= 0
    n = int(valid.sum())
    grad = np.zeros_like(logits)
    if n == 0:
        return 0.0, grad
    logp = log_softmax(logits)
    rows = np.nonzero(valid)
    picked = logp[rows + (targets[rows],)]
    loss = float(-picked.sum() / n)
    probs = np.exp(logp)
    probs[rows + (targets[rows],)] -= 1.0
    grad = probs * valid[..., None] / n
    return loss, grad


def classification_loss(
    logits: np.ndarray, labels: np.ndarray, weights: Optional[np.ndarray] = None
) -> Tuple[float, np.ndarray]:
    """Weighted mean cross-entropy sum(w * l) / sum(w) of the two-class head."""
    w = np.ones(len(labels)) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    logp = log_softmax(logits)
    idx = np.arange(len(labels))
    loss = float(-(w * logp[idx, labels]).sum() / total)
    grad = np.exp(logp)
    grad[idx, labels] -= 1.0
    grad *= (w / total)[:, None]
    return loss, grad.astype(logits.dtype)


def balanced_class_weights(labels: np.ndarray) -> np.ndarray:
    """Per-class weights n / (2 * n_c); raises on single-class labels."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=2)
    if (counts == 0).any():
        raise DataError("class weighting needs both classes in the training data")
    return len(labels) / (2.0 * counts)


# ---------------------------------------------------------------- model


class EncoderOutput(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    encodings: np.ndarray  # (B, L + 1, d), CLS at position 0
    item_logits: Optional[np.ndarray] = None  # (B, L, n_skus)
    class_logits: Optional[np.ndarray] = None  # (B, 2)


class EncoderModel:
    """Parameters plus forward/backward passes; `params` maps tensor names to arrays."""

    def __init__(self, config: EncoderConfig, tokenizer: Tokenizer, params: Optional[Dict[str, np.ndarray]] = None):
        self.config = config
        self.tokenizer = tokenizer
        self.dtype = np.dtype(config.dtype)
        self.frozen: Set[str] = set()
        self.trained: Set[str] = set()
        self.params = params if params is not None else self._init_params()
        self._check_shapes()

    @property
    def has_item_head(self) -> bool:
        return "sku" in self.config.token_features

    @property
    def numeric_features(self) -> Tuple[str, ...]:
        return tuple(f for f in NUMERIC_FEATURES if f != "timestamp" or self.config.use_timestamp)

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        c, tk = self.config, self.tokenizer
        d, ff = c.d_model, c.ff_dim
        shapes: Dict[str, Tuple[int, ...]] = {}
        for feature in c.token_features:
            shapes[f"emb.{feature}"] = (tk.vocab_size(feature), d)
        shapes["cls.token"] = (d,)
        for feature in c.cls_features:
            shapes[f"cls.{feature}"] = (tk.vocab_size(feature), d)
        for feature in self.numeric_features:
            shapes[f"num.{feature}"] = (c.n_bins, d) if c.numeric_encoding == "piecewise_linear" else (d,)
        if c.use_positional:
            shapes["pos"] = (c.max_seq_len + 1, d)
        for layer in range(c.n_layers):
            p = f"layers.{layer}"
            shapes.update(
                {
                    f"{p}.ln1.gain": (d,),
                    f"{p}.ln1.bias": (d,),
                    f"{p}.attn.wq": (d, d),
                    f"{p}.attn.bq": (d,),
                    f"{p}.attn.wk": (d, d),
                    f"{p}.attn.bk": (d,),
                    f"{p}.attn.wv": (d, d),
                    f"{p}.attn.bv": (d,),
                    f"{p}.attn.wo": (d, d),
                    f"{p}.attn.bo": (d,),
                    f"{p}.ln2.gain": (d,),
                    f"{p}.ln2.bias": (d,),
                    f"{p}.ff.w1": (d, ff),
                    f"{p}.ff.b1": (ff,),
                    f"{p}.ff.w2": (ff, d),
                    f"{p}.ff.b2": (d,),
                }
            )
        shapes["ln_f.gain"] = (d,)
        shapes["ln_f.bias"] = (d,)
        if self.has_item_head:
            shapes["head.item.w"] = (d, tk.n_skus)
            shapes["head.item.b"] = (tk.n_skus,)
        shapes["head.cls.w"] = (d, 2)
        shapes["head.cls.b"] = (2,)
        return shapes

    def _init_params(self) -> Dict[str, np.ndarray]:
        rng = np.random.default_rng(self.config.seed)
        d = self.config.d_model
        params = {}
        for name, shape in self.parameter_shapes().items():
            leaf = name.rsplit(".", 1)[-1]
            if name.startswith(("emb.", "cls.", "num.", "pos")):
                # Embedding tables; row 0 of categorical tables is padding
                value = rng.uniform(-1.0 / math.sqrt(d), 1.0 / math.sqrt(d), size=shape)
                if name.startswith(("emb.", "cls.")) and len(shape) == 2:
                    value[0] = 0.0
            elif leaf == "gain":
                value = np.ones(shape)
            elif leaf in ("bias", "b", "bq", "bk", "bv", "bo", "b1", "b2"):
                value = np.zeros(shape)
            else:
                limit = 1.0 / math.sqrt(shape[0])
                value = rng.uniform(-limit, limit, size=shape)
            params[name] = value.astype(self.dtype)
        return params

    def _check_shapes(self) -> None:
        expected = self.parameter_shapes()
        if set(expected) != set(self.params):
            missing = sorted(set(expected) ^ set(self.params))
            raise DataError(f"parameter set does not match the config: {missing[:5]}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise DataError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    def parameter_checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return digest.hexdigest()

    # ------------------------------------------------------------ tokens

    def encode(self, sequences: Sequence[LabeledSequence], catalog: Catalog, canonical: Optional[bool] = None) -> TokenBatch:
        """Tokenize a batch; without order features the events are put in canonical order."""
        if canonical is None:
            canonical = self.config.order_free
        return self.tokenizer.encode(sequences, catalog, self.config.max_seq_len, canonical=canonical)

    def _numeric_inputs(self, batch: TokenBatch, feature: str) -> np.ndarray:
        values = batch.numeric[feature]
        if self.config.numeric_encoding == "piecewise_linear":
            return self.tokenizer.ple(feature, values).astype(self.dtype)
        return values.astype(self.dtype)

    def embed_tokens(self, batch: TokenBatch) -> np.ndarray:
        """Event token vectors (B, L, d): sum of every feature's embedding, zero at padding."""
        P = self.params
        B, L = batch.mask.shape
        tokens = np.zeros((B, L, self.config.d_model), dtype=self.dtype)
        for feature in self.config.token_features:
            tokens += P[f"emb.{feature}"][batch.categorical[feature]]
        for feature in self.numeric_features:
            x = self._numeric_inputs(batch, feature)
            if self.config.numeric_encoding == "piecewise_linear":
                tokens += x @ P[f"num.{feature}"]
            else:
                tokens += x[..., None] * P[f"num.{feature}"]
        return tokens * batch.mask[..., None]

    # ------------------------------------------------------------ forward

    def _dropout(self, shape, training: bool, rng: Optional[np.random.Generator]):
        p = self.config.dropout
        if not training or p == 0.0:
            return None
        return ((rng.random(shape) >= p) / (1.0 - p)).astype(self.dtype)

    def _attention(self, prefix: str, x: np.ndarray, allowed: np.ndarray):
        P = self.params
        B, T, d = x.shape
        h = self.config.n_heads
        dh = d // h

        def split(t):
            return t.reshape(B, T, h, dh).transpose(0, 2, 1, 3)

        q = split(x @ P[f"{prefix}.wq"] + P[f"{prefix}.bq"])
        k = split(x @ P[f"{prefix}.wk"] + P[f"{prefix}.bk"])
        v = split(x @ P[f"{prefix}.wv"] + P[f"{prefix}.bv"])
        scores = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(dh)
        scores = np.where(allowed[:, None, :, :], scores, -np.inf)
        probs = softmax(scores)
        merged = (probs @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        out = merged @ P[f"{prefix}.wo"] + P[f"{prefix}.bo"]
        return out, (x, q, k, v, probs, merged)

    def _attention_backward(self, prefix: str, dout: np.ndarray, cache, grads: Dict[str, np.ndarray]) -> np.ndarray:
        P = self.params
        x, q, k, v, probs, merged = cache
        B, T, d = x.shape
        h = self.config.n_heads
        dh = d // h

        def split(t):
            return t.reshape(B, T, h, dh).transpose(0, 2, 1, 3)

        def merge(t):
            return t.transpose(0, 2, 1, 3).reshape(B, T, d)

        x2 = x.reshape(-1, d)
        dout2 = dout.reshape(-1, d)
        grads[f"{prefix}.wo"] += merged.reshape(-1, d).T @ dout2
        grads[f"{prefix}.bo"] += dout2.sum(axis=0)
        dmerged = split(dout @ P[f"{prefix}.wo"].T)
        dprobs = dmerged @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dmerged
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
        dq = merge(dscores @ k)
        dk = merge(dscores.transpose(0, 1, 3, 2) @ q)
        dv = merge(dv)
        dx = np.zeros_like(x)
        for name, dt in (("q", dq), ("k", dk), ("v", dv)):
            dt2 = dt.reshape(-1, d)
            grads[f"{prefix}.w{name}"] += x2.T @ dt2
            grads[f"{prefix}.b{name}"] += dt2.sum(axis=0)
            dx += dt @ P[f"{prefix}.w{name}"].T
        return dx

    def forward(
        self,
        batch: TokenBatch,
        heads: Iterable[str] = ("item", "cls"),
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ):
        """Run the encoder; returns (EncoderOutput, cache for `backward`)."""
        c, P = self.config, self.params
        heads = set(heads)
        B, L = batch.mask.shape
        if L > c.max_seq_len:
            raise DataError(f"sequence length {L} exceeds max_seq_len={c.max_seq_len}")
        T = L + 1
        eps = c.layer_norm_eps

        cls_vec = np.broadcast_to(P["cls.token"], (B, c.d_model)).astype(self.dtype)
        for feature in c.cls_features:
            cls_vec = cls_vec + P[f"cls.{feature}"][batch.cls[feature]]
        valid = np.concatenate([np.ones((B, 1), dtype=bool), batch.mask], axis=1)
        x = np.concatenate([cls_vec[:, None, :], self.embed_tokens(batch)], axis=1)
        if c.use_positional:
            x = x + P["pos"][:T] * valid[..., None]
        allowed = attention_mask(valid)

        layer_caches = []
        for layer in range(c.n_layers):
            p = f"layers.{layer}"
            h1, ln1 = layer_norm(x, P[f"{p}.ln1.gain"], P[f"{p}.ln1.bias"], eps)
            a, att = self._attention(f"{p}.attn", h1, allowed)
            drop1 = self._dropout(a.shape, training, rng)
            if drop1 is not None:
                a = a * drop1
            x2 = x + a
            h2, ln2 = layer_norm(x2, P[f"{p}.ln2.gain"], P[f"{p}.ln2.bias"], eps)
            f1 = h2 @ P[f"{p}.ff.w1"] + P[f"{p}.ff.b1"]
            g, t = gelu(f1)
            f2 = g @ P[f"{p}.ff.w2"] + P[f"{p}.ff.b2"]
            drop2 = self._dropout(f2.shape, training, rng)
            if drop2 is not None:
                f2 = f2 * drop2
            x = x2 + f2
            layer_caches.append((ln1, att, drop1, ln2, h2, f1, g, t, drop2))

        z, ln_f = layer_norm(x, P["ln_f.gain"], P["ln_f.bias"], eps)
        output = EncoderOutput(encodings=z)
        if "item" in heads and self.has_item_head:
            output.item_logits = z[:, 1:] @ P["head.item.w"] + P["head.item.b"]
        if "cls" in heads:
            output.class_logits = z[:, 0] @ P["head.cls.w"] + P["head.cls.b"]
        cache = {"batch": batch, "layers": layer_caches, "ln_f": ln_f, "z": z, "valid": valid}
        return output, cache

    # ------------------------------------------------------------ backward

    def backward(
        self,
        cache,
        d_item_logits: Optional[np.ndarray] = None,
        d_class_logits: Optional[np.ndarray] = None,
    ) -> Dict[str, np.ndarray]:
        """Gradients of all parameters given gradients of the head outputs."""
        c, P = self.config, self.params
        grads = {name: np.zeros_like(value) for name, value in P.items()}
        z = cache["z"]
        batch: TokenBatch = cache["batch"]
        d = c.d_model

        dz = np.zeros_like(z)
        if d_item_logits is not None:
            zi = z[:, 1:].reshape(-1, d)
            di = d_item_logits.reshape(-1, d_item_logits.shape[-1])
            grads["head.item.w"] += zi.T @ di
            grads["head.item.b"] += di.sum(axis=0)
            dz[:, 1:] += d_item_logits @ P["head.item.w"].T
        if d_class_logits is not None:
            grads["head.cls.w"] += z[:, 0].T @ d_class_logits
            grads["head.cls.b"] += d_class_logits.sum(axis=0)
            dz[:, 0] += d_class_logits @ P["head.cls.w"].T

        dx, grads["ln_f.gain"], grads["ln_f.bias"] = layer_norm_backward(dz, P["ln_f.gain"], cache["ln_f"])

        for layer in reversed(range(c.n_layers)):
            p = f"layers.{layer}"
            ln1, att, drop1, ln2, h2, f1, g, t, drop2 = cache["layers"][layer]
            df2 = dx if drop2 is None else dx * drop2
            ff = f1.shape[-1]
            grads[f"{p}.ff.w2"] += g.reshape(-1, ff).T @ df2.reshape(-1, d)
            grads[f"{p}.ff.b2"] += df2.reshape(-1, d).sum(axis=0)
            df1 = (df2 @ P[f"{p}.ff.w2"].T) * gelu_backward(f1, t)
            grads[f"{p}.ff.w1"] += h2.reshape(-1, d).T @ df1.reshape(-1, ff)
            grads[f"{p}.ff.b1"] += df1.reshape(-1, ff).sum(axis=0)
            dh2 = df1 @ P[f"{p}.ff.w1"].T
            dx2_ln, dg2, db2 = layer_norm_backward(dh2, P[f"{p}.ln2.gain"], ln2)
            grads[f"{p}.ln2.gain"] += dg2
            grads[f"{p}.ln2.bias"] += db2
            dx2 = dx + dx2_ln
            da = dx2 if drop1 is None else dx2 * drop1
            dh1 = self._attention_backward(f"{p}.attn", da, att, grads)
            dx1_ln, dg1, db1 = layer_norm_backward(dh1, P[f"{p}.ln1.gain"], ln1)
            grads[f"{p}.ln1.gain"] += dg1
            grads[f"{p}.ln1.bias"] += db1
            dx = dx2 + dx1_ln

        valid = cache["valid"]
        if c.use_positional:
            T = dx.shape[1]
            grads["pos"][:T] += (dx * valid[..., None]).sum(axis=0)

        dcls = dx[:, 0]
        grads["cls.token"] += dcls.sum(axis=0)
        for feature in c.cls_features:
            np.add.at(grads[f"cls.{feature}"], batch.cls[feature], dcls)
            grads[f"cls.{feature}"][0] = 0.0

        dtok = dx[:, 1:] * batch.mask[..., None]
        flat = dtok.reshape(-1, d)
        for feature in c.token_features:
            np.add.at(grads[f"emb.{feature}"], batch.categorical[feature].reshape(-1), flat)
            grads[f"emb.{feature}"][0] = 0.0
        for feature in self.numeric_features:
            x = self._numeric_inputs(batch, feature)
            if c.numeric_encoding == "piecewise_linear":
                grads[f"num.{feature}"] += x.reshape(-1, x.shape[-1]).T @ flat
            else:
                grads[f"num.{feature}"] += x.reshape(-1) @ flat
        return grads

    # ------------------------------------------------------------ losses

    def loss_and_gradients(
        self,
        batch: TokenBatch,
        task: str,
        sample_weights: Optional[np.ndarray] = None,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[float, Dict[str, np.ndarray]]:
        """Loss and gradients for task "next_item", "classifier" or "both" (their sum)."""
        if task not in ("next_item", "classifier", "both"):
            raise DataError(f"unknown task {task!r}")
        heads = []
        if task in ("next_item", "both"):
            if not self.has_item_head:
                raise DataError("model has no next-item head (no 'sku' token feature)")
            heads.append("item")
        if task in ("classifier", "both"):
            heads.append("cls")
        output, cache = self.forward(batch, heads=heads, training=training, rng=rng)
        loss = 0.0
        d_item = d_cls = None
        if "item" in heads:
            item_loss, d_item = next_item_loss(output.item_logits, batch.targets)
            loss += item_loss
        if "cls" in heads:
            cls_loss, d_cls = classification_loss(output.class_logits, batch.labels, sample_weights)
            loss += cls_loss
        return loss, self.backward(cache, d_item, d_cls)

    def loss(self, batch: TokenBatch, task: str, sample_weights: Optional[np.ndarray] = None) -> float:
        heads = ["item"] if task == "next_item" else ["cls"] if task == "classifier" else ["item", "cls"]
        output, _ = self.forward(batch, heads=heads)
        total = 0.0
        if "item" in heads:
            total += next_item_loss(output.item_logits, batch.targets)[0]
        if "cls" in heads:
            total += classification_loss(output.class_logits, batch.labels, sample_weights)[0]
        return total

    # ------------------------------------------------------------ inference helpers

    def class_probabilities(self, batch: TokenBatch) -> np.ndarray:
        output, _ = self.forward(batch, heads=["cls"])
        return softmax(output.class_logits.astype(np.float64))

    def event_encodings(self, batch: TokenBatch) -> List[np.ndarray]:
        """Final-layer encodings of the valid event tokens of each sequence."""
        output, _ = self.forward(batch, heads=[])
        return [output.encodings[b, 1:][batch.mask[b]] for b in range(batch.size)]


def embed_token(model: EncoderModel, event: InteractionEvent, catalog: Catalog) -> np.ndarray:
    """Token vector (d_model,) of one event: the sum of its feature embeddings."""
    sequence = LabeledSequence(consumer_id=event.consumer_id, events=(event,))
    batch = model.tokenizer.encode([sequence], catalog, max_len=1)
    return model.embed_tokens(batch)[0, 0]
