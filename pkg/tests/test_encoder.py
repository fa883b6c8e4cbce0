import numpy as np
import pytest

from app.exceptions import DataError
from app.schemas.catalog import LabeledSequence
from app.schemas.config import NEXT_ITEM_TOKEN_FEATURES
from app.services.encoder import (
    EncoderModel,
    attention_mask,
    balanced_class_weights,
    classification_loss,
    embed_token,
    next_item_loss,
)
from app.services.tokenizer import Tokenizer

from .conftest import DAY, NOW


@pytest.fixture
def next_item_model(small_catalog, labeled_sequences, tiny_encoder):
    config = tiny_encoder(token_features=NEXT_ITEM_TOKEN_FEATURES, use_positional=True)
    return EncoderModel(config, Tokenizer.fit(small_catalog, labeled_sequences, config))


def _sequence(make_event, cid, skus):
    return LabeledSequence(
        consumer_id=cid, events=tuple(make_event(cid, NOW - (len(skus) - i) * DAY, sku) for i, sku in enumerate(skus))
    )


# Test parameter names and shapes follow the config
def test_parameter_shapes(next_item_model, small_catalog):
    shapes = next_item_model.parameter_shapes()
    assert shapes["emb.sku"] == (len(small_catalog) + 1, 8)
    assert shapes["head.item.w"] == (8, len(small_catalog))
    assert shapes["head.cls.w"] == (8, 2)
    assert shapes["pos"] == (13, 8)
    assert shapes["layers.0.ff.w1"] == (8, 32)
    assert (next_item_model.params["emb.brand"][0] == 0).all()
    assert all(np.isfinite(p).all() for p in next_item_model.params.values())


# Test the lookalike configuration has no next-item head
def test_classifier_only_model(small_catalog, labeled_sequences, tiny_encoder):
    config = tiny_encoder()
    model = EncoderModel(config, Tokenizer.fit(small_catalog, labeled_sequences, config))
    assert not model.has_item_head
    assert "head.item.w" not in model.params
    batch = model.encode(labeled_sequences[:2], small_catalog)
    with pytest.raises(DataError, match="next-item head"):
        model.loss_and_gradients(batch, "next_item")


# Test mismatched parameter sets are rejected
def test_parameter_mismatch(next_item_model):
    params = dict(next_item_model.params)
    params.pop("ln_f.gain")
    with pytest.raises(DataError):
        EncoderModel(next_item_model.config, next_item_model.tokenizer, params)


# Test token vectors are sums of feature embeddings
def test_embed_token(small_catalog, labeled_sequences, tiny_encoder, make_event):
    config = tiny_encoder(token_features=("brand",), use_timestamp=False)
    model = EncoderModel(config, Tokenizer.fit(small_catalog, labeled_sequences, config))
    event = make_event("c1", NOW, "S3")

    for name in model.params:
        if name.startswith(("emb.", "num.")):
            model.params[name][...] = 0.0
    np.testing.assert_array_equal(embed_token(model, event, small_catalog), np.zeros(8))

    row = model.tokenizer.index("brand", "B")
    model.params["emb.brand"][row] = np.eye(8)[3]
    np.testing.assert_array_equal(embed_token(model, event, small_catalog), np.eye(8)[3])


# Test output shapes and class probabilities
def test_forward_shapes(next_item_model, small_catalog, make_event):
    batch = next_item_model.encode([_sequence(make_event, "c1", ["S1"])], small_catalog)
    output, _ = next_item_model.forward(batch)
    assert output.item_logits.shape == (1, 1, len(small_catalog))
    assert output.class_logits.shape == (1, 2)
    assert output.encodings.shape == (1, 2, 8)
    probs = next_item_model.class_probabilities(batch)
    assert probs.sum() == pytest.approx(1.0, abs=1e-6)


# Test over-length batches are rejected
def test_forward_too_long(next_item_model, small_catalog, make_event):
    seq = _sequence(make_event, "c1", ["S1"] * 12)
    batch = next_item_model.encode([seq], small_catalog)
    long_batch = next_item_model.tokenizer.encode([_sequence(make_event, "c1", ["S1"] * 13)], small_catalog, 20)
    next_item_model.forward(batch)
    with pytest.raises(DataError, match="max_seq_len"):
        next_item_model.forward(long_batch)


# Test the attention mask: causal events, CLS sees everything valid
def test_attention_mask():
    valid = np.array([[True, True, True, False]])
    allowed = attention_mask(valid)[0]
    assert allowed[0].tolist() == [True, True, True, False]
    assert allowed[1].tolist() == [False, True, False, False]
    assert allowed[2].tolist() == [False, True, True, False]
    assert allowed[3, 3]


# Test next-item logits at position i ignore every later event
def test_causality(next_item_model, small_catalog, make_event):
    original = _sequence(make_event, "c1", ["S1", "S2", "S3", "S4", "S5"])
    changed = _sequence(make_event, "c1", ["S1", "S2", "S3", "D1", "D2"])
    a, _ = next_item_model.forward(next_item_model.encode([original], small_catalog))
    b, _ = next_item_model.forward(next_item_model.encode([changed], small_catalog))
    np.testing.assert_array_equal(a.item_logits[0, :3], b.item_logits[0, :3])
    assert not np.allclose(a.item_logits[0, 3:], b.item_logits[0, 3:])


# Test padding leaves the encodings of real tokens unchanged
def test_padding_neutrality(next_item_model, small_catalog, make_event):
    short = _sequence(make_event, "c1", ["S1", "S2"])
    long = _sequence(make_event, "c2", ["S3", "S4", "S5", "D1", "D2", "S1"])
    alone, _ = next_item_model.forward(next_item_model.encode([short], small_catalog))
    padded, _ = next_item_model.forward(next_item_model.encode([short, long], small_catalog))
    np.testing.assert_allclose(padded.encodings[0, :3], alone.encodings[0], atol=1e-6)
    np.testing.assert_allclose(padded.class_logits[0], alone.class_logits[0], atol=1e-6)


# Test that without timestamps or positions the classifier ignores event order
def test_order_free_classifier(small_catalog, labeled_sequences, tiny_encoder):
    config = tiny_encoder(use_timestamp=False, use_positional=False)
    model = EncoderModel(config, Tokenizer.fit(small_catalog, labeled_sequences, config))
    seq = labeled_sequences[1]
    permuted = seq.model_copy(update={"events": (seq.events[2], seq.events[0], seq.events[3], seq.events[1])})
    a = model.class_probabilities(model.encode([seq], small_catalog))
    b = model.class_probabilities(model.encode([permuted], small_catalog))
    np.testing.assert_array_equal(a, b)


# Test the masked next-item loss and its gradient
def test_next_item_loss():
    logits = np.zeros((1, 3, 4))
    targets = np.array([[2, 0, -1]])
    loss, grad = next_item_loss(logits, targets)
    assert loss == pytest.approx(np.log(4))
    assert (grad[0, 2] == 0).all()
    assert grad[0, 0, 2] == pytest.approx((0.25 - 1.0) / 2)

    loss, grad = next_item_loss(logits, np.full((1, 3), -1))
    assert loss == 0.0 and not grad.any()


# Test class weights are equivalent to duplicating examples
def test_class_weighting_equals_duplication():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 2))
    labels = np.array([1, 0, 0, 0, 1])
    weights = np.where(labels == 1, 2.0, 1.0)
    weighted, _ = classification_loss(logits, labels, weights)
    duplicated = np.concatenate([logits, logits[labels == 1]])
    dup_labels = np.concatenate([labels, labels[labels == 1]])
    plain, _ = classification_loss(duplicated, dup_labels)
    assert weighted == pytest.approx(plain, abs=1e-12)

    np.testing.assert_allclose(balanced_class_weights(np.array([0, 0, 0, 1])), [4 / 6, 2.0])
    with pytest.raises(DataError):
        balanced_class_weights(np.array([0, 0]))
