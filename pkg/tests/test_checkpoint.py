import struct

import numpy as np
import pytest

from app.exceptions import CheckpointError
from app.services import checkpoint, training
from app.services.encoder import EncoderModel
from app.services.tokenizer import Tokenizer


@pytest.fixture
def trained_model(small_catalog, labeled_sequences, tiny_encoder, train_params):
    config = tiny_encoder(numeric_encoding="piecewise_linear", n_bins=4)
    model = EncoderModel(config, Tokenizer.fit(small_catalog, labeled_sequences, config))
    training.train_classifier(model, labeled_sequences, small_catalog, train_params(epochs=1))
    return model


# Test a saved model loads back with identical weights, tokenizer and training state
def test_save_and_load(tmp_path, trained_model, small_catalog, labeled_sequences):
    path = tmp_path / "model.ckpt"
    ident = checkpoint.save_checkpoint(trained_model, path)
    assert path.read_bytes()[:4] == b"UNCN"
    assert ident == checkpoint.checkpoint_id(path.read_bytes())

    loaded = checkpoint.load_checkpoint(path)
    assert loaded.config.model_dump() == trained_model.config.model_dump()
    assert loaded.trained == {"classifier"}
    assert loaded.parameter_checksum() == trained_model.parameter_checksum()
    assert loaded.tokenizer.to_state() == trained_model.tokenizer.to_state()
    np.testing.assert_array_equal(
        training.score_batch(loaded, labeled_sequences, small_catalog),
        training.score_batch(trained_model, labeled_sequences, small_catalog),
    )


# Test identical models serialize to identical bytes
def test_deterministic_bytes(trained_model):
    assert checkpoint.to_bytes(trained_model) == checkpoint.to_bytes(trained_model)
    restored = checkpoint.from_bytes(checkpoint.to_bytes(trained_model))
    assert checkpoint.to_bytes(restored) == checkpoint.to_bytes(trained_model)


# Test float32 tensors keep their dtype
def test_float32(small_catalog, labeled_sequences, tiny_encoder):
    config = tiny_encoder(dtype="float32")
    model = EncoderModel(config, Tokenizer.fit(small_catalog, labeled_sequences, config))
    restored = checkpoint.from_bytes(checkpoint.to_bytes(model))
    assert restored.params["head.cls.w"].dtype == np.float32
    assert restored.parameter_checksum() == model.parameter_checksum()


# Test corrupt checkpoints are rejected
def test_corrupt_checkpoints(tmp_path, trained_model):
    data = checkpoint.to_bytes(trained_model)
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.from_bytes(b"NOPE" + data[4:])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.from_bytes(data[:4] + struct.pack("<I", 99) + data[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.from_bytes(data[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint.from_bytes(data + b"\x00")
    with pytest.raises(CheckpointError):
        checkpoint.load_checkpoint(tmp_path / "absent.ckpt")
