from pathlib import Path

import numpy as np
import pytest

from pynexus.checkpoint import (
    MAGIC,
    CheckpointMismatchError,
    config_hash,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from pynexus.model import NexusConfig, init_params
from pynexus.tensor import parameter


@pytest.fixture
def encoded(tiny_config: NexusConfig) -> bytes:
    return encode_checkpoint(init_params(tiny_config, 3))


class TestCheckpoint:
    def test_bitwise_round_trip(self, tiny_config: NexusConfig, tmp_path: Path) -> None:
        params = init_params(tiny_config, 3)
        path = tmp_path / "model" / "checkpoint.nexus"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path, expected=tiny_config)
        assert loaded.config == tiny_config
        assert list(loaded) == list(params)
        for name, array in params.items():
            assert loaded[name].values.tobytes() == array.values.tobytes()
        assert encode_checkpoint(loaded) == path.read_bytes()

    def test_loaded_arrays_are_trainable(self, encoded: bytes) -> None:
        params = decode_checkpoint(encoded)
        array = params["proj.W1"]
        assert array.requires_grad
        array.values += 1.0

    def test_header(self, encoded: bytes, tiny_config: NexusConfig) -> None:
        assert encoded.startswith(MAGIC + tiny_config.header().encode() + b"\n")

    def test_config_hash_mismatch(
        self, encoded: bytes, tiny_config: NexusConfig
    ) -> None:
        other = tiny_config.copy(update={"d_hidden": 16})
        assert config_hash(other) != config_hash(tiny_config)
        with pytest.raises(CheckpointMismatchError, match="does not match"):
            decode_checkpoint(encoded, expected=other)

    def test_corrupted_values(self, encoded: bytes) -> None:
        data = bytearray(encoded)
        data[-20] ^= 0xFF
        with pytest.raises(CheckpointMismatchError, match="checksum"):
            decode_checkpoint(bytes(data))

    def test_truncated(self, encoded: bytes) -> None:
        with pytest.raises(CheckpointMismatchError):
            decode_checkpoint(encoded[: len(encoded) // 2])

    def test_bad_magic(self, encoded: bytes) -> None:
        with pytest.raises(CheckpointMismatchError, match="magic"):
            decode_checkpoint(b"XX" + encoded[2:])

    def test_invalid_header(self, encoded: bytes) -> None:
        data = encoded.replace(b"K=3", b"K=0", 1)
        with pytest.raises(CheckpointMismatchError, match="header"):
            decode_checkpoint(data)

    def test_parameter_set_must_match_config(self, tiny_config: NexusConfig) -> None:
        params = init_params(tiny_config, 0)
        del params.arrays["pos.E"]
        with pytest.raises(CheckpointMismatchError, match="pos.E"):
            decode_checkpoint(encode_checkpoint(params))

    def test_no_expected_config(self, encoded: bytes) -> None:
        params = decode_checkpoint(encoded)
        assert np.isfinite(params["head.W_out"].values).all()

    def test_parameter_shapes_must_match_config(
        self, tiny_config: NexusConfig
    ) -> None:
        params = init_params(tiny_config, 0)
        params.arrays["proj.b"] = parameter(np.zeros(tiny_config.d_hidden + 1))
        with pytest.raises(CheckpointMismatchError, match="proj.b has shape"):
            decode_checkpoint(encode_checkpoint(params))
