import json

import numpy as np
import pytest

from pamdenoise import io as pio


def test_pgm_round_trip_within_quantization(tmp_path):
    img = np.random.default_rng(0).uniform(0, 1, (13, 21))
    pio.write_pgm(tmp_path / "a.pgm", img)
    back = pio.read_pgm(tmp_path / "a.pgm")
    assert back.shape == (13, 21)
    assert np.max(np.abs(back - img)) <= 0.5 / 65535 + 1e-15


def test_pgm_header_and_byte_order(tmp_path):
    img = np.zeros((2, 3))
    img[0, 1] = 1.0
    img[1, 2] = 256 / 65535
    pio.write_pgm(tmp_path / "b.pgm", img)
    raw = (tmp_path / "b.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 2\n65535\n")
    body = raw[len(b"P5\n3 2\n65535\n"):]
    assert body[2:4] == b"\xff\xff" and body[10:12] == b"\x01\x00"


def test_pgm_rejects_non_p5(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(ValueError):
        pio.read_pgm(tmp_path / "c.pgm")


def test_manifest_paths_resolved(tmp_path):
    (tmp_path / "d").mkdir()
    pio.write_pgm(tmp_path / "d" / "n.pgm", np.zeros((4, 4)))
    (tmp_path / "d" / "m.json").write_text(json.dumps([{"noisy_path": "n.pgm", "level": "low"}]))
    rows = pio.read_dataset_manifest(tmp_path / "d" / "m.json")
    assert rows[0]["noisy_path"] == str(tmp_path / "d" / "n.pgm")


def test_manifest_errors(tmp_path):
    with pytest.raises(pio.ManifestError):
        pio.read_dataset_manifest(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(pio.ManifestError):
        pio.read_dataset_manifest(tmp_path / "bad.json")
    (tmp_path / "gone.json").write_text(json.dumps([{"noisy_path": "nope.pgm"}]))
    with pytest.raises(pio.ManifestError, match="nope.pgm"):
        pio.read_dataset_manifest(tmp_path / "gone.json")


def test_dump_json_is_deterministic(tmp_path):
    pio.dump_json(tmp_path / "x.json", {"b": 1, "a": [1, 2]})
    first = (tmp_path / "x.json").read_bytes()
    pio.dump_json(tmp_path / "x.json", {"a": [1, 2], "b": 1})
    assert (tmp_path / "x.json").read_bytes() == first
