import json

import numpy as np
import pytest

from dla_lab.data import (
    BadMagicError,
    CheckpointFormatError,
    CheckpointMismatchError,
    CheckpointTruncatedError,
    DatasetFormatError,
    DatasetRecord,
    PhiloxStream,
    TruncatedRecordError,
    VersionMismatchError,
    augment,
    gen_synthetic,
    load_checkpoint,
    load_dataset,
    read_checkpoint,
    render_lines,
    save_checkpoint,
    save_dataset,
)
from dla_lab.dla import DeformableLineAttention, DlaConfig
from dla_lab.geometry import ConfigError


@pytest.fixture(scope="module")
def hundred():
    return gen_synthetic(100, (32, 32), 3, seed=11)


class TestGenerator:
    def test_same_seed_identical(self):
        a, b = gen_synthetic(6, (20, 24), 3, seed=5), gen_synthetic(6, (20, 24), 3, seed=5)
        for x, y in zip(a, b):
            assert x.id == y.id
            assert x.image.tobytes() == y.image.tobytes() and x.lines.tobytes() == y.lines.tobytes()

    def test_different_seed_differs(self):
        a, b = gen_synthetic(2, (16, 16), 3, seed=1), gen_synthetic(2, (16, 16), 3, seed=2)
        assert not np.array_equal(a[0].image, b[0].image)

    def test_records_keyed_by_index(self):
        full = gen_synthetic(5, (16, 16), 3, seed=3)
        tail = gen_synthetic(2, (16, 16), 3, seed=3, start=3)
        assert [r.id for r in tail] == [r.id for r in full[3:]]
        assert all(np.array_equal(a.image, b.image) for a, b in zip(tail, full[3:]))

    def test_worker_pool_matches_serial(self):
        serial = gen_synthetic(20, (16, 16), 3, seed=9)
        pooled = gen_synthetic(20, (16, 16), 3, seed=9, jobs=2)
        assert all(np.array_equal(a.image, b.image) and np.array_equal(a.lines, b.lines) for a, b in zip(serial, pooled))

    def test_contract(self, hundred):
        ids = set()
        for rec in hundred:
            assert 1 <= len(rec.lines) <= 3
            assert np.all((rec.lines >= 0) & (rec.lines <= 1))
            assert np.all(np.hypot(rec.lines[:, 0] - rec.lines[:, 2], rec.lines[:, 1] - rec.lines[:, 3]) >= 0.2)
            assert rec.image.shape == (1, 32, 32)
            assert rec.image.min() >= 0 and rec.image.max() <= 1
            ids.add(rec.id)
        assert len(ids) == 100

    def test_midpoint_brighter_than_background(self, hundred):
        for rec in hundred:
            img = rec.image[0]
            for x1, y1, x2, y2 in rec.lines:
                col = min(int((x1 + x2) / 2 * 32), 31)
                row = min(int((y1 + y2) / 2 * 32), 31)
                assert img[row, col] > img.mean()

    def test_line_counts_cover_range(self, hundred):
        assert {len(r.lines) for r in hundred} == {1, 2, 3}

    @pytest.mark.parametrize("size,max_lines", [((8, 32), 3), ((32, 15), 3), ((32, 32), 0)])
    def test_bad_config(self, size, max_lines):
        with pytest.raises(ConfigError):
            gen_synthetic(1, size, max_lines, 0)

    def test_philox_stream(self):
        s = PhiloxStream(0, 0)
        u = s.uniform(1000)
        assert np.all((u >= 0) & (u < 1))
        assert np.array_equal(PhiloxStream(0, 0).raw(4), PhiloxStream(0, 0).raw(4))
        assert not np.array_equal(PhiloxStream(0, 1).raw(4), PhiloxStream(0, 0).raw(4))

    def test_render_single_pixel_line(self):
        img = render_lines(np.array([[0.5, 0.5, 0.5, 0.5]]), [1.0], 4, 4, np.zeros((4, 4)))
        # the point sits on a pixel corner: every neighbor is sqrt(0.5) away
        np.testing.assert_allclose(img[1:3, 1:3], 1 - np.sqrt(0.5))
        assert img[0, 0] == 0.0


class TestAugment:
    def test_flip_keeps_annotations_on_pixels(self):
        rec = DatasetRecord(np.zeros((1, 8, 8)), np.array([[0.0625, 0.1875, 0.4375, 0.9375]]), "r")
        rec.image[0, 1, 0] = 1.0  # pixel center (0.0625, 0.1875)
        rng = np.random.default_rng(0)
        for _ in range(8):
            out = augment(rec, rng)
            x, y = out.lines[0, :2]
            bright = np.unravel_index(np.argmax(out.image[0]), (8, 8))
            assert (bright[1] + 0.5) / 8 == pytest.approx(x) and (bright[0] + 0.5) / 8 == pytest.approx(y)

    def test_values_stay_in_range(self):
        rng = np.random.default_rng(1)
        for rec in gen_synthetic(10, (16, 16), 3, seed=0):
            out = augment(rec, rng)
            assert out.image.min() >= 0 and out.image.max() <= 1


class TestDatasetFiles:
    def test_round_trip(self, tmp_path):
        recs = gen_synthetic(8, (32, 32), 3, seed=7)
        save_dataset(tmp_path / "ds", recs)
        back = load_dataset(tmp_path / "ds")
        for a, b in zip(recs, back):
            assert a.id == b.id
            np.testing.assert_array_equal(b.image, a.image.astype(np.float32).astype(np.float64))
            np.testing.assert_array_equal(b.lines, a.lines)

    def test_empty(self, tmp_path):
        save_dataset(tmp_path / "empty", [])
        assert load_dataset(tmp_path / "empty") == []
        assert json.loads((tmp_path / "empty" / "index.json").read_text())["records"] == []

    def test_image_header(self, tmp_path):
        recs = gen_synthetic(1, (16, 20), 1, seed=0)
        save_dataset(tmp_path, recs)
        raw = (tmp_path / f"{recs[0].id}.lnimg").read_bytes()
        assert raw[:6] == b"LNIMG1"
        assert np.frombuffer(raw[6:18], dtype="<u4").tolist() == [1, 16, 20]
        assert len(raw) == 18 + 16 * 20 * 4

    def test_corrupt_magic_names_record(self, tmp_path):
        recs = gen_synthetic(2, (16, 16), 1, seed=0)
        save_dataset(tmp_path, recs)
        path = tmp_path / f"{recs[1].id}.lnimg"
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError, match=recs[1].id):
            load_dataset(tmp_path)

    def test_truncated_payload(self, tmp_path):
        recs = gen_synthetic(1, (16, 16), 1, seed=0)
        save_dataset(tmp_path, recs)
        path = tmp_path / f"{recs[0].id}.lnimg"
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(TruncatedRecordError):
            load_dataset(tmp_path)

    def test_version_mismatch(self, tmp_path):
        save_dataset(tmp_path, [])
        index = json.loads((tmp_path / "index.json").read_text())
        index["version"] = 99
        (tmp_path / "index.json").write_text(json.dumps(index))
        with pytest.raises(VersionMismatchError):
            load_dataset(tmp_path)

    def test_missing_index(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            load_dataset(tmp_path)

    def test_error_classes_are_distinct(self):
        assert len({BadMagicError, TruncatedRecordError, VersionMismatchError}) == 3
        assert not issubclass(BadMagicError, TruncatedRecordError)


class TestCheckpoints:
    def layer(self, seed=0, d=8):
        return DeformableLineAttention(DlaConfig(2, (2, 1), d), [3, 4], np.random.default_rng(seed))

    def test_round_trip_is_bitwise_at_32_bits(self, tmp_path):
        src = self.layer(0)
        save_checkpoint(tmp_path / "a.ckpt", src.named_parameters(), "tiny")
        dst = self.layer(1)
        load_checkpoint(tmp_path / "a.ckpt", dst)
        for (_, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
            assert a.value.astype(np.float32).tobytes() == b.value.astype(np.float32).tobytes()

    def test_save_load_save_identical(self, tmp_path):
        src = self.layer(0)
        save_checkpoint(tmp_path / "a.ckpt", src.named_parameters(), "tiny", {"k": 1})
        dst = self.layer(1)
        load_checkpoint(tmp_path / "a.ckpt", dst)
        save_checkpoint(tmp_path / "b.ckpt", dst.named_parameters(), "tiny", {"k": 1})
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_offsets_cover_blob(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", self.layer().named_parameters(), "tiny")
        m = read_checkpoint(tmp_path / "a.ckpt").manifest
        pos = 0
        for e in m["params"]:
            assert e["offset"] == pos
            assert e["nbytes"] == 4 * int(np.prod(e["shape"]))
            pos += e["nbytes"]
        assert pos == m["blob_bytes"]

    def test_wrong_preset_names_parameter(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", self.layer(d=8).named_parameters(), "tiny")
        with pytest.raises(CheckpointMismatchError, match="alpha_head.weight"):
            load_checkpoint(tmp_path / "a.ckpt", self.layer(d=4))

    def test_truncated(self, tmp_path):
        path = save_checkpoint(tmp_path / "a.ckpt", self.layer().named_parameters(), "tiny")
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointTruncatedError):
            read_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 16)
        with pytest.raises(CheckpointFormatError):
            read_checkpoint(tmp_path / "x.ckpt")
