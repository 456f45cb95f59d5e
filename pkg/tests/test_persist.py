"""Tests of the feature, label, model and code files."""

import numpy as np
import pytest
import torch

from src.errors import FormatError
from src.index import (
    EncodedDatabase,
    encode_database,
    search_features,
)
from src.model import Model
from src.persist import (
    code_bytes_per_item,
    load_codes,
    load_model,
    read_features,
    read_labels,
    save_codes,
    save_model,
    write_features,
)
from src.quantizer import QuantCode


def record(dim, values):
    return np.array([dim], dtype='<i4').tobytes() + np.asarray(values, dtype='<f4').tobytes()


class TestFeatures:
    """Feature files."""

    def test_round_trip(self, tmp_path, rng):
        features = rng.normal(size=(25, 7)).astype(np.float32)
        path = str(tmp_path / 'features.fvecs')
        write_features(path, features)
        assert (tmp_path / 'features.fvecs').stat().st_size == 25 * 4 * 8

        loaded = read_features(path)
        assert loaded.dtype == np.float32
        np.testing.assert_array_equal(loaded, features)

    def test_empty(self, tmp_path):
        path = tmp_path / 'empty.fvecs'
        path.write_bytes(b'')
        assert read_features(str(path)).shape == (0, 0)

    def test_dimension_mismatch(self, tmp_path):
        path = tmp_path / 'bad.fvecs'
        path.write_bytes(record(3, [1, 2, 3]) + record(2, [1, 2]) + b'\x00' * 4)
        with pytest.raises(FormatError, match='record 1 at byte 16'):
            read_features(str(path))

    def test_truncated(self, tmp_path):
        path = tmp_path / 'truncated.fvecs'
        path.write_bytes(record(3, [1, 2, 3]) + record(3, [1, 2, 3])[:-2])
        with pytest.raises(FormatError, match='truncated record 1'):
            read_features(str(path))

    def test_invalid_dimension(self, tmp_path):
        path = tmp_path / 'zero.fvecs'
        path.write_bytes(record(0, []))
        with pytest.raises(FormatError):
            read_features(str(path))


class TestLabels:
    """Label files."""

    def test_read(self, tmp_path):
        path = tmp_path / 'labels.txt'
        path.write_text('3\n1,4,7\n\n 2 , 5\n')
        assert read_labels(str(path)) == [{3}, {1, 4, 7}, set(), {2, 5}]

    def test_invalid_token(self, tmp_path):
        path = tmp_path / 'labels.txt'
        path.write_text('3\n1,x\n')
        with pytest.raises(FormatError, match='line 2'):
            read_labels(str(path))

    def test_negative_label(self, tmp_path):
        path = tmp_path / 'labels.txt'
        path.write_text('-1\n')
        with pytest.raises(FormatError):
            read_labels(str(path))

    @pytest.mark.parametrize('token', ['\u00b2', '\u0663', '1\u00b9'])
    def test_non_ascii_digits(self, tmp_path, token):
        path = tmp_path / 'labels.txt'
        path.write_text(f'3,{token}\n', encoding='utf-8')
        with pytest.raises(FormatError):
            read_labels(str(path))


class TestModelFile:
    """Model persistence."""

    @pytest.fixture
    def model(self, tiny_config):
        model = Model.create(8, tiny_config)
        with torch.no_grad():
            model.codebook.log_curvatures.copy_(torch.tensor([0.37, -1.2], dtype=torch.float64))
            model.codebook.project_()
        return model

    def test_round_trip(self, model, tmp_path, rng):
        path = str(tmp_path / 'model.bin')
        save_model(path, model)
        loaded = load_model(path)

        assert loaded.config == model.config
        assert torch.equal(loaded.curvatures, model.curvatures)
        for name in ('projector.weight', 'projector.bias', 'codebook.codewords'):
            assert torch.equal(loaded.get_parameter(name), model.get_parameter(name)), name
        assert loaded.codebook.content_hash() == model.codebook.content_hash()

        features = rng.normal(size=(50, 8))
        db = encode_database(model, features)
        before = search_features(model, db, features[:5], 10)
        after = search_features(loaded, db, features[:5], 10)
        assert before == after

    def test_no_temporary_file_left(self, model, tmp_path):
        save_model(str(tmp_path / 'model.bin'), model)
        assert [p.name for p in tmp_path.iterdir()] == ['model.bin']

    def test_corrupted_byte(self, model, tmp_path):
        path = tmp_path / 'model.bin'
        save_model(str(path), model)
        content = bytearray(path.read_bytes())
        content[40] ^= 0x01
        path.write_bytes(bytes(content))
        with pytest.raises(FormatError, match='CRC'):
            load_model(str(path))

    def test_wrong_magic(self, model, tmp_path):
        path = tmp_path / 'model.bin'
        save_model(str(path), model)
        path.write_bytes(b'XXXX' + path.read_bytes()[4:])
        with pytest.raises(FormatError, match='magic'):
            load_model(str(path))

    def test_truncated(self, tmp_path):
        path = tmp_path / 'model.bin'
        path.write_bytes(b'HIPQ')
        with pytest.raises(FormatError):
            load_model(str(path))


class TestCodeFile:
    """Database code persistence."""

    def test_size(self, tmp_path, rng):
        db = EncodedDatabase(QuantCode(rng.integers(256, size=(1000, 4)), 256), np.arange(1000), bytes(32))
        path = tmp_path / 'codes.bin'
        save_codes(str(path), db)
        assert path.stat().st_size == 4050

    @pytest.mark.parametrize('m, k, expected', [(4, 256, 4), (3, 16, 2), (5, 8, 2), (1, 2, 1), (8, 1024, 10)])
    def test_bytes_per_item(self, m, k, expected):
        assert code_bytes_per_item(m, k) == expected

    @pytest.mark.parametrize('m, k', [(4, 256), (3, 16), (5, 8)])
    def test_round_trip(self, tmp_path, rng, m, k):
        indices = rng.integers(k, size=(37, m))
        db = EncodedDatabase(QuantCode(indices, k), np.arange(37), bytes(range(32)))
        path = str(tmp_path / 'codes.bin')
        save_codes(path, db)

        loaded = load_codes(path)
        np.testing.assert_array_equal(loaded.codes.indices, indices)
        assert loaded.codes.K == k
        assert loaded.codebook_hash == bytes(range(32))
        assert loaded.ids.tolist() == list(range(37))

    def test_empty(self, tmp_path):
        db = EncodedDatabase(QuantCode(np.zeros((0, 4), dtype=np.int64), 256), np.zeros(0, dtype=np.int64), bytes(32))
        path = str(tmp_path / 'codes.bin')
        save_codes(path, db)
        assert load_codes(path).size == 0

    def test_wrong_size(self, tmp_path, rng):
        db = EncodedDatabase(QuantCode(rng.integers(16, size=(10, 4)), 16), np.arange(10), bytes(32))
        path = tmp_path / 'codes.bin'
        save_codes(str(path), db)
        path.write_bytes(path.read_bytes() + b'\x00')
        with pytest.raises(FormatError, match='expected'):
            load_codes(str(path))

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / 'codes.bin'
        path.write_bytes(b'HIPQ' + bytes(46))
        with pytest.raises(FormatError, match='magic'):
            load_codes(str(path))
