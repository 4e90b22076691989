"""
テンソルファイル形式のテスト
"""

import json

import numpy as np
import pytest

from kv_shapley.core.errors import TensorFormatError
from kv_shapley.eviction.evictor import evict
from kv_shapley.eviction.tensor_io import (
    TENSOR_MAGIC,
    TENSOR_VERSION,
    read_retained_file,
    read_tensor_file,
    random_bundles,
    write_retained_file,
    write_tensor_file,
)


def header_bytes(**overrides) -> bytes:
    header = {"magic": TENSOR_MAGIC, "version": TENSOR_VERSION, "m": 6, "s": 2, "d_h": 3, "heads": 1}
    header.update(overrides)
    return json.dumps(header).encode("utf-8") + b"\n"


@pytest.fixture
def tensor_path(tmp_path):
    return write_tensor_file(tmp_path / "heads.bin", random_bundles(seed=1, heads=2, m=6, s=2, d_h=3))


class TestTensorFile:
    def test_round_trip(self, tensor_path):
        header, bundles = read_tensor_file(tensor_path)
        originals = random_bundles(seed=1, heads=2, m=6, s=2, d_h=3)
        assert (header.m, header.s, header.d_h, header.heads) == (6, 2, 3, 2)
        for got, want in zip(bundles, originals):
            for name in ("q_win", "k_out", "v_out", "k_win", "v_win"):
                assert np.array_equal(getattr(got, name), getattr(want, name))

    def test_truncated_payload_offset(self, tensor_path):
        data = tensor_path.read_bytes()
        tensor_path.write_bytes(data[:-4])
        header_len = data.index(b"\n") + 1
        head_bytes = (2 * 3 + 4 * 3 + 4 * 3 + 2 * 3 + 2 * 3) * 4
        with pytest.raises(TensorFormatError) as info:
            read_tensor_file(tensor_path)
        # 2ヘッド目の v_win が切れている
        assert info.value.offset == header_len + head_bytes + (2 * 3 + 4 * 3 + 4 * 3 + 2 * 3) * 4

    def test_trailing_bytes(self, tensor_path):
        data = tensor_path.read_bytes()
        tensor_path.write_bytes(data + b"\x00\x00")
        with pytest.raises(TensorFormatError, match="余分") as info:
            read_tensor_file(tensor_path)
        assert info.value.offset == len(data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(header_bytes(magic="nope"))
        with pytest.raises(TensorFormatError) as info:
            read_tensor_file(path)
        assert info.value.offset == 0

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(header_bytes(version=2))
        with pytest.raises(TensorFormatError, match="バージョン"):
            read_tensor_file(path)

    def test_window_not_smaller_than_length(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(header_bytes(m=4, s=4))
        with pytest.raises(TensorFormatError, match="m > s"):
            read_tensor_file(path)

    def test_missing_header_newline(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b'{"magic": "cokvtensor"')
        with pytest.raises(TensorFormatError):
            read_tensor_file(path)

    def test_non_finite_values(self, tmp_path):
        bundles = random_bundles(seed=2, heads=1, m=6, s=2, d_h=3)
        bundles[0].k_out[1, 2] = np.inf
        path = write_tensor_file(tmp_path / "x.bin", bundles)
        with pytest.raises(TensorFormatError, match="有限"):
            read_tensor_file(path)

    def test_mixed_shapes_refused(self, tmp_path):
        bundles = random_bundles(seed=2, heads=1, m=6, s=2, d_h=3) + random_bundles(seed=2, heads=1, m=7, s=2, d_h=3)
        with pytest.raises(TensorFormatError):
            write_tensor_file(tmp_path / "x.bin", bundles)


class TestRetainedFile:
    @pytest.fixture
    def evicted(self):
        bundles = random_bundles(seed=4, heads=3, m=12, s=3, d_h=4)
        return bundles, [evict(b, c) for b, c in zip(bundles, [3, 7, 10])]

    def test_rows_follow_each_head(self, tmp_path, evicted):
        bundles, results = evicted
        path = write_retained_file(tmp_path / "retained.bin", results, s=3)
        header, caches = read_retained_file(path)
        assert header.kind == "retained"
        assert (header.s, header.d_h, header.rows) == (3, 4, [3, 7, 10])
        for bundle, result, (k_hat, v_hat) in zip(bundles, results, caches):
            indices = result.retained_prefix_indices
            assert np.array_equal(k_hat, np.concatenate([bundle.k_out[indices], bundle.k_win]))
            assert np.array_equal(v_hat, np.concatenate([bundle.v_out[indices], bundle.v_win]))

    def test_truncated_retained_file(self, tmp_path, evicted):
        _, results = evicted
        path = write_retained_file(tmp_path / "retained.bin", results, s=3)
        data = path.read_bytes()
        path.write_bytes(data[:-1])
        with pytest.raises(TensorFormatError, match="切り詰め") as info:
            read_retained_file(path)
        header_len = data.index(b"\n") + 1
        assert info.value.offset == header_len + (3 + 7) * 2 * 4 * 4 + 10 * 4 * 4

    def test_input_tensor_file_is_not_a_retained_file(self, tensor_path):
        with pytest.raises(TensorFormatError):
            read_retained_file(tensor_path)
