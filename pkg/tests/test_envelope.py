"""Tests for the block envelope and the fit export built on it."""

import numpy as np
import pytest

from khdm.data import MAGIC, save_dataset, white_noise_dataset
from khdm.dmd import build_hankel, fit_global, load_fit, reconstruct, save_fit, window_columns
from khdm.envelope import read_blocks, write_blocks
from khdm.errors import DataFormatError


def test_envelope_roundtrip(tmp_path):
    path = tmp_path / "blocks.khdm"
    rng = np.random.default_rng(0)
    matrices = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((1, 1))}
    texts = {"meta": "hello=1\nworld=two\n"}
    write_blocks(path, matrices=matrices, texts=texts)
    got_m, got_t = read_blocks(path)
    for name, values in matrices.items():
        assert np.array_equal(got_m[name], values)
    assert got_t == texts
    assert path.read_bytes()[:4] == MAGIC


def test_envelope_rejects_datasets(tmp_path):
    ds = white_noise_dataset(state_dim=2, n_traj=1, n_columns=4, dt=0.1, seed=0)
    path = tmp_path / "d.khdm"
    save_dataset(path, ds)
    with pytest.raises(DataFormatError):
        read_blocks(path)  # version 1 file is not a block envelope


def test_envelope_truncation_detected(tmp_path):
    path = tmp_path / "t.khdm"
    write_blocks(path, matrices={"a": np.ones((4, 4))})
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(Exception):
        read_blocks(path)


def test_fit_export_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    batch = rng.standard_normal((2, 24))
    stack = build_hankel(batch, 2, 3)
    targets = window_columns(batch, 2, stack.n_w)
    fit = fit_global(stack, targets)
    path = tmp_path / "fit.khdm"
    save_fit(path, fit)
    loaded = load_fit(path)
    assert np.array_equal(loaded.k_a.values, fit.k_a.values)
    assert np.array_equal(loaded.k_m_bar.values, fit.k_m_bar.values)
    assert loaded.scope == "global"
    assert loaded.svd_rank == fit.svd_rank
    assert loaded.stack.n_ob_bar == 3
    # the reloaded fit reconstructs identically
    a = reconstruct(fit, fit.stack, 2).values
    b = reconstruct(loaded, loaded.stack, 2).values
    assert np.array_equal(a, b)
