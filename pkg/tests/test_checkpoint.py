import json
import zipfile

import numpy as np
import pytest

from conceptroute.checkpoint import CheckpointError, checkpoint_version, load_checkpoint, save_checkpoint
from conceptroute.dataset import IntegrityError, write_npz
from conceptroute.routers import KnnRouter, RandomRouter, choose
from conceptroute.training import blackbox_config, factorization_config, train_blackbox_head, train_factorization


@pytest.fixture(scope="module")
def routers(small, small_bottleneck):
    bb, _ = train_blackbox_head(small.train, small.val, small.catalog, blackbox_config(max_epochs=2))
    fm, _ = train_factorization(small.train, small.val, small.catalog, factorization_config(max_epochs=2), 16)
    knn = KnnRouter(small.train.embeddings, small.train.correctness, 5, small.catalog)
    return [small_bottleneck, bb, fm, knn, RandomRouter(small.catalog, 7)]


def test_roundtrip_is_bit_exact(routers, small, tmp_path):
    x = small.test.embeddings
    for r in routers:
        path = tmp_path / f"{r.kind}.npz"
        version = save_checkpoint(r, path)
        back = load_checkpoint(path)
        assert back.kind == r.kind and back.version == version
        assert checkpoint_version(back) == version
        if r.kind != "random":
            assert np.array_equal(back.scores(x), r.scores(x))
        assert np.array_equal(choose(back, x), choose(r, x))


def test_bottleneck_keeps_schema_and_metadata(small_bottleneck, tmp_path):
    save_checkpoint(small_bottleneck, tmp_path / "c.npz")
    back = load_checkpoint(tmp_path / "c.npz")
    assert back.schema == small_bottleneck.schema
    assert back.catalog == small_bottleneck.catalog
    assert back.metadata == small_bottleneck.metadata


def test_same_router_same_bytes(small_bottleneck, tmp_path):
    save_checkpoint(small_bottleneck, tmp_path / "a.npz")
    save_checkpoint(small_bottleneck, tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    with np.load(tmp_path / "a.npz") as z:
        assert "concept_head/w1" in z.files


def _members(path):
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    return arrays, meta


def test_tampered_weights_are_rejected(small_bottleneck, tmp_path):
    path = tmp_path / "c.npz"
    save_checkpoint(small_bottleneck, path)
    arrays, meta = _members(path)
    arrays["suitability_head/b2"] = arrays["suitability_head/b2"] + np.float32(1e-3)
    write_npz(path, arrays, {"meta.json": json.dumps(meta).encode()})
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_unreadable_and_foreign_files(small_bottleneck, tmp_path):
    junk = tmp_path / "junk.npz"
    junk.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(junk)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.npz")

    path = tmp_path / "c.npz"
    save_checkpoint(small_bottleneck, path)
    arrays, meta = _members(path)
    meta["format"] = 99
    write_npz(path, arrays, {"meta.json": json.dumps(meta).encode()})
    with pytest.raises(CheckpointError, match="format"):
        load_checkpoint(path)
