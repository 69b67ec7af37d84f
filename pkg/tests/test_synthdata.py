import collections

import numpy as np
import pytest

from pdm.errors import ContractViolation
from pdm.synthdata import (
    IR,
    MAGIC,
    VIS,
    SyntheticSpec,
    generate,
    load_dataset,
    pk_epoch,
    pk_sample,
    read_header,
    save_dataset,
)


@pytest.fixture(scope="module")
def default_train():
    return generate(SyntheticSpec(), "train")


def test_noise_free_pair_differs_by_offset():
    spec = SyntheticSpec(num_identities=3, samples_per_identity_per_modality=1, noise_std=0.0, seed=5)
    ds = generate(spec)
    diffs = []
    for ident in range(3):
        vis = ds.maps[(ds.labels == ident) & (ds.modalities == VIS)][0]
        ir = ds.maps[(ds.labels == ident) & (ds.modalities == IR)][0]
        diffs.append(ir.astype(np.float64) - vis)
    # the same IR-minus-VIS offset for every identity (up to float32 storage)
    for d in diffs[1:]:
        np.testing.assert_allclose(d, diffs[0], atol=1e-5)
    assert np.abs(diffs[0]).max() > 0.1


def test_same_seed_bit_identical():
    a, b = generate(SyntheticSpec(seed=11)), generate(SyntheticSpec(seed=11))
    assert a.maps.tobytes() == b.maps.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)


def test_different_seed_differs():
    assert generate(SyntheticSpec(seed=1)).maps.tobytes() != generate(SyntheticSpec(seed=2)).maps.tobytes()


def test_splits_share_structure_not_noise():
    spec = SyntheticSpec(seed=3)
    tr, te = generate(spec, "train"), generate(spec, "test")
    np.testing.assert_array_equal(tr.labels, te.labels)
    np.testing.assert_array_equal(tr.modalities, te.modalities)
    assert not np.allclose(tr.maps, te.maps)
    # identity/modality means agree up to noise averaged over 32 samples
    for ident in range(spec.num_identities):
        sel = tr.labels == ident
        assert np.abs(tr.maps[sel].mean(0) - te.maps[sel].mean(0)).max() < 0.5


def test_layout_and_sizes(default_train):
    ds = default_train
    assert ds.maps.shape == (512, 16, 9, 5)
    assert ds.maps.dtype == np.float32
    counts = collections.Counter(zip(ds.labels.tolist(), ds.modalities.tolist()))
    assert set(counts.values()) == {32} and len(counts) == 16


def test_nearest_centroid_within_modality(default_train):
    ds = default_train
    flat = ds.maps.reshape(len(ds), -1).astype(np.float64)
    for mod in (VIS, IR):
        sel = ds.modalities == mod
        X, y = flat[sel], ds.labels[sel]
        centroids = np.stack([X[y == k].mean(0) for k in range(8)])
        pred = np.argmin(((X[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
        assert np.mean(pred == y) == 1.0


@pytest.mark.parametrize("bad", [
    dict(num_identities=0),
    dict(samples_per_identity_per_modality=0),
    dict(identity_separation=0.5, noise_std=0.5),
    dict(channels=0),
])
def test_invalid_specs(bad):
    with pytest.raises(ContractViolation):
        generate(SyntheticSpec(**bad))


def test_unknown_split():
    with pytest.raises(ContractViolation):
        generate(SyntheticSpec(), "val")


def test_spec_dict_names_generator():
    assert SyntheticSpec().to_dict()["generator"] == "PCG64/SeedSequence"


class TestFileFormat:
    def test_round_trip(self, tmp_path):
        spec = SyntheticSpec(num_identities=3, samples_per_identity_per_modality=2, channels=4, height=3, width=2,
                             noise_std=0.25, seed=2**40 + 7)
        ds = generate(spec, "test")
        path = tmp_path / "d.pdmd"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back.spec == spec and back.split == "test"
        np.testing.assert_array_equal(back.maps, ds.maps)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.modalities, ds.modalities)

    def test_header(self, tmp_path):
        path = tmp_path / "d.pdmd"
        save_dataset(generate(SyntheticSpec(num_identities=5, samples_per_identity_per_modality=3)), path)
        assert path.read_bytes()[:4] == MAGIC
        head = read_header(path)
        assert head["num_samples"] == 5 * 3 * 2
        assert (head["channels"], head["height"], head["width"]) == (16, 9, 5)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.pdmd"
        save_dataset(generate(SyntheticSpec(num_identities=2, samples_per_identity_per_modality=1)), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(ContractViolation):
            load_dataset(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "d.pdmd"
        save_dataset(generate(SyntheticSpec(num_identities=2, samples_per_identity_per_modality=1)), path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ContractViolation):
            load_dataset(path)


class TestPKSampler:
    def test_batch_size(self):
        ds = generate(SyntheticSpec(num_identities=3, samples_per_identity_per_modality=4))
        for batch in pk_sample(ds, P=2, K=2, seed=0):
            assert len(batch) == 8

    def test_both_modalities_per_identity(self, default_train):
        ds = default_train
        for batch in pk_sample(ds, P=4, K=4, seed=1):
            ids = np.unique(ds.labels[batch])
            assert len(ids) == 4
            for ident in ids:
                for mod in (VIS, IR):
                    assert np.sum((ds.labels[batch] == ident) & (ds.modalities[batch] == mod)) == 4

    def test_each_sample_at_most_once_per_epoch(self, default_train):
        ds = default_train
        for epoch in range(3):
            batches = pk_epoch(ds.labels, ds.modalities, 4, 4, seed=9, epoch=epoch)
            counts = collections.Counter(np.concatenate(batches).tolist())
            assert max(counts.values()) == 1
            # default spec divides evenly, so the whole split is used
            assert len(counts) == len(ds)

    def test_deterministic_and_epoch_dependent(self, default_train):
        ds = default_train
        a = pk_epoch(ds.labels, ds.modalities, 4, 4, seed=3, epoch=0)
        b = pk_epoch(ds.labels, ds.modalities, 4, 4, seed=3, epoch=0)
        c = pk_epoch(ds.labels, ds.modalities, 4, 4, seed=3, epoch=1)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not all(np.array_equal(x, y) for x, y in zip(a, c))

    def test_insufficient_samples(self):
        ds = generate(SyntheticSpec(num_identities=3, samples_per_identity_per_modality=2))
        with pytest.raises(ContractViolation):
            list(pk_sample(ds, P=2, K=3, seed=0))
        with pytest.raises(ContractViolation):
            list(pk_sample(ds, P=4, K=1, seed=0))
