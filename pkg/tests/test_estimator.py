import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pdm.errors import ContractViolation
from pdm.estimator import PDMEstimator
from pdm.synthdata import SyntheticSpec, generate

SPEC = SyntheticSpec(num_identities=4, samples_per_identity_per_modality=4, channels=8, height=3, width=2,
                     noise_std=0.05, seed=3)


def small(**kw):
    return PDMEstimator(**{"epochs": 6, "prototypes": 3, "ids_per_batch": 2, "samples_per_id": 2, **kw})


@pytest.fixture(scope="module")
def data():
    return generate(SPEC, "train"), generate(SPEC, "test")


def test_params_round_trip():
    est = small(ch_variant="as-written")
    params = est.get_params()
    assert params["ch_variant"] == "as-written" and params["epochs"] == 6
    twin = clone(est)
    assert twin.get_params() == params


def test_fit_transform_and_score(data):
    train, test = data
    # string identity labels are encoded internally
    names = np.array(["a", "b", "c", "d"])[train.labels]
    est = small().fit(train.maps, names, modalities=train.modalities)
    assert list(est.classes_) == ["a", "b", "c", "d"]
    F = est.transform(test.maps)
    assert F.shape == (len(test), (3 + 1) * 8)
    assert est.score(test.maps, test.labels, test.modalities) == 1.0
    assert est.score(test.maps, test.labels, test.modalities, direction="vis2ir") == 1.0
    assert len(est.history_) == 6


def test_global_only_descriptor(data):
    train, test = data
    est = small(use_plm=False, use_ch=False, use_mfgm=False).fit(train.maps, train.labels, train.modalities)
    assert est.transform(test.maps).shape == (len(test), 8)


def test_deterministic(data):
    train, test = data
    a = small(random_state=7).fit(train.maps, train.labels, train.modalities).transform(test.maps)
    b = small(random_state=7).fit(train.maps, train.labels, train.modalities).transform(test.maps)
    np.testing.assert_array_equal(a, b)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        small().transform(np.zeros((1, 8, 3, 2)))


@pytest.mark.parametrize("bad", [
    lambda t: (t.maps.reshape(len(t), -1), t.labels, t.modalities),  # flat features
    lambda t: (t.maps, t.labels, None),  # no modalities
    lambda t: (t.maps, t.labels, t.modalities + 2),  # bad modality codes
    lambda t: (t.maps, t.labels[:-1], t.modalities),  # length mismatch
])
def test_invalid_inputs(data, bad):
    X, y, m = bad(data[0])
    with pytest.raises((ContractViolation, ValueError)):
        small().fit(X, y, modalities=m)


def test_non_finite_maps(data):
    X = data[0].maps.copy()
    X[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        small().fit(X, data[0].labels, data[0].modalities)


def test_channel_mismatch_on_transform(data):
    train, _ = data
    est = small(epochs=1).fit(train.maps, train.labels, train.modalities)
    with pytest.raises(ContractViolation):
        est.transform(np.zeros((2, 4, 3, 2)))
