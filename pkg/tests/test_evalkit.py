import json
import math

import numpy as np
import pytest

from pdm.errors import ContractViolation
from pdm.evalkit import (
    REPORT_FIELDS,
    RetrievalProtocol,
    cmc_map,
    distance_gap,
    parse_report,
    report_dict,
    write_cmc_csv,
    write_report,
)

from tests.oracles import brute_force

VIS, IR = 0, 1


def test_perfect_retrieval():
    g = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    rep = cmc_map(RetrievalProtocol(g + 0.1, [0, 1, 2], g, [0, 1, 2]))
    assert rep.cmc == [1.0, 1.0, 1.0] and rep.map == 1.0


def test_single_relevant_at_position_two():
    rep = cmc_map(RetrievalProtocol([[0.0]], [7], [[1.0], [2.0], [3.0]], [3, 7, 5]))
    assert rep.cmc[:2] == [0.0, 1.0]
    assert rep.ap == [0.5] and rep.map == 0.5


def test_ties_broken_by_gallery_index():
    # both gallery items equidistant; the lower index ranks first
    rep = cmc_map(RetrievalProtocol([[0.0]], [1], [[1.0], [-1.0]], [0, 1]))
    assert rep.cmc == [0.0, 1.0]
    rep = cmc_map(RetrievalProtocol([[0.0]], [1], [[1.0], [-1.0]], [1, 0]))
    assert rep.cmc == [1.0, 1.0]


def test_brute_force_oracle_200_trials():
    rng = np.random.default_rng(2024)
    for trial in range(200):
        G = int(rng.integers(1, 9))
        Q = int(rng.integers(1, 7))
        ids = int(rng.integers(1, 4))
        glab = rng.integers(0, ids, G)
        qlab = rng.choice(glab, Q)
        dim = int(rng.integers(1, 4))
        # small integer coordinates so exact distance ties occur
        if trial % 2:
            gallery, query = rng.integers(-2, 3, (G, dim)).astype(float), rng.integers(-2, 3, (Q, dim)).astype(float)
        else:
            gallery, query = rng.normal(size=(G, dim)), rng.normal(size=(Q, dim))
        rep = cmc_map(RetrievalProtocol(query, qlab, gallery, glab))
        cmc, mAP, aps = brute_force(query, qlab, gallery, glab)
        assert rep.cmc == cmc, trial
        assert rep.ap == aps, trial
        assert rep.map == mAP, trial


def test_six_by_eight_instance():
    rng = np.random.default_rng(6)
    glab = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    qlab = np.array([0, 1, 2, 2, 1, 0])
    query, gallery = rng.normal(size=(6, 3)), rng.normal(size=(8, 3))
    rep = cmc_map(RetrievalProtocol(query, qlab, gallery, glab))
    cmc, mAP, _ = brute_force(query, qlab, gallery, glab)
    assert rep.cmc == cmc and rep.map == mAP


def test_cmc_monotone_and_complete():
    rng = np.random.default_rng(7)
    rep = cmc_map(RetrievalProtocol(rng.normal(size=(20, 4)), rng.integers(0, 5, 20),
                                    rng.normal(size=(30, 4)), np.arange(30) % 5))
    assert all(a <= b for a, b in zip(rep.cmc, rep.cmc[1:]))
    assert rep.cmc[-1] == 1.0
    assert all(0.0 <= v <= 1.0 for v in rep.cmc + rep.ap)


def test_map_invariant_under_rigid_motion():
    rng = np.random.default_rng(8)
    q, g = rng.normal(size=(10, 3)), rng.normal(size=(12, 3))
    ql, gl = rng.integers(0, 4, 10), np.arange(12) % 4
    R, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    t = rng.normal(size=3) * 5
    a = cmc_map(RetrievalProtocol(q, ql, g, gl))
    b = cmc_map(RetrievalProtocol(q @ R.T + t, ql, g @ R.T + t, gl))
    assert a.map == pytest.approx(b.map, abs=1e-12)
    assert a.cmc == b.cmc


def test_query_without_match():
    with pytest.raises(ContractViolation):
        cmc_map(RetrievalProtocol([[0.0]], [9], [[1.0]], [1]))


def test_parallel_matches_serial(monkeypatch):
    rng = np.random.default_rng(9)
    proto = RetrievalProtocol(rng.normal(size=(25, 4)), np.arange(25) % 5, rng.normal(size=(40, 4)), np.arange(40) % 5)
    monkeypatch.setenv("PDM_THREADS", "1")
    serial = cmc_map(proto)
    monkeypatch.setenv("PDM_THREADS", "4")
    assert cmc_map(proto) == serial


def test_from_split_directions():
    feats = np.arange(8, dtype=float).reshape(4, 2)
    labels, mods = np.array([0, 1, 0, 1]), np.array([VIS, VIS, IR, IR])
    p = RetrievalProtocol.from_split(feats, labels, mods, "ir2vis")
    np.testing.assert_array_equal(p.query, feats[2:])
    p = RetrievalProtocol.from_split(feats, labels, mods, "vis2ir")
    np.testing.assert_array_equal(p.query, feats[:2])
    with pytest.raises(ContractViolation):
        RetrievalProtocol.from_split(feats, labels, mods, "rgb2ir")
    with pytest.raises(ContractViolation):
        RetrievalProtocol.from_split(feats, labels, np.zeros(4, int), "ir2vis")


class TestDistanceGap:
    def test_zero_spread(self):
        feats = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 4.0], [3.0, 4.0]])
        stats = distance_gap(feats, [0, 0, 1, 1], [VIS, IR, VIS, IR])
        assert stats.intra_mean == 0.0 and stats.inter_mean == 5.0 and stats.delta == 5.0

    def test_identical_features(self):
        stats = distance_gap(np.ones((6, 3)), [0, 0, 1, 1, 2, 2], [VIS, IR] * 3)
        assert (stats.intra_mean, stats.inter_mean, stats.delta) == (0.0, 0.0, 0.0)

    def test_all_pairs_oracle(self):
        rng = np.random.default_rng(10)
        labels = np.repeat([0, 1, 2], 4)
        mods = np.tile([VIS, IR], 6)
        feats = rng.normal(size=(12, 5))
        intra, inter = [], []
        for i in range(12):
            for j in range(12):
                if mods[i] == VIS and mods[j] == IR:
                    d = math.sqrt(sum((feats[i, k] - feats[j, k]) ** 2 for k in range(5)))
                    (intra if labels[i] == labels[j] else inter).append(d)
        stats = distance_gap(feats, labels, mods)
        assert stats.intra_mean == pytest.approx(sum(intra) / len(intra), abs=1e-12)
        assert stats.inter_mean == pytest.approx(sum(inter) / len(inter), abs=1e-12)
        assert sum(stats.intra_hist) == len(intra) and sum(stats.inter_hist) == len(inter)

    def test_missing_modality(self):
        with pytest.raises(ContractViolation):
            distance_gap(np.zeros((4, 2)), [0, 0, 1, 1], [VIS] * 4)

    def test_single_identity(self):
        with pytest.raises(ContractViolation):
            distance_gap(np.zeros((2, 2)), [0, 0], [VIS, IR])


def test_report_json_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    feats = rng.normal(size=(16, 3))
    labels, mods = np.repeat(np.arange(4), 4), np.tile([VIS, IR], 8)
    rep = cmc_map(RetrievalProtocol.from_split(feats, labels, mods))
    stats = distance_gap(feats, labels, mods)
    write_report(tmp_path / "r.json", rep, stats)
    doc = json.loads((tmp_path / "r.json").read_text())
    assert tuple(sorted(doc)) == tuple(sorted(REPORT_FIELDS))
    back_rep, back_stats = parse_report(doc)
    assert back_rep == rep and back_stats == stats
    assert report_dict(back_rep, back_stats) == doc
    with pytest.raises(ContractViolation):
        parse_report({**doc, "extra": 1})


def test_cmc_csv(tmp_path):
    rep = cmc_map(RetrievalProtocol([[0.0]], [7], [[1.0], [2.0], [3.0]], [3, 7, 5]))
    write_cmc_csv(tmp_path / "c.csv", rep)
    assert (tmp_path / "c.csv").read_text().splitlines() == ["rank,cmc", "1,0.0", "2,1.0", "3,1.0"]
