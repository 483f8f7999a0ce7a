import logging

import numpy as np
import pytest

from xfdreid.config import RerankParams
from xfdreid.datamodel import Domain, Split
from xfdreid.evaluation import (
    AblationCell,
    Protocol,
    ProtocolResult,
    ablation_run,
    average_precision,
    build_protocol_sets,
    cmc,
    evaluate,
    overall_map,
    render_report_table,
    report_json,
    write_report,
)
from xfdreid.exceptions import AllEmptyError, EmptyProtocolError, NoRelevantError
from xfdreid.pooling import NeckParams, embed_dataset
from xfdreid.synthfix import FixtureConfig, generate


def _result(protocol, n, value):
    return ProtocolResult(protocol, n, value, 0.0, 0.0, 0.0)


def _brute_force_ap(ranked_ids, query_id):
    hits, total = 0, 0.0
    for i, pid in enumerate(ranked_ids):
        if pid == query_id:
            hits += 1
            total += hits / (i + 1)
    return total / hits


def _unit_embeddings(dataset, rng):
    x = rng.standard_normal((len(dataset.features), dataset.feature_dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestAveragePrecision:
    def test_two_relevant_example(self):
        assert average_precision([5, 7, 5], 5) == pytest.approx(5 / 6, rel=1e-12)

    @pytest.mark.parametrize("k", [1, 2, 7, 30])
    def test_single_hit(self, k):
        ranked = [1] * (k - 1) + [0] + [1] * 3
        assert average_precision(ranked, 0) == 1.0 / k

    def test_matches_brute_force(self, rng):
        for _ in range(1000):
            ranked = rng.integers(0, 4, size=int(rng.integers(1, 40)))
            if not np.any(ranked == 0):
                continue
            assert average_precision(ranked, 0) == pytest.approx(
                _brute_force_ap(ranked, 0), rel=1e-12)

    def test_trailing_non_relevant_does_not_change_ap(self):
        assert average_precision([0, 1, 0, 2], 0) == average_precision([0, 1, 0], 0)

    def test_junk_entries_are_removed_before_scoring(self):
        assert average_precision([0, 0, 1], 0, [False, True, True]) == 1.0

    def test_no_relevant(self):
        with pytest.raises(NoRelevantError):
            average_precision([1, 2], 0)


class TestCmc:
    def test_example(self):
        ranked = [[9, 1] + [9] * 8, [9] * 6 + [2] + [9] * 3]
        ranks = cmc(ranked, [1, 2])
        assert ranks == {1: 0.0, 5: 50.0, 10: 100.0}

    def test_monotone_in_k(self, rng):
        ranked = [rng.integers(0, 5, size=20) for _ in range(50)]
        query_ids = [int(r[rng.integers(0, 20)]) for r in ranked]
        ranks = cmc(ranked, query_ids, ks=(1, 2, 5, 10, 20))
        values = [ranks[k] for k in (1, 2, 5, 10, 20)]
        assert values == sorted(values)
        assert values[-1] == 100.0


class TestOverallMap:
    def test_equal_counts_is_plain_mean(self):
        results = [_result(Protocol.A2G, 1, 46.69), _result(Protocol.G2A, 1, 41.23),
                   _result(Protocol.A2A, 1, 22.98)]
        assert overall_map(results) == (46.69 + 41.23 + 22.98) / 3
        assert overall_map(results) == pytest.approx(36.9667, abs=1e-4)

    def test_query_weighted(self):
        results = [_result(Protocol.A2G, 2, 10.0), _result(Protocol.G2A, 1, 20.0),
                   _result(Protocol.A2A, 1, 30.0)]
        assert overall_map(results) == 17.5

    def test_equal_maps(self):
        results = [_result(Protocol.A2G, 3, 12.5), _result(Protocol.G2A, 7, 12.5)]
        assert overall_map(results) == 12.5

    def test_empty_protocols_are_skipped(self):
        results = [_result(Protocol.A2G, 0, 0.0), _result(Protocol.G2A, 4, 40.0)]
        assert overall_map(results) == 40.0

    def test_all_empty(self):
        with pytest.raises(AllEmptyError):
            overall_map([_result(Protocol.A2G, 0, 0.0)])


class TestProtocols:
    def test_set_sizes(self, make_record, make_dataset, rng):
        records = [make_record(0, 1, Split.QUERY, Domain.AERIAL),
                   make_record(1, 2, Split.QUERY, Domain.AERIAL),
                   make_record(2, 1, Split.GALLERY, Domain.GROUND),
                   make_record(3, 2, Split.GALLERY, Domain.GROUND),
                   make_record(4, 3, Split.GALLERY, Domain.GROUND)]
        dataset = make_dataset(records)
        queries, gallery = build_protocol_sets(dataset, _unit_embeddings(dataset, rng),
                                               Protocol.A2G)
        assert (len(queries), len(gallery)) == (2, 3)

    def test_protocol_queries_cover_query_split(self, small_fixture, rng):
        dataset = small_fixture.dataset
        embeddings = _unit_embeddings(dataset, rng)
        covered = set()
        for protocol in (Protocol.A2G, Protocol.G2A, Protocol.A2A):
            queries, _ = build_protocol_sets(dataset, embeddings, protocol)
            covered |= {r.tracklet_index for r in queries.records}
        assert covered == {r.tracklet_index for r in dataset.records_for(Split.QUERY)}

    def test_empty_protocol(self, make_record, make_dataset, rng):
        records = [make_record(0, 1, Split.QUERY, Domain.AERIAL),
                   make_record(1, 1, Split.GALLERY, Domain.GROUND)]
        dataset = make_dataset(records)
        with pytest.raises(EmptyProtocolError):
            build_protocol_sets(dataset, _unit_embeddings(dataset, rng), Protocol.G2A)

    def test_evaluate_reports_empty_protocol_as_zero(self, make_record, make_dataset, rng,
                                                     caplog):
        records = [make_record(0, 1, Split.QUERY, Domain.AERIAL),
                   make_record(1, 1, Split.GALLERY, Domain.GROUND),
                   make_record(2, 2, Split.GALLERY, Domain.GROUND)]
        dataset = make_dataset(records)
        with caplog.at_level(logging.WARNING):
            report = evaluate(dataset, _unit_embeddings(dataset, rng))
        assert report.result(Protocol.G2A).num_queries == 0
        assert report.result(Protocol.A2G).num_queries == 1
        assert "G2A" in caplog.text

    def test_same_camera_match_is_junk(self, make_record, make_dataset, rng, caplog):
        records = [make_record(0, 1, Split.QUERY, Domain.AERIAL, camera_id=4),
                   make_record(1, 1, Split.GALLERY, Domain.AERIAL, camera_id=4),
                   make_record(2, 2, Split.GALLERY, Domain.AERIAL, camera_id=5),
                   make_record(3, 1, Split.GALLERY, Domain.GROUND, camera_id=6)]
        dataset = make_dataset(records)
        with caplog.at_level(logging.WARNING):
            report = evaluate(dataset, _unit_embeddings(dataset, rng))
        a2a = report.result(Protocol.A2A)
        assert (a2a.num_queries, a2a.num_excluded) == (0, 1)
        assert report.result(Protocol.A2G).num_queries == 1

    def test_random_embeddings_match_brute_force(self, rng):
        dataset = generate(FixtureConfig(num_ids=12, seed=5)).dataset
        embeddings = _unit_embeddings(dataset, rng)
        report = evaluate(dataset, embeddings)
        for protocol in (Protocol.A2G, Protocol.G2A, Protocol.A2A):
            queries, gallery = build_protocol_sets(dataset, embeddings, protocol)
            dist = 1.0 - queries.matrix @ gallery.matrix.T
            aps = [_brute_force_ap(gallery.person_ids[np.argsort(row, kind="stable")], qid)
                   for row, qid in zip(dist, queries.person_ids)]
            assert report.result(protocol).map == pytest.approx(100.0 * np.mean(aps), abs=1e-9)


class TestEndToEnd:
    def _separable(self):
        return generate(FixtureConfig(num_ids=10, cluster_spread=0.0, tracklet_spread=0.0,
                                      domain_offset=0.0, seed=2)).dataset

    def test_separable_fixture_scores_perfectly(self):
        dataset = self._separable()
        embeddings = embed_dataset(dataset, "mean", None, NeckParams(enabled=False))
        report = evaluate(dataset, embeddings)
        assert report.overall_map == pytest.approx(100.0)
        for result in report.protocols:
            assert result.rank1 == 100.0

    def test_lambda_one_rerank_reproduces_raw_report(self, small_fixture):
        dataset = small_fixture.dataset
        embeddings = embed_dataset(dataset, "mean", None, NeckParams())
        raw = evaluate(dataset, embeddings)
        reranked = evaluate(dataset, embeddings, RerankParams(4, 2, 1.0))
        assert report_json(raw) == report_json(reranked)

    def test_report_is_byte_stable(self, tmp_path, small_fixture):
        dataset = small_fixture.dataset
        embeddings = embed_dataset(dataset, "mean", None, NeckParams())
        paths = [tmp_path / "a.json", tmp_path / "b.json"]
        for path in paths:
            write_report(path, evaluate(dataset, embeddings, config={"seed": 0}))
        assert paths[0].read_bytes() == paths[1].read_bytes()
        assert paths[0].read_text().endswith("}\n")

    def test_table_lists_every_protocol(self, small_fixture):
        dataset = small_fixture.dataset
        table = render_report_table(evaluate(dataset, embed_dataset(
            dataset, "mean", None, NeckParams())))
        for name in ("A2G", "G2A", "A2A", "Overall"):
            assert name in table

    def test_single_cell_ablation_has_zero_delta(self, small_fixture):
        dataset = small_fixture.dataset
        embeddings = embed_dataset(dataset, "mean", None, NeckParams())
        table = ablation_run(dataset, {"mean": embeddings}, [AblationCell("mean")])
        assert table.deltas == [0.0]
        assert "+0.00" in table.render()

    def test_ablation_reference_is_first_cell(self, small_fixture):
        dataset = small_fixture.dataset
        embeddings = embed_dataset(dataset, "mean", None, NeckParams())
        cells = [AblationCell("mean"), AblationCell("mean", RerankParams(4, 2, 0.3))]
        table = ablation_run(dataset, {"mean": embeddings}, cells)
        assert table.deltas[1] == pytest.approx(
            table.reports[1].overall_map - table.reports[0].overall_map)
        assert [c["name"] for c in table.to_dict()["cells"]] == [c.name for c in cells]
