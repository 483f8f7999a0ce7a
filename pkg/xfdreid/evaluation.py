"""
Evaluation Module
Per-protocol mAP / CMC, query-weighted overall mAP, reports and ablations
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import numpy as np

from .datamodel import Domain, Split
from .exceptions import AllEmptyError, EmptyProtocolError, NoRelevantError
from .retrieval import (
    EmbeddingSet,
    KReciprocalReranker,
    cosine_distance_matrix,
    rank_lists,
)


CMC_RANKS = (1, 5, 10)


class Protocol(str, Enum):
    """Query-domain -> gallery-domain pairing"""
    A2A = "A2A"
    A2G = "A2G"
    G2A = "G2A"

    @property
    def query_domain(self):
        return Domain.GROUND if self is Protocol.G2A else Domain.AERIAL

    @property
    def gallery_domain(self):
        return Domain.GROUND if self is Protocol.A2G else Domain.AERIAL


# report order
PROTOCOLS = (Protocol.A2G, Protocol.G2A, Protocol.A2A)


@dataclass
class ProtocolResult:
    """Metrics of one protocol; percentages in [0, 100]"""

    protocol: Protocol
    num_queries: int
    map: float
    rank1: float
    rank5: float
    rank10: float
    average_precisions: List[float] = field(default_factory=list)
    num_excluded: int = 0

    def to_dict(self):
        return {
            "name": self.protocol.value,
            "num_queries": self.num_queries,
            "num_excluded": self.num_excluded,
            "map": round(self.map, 2),
            "r1": round(self.rank1, 2),
            "r5": round(self.rank5, 2),
            "r10": round(self.rank10, 2),
        }


@dataclass
class EvalReport:
    protocols: List[ProtocolResult]
    overall_map: float
    config: Dict = field(default_factory=dict)

    def result(self, protocol):
        return next(r for r in self.protocols if r.protocol == protocol)

    def to_dict(self):
        return {
            "protocols": [r.to_dict() for r in self.protocols],
            "overall_map": round(self.overall_map, 2),
            "config": self.config,
        }


def build_protocol_sets(dataset, embeddings, protocol):
    """
    Query and gallery sets of one protocol

    Args:
        dataset: Dataset
        embeddings: (num_tracklets, C) unit-norm table indexed by tracklet_index
        protocol: Protocol

    Returns:
        tuple: (query EmbeddingSet, gallery EmbeddingSet)
    """
    query_records = dataset.records_for(Split.QUERY, protocol.query_domain)
    gallery_records = dataset.records_for(Split.GALLERY, protocol.gallery_domain)
    if not query_records or not gallery_records:
        raise EmptyProtocolError(
            f"{protocol.value}: {len(query_records)} queries, {len(gallery_records)} gallery")
    return (EmbeddingSet.from_embeddings(embeddings, query_records),
            EmbeddingSet.from_embeddings(embeddings, gallery_records))


def average_precision(ranked_ids, query_id, valid_mask=None):
    """
    AP of one ranked gallery list

    Args:
        ranked_ids: Gallery person ids in rank order
        query_id: Query person id
        valid_mask: Bool per ranked entry, False = junk (removed before scoring)

    Returns:
        float: AP in [0, 1]
    """
    ranked_ids = np.asarray(ranked_ids)
    if valid_mask is not None:
        ranked_ids = ranked_ids[np.asarray(valid_mask, dtype=bool)]
    hits = ranked_ids == query_id
    num_relevant = np.count_nonzero(hits)
    if num_relevant == 0:
        raise NoRelevantError(f"query id {query_id} has no valid match")
    positions = np.flatnonzero(hits) + 1
    precision_at_hits = np.arange(1, num_relevant + 1) / positions
    return float(precision_at_hits.sum() / num_relevant)


def first_match_position(ranked_ids, query_id, valid_mask=None):
    """1-based position of the first valid match"""
    ranked_ids = np.asarray(ranked_ids)
    if valid_mask is not None:
        ranked_ids = ranked_ids[np.asarray(valid_mask, dtype=bool)]
    hits = np.flatnonzero(ranked_ids == query_id)
    if hits.size == 0:
        raise NoRelevantError(f"query id {query_id} has no valid match")
    return int(hits[0]) + 1


def cmc(ranked_lists, query_ids, valid_masks=None, ks=CMC_RANKS):
    """
    CMC Rank-k percentages

    Args:
        ranked_lists: Per query, gallery person ids in rank order
        query_ids: Per query, its person id
        valid_masks: Per query, junk mask (None = all valid)
        ks: Ranks to report

    Returns:
        dict: k -> percentage of queries whose first valid match is at position <= k
    """
    positions = []
    for i, (ranked, qid) in enumerate(zip(ranked_lists, query_ids)):
        mask = None if valid_masks is None else valid_masks[i]
        try:
            positions.append(first_match_position(ranked, qid, mask))
        except NoRelevantError:
            continue
    if not positions:
        raise NoRelevantError("no query has a valid match")
    positions = np.asarray(positions)
    return {k: 100.0 * np.count_nonzero(positions <= k) / positions.size for k in ks}


def overall_map(results):
    """
    Query-count-weighted mean of protocol mAPs

    Args:
        results: ProtocolResult iterable

    Returns:
        float: Overall mAP (percent)
    """
    results = [r for r in results if r.num_queries > 0]
    if not results:
        raise AllEmptyError("no protocol has queries")
    total = sum(r.num_queries for r in results)
    weighted = sum(r.num_queries * r.map for r in results)
    value = weighted / total
    # keep within [min, max] despite rounding
    maps = [r.map for r in results]
    return min(max(value, min(maps)), max(maps))


def score_protocol(protocol, distances, queries, gallery):
    """
    Metrics of one protocol from its distance matrix

    Args:
        protocol: Protocol
        distances: DistanceMatrix (queries x gallery)
        queries: EmbeddingSet with records
        gallery: EmbeddingSet with records

    Returns:
        ProtocolResult
    """
    order = rank_lists(distances)
    q_pids, q_cams = queries.person_ids, queries.camera_ids
    g_pids, g_cams = gallery.person_ids, gallery.camera_ids

    aps = []
    positions = []
    excluded = 0
    for i in range(len(queries)):
        ranked_pids = g_pids[order[i]]
        # junk: same identity seen by the same camera
        valid = ~((ranked_pids == q_pids[i]) & (g_cams[order[i]] == q_cams[i]))
        try:
            aps.append(average_precision(ranked_pids, q_pids[i], valid))
            positions.append(first_match_position(ranked_pids, q_pids[i], valid))
        except NoRelevantError:
            excluded += 1

    if excluded:
        logging.warning(f"[EVAL] {protocol.value}: {excluded} queries without a valid match "
                        f"excluded")
    if not aps:
        return ProtocolResult(protocol, 0, 0.0, 0.0, 0.0, 0.0, [], excluded)

    positions = np.asarray(positions)
    ranks = {k: 100.0 * np.count_nonzero(positions <= k) / positions.size for k in CMC_RANKS}
    return ProtocolResult(
        protocol=protocol,
        num_queries=len(aps),
        map=100.0 * float(np.mean(aps)),
        rank1=ranks[1],
        rank5=ranks[5],
        rank10=ranks[10],
        average_precisions=aps,
        num_excluded=excluded,
    )


def evaluate(dataset, embeddings, rerank=None, threads=1, config=None):
    """
    Score all protocols and aggregate

    Args:
        dataset: Dataset
        embeddings: (num_tracklets, C) unit-norm table indexed by tracklet_index
        rerank: Optional RerankParams (None = raw cosine)
        threads: Re-ranking workers
        config: Fingerprint stored in the report (pooling mode, rerank params, seed, ...)

    Returns:
        EvalReport
    """
    results = []
    for protocol in PROTOCOLS:
        try:
            queries, gallery = build_protocol_sets(dataset, embeddings, protocol)
        except EmptyProtocolError as e:
            logging.warning(f"[EVAL] {e}")
            results.append(ProtocolResult(protocol, 0, 0.0, 0.0, 0.0, 0.0))
            continue

        if rerank is None:
            distances = cosine_distance_matrix(queries, gallery)
        else:
            distances = KReciprocalReranker(rerank, threads).rerank(queries, gallery)
        result = score_protocol(protocol, distances, queries, gallery)
        logging.info(f"[EVAL] {protocol.value}: N={result.num_queries} mAP={result.map:.2f} "
                     f"R1={result.rank1:.2f} R5={result.rank5:.2f} R10={result.rank10:.2f}")
        results.append(result)

    report = EvalReport(results, overall_map(results), dict(config or {}))
    logging.info(f"[EVAL] Overall mAP (query-weighted) = {report.overall_map:.2f}")
    return report


def render_report_table(report):
    """Aligned plain-text table of a report"""
    lines = [f"{'Protocol':<10}{'N':>7}{'R1':>9}{'R5':>9}{'R10':>9}{'mAP':>9}"]
    lines.append("-" * len(lines[0]))
    for r in report.protocols:
        lines.append(f"{r.protocol.value:<10}{r.num_queries:>7d}{r.rank1:>9.2f}{r.rank5:>9.2f}"
                     f"{r.rank10:>9.2f}{r.map:>9.2f}")
    lines.append("-" * len(lines[0]))
    total = sum(r.num_queries for r in report.protocols)
    lines.append(f"{'Overall':<10}{total:>7d}{'':>27}{report.overall_map:>9.2f}")
    return "\n".join(lines)


def report_json(report):
    """Byte-stable JSON text of a report"""
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def write_report(path, report):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(report_json(report))
    logging.info(f"[EVAL] Report written to {path}")


@dataclass(frozen=True)
class AblationCell:
    """One grid cell: pooling mode and optional re-ranking"""

    pooling_mode: str
    rerank: Optional[object] = None

    @property
    def name(self):
        if self.rerank is None:
            return f"{self.pooling_mode} / no rerank"
        p = self.rerank
        return f"{self.pooling_mode} / rerank({p.k1},{p.k2},{p.lambda_value:g})"


@dataclass
class AblationTable:
    cells: List[AblationCell]
    reports: List[EvalReport]

    @property
    def deltas(self):
        base = self.reports[0].overall_map
        return [r.overall_map - base for r in self.reports]

    def render(self):
        width = max(len(c.name) for c in self.cells) + 2
        lines = [f"{'Configuration':<{width}}{'mAP':>9}{'Delta':>9}"]
        lines.append("-" * len(lines[0]))
        for cell, report, delta in zip(self.cells, self.reports, self.deltas):
            lines.append(f"{cell.name:<{width}}{report.overall_map:>9.2f}{delta:>+9.2f}")
        return "\n".join(lines)

    def to_dict(self):
        return {
            "cells": [
                {"name": c.name, "pooling_mode": c.pooling_mode,
                 "rerank": None if c.rerank is None else asdict(c.rerank),
                 "overall_map": round(r.overall_map, 2), "delta": round(d, 2),
                 "report": r.to_dict()}
                for c, r, d in zip(self.cells, self.reports, self.deltas)
            ]
        }


def ablation_run(dataset, embeddings_by_mode, cells, threads=1, config=None):
    """
    Evaluate every grid cell

    Args:
        dataset: Dataset
        embeddings_by_mode: Dict pooling mode -> embedding table from that mode's head
        cells: AblationCell list; the first one is the delta reference
        threads: Re-ranking workers
        config: Base fingerprint added to every report

    Returns:
        AblationTable
    """
    reports = []
    for cell in cells:
        fingerprint = dict(config or {})
        fingerprint.update({"pooling_mode": cell.pooling_mode,
                            "rerank": None if cell.rerank is None else asdict(cell.rerank)})
        logging.info(f"[EVAL] Ablation cell: {cell.name}")
        reports.append(evaluate(dataset, embeddings_by_mode[cell.pooling_mode], cell.rerank,
                                threads, fingerprint))
    return AblationTable(list(cells), reports)
