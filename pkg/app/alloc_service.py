"""Three-phase test-budget allocation: cluster equivalent faults, explore, then extend where clusters disagree."""

import logging
from collections.abc import Callable, Iterable
from typing import Optional

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import pdist

from app.models import (
    BudgetLedger,
    BudgetTransfer,
    CorpusStats,
    ExperimentRecord,
    FaultCluster,
    FaultPoint,
    InterferenceReport,
    ScheduledExperiment,
)

logger = logging.getLogger(__name__)

PHASE_ONE, PHASE_TWO, PHASE_THREE = 1, 2, 3
RANDOM_PHASE = 0

Executor = Callable[[list[ScheduledExperiment]], list[ExperimentRecord]]


# Interference vectors


def corpus_stats(reports: Iterable[InterferenceReport]) -> CorpusStats:
    """N counts experiments (one per delay value for delay faults); N_f counts those that triggered f."""
    stats = CorpusStats()
    for report in reports:
        stats.n += 1
        for fault in set(report.faults()):
            stats.counts[fault] = stats.counts.get(fault, 0) + 1
    return stats


def record_stats(records: Iterable[ExperimentRecord]) -> CorpusStats:
    return corpus_stats(sub for record in records for sub in (record.sub_reports or [record.report]))


def idf(fault: str, stats: CorpusStats) -> float:
    return float(np.log((1 + stats.n) / (1 + stats.counts.get(fault, 0))))


def vectorize(report: InterferenceReport, stats: CorpusStats, fault_ids: list[str]) -> np.ndarray:
    """IDF-weighted indicator vector over the fault corpus, L2-normalised (or all zero)."""
    triggered = set(report.faults())
    vector = np.array([idf(fault, stats) if fault in triggered else 0.0 for fault in fault_ids], dtype=float)
    norm = np.linalg.norm(vector)
    return vector / norm if norm > 0 else vector


def cosine_distance(a: np.ndarray | list[float], b: np.ndarray | list[float]) -> float:
    """1 - cosine similarity; a zero vector is at distance 1 from everything."""
    left = np.asarray(a, dtype=float)
    right = np.asarray(b, dtype=float)
    norms = np.linalg.norm(left) * np.linalg.norm(right)
    if norms == 0:
        return 1.0
    return float(np.clip(1.0 - np.dot(left, right) / norms, 0.0, 1.0))


def revectorize(records: list[ExperimentRecord], fault_ids: list[str]) -> CorpusStats:
    """Retrain the IDF on all records and refresh every record's vector."""
    stats = record_stats(records)
    for record in records:
        record.vector = vectorize(record.report, stats, fault_ids).tolist()
    return stats


# Clusters


def cluster_phase1(vectors: dict[str, np.ndarray | list[float]], tau: float = 0.5) -> list[FaultCluster]:
    """Average-linkage clustering on cosine distance cut at `tau`; empty interference forms one inert cluster."""
    zero = [fault for fault, vector in vectors.items() if not np.any(np.asarray(vector))]
    active = [fault for fault in vectors if fault not in zero]
    groups: list[list[str]] = []
    if len(active) == 1:
        groups = [active]
    elif active:
        matrix = np.vstack([np.asarray(vectors[fault], dtype=float) for fault in active])
        # non-negative weights: only rounding leaves [0, 1]
        distances = np.clip(pdist(matrix, metric="cosine"), 0.0, 1.0)
        tree = linkage(distances, method="average")
        labels = fcluster(tree, t=tau, criterion="distance")
        by_label: dict[int, list[str]] = {}
        for fault, label in zip(active, labels):
            by_label.setdefault(int(label), []).append(fault)
        groups = sorted(by_label.values(), key=lambda members: active.index(members[0]))
    clusters = [FaultCluster(id=f"G{index}", members=members) for index, members in enumerate(groups)]
    if zero:
        clusters.append(FaultCluster(id=f"G{len(clusters)}", members=zero, inert=True))
    logger.info(f"Phase one clustering: {len(clusters)} clusters over {len(vectors)} faults")
    return clusters


def sim_score(cluster: FaultCluster, records: list[ExperimentRecord]) -> float:
    """1 - mean cosine distance over record pairs of different member faults; 1 without such pairs."""
    members = set(cluster.members)
    own = [record for record in records if record.fault in members]
    distances = [
        cosine_distance(a.vector, b.vector)
        for index, a in enumerate(own)
        for b in own[index + 1 :]
        if a.fault != b.fault
    ]
    if not distances:
        return 1.0
    return float(1.0 - np.mean(distances))


def weight(score: float, epsilon: float = 0.01) -> float:
    return max(epsilon, 1.0 - score)


def score_clusters(
    clusters: list[FaultCluster], records: list[ExperimentRecord], fault_ids: list[str], epsilon: float = 0.01
) -> list[FaultCluster]:
    """Retrain the IDF, then refresh every cluster's sim-score and weight."""
    revectorize(records, fault_ids)
    for cluster in clusters:
        cluster.sim_score = sim_score(cluster, records)
        cluster.weight = epsilon if cluster.inert else weight(cluster.sim_score, epsilon)
    return clusters


# Budget


def new_ledger(fault_count: int, multiplier: int = 4) -> BudgetLedger:
    total = multiplier * fault_count
    quarter = total // 4
    return BudgetLedger(total=total, quotas={PHASE_ONE: quarter, PHASE_TWO: total - 2 * quarter, PHASE_THREE: quarter})


def carry_over(ledger: BudgetLedger, phase: int) -> int:
    """Move what a phase left unspent into the next phase."""
    leftover = ledger.remaining(phase)
    if leftover <= 0 or phase + 1 not in ledger.quotas:
        return 0
    ledger.quotas[phase] -= leftover
    ledger.quotas[phase + 1] += leftover
    ledger.transfers.append(
        BudgetTransfer(phase=phase, source=f"phase-{phase}", target=f"phase-{phase + 1}", amount=leftover, reason="carry")
    )
    logger.info(f"Carrying {leftover} unspent experiments from phase {phase} to phase {phase + 1}")
    return leftover


def _spend(ledger: BudgetLedger, phase: int, cluster: Optional[str]) -> None:
    ledger.spent[phase] = ledger.spent.get(phase, 0) + 1
    if cluster is not None:
        ledger.spent_by_cluster[cluster] = ledger.spent_by_cluster.get(cluster, 0) + 1


def used_pairs(records: Iterable[ExperimentRecord | ScheduledExperiment]) -> set[tuple[str, str]]:
    return {(record.fault, record.test) for record in records}


# Schedules


def schedule_phase1(
    faults: list[FaultPoint],
    reachability: dict[str, list[str]],
    coverage: dict[str, list[str]],
    ledger: BudgetLedger,
) -> list[ScheduledExperiment]:
    """Each fault once, in the reaching test with the widest profile coverage."""
    schedule: list[ScheduledExperiment] = []
    for fault in faults:
        tests = reachability.get(fault.id, [])
        if not tests:
            if fault.id not in ledger.unreachable:
                ledger.unreachable.append(fault.id)
            logger.warning(f"Fault {fault.id} is reached by no test")
            continue
        if ledger.remaining(PHASE_ONE) <= 0:
            continue
        best = min(tests, key=lambda test: (-len(coverage.get(test, [])), test))
        schedule.append(ScheduledExperiment(fault=fault.id, test=best, phase=PHASE_ONE))
        _spend(ledger, PHASE_ONE, None)
    return schedule


def _pick(
    cluster: FaultCluster,
    reachability: dict[str, list[str]],
    used: set[tuple[str, str]],
    rng: np.random.Generator,
) -> Optional[tuple[str, str]]:
    candidates = [
        member for member in cluster.members if any((member, test) not in used for test in reachability.get(member, []))
    ]
    if not candidates:
        return None
    fault = candidates[int(rng.integers(len(candidates)))]
    tests = [test for test in reachability[fault] if (fault, test) not in used]
    return fault, tests[int(rng.integers(len(tests)))]


def _fill_shares(
    phase: int,
    clusters: list[FaultCluster],
    shares: dict[str, int],
    reachability: dict[str, list[str]],
    used: set[tuple[str, str]],
    ledger: BudgetLedger,
    rng: np.random.Generator,
    receivers: Callable[[FaultCluster, list[FaultCluster]], list[FaultCluster]],
) -> list[ScheduledExperiment]:
    """Round-robin over clusters; an exhausted cluster hands its remaining share to an open one."""
    schedule: list[ScheduledExperiment] = []
    exhausted: set[str] = set()
    while any(shares[cluster.id] > 0 for cluster in clusters):
        for cluster in clusters:
            if shares[cluster.id] <= 0:
                continue
            picked = _pick(cluster, reachability, used, rng) if cluster.id not in exhausted else None
            if picked is not None:
                fault, test = picked
                used.add(picked)
                schedule.append(ScheduledExperiment(fault=fault, test=test, phase=phase, cluster=cluster.id))
                shares[cluster.id] -= 1
                _spend(ledger, phase, cluster.id)
                continue
            exhausted.add(cluster.id)
            amount = shares[cluster.id]
            shares[cluster.id] = 0
            open_clusters = [other for other in clusters if other.id not in exhausted]
            targets = receivers(cluster, open_clusters) or open_clusters
            if not targets:
                logger.info(f"Phase {phase}: no open cluster left, {amount} experiments stay unspent")
                continue
            target = targets[int(rng.integers(len(targets)))]
            shares[target.id] += amount
            ledger.transfers.append(
                BudgetTransfer(phase=phase, source=cluster.id, target=target.id, amount=amount, reason="exhausted")
            )
            logger.info(f"Phase {phase}: cluster {cluster.id} exhausted, {amount} experiments moved to {target.id}")
    return schedule


def _round_robin_order(clusters: list[FaultCluster]) -> list[FaultCluster]:
    return [cluster for cluster in clusters if cluster.members and not cluster.inert] + [
        cluster for cluster in clusters if cluster.members and cluster.inert
    ]


def schedule_phase2(
    clusters: list[FaultCluster],
    reachability: dict[str, list[str]],
    used: set[tuple[str, str]],
    ledger: BudgetLedger,
    rng: np.random.Generator,
) -> list[ScheduledExperiment]:
    """Equal shares per cluster (inert cluster last), a random member in a workload it has not met yet."""
    ordered = _round_robin_order(clusters)
    quota = ledger.remaining(PHASE_TWO)
    if not ordered or quota <= 0:
        return []
    base, extra = divmod(quota, len(ordered))
    shares = {cluster.id: base + (1 if index < extra else 0) for index, cluster in enumerate(ordered)}

    def larger(source: FaultCluster, candidates: list[FaultCluster]) -> list[FaultCluster]:
        return [cluster for cluster in candidates if len(cluster.members) > len(source.members)]

    return _fill_shares(PHASE_TWO, ordered, shares, reachability, used, ledger, rng, larger)


def weighted_shares(clusters: list[FaultCluster], quota: int, rng: np.random.Generator) -> dict[str, int]:
    """Split `quota` by drawing each experiment's cluster with probability proportional to its weight."""
    weights = np.array([cluster.weight for cluster in clusters], dtype=float)
    draws = rng.choice(len(clusters), size=quota, p=weights / weights.sum())
    counts = np.bincount(draws, minlength=len(clusters))
    return {cluster.id: int(count) for cluster, count in zip(clusters, counts)}


def schedule_phase3(
    clusters: list[FaultCluster],
    reachability: dict[str, list[str]],
    used: set[tuple[str, str]],
    ledger: BudgetLedger,
    rng: np.random.Generator,
) -> list[ScheduledExperiment]:
    """Shares drawn in proportion to cluster weight; leftovers go to clusters of smaller weight."""
    ordered = _round_robin_order(clusters)
    quota = ledger.remaining(PHASE_THREE)
    if not ordered or quota <= 0:
        return []
    shares = weighted_shares(ordered, quota, rng)

    def lighter(source: FaultCluster, candidates: list[FaultCluster]) -> list[FaultCluster]:
        return [cluster for cluster in candidates if cluster.weight < source.weight]

    return _fill_shares(PHASE_THREE, ordered, shares, reachability, used, ledger, rng, lighter)


def schedule_random(
    faults: list[FaultPoint],
    reachability: dict[str, list[str]],
    used: set[tuple[str, str]],
    ledger: BudgetLedger,
    rng: np.random.Generator,
) -> list[ScheduledExperiment]:
    """The whole budget on uniformly drawn, unused (fault, test) pairs."""
    pairs = [
        (fault.id, test) for fault in faults for test in reachability.get(fault.id, []) if (fault.id, test) not in used
    ]
    budget = min(ledger.total - ledger.spent_total, len(pairs))
    chosen = rng.choice(len(pairs), size=budget, replace=False) if budget > 0 else []
    schedule = []
    for index in chosen:
        fault, test = pairs[int(index)]
        used.add((fault, test))
        schedule.append(ScheduledExperiment(fault=fault, test=test, phase=RANDOM_PHASE))
        _spend(ledger, RANDOM_PHASE, None)
    return schedule


def phase_rng(seed: int, phase: int) -> np.random.Generator:
    return np.random.default_rng([seed, phase])


# Phase drivers


def new_random_ledger(fault_count: int, multiplier: int = 4) -> BudgetLedger:
    total = multiplier * fault_count
    return BudgetLedger(total=total, quotas={RANDOM_PHASE: total})


def assign_clusters(records: list[ExperimentRecord], clusters: list[FaultCluster]) -> None:
    cluster_of = {member: cluster.id for cluster in clusters for member in cluster.members}
    for record in records:
        record.cluster = cluster_of.get(record.fault)


def finish_phase1(
    faults: list[FaultPoint], records: list[ExperimentRecord], ledger: BudgetLedger, tau: float = 0.5
) -> list[FaultCluster]:
    """Cluster the faults by their phase-one interference and carry the unused quota forward."""
    fault_ids = [fault.id for fault in faults]
    revectorize(records, fault_ids)
    by_fault = {record.fault: record.vector for record in records}
    vectors = {fault: by_fault.get(fault, [0.0] * len(fault_ids)) for fault in fault_ids}
    clusters = cluster_phase1(vectors, tau)
    assign_clusters(records, clusters)
    carry_over(ledger, PHASE_ONE)
    return clusters


def finish_phase2(
    faults: list[FaultPoint],
    clusters: list[FaultCluster],
    records: list[ExperimentRecord],
    ledger: BudgetLedger,
    epsilon: float = 0.01,
) -> list[FaultCluster]:
    """Retrain the IDF on phases one and two, score the clusters, carry the unused quota forward."""
    score_clusters(clusters, records, [fault.id for fault in faults], epsilon)
    carry_over(ledger, PHASE_TWO)
    return clusters


def finish_phase3(
    faults: list[FaultPoint],
    clusters: list[FaultCluster],
    records: list[ExperimentRecord],
    epsilon: float = 0.01,
    retrain: bool = True,
) -> list[FaultCluster]:
    if retrain:
        score_clusters(clusters, records, [fault.id for fault in faults], epsilon)
    return clusters


def run_phase1(
    faults: list[FaultPoint],
    reachability: dict[str, list[str]],
    coverage: dict[str, list[str]],
    ledger: BudgetLedger,
    execute: Executor,
    tau: float = 0.5,
) -> tuple[list[ExperimentRecord], list[FaultCluster]]:
    """Equivalence detection: one experiment per fault, then cluster the faults by interference."""
    records = execute(schedule_phase1(faults, reachability, coverage, ledger))
    return records, finish_phase1(faults, records, ledger, tau)


def run_phase2(
    faults: list[FaultPoint],
    clusters: list[FaultCluster],
    reachability: dict[str, list[str]],
    records: list[ExperimentRecord],
    ledger: BudgetLedger,
    execute: Executor,
    rng: np.random.Generator,
    epsilon: float = 0.01,
) -> tuple[list[ExperimentRecord], list[FaultCluster]]:
    """Causality exploration: spread the largest phase over all clusters, then score them."""
    new_records = execute(schedule_phase2(clusters, reachability, used_pairs(records), ledger, rng))
    assign_clusters(new_records, clusters)
    return new_records, finish_phase2(faults, clusters, records + new_records, ledger, epsilon)


def run_phase3(
    faults: list[FaultPoint],
    clusters: list[FaultCluster],
    reachability: dict[str, list[str]],
    records: list[ExperimentRecord],
    ledger: BudgetLedger,
    execute: Executor,
    rng: np.random.Generator,
    epsilon: float = 0.01,
    retrain: bool = True,
) -> tuple[list[ExperimentRecord], list[FaultCluster]]:
    """Conditional-causality extension: weighted shares favouring clusters with diverse consequences."""
    new_records = execute(schedule_phase3(clusters, reachability, used_pairs(records), ledger, rng))
    assign_clusters(new_records, clusters)
    return new_records, finish_phase3(faults, clusters, records + new_records, epsilon, retrain)


def run_random(
    faults: list[FaultPoint],
    reachability: dict[str, list[str]],
    ledger: BudgetLedger,
    execute: Executor,
    rng: np.random.Generator,
) -> list[ExperimentRecord]:
    """Random allocation: the whole budget on uniformly drawn pairs, vectors trained once at the end."""
    records = execute(schedule_random(faults, reachability, set(), ledger, rng))
    revectorize(records, [fault.id for fault in faults])
    return records
