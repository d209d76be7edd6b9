"""Ranking metrics and pruning diagnostics.

Single-positive next-item protocol: one held-out item per instance, so the
ideal DCG is 1 and NDCG@K is 1/log2(rank+1) when the positive lands in the
top K. PruningRate@K is the share of positives that rank in the exhaustive
top K by overall probability yet are missing from the beam's final
candidates; the violation proportion splits those pruned cases by cause.
"""

import csv
import json
import math
from dataclasses import dataclass, field

from .decode import PruningCause
from .errors import ValidationError


@dataclass(frozen=True)
class EvalResult:
    user_id: int
    positive_item: int
    exhaustive_rank: int                 # 1-based rank over the whole catalog
    beam_rank: int | None                # 1-based rank among beam finals, None if pruned
    cause: PruningCause
    pruned_step: int | None
    model_digest: str

    def to_json(self) -> dict:
        return {"user_id": self.user_id, "positive_item": self.positive_item,
                "exhaustive_rank": self.exhaustive_rank, "beam_rank": self.beam_rank,
                "cause": self.cause.value, "pruned_step": self.pruned_step,
                "model_digest": self.model_digest}


def _check_ranked(ranked) -> list:
    ranked = list(ranked)
    if len(set(ranked)) != len(ranked):
        raise ValidationError("ranked list contains duplicate items")
    return ranked


def ndcg_at_k(ranked, positive, k: int) -> float:
    """1/log2(rank+1) if the positive ranks within the top k, else 0."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    ranked = _check_ranked(ranked)
    for rank, item in enumerate(ranked[:k], start=1):
        if item == positive:
            return 1.0 / math.log2(rank + 1)
    return 0.0


def hit_ratio_at_k(ranked, positive, k: int) -> int:
    if k < 1:
        raise ValidationError("k must be >= 1")
    return 1 if positive in _check_ranked(ranked)[:k] else 0


def _check_same_digest(results) -> None:
    digests = {r.model_digest for r in results}
    if len(digests) > 1:
        raise ValidationError(
            f"results mix {len(digests)} model snapshots; metrics need one"
        )


def pruning_rate_at_k(results, k: int) -> tuple[float | None, int]:
    """(rate, qualifying count): among positives with exhaustive rank <= k,
    the fraction absent from the beam finals. None with count 0 when no
    positive qualifies."""
    _check_same_digest(results)
    qualifying = [r for r in results if r.exhaustive_rank <= k]
    if not qualifying:
        return None, 0
    pruned = sum(1 for r in qualifying if r.beam_rank is None)
    return pruned / len(qualifying), len(qualifying)


def violation_proportion(results, k: int) -> tuple[float | None, int]:
    """(proportion, pruned count): among pruned qualifying positives, the
    share whose cause is a necessary-condition violation."""
    _check_same_digest(results)
    pruned = [r for r in results
              if r.exhaustive_rank <= k and r.beam_rank is None]
    if not pruned:
        return None, 0
    violations = sum(1 for r in pruned if r.cause is PruningCause.NECESSARY_VIOLATION)
    return violations / len(pruned), len(pruned)


@dataclass
class ExperimentReport:
    method: str
    seed: int
    model_digest: str
    config_digest: str
    k_list: list[int]
    n_instances: int
    ndcg: dict[int, float]
    hit_ratio: dict[int, float]
    pruning_rate: dict[int, float | None]
    pruning_rate_count: dict[int, int]
    violation_prop: dict[int, float | None]
    violation_count: dict[int, int]
    per_user: list[EvalResult] = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_json(self, include_per_user: bool = True) -> dict:
        payload = {
            "method": self.method,
            "seed": self.seed,
            "model_digest": self.model_digest,
            "config_digest": self.config_digest,
            "k_list": self.k_list,
            "n_instances": self.n_instances,
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "hit_ratio": {str(k): v for k, v in self.hit_ratio.items()},
            "pruning_rate": {str(k): v for k, v in self.pruning_rate.items()},
            "pruning_rate_count": {str(k): v for k, v in self.pruning_rate_count.items()},
            "violation_prop": {str(k): v for k, v in self.violation_prop.items()},
            "violation_count": {str(k): v for k, v in self.violation_count.items()},
            "timing": self.timing,
            "extras": self.extras,
        }
        if include_per_user:
            payload["per_user"] = [r.to_json() for r in self.per_user]
        return payload

    def dump_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def csv_rows(self) -> list[dict]:
        rows = []
        for k in self.k_list:
            rows.append({
                "method": self.method,
                "seed": self.seed,
                "K": k,
                "ndcg": repr(self.ndcg[k]),
                "hr": repr(self.hit_ratio[k]),
                "pr": "" if self.pruning_rate[k] is None else repr(self.pruning_rate[k]),
                "prop": "" if self.violation_prop[k] is None else repr(self.violation_prop[k]),
                "epoch_time_s": self.timing.get("epoch_train_seconds_mean", ""),
            })
        return rows


REPORT_CSV_FIELDS = ["method", "seed", "K", "ndcg", "hr", "pr", "prop", "epoch_time_s"]


def dump_report_csv(path: str, reports) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_CSV_FIELDS)
        writer.writeheader()
        for report in reports:
            for row in report.csv_rows():
                writer.writerow(row)


def aggregate_report(results, k_list, method: str = "", seed: int = 0,
                     config_digest: str = "") -> ExperimentReport:
    """Means of the per-instance metrics plus the pooled pruning diagnostics."""
    results = list(results)
    if not results:
        raise ValidationError("cannot aggregate an empty result set")
    _check_same_digest(results)
    k_list = sorted(set(int(k) for k in k_list))
    n = len(results)

    ndcg = {}
    hr = {}
    pr = {}
    pr_count = {}
    prop = {}
    prop_count = {}
    oracle_ndcg = {}
    for k in k_list:
        ndcg_sum = 0.0
        hr_sum = 0
        oracle_sum = 0.0
        for r in results:
            if r.beam_rank is not None and r.beam_rank <= k:
                ndcg_sum += 1.0 / math.log2(r.beam_rank + 1)
                hr_sum += 1
            if r.exhaustive_rank <= k:
                oracle_sum += 1.0 / math.log2(r.exhaustive_rank + 1)
        ndcg[k] = ndcg_sum / n
        hr[k] = hr_sum / n
        oracle_ndcg[k] = oracle_sum / n
        pr[k], pr_count[k] = pruning_rate_at_k(results, k)
        prop[k], prop_count[k] = violation_proportion(results, k)

    report = ExperimentReport(
        method=method, seed=seed, model_digest=results[0].model_digest,
        config_digest=config_digest, k_list=k_list, n_instances=n,
        ndcg=ndcg, hit_ratio=hr,
        pruning_rate=pr, pruning_rate_count=pr_count,
        violation_prop=prop, violation_count=prop_count,
        per_user=results,
    )
    # the exhaustive oracle's NDCG bounds what fixing the pruning can recover
    report.extras["oracle_ndcg"] = {str(k): v for k, v in oracle_ndcg.items()}
    return report
