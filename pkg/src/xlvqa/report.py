"""Comparison tables and directional trend checks over merged eval reports.

Method labels combine the axes a run varies over: ``strategy+head`` with an
optional ``+Q`` suffix for question-type conditioning, e.g. ``sb+deep+Q``.
Table layouts mirror the shapes of the usual summary artifacts: per-language
strategy comparison (table1), per-question-type protocol battery (table2),
shots-vs-method few-shot grid (table3), and per-question-type method bars
(fig2). All cells are mean +/- std over seeds; "Avg" columns exclude the
source language. Trend checks are report-level: they emit pass/flag, never
failures.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data.vocab import QTYPES
from .diagnostics import EvalReport

LAYOUTS = ("table1", "table2", "table3", "fig2")

_PROTOCOL_ORDER = ("V-V", "T-T", "TG-TG", "MM", "MM-V", "MM-T")


class MissingCoverageError(ValueError):
    """The merged report does not cover the axes a layout needs."""


class InsufficientSeedsError(ValueError):
    pass


def method_label(strategy: str, head: str, with_qtype: bool) -> str:
    label = f"{strategy}+{head}"
    return label + "+Q" if with_qtype else label


def split_method_label(label: str) -> tuple[str, str, bool]:
    parts = label.split("+")
    with_q = parts[-1] == "Q"
    if with_q:
        parts = parts[:-1]
    if len(parts) != 2:
        raise ValueError(f"not a method label: {label!r}")
    return parts[0], parts[1], with_q


def _mean_std(values: list[float]) -> str:
    if not values:
        return "-"
    if len(values) == 1:
        return f"{values[0]:.4f}"
    return f"{np.mean(values):.4f}±{np.std(values):.4f}"


def _methods(report: EvalReport, protocol: str) -> list[str]:
    return sorted({k.strategy for k in report.cells if k.protocol == protocol})


def _fewshot_protocols(report: EvalReport) -> list[str]:
    ks = sorted(
        {int(k.protocol[2:]) for k in report.cells if k.protocol.startswith("FS")}
    )
    return [f"FS{k}" for k in ks]


def emit_comparison(report: EvalReport, layout: str) -> str:
    """Render one layout as TSV text; raises on unknown layout or missing axes."""
    if layout == "table1":
        return _table1(report)
    if layout == "table2":
        return _table2(report)
    if layout == "table3":
        return _table3(report)
    if layout == "fig2":
        return _fig2(report)
    raise ValueError(f"unknown layout {layout!r}; options: {LAYOUTS}")


def _require_seeds(report: EvalReport, protocol: str, method: str) -> list[int]:
    seeds = report.seeds(protocol, method)
    if not seeds:
        raise MissingCoverageError(f"no seeds for protocol={protocol!r} method={method!r}")
    return seeds


def _table1(report: EvalReport) -> str:
    methods = _methods(report, "MM")
    if not methods:
        raise MissingCoverageError("table1 needs MM-protocol results")
    src = report.source_language
    langs = report.languages("MM", methods[0])
    targets = [l for l in langs if l != src]
    header = ["method", src] + targets + ["Avg"]
    lines = ["\t".join(header)]
    for method in methods:
        seeds = _require_seeds(report, "MM", method)
        row = [method]
        for lang in [src] + targets:
            row.append(_mean_std([report.language_accuracy("MM", method, lang, s) for s in seeds]))
        row.append(_mean_std([report.target_mean("MM", method, s) for s in seeds]))
        lines.append("\t".join(row))
    chance = report.chance.get("overall")
    if chance is not None:
        lines.append(
            "\t".join(["chance(majority)"] + [f"{chance:.4f}"] * (len(targets) + 1) + [f"{chance:.4f}"])
        )
    return "\n".join(lines) + "\n"


def _columns_for_table2(report: EvalReport) -> list[tuple[str, str]]:
    cols = []
    for protocol in _PROTOCOL_ORDER:
        for method in _methods(report, protocol):
            cols.append((protocol, method))
    return cols


def _table2(report: EvalReport) -> str:
    cols = _columns_for_table2(report)
    protocols = {p for p, _ in cols}
    if "MM" not in protocols or len(protocols) < 2:
        raise MissingCoverageError("table2 needs MM plus at least one diagnostic protocol")
    lines = ["\t".join(["qtype"] + [f"{p}[{m}]" for p, m in cols] + ["chance"])]
    for qtype in QTYPES:
        row = [qtype]
        for protocol, method in cols:
            seeds = _require_seeds(report, protocol, method)
            targets = report.target_languages(protocol, method)
            row.append(_mean_std([report.qtype_accuracy(protocol, method, qtype, s, targets) for s in seeds]))
        chance = report.chance.get(qtype)
        row.append("-" if chance is None else f"{chance:.4f}")
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def _table3(report: EvalReport) -> str:
    fs = _fewshot_protocols(report)
    if not fs:
        raise MissingCoverageError("table3 needs few-shot results")
    methods = sorted({k.strategy for k in report.cells if k.protocol in fs})
    header = ["method", "0"] + [p[2:] for p in fs]
    lines = ["\t".join(header)]
    for method in methods:
        row = [method]
        seeds = report.seeds("MM", method)
        row.append(_mean_std([report.target_mean("MM", method, s) for s in seeds]) if seeds else "-")
        for protocol in fs:
            seeds = _require_seeds(report, protocol, method)
            row.append(_mean_std([report.target_mean(protocol, method, s) for s in seeds]))
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def _fig2(report: EvalReport) -> str:
    methods = _methods(report, "MM")
    if not methods:
        raise MissingCoverageError("fig2 needs MM-protocol results")
    lines = ["\t".join(["qtype"] + methods + ["chance"])]
    for qtype in QTYPES:
        row = [qtype]
        for method in methods:
            seeds = _require_seeds(report, "MM", method)
            targets = report.target_languages("MM", method)
            row.append(_mean_std([report.qtype_accuracy("MM", method, qtype, s, targets) for s in seeds]))
        chance = report.chance.get(qtype)
        row.append("-" if chance is None else f"{chance:.4f}")
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


# -- trend checks -----------------------------------------------------------------


@dataclass
class TrendResult:
    hypothesis: str
    status: str  # pass | flag | tie | not-evaluated
    detail: str
    seeds: list[int]
    values: dict

    def to_dict(self) -> dict:
        return {
            "hypothesis": self.hypothesis,
            "status": self.status,
            "detail": self.detail,
            "seeds": self.seeds,
            "values": self.values,
        }


def _arm_values(report: EvalReport, method: str, qtype: str | None = None) -> dict[int, float]:
    seeds = report.seeds("MM", method)
    out = {}
    for s in seeds:
        if qtype is None:
            out[s] = report.target_mean("MM", method, s)
        else:
            targets = report.target_languages("MM", method)
            out[s] = report.qtype_accuracy("MM", method, qtype, s, targets)
    return out


def _compare_arms(
    report: EvalReport,
    hypothesis: str,
    better: str,
    worse: str,
    min_seeds: int,
    qtype: str | None = None,
) -> TrendResult:
    methods = _methods(report, "MM")
    if better not in methods or worse not in methods:
        return TrendResult(hypothesis, "not-evaluated", f"missing arm(s): {better!r} vs {worse!r}", [], {})
    hi = _arm_values(report, better, qtype)
    lo = _arm_values(report, worse, qtype)
    n = min(len(hi), len(lo))
    if n < min_seeds:
        raise InsufficientSeedsError(f"{hypothesis}: {n} seeds < required {min_seeds}")
    mean_hi = float(np.mean(list(hi.values())))
    mean_lo = float(np.mean(list(lo.values())))
    if mean_hi > mean_lo:
        status = "pass"
    elif mean_hi == mean_lo:
        status = "tie"
    else:
        status = "flag"
    detail = f"{better}={mean_hi:.4f} vs {worse}={mean_lo:.4f} on target-language mean" + (
        f" ({qtype})" if qtype else ""
    )
    values = {
        better: {"per_seed": {str(k): v for k, v in sorted(hi.items())}, "mean": mean_hi},
        worse: {"per_seed": {str(k): v for k, v in sorted(lo.items())}, "mean": mean_lo},
    }
    return TrendResult(hypothesis, status, detail, sorted(set(hi) & set(lo)), values)


def trend_check(report: EvalReport, min_seeds: int = 5) -> list[TrendResult]:
    """Directional hypotheses over the reference battery; report-only outcomes.

    Arms are matched method labels differing in exactly one axis:
      - self-bootstrapping beats standard fine-tuning on target-language mean
      - the deep head beats the linear head for the baseline strategy
      - question-type conditioning improves choose-type accuracy
    """
    results = []
    methods = _methods(report, "MM")
    sb_pairs = []
    for m in methods:
        try:
            strategy, head, q = split_method_label(m)
        except ValueError:
            continue
        if strategy == "sb":
            counterpart = method_label("standard", head, q)
            if counterpart in methods:
                sb_pairs.append((m, counterpart))
    if sb_pairs:
        for hi, lo in sb_pairs:
            results.append(_compare_arms(report, "sb_beats_standard", hi, lo, min_seeds))
    else:
        results.append(TrendResult("sb_beats_standard", "not-evaluated", "missing arm(s)", [], {}))

    deep_pairs = []
    for m in methods:
        try:
            strategy, head, q = split_method_label(m)
        except ValueError:
            continue
        if strategy == "standard" and head == "deep":
            counterpart = method_label("standard", "linear", q)
            if counterpart in methods:
                deep_pairs.append((m, counterpart))
    if deep_pairs:
        for hi, lo in deep_pairs:
            results.append(_compare_arms(report, "deep_beats_linear", hi, lo, min_seeds))
    else:
        results.append(TrendResult("deep_beats_linear", "not-evaluated", "missing arm(s)", [], {}))

    q_pairs = []
    for m in methods:
        try:
            strategy, head, q = split_method_label(m)
        except ValueError:
            continue
        if q:
            counterpart = method_label(strategy, head, False)
            if counterpart in methods:
                q_pairs.append((m, counterpart))
    if q_pairs:
        for hi, lo in q_pairs:
            results.append(_compare_arms(report, "qtype_token_helps_choose", hi, lo, min_seeds, qtype="choose"))
    else:
        results.append(TrendResult("qtype_token_helps_choose", "not-evaluated", "missing arm(s)", [], {}))
    return results


def trends_to_text(results: list[TrendResult]) -> str:
    lines = []
    for r in results:
        lines.append(f"[{r.status.upper()}] {r.hypothesis}: {r.detail} (seeds: {r.seeds})")
    return "\n".join(lines) + "\n"


def trends_to_json(results: list[TrendResult]) -> str:
    return json.dumps([r.to_dict() for r in results], sort_keys=True, indent=1) + "\n"
