import math

import pytest

from wildood.metrics import MetricsSummary
from wildood.report import fmt3, render_ood_table, render_per_class_table, render_report, top3_mask


def summary(method, auroc=0.5, aupr_in=0.5, aupr_out=0.5, autc=0.5, acc=None):
    return MetricsSummary(
        method=method, auroc=auroc, aupr_in=aupr_in, aupr_out=aupr_out, autc=autc,
        youden_threshold=0.5, youden_j=0.1, per_class_accuracy=acc or {"a": 0.5, "b": math.nan},
        ood_accuracy=0.25, n_id=10, n_ood=5,
    )


@pytest.mark.parametrize(
    "value,text", [(0.7345, ".734"), (0.7346, ".735"), (0.7355, ".736"), (1.0, "1.000"), (0.0004, ".000")]
)
def test_three_decimal_format(value, text):
    assert fmt3(value) == text


def test_nonfinite_prints_dash():
    assert fmt3(math.nan) == "-"


def test_top3_bolds_ties():
    assert top3_mask([0.9, 0.8, 0.8, 0.8, 0.1], True) == [True, True, True, True, False]
    assert top3_mask([0.9, 0.8, 0.7, 0.6], True) == [True, True, True, False]
    assert top3_mask([0.1, 0.2, 0.3, 0.4], False) == [True, True, True, False]


def test_top3_uses_rounded_values():
    # .7341 and .7344 print identically, so they share a rank
    assert top3_mask([0.9, 0.8, 0.7341, 0.7344], True) == [True, True, True, True]


def test_two_methods_two_rows():
    md, rows = render_ood_table({"s": {"KNN": summary("KNN"), "MaxSoftmax": summary("MaxSoftmax")}})
    lines = md.strip().splitlines()
    assert len(lines) == 4
    assert lines[0].count("|") == 6  # method + 4 metrics
    # registry order: MaxSoftmax before KNN
    assert lines[2].startswith("| MaxSoftmax") and lines[3].startswith("| KNN")
    assert rows[1][0] == "MaxSoftmax"


def test_autc_lower_is_better_bolding():
    group = {m: summary(m, autc=v) for m, v in zip(["MaxSoftmax", "MaxLogit", "KNN", "Entropy"], [0.4, 0.3, 0.2, 0.1])}
    md, _ = render_ood_table({"s": group})
    assert "| MaxSoftmax | " in md and "| .400 |" in md
    assert "**.100**" in md and "**.400**" not in md


def test_per_class_table_has_ood_column():
    md, _ = render_per_class_table({"s": {"KNN": summary("KNN")}})
    header = md.splitlines()[0]
    assert "| a |" in header and "OOD" in header
    assert " - " in md.splitlines()[2]  # NaN class accuracy


def test_multiple_groups_suffix_headers():
    md, csv_text = render_report({"x": {"KNN": summary("KNN")}, "y": {"KNN": summary("KNN")}})
    assert "AUROC ↑ (x)" in md and "AUROC ↑ (y)" in md
    assert csv_text.splitlines()[1].startswith("KNN,0.500,0.500")
