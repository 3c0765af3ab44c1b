"""Run the whole CLI pipeline into a directory."""

from pathlib import Path

from wildood.cli import run

SMALL_GEN = ["--per-class", "60,20,20", "--ood-per-cluster", "6,14"]
SMALL_TRAIN = ["--epochs", "5", "--hidden", "32", "--proj-dim", "8"]


def run_pipeline(workdir, seed=0, gen_args=SMALL_GEN, train_args=SMALL_TRAIN):
    """gen -> train-head -> fit -> score -> eval -> report; returns the directory."""
    d = Path(workdir)
    d.mkdir(parents=True, exist_ok=True)
    s = ["--seed", str(seed)]
    steps = [
        ["gen", *s, *gen_args, "--out", d / "bench"],
        ["train-head", *s, "--in", d / "bench", *train_args, "--out-params", d / "heads.json"],
        ["fit", "--in", d / "bench", "--split", "val", "--space", "raw", "--out", d / "protos.json"],
        ["fit", "--in", d / "bench", "--kind", "index", "--space", "raw", "--out", d / "raw_index.json"],
        [
            "fit", "--in", d / "bench", "--kind", "index", "--space", "projected",
            "--head-params", d / "heads.json", "--out", d / "proj_index.json",
        ],
    ]
    artifacts = [
        "--protos", d / "protos.json", "--index", d / "raw_index.json",
        "--index", d / "proj_index.json", "--head-params", d / "heads.json",
    ]
    for split, name in (("test", "scores.csv"), ("val", "val_scores.csv")):
        steps.append(["score", "--in", d / "bench", "--method", "all", *artifacts, "--split", split, "--out", d / name])
    steps += [
        [
            "eval", "--scores", d / "scores.csv", "--table", d / "bench",
            "--threshold-scores", d / "val_scores.csv", "--out", d / "summary.json",
        ],
        ["report", d / "summary.json", "--out", d / "report.md", "--csv", d / "report.csv"],
    ]
    for argv in steps:
        code = run([str(a) for a in argv])
        if code != 0:
            raise RuntimeError(f"step {argv[0]} exited with {code}")
    return d
