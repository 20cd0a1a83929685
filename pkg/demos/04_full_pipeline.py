"""End-to-end miniature run: generate a dataset, train briefly, predict the
test split, and print the three-level evaluation report.

Run:  python demos/04_full_pipeline.py [work_dir]

This uses a deliberately tiny profile (a few minutes on CPU). For a run that
actually reaches high lesion recall, use the desk profile and the command
line: plan generate / plan train / plan predict / plan evaluate.
"""

import sys
from pathlib import Path

from planseg.cli import main

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out/pipeline")
work.mkdir(parents=True, exist_ok=True)
config = work / "demo.toml"
config.write_text(
    """
[data]
n_train = 4
n_val = 1
n_test = 2
cohort_mix = [0.25, 0.0, 0.75]

[model]
base_width = 8

[train]
learning_rate = 3e-3
epochs_stage1 = 4
epochs_stage2 = 6
patch_shape = [64, 64, 16]
val_every = 2
"""
)

steps = [
    ["generate", "--config", str(config), "--out", str(work / "data"), "--seed", "1",
     "--force"],
    ["train", "--config", str(config), "--data", str(work / "data"),
     "--run", str(work / "run")],
    ["predict", "--checkpoint", str(work / "run/checkpoints/best.pt"),
     "--data", str(work / "data"), "--out", str(work / "pred"), "--overwrite"],
    ["evaluate", "--pred", str(work / "pred"), "--data", str(work / "data"),
     "--report", str(work / "report"), "--config", str(config)],
]
for argv in steps:
    print(f"\n$ plan {' '.join(argv)}")
    code = main(argv)
    if code != 0:
        sys.exit(code)

print("\n--- lesion_table.csv ---")
print((work / "report/lesion_table.csv").read_text())
print("--- patient_table.csv ---")
print((work / "report/patient_table.csv").read_text())
