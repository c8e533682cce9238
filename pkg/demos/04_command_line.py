"""The same pipeline through the ``odeflow`` command line, in a temporary directory.

Equivalent shell session::

    odeflow gen-data --n 200 --out data
    odeflow train-teacher --config run.json
    odeflow distill --config run.json
    odeflow sweep --config run.json --checkpoint run/student.odev
"""

# %%
import json
import tempfile
from pathlib import Path

from odeflow.cli import main

work = Path(tempfile.mkdtemp(prefix="odeflow-demo-"))
config = {
    "out_dir": "run",
    "teacher_checkpoint": "run/teacher.odev",
    "data": {"train": "data/train.bin", "eval": "data/eval.bin", "num_classes": 4},
    "model": {"dim": 16, "heads": 2, "depth": 2, "N": 12},
    "teacher": {"epochs": 3},
    "distill": {"epochs": 3},
}
(work / "run.json").write_text(json.dumps(config, indent=2))
cfg = str(work / "run.json")

# %%
assert main(["gen-data", "--n", "200", "--out", str(work / "data")]) == 0
assert main(["train-teacher", "--config", cfg]) == 0
assert main(["distill", "--config", cfg]) == 0
student = str(work / "run" / "student.odev")
assert main(["sweep", "--config", cfg, "--checkpoint", student, "--steps", "8,12,16"]) == 0
assert main(["analyze", "--config", cfg, "--checkpoint", student, "--samples", "20"]) == 0
assert main(["export-attn", "--config", cfg, "--checkpoint", student, "--image", "0"]) == 0

# %%
print((work / "run" / "sweep.csv").read_text())
print((work / "run" / "stability.json").read_text())
print(sorted(p.name for p in (work / "run").iterdir()))
