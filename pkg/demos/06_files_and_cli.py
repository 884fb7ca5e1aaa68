"""
Files on disk and the command line
==================================

Datasets travel as IDX files (the MNIST container), models as NPMK
checkpoints. The ``npmerge`` command strings the steps together; here it is
driven from Python so the demo is self-contained.
"""

import json
import tempfile
from pathlib import Path

import yaml

from npmerge import load_model
from npmerge.cli import main

work = Path(tempfile.mkdtemp())
config = {
    "task": {"source": "blobs", "num_classes": 4, "per_class": 100, "dim": 8, "spread": 0.8,
             "clusters_per_class": 2, "split": {"kind": "dirichlet", "alphas": [0.5, 0.5]}},
    "architecture": {"layer_widths": [8, 32, 32, 4], "batchnorm": [True, True]},
    "seeds": [0],
}
(work / "exp.yaml").write_text(yaml.safe_dump(config))

# One model per split part, plus the train/test sets as IDX pairs.
main(["train", str(work / "exp.yaml"), "--out", str(work / "models")])
print(sorted(p.name for p in (work / "models").iterdir()))

# Align, then learn coefficients on 10 examples per class.
main(["merge", str(work / "models/model_s0_p0.npmk"), str(work / "models/model_s0_p1.npmk"),
      "--method", "np", "--budget", "10", "--opt-data", str(work / "models/train"),
      "--eval-data", str(work / "models/test"), "--out", str(work / "merge")])
report = json.loads((work / "merge/report.json").read_text())
print("merged accuracy", report["acc"], "config hash", report["config_hash"])

merged = load_model(work / "merge/merged.npmk")
print("merged architecture", merged.spec.layer_widths)
main(["report", str(work)])
print((work / "summary.csv").read_text())
