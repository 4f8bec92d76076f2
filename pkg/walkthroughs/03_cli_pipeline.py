"""The command line end to end: generate a stream, run two learners, report.

Equivalent shell session:

    mntdp gen-stream Spl desk 0 --out runs/spl
    mntdp run --learner finetune --manifest runs/spl/manifest.json --out runs/ft
    mntdp run --learner mntdp_d --manifest runs/spl/manifest.json --out runs/md
    mntdp report runs/ft runs/md --out runs/report

Short budgets keep this to a few seconds.

    python walkthroughs/03_cli_pipeline.py [workdir]
"""

import sys
from pathlib import Path

from mntdp.cli import main

work = Path(sys.argv[1] if len(sys.argv) > 1 else "walkthrough_runs")
budget = '{"max_iterations": 300, "patience": 100}'
grid = '{"learning_rates": [0.01], "weight_decays": [0.0]}'

assert main(["gen-stream", "Spl", "desk", "0", "--out", str(work / "spl")]) == 0
for learner in ("finetune", "mntdp_d"):
    code = main(["run", "--learner", learner, "--manifest", str(work / "spl" / "manifest.json"),
                 "--grid", grid, "--budget", budget, "--out", str(work / learner)])
    assert code == 0, code
assert main(["report", str(work / "finetune"), str(work / "mntdp_d"), "--out", str(work / "report")]) == 0
print((work / "report" / "results.csv").read_text())

# a bad config is rejected before any training, with every problem listed
print("exit code for a bad run:", main(["run", "--learner", "nope", "--kind", "Sx"]))
