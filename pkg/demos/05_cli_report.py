"""Drive the command line: run an experiment on a boolean KPI and render the HTML report.

The same steps from a shell::

    xppa run --config run.json
    xppa explain-case e01200 --config run.json
    xppa report --config run.json --sort median --top 10
"""

import json
import tempfile
from pathlib import Path

from xppa import synthetic, write_csv
from xppa.cli import main

work = Path(tempfile.mkdtemp())
write_csv(synthetic.escalation_log(800, seed=5), work / "log.csv")
(work / "run.json").write_text(json.dumps({
    "log": "log.csv",
    "kpi": {"kind": "activity_occurrence", "target": "Escalate"},
    "output_dir": "out",
    "search": {"grid": {"n_trees": [50, 100], "max_depth": [3]}},
}, indent=2))
config = str(work / "run.json")

main(["run", "--config", config])
cases = json.loads((work / "out" / "cases.json").read_text())
main(["explain-case", cases[0]["case_id"], "--config", config])
main(["report", "--config", config, "--top", "10"])
print("\nopen", work / "out" / "report" / "index.html")
